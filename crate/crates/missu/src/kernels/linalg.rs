//! Matrix products, batched attention products, softmax, and head reshapes.

use crate::tensor::Tensor;

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, kb, "matmul inner dim mismatch");
    let mut out = Tensor::zeros(&[m, n]);
    let (ar, br, or) = (a.data(), b.data(), out.data_mut());
    for i in 0..m {
        let o_row = &mut or[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = ar[i * k + kk];
            let b_row = &br[kk * n..(kk + 1) * n];
            for (o, bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Gradients of `matmul`: `dA = dC B^T`, `dB = A^T dC`.
pub fn matmul_backward(g: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut ga = Tensor::zeros(&[m, k]);
    let mut gb = Tensor::zeros(&[k, n]);
    let (gr, ar, br) = (g.data(), a.data(), b.data());
    {
        let gar = ga.data_mut();
        for i in 0..m {
            for kk in 0..k {
                let mut acc = 0.0;
                let g_row = &gr[i * n..(i + 1) * n];
                let b_row = &br[kk * n..(kk + 1) * n];
                for (gv, bv) in g_row.iter().zip(b_row) {
                    acc += gv * bv;
                }
                gar[i * k + kk] = acc;
            }
        }
    }
    {
        let gbr = gb.data_mut();
        for kk in 0..k {
            let gb_row = &mut gbr[kk * n..(kk + 1) * n];
            for i in 0..m {
                let av = ar[i * k + kk];
                let g_row = &gr[i * n..(i + 1) * n];
                for (o, gv) in gb_row.iter_mut().zip(g_row) {
                    *o += av * gv;
                }
            }
        }
    }
    (ga, gb)
}

/// `[m,n] + [n]` broadcast over rows.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Tensor {
    let n = *x.shape().last().unwrap();
    assert_eq!(bias.shape(), &[n]);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        for (o, b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    out
}

/// `[h,m,k] x [h,n,k]^T -> [h,m,n]` (attention scores).
pub fn bmm_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (h, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = b.shape()[1];
    assert_eq!(b.shape(), &[h, n, k]);
    let mut out = Tensor::zeros(&[h, m, n]);
    for hh in 0..h {
        let ar = &a.data()[hh * m * k..(hh + 1) * m * k];
        let br = &b.data()[hh * n * k..(hh + 1) * n * k];
        let or = &mut out.data_mut()[hh * m * n..(hh + 1) * m * n];
        for i in 0..m {
            let a_row = &ar[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &br[j * k..(j + 1) * k];
                or[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            }
        }
    }
    out
}

pub fn bmm_nt_backward(g: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let (h, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = b.shape()[1];
    let mut ga = Tensor::zeros(&[h, m, k]);
    let mut gb = Tensor::zeros(&[h, n, k]);
    for hh in 0..h {
        let gr = &g.data()[hh * m * n..(hh + 1) * m * n];
        let ar = &a.data()[hh * m * k..(hh + 1) * m * k];
        let br = &b.data()[hh * n * k..(hh + 1) * n * k];
        let gar = &mut ga.data_mut()[hh * m * k..(hh + 1) * m * k];
        for i in 0..m {
            for j in 0..n {
                let gv = gr[i * n + j];
                let b_row = &br[j * k..(j + 1) * k];
                let ga_row = &mut gar[i * k..(i + 1) * k];
                for (o, bv) in ga_row.iter_mut().zip(b_row) {
                    *o += gv * bv;
                }
            }
        }
        let gbr = &mut gb.data_mut()[hh * n * k..(hh + 1) * n * k];
        for j in 0..n {
            for i in 0..m {
                let gv = gr[i * n + j];
                let a_row = &ar[i * k..(i + 1) * k];
                let gb_row = &mut gbr[j * k..(j + 1) * k];
                for (o, av) in gb_row.iter_mut().zip(a_row) {
                    *o += gv * av;
                }
            }
        }
    }
    (ga, gb)
}

/// `[h,m,n] x [h,n,k] -> [h,m,k]` (attention context).
pub fn bmm_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (h, m, n) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let k = b.shape()[2];
    assert_eq!(b.shape(), &[h, n, k]);
    let mut out = Tensor::zeros(&[h, m, k]);
    for hh in 0..h {
        let ar = &a.data()[hh * m * n..(hh + 1) * m * n];
        let br = &b.data()[hh * n * k..(hh + 1) * n * k];
        let or = &mut out.data_mut()[hh * m * k..(hh + 1) * m * k];
        for i in 0..m {
            let o_row = &mut or[i * k..(i + 1) * k];
            for j in 0..n {
                let av = ar[i * n + j];
                let b_row = &br[j * k..(j + 1) * k];
                for (o, bv) in o_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

pub fn bmm_nn_backward(g: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let (h, m, n) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let k = b.shape()[2];
    let mut ga = Tensor::zeros(&[h, m, n]);
    let mut gb = Tensor::zeros(&[h, n, k]);
    for hh in 0..h {
        let gr = &g.data()[hh * m * k..(hh + 1) * m * k];
        let ar = &a.data()[hh * m * n..(hh + 1) * m * n];
        let br = &b.data()[hh * n * k..(hh + 1) * n * k];
        let gar = &mut ga.data_mut()[hh * m * n..(hh + 1) * m * n];
        for i in 0..m {
            let g_row = &gr[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &br[j * k..(j + 1) * k];
                gar[i * n + j] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            }
        }
        let gbr = &mut gb.data_mut()[hh * n * k..(hh + 1) * n * k];
        for j in 0..n {
            let gb_row = &mut gbr[j * k..(j + 1) * k];
            for i in 0..m {
                let av = ar[i * n + j];
                let g_row = &gr[i * k..(i + 1) * k];
                for (o, gv) in gb_row.iter_mut().zip(g_row) {
                    *o += av * gv;
                }
            }
        }
    }
    (ga, gb)
}

/// Row-wise softmax over the last axis, numerically stabilized.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let n = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Softmax backward from the forward output `y`.
pub fn softmax_last_backward(g: &Tensor, y: &Tensor) -> Tensor {
    let n = *y.shape().last().unwrap();
    let mut out = Tensor::zeros(y.shape());
    for ((o_row, g_row), y_row) in out
        .data_mut()
        .chunks_mut(n)
        .zip(g.data().chunks(n))
        .zip(y.data().chunks(n))
    {
        let dot: f64 = g_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
        for ((o, gv), yv) in o_row.iter_mut().zip(g_row).zip(y_row) {
            *o = yv * (gv - dot);
        }
    }
    out
}

/// `[m, h*dh] -> [h, m, dh]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Tensor {
    let (m, d) = (x.shape()[0], x.shape()[1]);
    assert_eq!(d % heads, 0, "embed dim not divisible by heads");
    let dh = d / heads;
    let mut out = Tensor::zeros(&[heads, m, dh]);
    for h in 0..heads {
        for i in 0..m {
            let src = &x.data()[i * d + h * dh..i * d + (h + 1) * dh];
            out.data_mut()[(h * m + i) * dh..(h * m + i + 1) * dh].copy_from_slice(src);
        }
    }
    out
}

/// `[h, m, dh] -> [m, h*dh]`. Inverse of `split_heads`.
pub fn merge_heads(x: &Tensor) -> Tensor {
    let (heads, m, dh) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = heads * dh;
    let mut out = Tensor::zeros(&[m, d]);
    for h in 0..heads {
        for i in 0..m {
            let src = &x.data()[(h * m + i) * dh..(h * m + i + 1) * dh];
            out.data_mut()[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(src);
        }
    }
    out
}
