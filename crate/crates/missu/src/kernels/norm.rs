//! Channel-wise (instance) and row-wise (layer) normalization.

use crate::tensor::Tensor;

/// Instance norm over the spatial voxels of each channel of a `[C,H,W,D]`
/// tensor, with per-channel affine scale/offset. Biased variance.
pub fn instance_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let c = x.shape()[0];
    let s = x.len() / c;
    assert_eq!(gamma.shape(), &[c]);
    assert_eq!(beta.shape(), &[c]);
    let mut out = Tensor::zeros(x.shape());
    for ch in 0..c {
        let xs = &x.data()[ch * s..(ch + 1) * s];
        let (mean, inv) = moments(xs, eps);
        let g = gamma.data()[ch];
        let b = beta.data()[ch];
        for (o, xv) in out.data_mut()[ch * s..(ch + 1) * s].iter_mut().zip(xs) {
            *o = (xv - mean) * inv * g + b;
        }
    }
    out
}

/// Gradients w.r.t. (x, gamma, beta). Statistics are recomputed from `x`.
pub fn instance_norm_backward(
    g_out: &Tensor,
    x: &Tensor,
    gamma: &Tensor,
    eps: f64,
) -> (Tensor, Tensor, Tensor) {
    let c = x.shape()[0];
    let s = x.len() / c;
    let mut g_x = Tensor::zeros(x.shape());
    let mut g_gamma = Tensor::zeros(&[c]);
    let mut g_beta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let xs = &x.data()[ch * s..(ch + 1) * s];
        let gs = &g_out.data()[ch * s..(ch + 1) * s];
        let (mean, inv) = moments(xs, eps);
        let g = gamma.data()[ch];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for (gv, xv) in gs.iter().zip(xs) {
            let xhat = (xv - mean) * inv;
            sum_g += gv;
            sum_gx += gv * xhat;
        }
        g_beta.data_mut()[ch] = sum_g;
        g_gamma.data_mut()[ch] = sum_gx;
        let n = s as f64;
        for ((o, gv), xv) in g_x.data_mut()[ch * s..(ch + 1) * s]
            .iter_mut()
            .zip(gs)
            .zip(xs)
        {
            let xhat = (xv - mean) * inv;
            *o = g * inv * (gv - sum_g / n - xhat * sum_gx / n);
        }
    }
    (g_x, g_gamma, g_beta)
}

/// Layer norm over the last axis of a `[M, d]` matrix with affine params.
pub fn layer_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let d = *x.shape().last().unwrap();
    assert_eq!(gamma.shape(), &[d]);
    assert_eq!(beta.shape(), &[d]);
    let rows = x.len() / d;
    let mut out = Tensor::zeros(x.shape());
    for r in 0..rows {
        let xs = &x.data()[r * d..(r + 1) * d];
        let (mean, inv) = moments(xs, eps);
        for j in 0..d {
            out.data_mut()[r * d + j] =
                (xs[j] - mean) * inv * gamma.data()[j] + beta.data()[j];
        }
    }
    out
}

pub fn layer_norm_backward(
    g_out: &Tensor,
    x: &Tensor,
    gamma: &Tensor,
    eps: f64,
) -> (Tensor, Tensor, Tensor) {
    let d = *x.shape().last().unwrap();
    let rows = x.len() / d;
    let mut g_x = Tensor::zeros(x.shape());
    let mut g_gamma = Tensor::zeros(&[d]);
    let mut g_beta = Tensor::zeros(&[d]);
    for r in 0..rows {
        let xs = &x.data()[r * d..(r + 1) * d];
        let gs = &g_out.data()[r * d..(r + 1) * d];
        let (mean, inv) = moments(xs, eps);
        let mut sum_gy = 0.0;
        let mut sum_gy_xhat = 0.0;
        for j in 0..d {
            let xhat = (xs[j] - mean) * inv;
            let gy = gs[j] * gamma.data()[j];
            sum_gy += gy;
            sum_gy_xhat += gy * xhat;
            g_gamma.data_mut()[j] += gs[j] * xhat;
            g_beta.data_mut()[j] += gs[j];
        }
        let n = d as f64;
        for j in 0..d {
            let xhat = (xs[j] - mean) * inv;
            let gy = gs[j] * gamma.data()[j];
            g_x.data_mut()[r * d + j] = inv * (gy - sum_gy / n - xhat * sum_gy_xhat / n);
        }
    }
    (g_x, g_gamma, g_beta)
}

fn moments(xs: &[f64], eps: f64) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}
