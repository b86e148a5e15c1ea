//! Trilinear 2x upsampling and the volume/token layout permutations.

use crate::tensor::Tensor;

/// Per-axis interpolation taps for 2x upsampling.
///
/// Output coordinate `o` samples input coordinate `o/2 - 0.25` (half-pixel
/// centers), clamped at the borders.
fn axis_taps(n_in: usize) -> Vec<(usize, usize, f64)> {
    let n_out = 2 * n_in;
    (0..n_out)
        .map(|o| {
            let src = o as f64 / 2.0 - 0.25;
            let i0f = src.floor();
            let w1 = src - i0f;
            let i0 = (i0f as i64).clamp(0, n_in as i64 - 1) as usize;
            let i1 = ((i0f as i64) + 1).clamp(0, n_in as i64 - 1) as usize;
            (i0, i1, w1)
        })
        .collect()
}

/// `[C,H,W,D] -> [C,2H,2W,2D]` trilinear interpolation.
pub fn upsample2x_forward(x: &Tensor) -> Tensor {
    let (c, h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (th, tw, td) = (axis_taps(h), axis_taps(w), axis_taps(d));
    let (oh, ow, od) = (2 * h, 2 * w, 2 * d);
    let mut out = Tensor::zeros(&[c, oh, ow, od]);
    for ch in 0..c {
        let xs = &x.data()[ch * h * w * d..(ch + 1) * h * w * d];
        let os = &mut out.data_mut()[ch * oh * ow * od..(ch + 1) * oh * ow * od];
        for (ox, &(x0, x1, wx)) in th.iter().enumerate() {
            for (oy, &(y0, y1, wy)) in tw.iter().enumerate() {
                let r00 = (x0 * w + y0) * d;
                let r01 = (x0 * w + y1) * d;
                let r10 = (x1 * w + y0) * d;
                let r11 = (x1 * w + y1) * d;
                let o_base = (ox * ow + oy) * od;
                for (oz, &(z0, z1, wz)) in td.iter().enumerate() {
                    let c00 = xs[r00 + z0] * (1.0 - wz) + xs[r00 + z1] * wz;
                    let c01 = xs[r01 + z0] * (1.0 - wz) + xs[r01 + z1] * wz;
                    let c10 = xs[r10 + z0] * (1.0 - wz) + xs[r10 + z1] * wz;
                    let c11 = xs[r11 + z0] * (1.0 - wz) + xs[r11 + z1] * wz;
                    let c0 = c00 * (1.0 - wy) + c01 * wy;
                    let c1 = c10 * (1.0 - wy) + c11 * wy;
                    os[o_base + oz] = c0 * (1.0 - wx) + c1 * wx;
                }
            }
        }
    }
    out
}

/// Scatter-add transpose of `upsample2x_forward`.
pub fn upsample2x_backward(g_out: &Tensor, in_shape: &[usize]) -> Tensor {
    let (c, h, w, d) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (th, tw, td) = (axis_taps(h), axis_taps(w), axis_taps(d));
    let (oh, ow, od) = (2 * h, 2 * w, 2 * d);
    let mut g_in = Tensor::zeros(in_shape);
    for ch in 0..c {
        let gs = &g_out.data()[ch * oh * ow * od..(ch + 1) * oh * ow * od];
        let gi = &mut g_in.data_mut()[ch * h * w * d..(ch + 1) * h * w * d];
        for (ox, &(x0, x1, wx)) in th.iter().enumerate() {
            for (oy, &(y0, y1, wy)) in tw.iter().enumerate() {
                let o_base = (ox * ow + oy) * od;
                for (oz, &(z0, z1, wz)) in td.iter().enumerate() {
                    let g = gs[o_base + oz];
                    for (xi, fx) in [(x0, 1.0 - wx), (x1, wx)] {
                        for (yi, fy) in [(y0, 1.0 - wy), (y1, wy)] {
                            for (zi, fz) in [(z0, 1.0 - wz), (z1, wz)] {
                                gi[(xi * w + yi) * d + zi] += g * fx * fy * fz;
                            }
                        }
                    }
                }
            }
        }
    }
    g_in
}

/// `[C,H,W,D] -> [M,C]` with `M = H*W*D`; token p is voxel p in row-major
/// order. Exact permutation, inverse of `tokens_to_vol`.
pub fn vol_to_tokens(x: &Tensor) -> Tensor {
    let (c, h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let m = h * w * d;
    let mut out = Tensor::zeros(&[m, c]);
    let xs = x.data();
    let os = out.data_mut();
    for ch in 0..c {
        let base = ch * m;
        for p in 0..m {
            os[p * c + ch] = xs[base + p];
        }
    }
    out
}

/// `[M,C] -> [C,H,W,D]`. Exact permutation, inverse of `vol_to_tokens`.
pub fn tokens_to_vol(x: &Tensor, spatial: (usize, usize, usize)) -> Tensor {
    let (m, c) = (x.shape()[0], x.shape()[1]);
    let (h, w, d) = spatial;
    assert_eq!(m, h * w * d, "token count does not match spatial dims");
    let mut out = Tensor::zeros(&[c, h, w, d]);
    let xs = x.data();
    let os = out.data_mut();
    for ch in 0..c {
        let base = ch * m;
        for p in 0..m {
            os[base + p] = xs[p * c + ch];
        }
    }
    out
}
