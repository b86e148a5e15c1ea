//! Direct 3D convolution (cross-correlation) with stride and dilation.
//!
//! Layout: inputs `[Ci, H, W, D]`, weights `[Co, Ci, K, K, K]`, outputs
//! `[Co, OH, OW, OD]`. Kernels are cubic (K in {1, 3} here). The inner depth
//! loop runs over contiguous rows so the stride-1 path vectorizes.

use crate::tensor::Tensor;
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvCfg {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvCfg {
    /// Stride-1, dilation-d convolution padded so the spatial size is kept.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvCfg {
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    /// Stride-2 halving convolution (kernel 3, padding 1).
    pub fn halving() -> Self {
        ConvCfg {
            stride: 2,
            dilation: 1,
            padding: 1,
        }
    }
}

pub fn conv_out_dim(n: usize, kernel: usize, cfg: &ConvCfg) -> usize {
    let span = cfg.dilation * (kernel - 1) + 1;
    assert!(
        n + 2 * cfg.padding >= span,
        "input dim {} too small for kernel span {}",
        n,
        span
    );
    (n + 2 * cfg.padding - span) / cfg.stride + 1
}

pub fn conv_out_shape(in_shape: &[usize], w_shape: &[usize], cfg: &ConvCfg) -> Vec<usize> {
    let k = w_shape[2];
    vec![
        w_shape[0],
        conv_out_dim(in_shape[1], k, cfg),
        conv_out_dim(in_shape[2], k, cfg),
        conv_out_dim(in_shape[3], k, cfg),
    ]
}

/// Output index range `[lo, hi)` for one kernel tap along one axis.
///
/// An output index `o` is valid when `0 <= o*stride + off < n_in`, with
/// `off = k*dilation - padding`.
fn tap_range(n_in: usize, n_out: usize, off: i64, stride: usize) -> (usize, usize) {
    let s = stride as i64;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi_inclusive = (n_in as i64 - 1 - off).div_euclid(s);
    if hi_inclusive < lo {
        return (0, 0);
    }
    let lo = lo as usize;
    let hi = (hi_inclusive as usize + 1).min(n_out);
    if lo >= hi {
        (0, 0)
    } else {
        (lo, hi)
    }
}

pub fn conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor, cfg: &ConvCfg) -> Tensor {
    let (ci, h, wd, d) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
    );
    let (co, wci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(ci, wci, "conv3d channel mismatch");
    assert_eq!(b.shape(), &[co], "conv3d bias shape");
    let out_shape = conv_out_shape(x.shape(), w.shape(), cfg);
    let (oh, ow, od) = (out_shape[1], out_shape[2], out_shape[3]);
    let mut out = Tensor::zeros(&out_shape);

    let xr = x.data();
    let wr = w.data();
    let br = b.data();
    let s = cfg.stride;
    let dil = cfg.dilation as i64;
    let pad = cfg.padding as i64;

    out.data_mut()
        .par_chunks_mut(oh * ow * od)
        .enumerate()
        .for_each(|(c_out, out_c)| {
            out_c.fill(br[c_out]);
            for c_in in 0..ci {
                let x_c = &xr[c_in * h * wd * d..(c_in + 1) * h * wd * d];
                for kx in 0..k {
                    let offx = kx as i64 * dil - pad;
                    let (xlo, xhi) = tap_range(h, oh, offx, s);
                    for ky in 0..k {
                        let offy = ky as i64 * dil - pad;
                        let (ylo, yhi) = tap_range(wd, ow, offy, s);
                        for kz in 0..k {
                            let offz = kz as i64 * dil - pad;
                            let (zlo, zhi) = tap_range(d, od, offz, s);
                            if xlo >= xhi || ylo >= yhi || zlo >= zhi {
                                continue;
                            }
                            let wv = wr[(((c_out * ci + c_in) * k + kx) * k + ky) * k + kz];
                            for ox in xlo..xhi {
                                let ix = (ox * s) as i64 + offx;
                                let x_row0 = (ix as usize) * wd * d;
                                let o_row0 = ox * ow * od;
                                for oy in ylo..yhi {
                                    let iy = (oy * s) as i64 + offy;
                                    let x_base = x_row0 + (iy as usize) * d;
                                    let o_base = o_row0 + oy * od;
                                    if s == 1 {
                                        let izlo = (zlo as i64 + offz) as usize;
                                        let src = &x_c[x_base + izlo..x_base + izlo + (zhi - zlo)];
                                        let dst = &mut out_c[o_base + zlo..o_base + zhi];
                                        for (o, xv) in dst.iter_mut().zip(src.iter()) {
                                            *o += wv * xv;
                                        }
                                    } else {
                                        for oz in zlo..zhi {
                                            let iz = ((oz * s) as i64 + offz) as usize;
                                            out_c[o_base + oz] += wv * x_c[x_base + iz];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

pub fn conv3d_backward_input(
    g_out: &Tensor,
    w: &Tensor,
    x_shape: &[usize],
    cfg: &ConvCfg,
) -> Tensor {
    let (ci, h, wd, d) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow, od) = (g_out.shape()[1], g_out.shape()[2], g_out.shape()[3]);
    let mut g_in = Tensor::zeros(x_shape);

    let gr = g_out.data();
    let wr = w.data();
    let s = cfg.stride;
    let dil = cfg.dilation as i64;
    let pad = cfg.padding as i64;

    g_in.data_mut()
        .par_chunks_mut(h * wd * d)
        .enumerate()
        .for_each(|(c_in, gin_c)| {
            for c_out in 0..co {
                let g_c = &gr[c_out * oh * ow * od..(c_out + 1) * oh * ow * od];
                for kx in 0..k {
                    let offx = kx as i64 * dil - pad;
                    let (xlo, xhi) = tap_range(h, oh, offx, s);
                    for ky in 0..k {
                        let offy = ky as i64 * dil - pad;
                        let (ylo, yhi) = tap_range(wd, ow, offy, s);
                        for kz in 0..k {
                            let offz = kz as i64 * dil - pad;
                            let (zlo, zhi) = tap_range(d, od, offz, s);
                            if xlo >= xhi || ylo >= yhi || zlo >= zhi {
                                continue;
                            }
                            let wv = wr[(((c_out * ci + c_in) * k + kx) * k + ky) * k + kz];
                            for ox in xlo..xhi {
                                let ix = (ox * s) as i64 + offx;
                                let i_row0 = (ix as usize) * wd * d;
                                let o_row0 = ox * ow * od;
                                for oy in ylo..yhi {
                                    let iy = (oy * s) as i64 + offy;
                                    let i_base = i_row0 + (iy as usize) * d;
                                    let o_base = o_row0 + oy * od;
                                    if s == 1 {
                                        let izlo = (zlo as i64 + offz) as usize;
                                        let dst =
                                            &mut gin_c[i_base + izlo..i_base + izlo + (zhi - zlo)];
                                        let src = &g_c[o_base + zlo..o_base + zhi];
                                        for (gi, go) in dst.iter_mut().zip(src.iter()) {
                                            *gi += wv * go;
                                        }
                                    } else {
                                        for oz in zlo..zhi {
                                            let iz = ((oz * s) as i64 + offz) as usize;
                                            gin_c[i_base + iz] += wv * g_c[o_base + oz];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    g_in
}

pub fn conv3d_backward_weight(
    g_out: &Tensor,
    x: &Tensor,
    w_shape: &[usize],
    cfg: &ConvCfg,
) -> (Tensor, Tensor) {
    let (ci, h, wd, d) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
    );
    let (co, k) = (w_shape[0], w_shape[2]);
    let (oh, ow, od) = (g_out.shape()[1], g_out.shape()[2], g_out.shape()[3]);
    let mut g_w = Tensor::zeros(w_shape);
    let mut g_b = Tensor::zeros(&[co]);

    let gr = g_out.data();
    let xr = x.data();
    let s = cfg.stride;
    let dil = cfg.dilation as i64;
    let pad = cfg.padding as i64;

    let gb: Vec<f64> = (0..co)
        .map(|c_out| gr[c_out * oh * ow * od..(c_out + 1) * oh * ow * od].iter().sum())
        .collect();
    g_b.data_mut().copy_from_slice(&gb);

    g_w.data_mut()
        .par_chunks_mut(ci * k * k * k)
        .enumerate()
        .for_each(|(c_out, gw_c)| {
            let g_c = &gr[c_out * oh * ow * od..(c_out + 1) * oh * ow * od];
            for c_in in 0..ci {
                let x_c = &xr[c_in * h * wd * d..(c_in + 1) * h * wd * d];
                for kx in 0..k {
                    let offx = kx as i64 * dil - pad;
                    let (xlo, xhi) = tap_range(h, oh, offx, s);
                    for ky in 0..k {
                        let offy = ky as i64 * dil - pad;
                        let (ylo, yhi) = tap_range(wd, ow, offy, s);
                        for kz in 0..k {
                            let offz = kz as i64 * dil - pad;
                            let (zlo, zhi) = tap_range(d, od, offz, s);
                            if xlo >= xhi || ylo >= yhi || zlo >= zhi {
                                continue;
                            }
                            let mut acc = 0.0;
                            for ox in xlo..xhi {
                                let ix = (ox * s) as i64 + offx;
                                let x_row0 = (ix as usize) * wd * d;
                                let o_row0 = ox * ow * od;
                                for oy in ylo..yhi {
                                    let iy = (oy * s) as i64 + offy;
                                    let x_base = x_row0 + (iy as usize) * d;
                                    let o_base = o_row0 + oy * od;
                                    if s == 1 {
                                        let izlo = (zlo as i64 + offz) as usize;
                                        let xs = &x_c[x_base + izlo..x_base + izlo + (zhi - zlo)];
                                        let gs = &g_c[o_base + zlo..o_base + zhi];
                                        for (xv, gv) in xs.iter().zip(gs.iter()) {
                                            acc += xv * gv;
                                        }
                                    } else {
                                        for oz in zlo..zhi {
                                            let iz = ((oz * s) as i64 + offz) as usize;
                                            acc += x_c[x_base + iz] * g_c[o_base + oz];
                                        }
                                    }
                                }
                            }
                            gw_c[((c_in * k + kx) * k + ky) * k + kz] = acc;
                        }
                    }
                }
            }
        });
    (g_w, g_b)
}
