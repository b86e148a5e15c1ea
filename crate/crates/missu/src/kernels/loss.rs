//! Activations, the voxel-wise cross-entropy, and attention-map reductions.

use crate::tensor::Tensor;

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub fn relu_backward(g: &Tensor, x: &Tensor) -> Tensor {
    let mut out = g.clone();
    for (o, xv) in out.data_mut().iter_mut().zip(x.data()) {
        if *xv <= 0.0 {
            *o = 0.0;
        }
    }
    out
}

const GELU_C: f64 = 0.797884560802865; // sqrt(2/pi)

/// Tanh-form GELU.
pub fn gelu_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        let x = *v;
        let inner = GELU_C * (x + 0.044715 * x * x * x);
        *v = 0.5 * x * (1.0 + inner.tanh());
    }
    out
}

pub fn gelu_backward(g: &Tensor, x: &Tensor) -> Tensor {
    let mut out = g.clone();
    for (o, &x) in out.data_mut().iter_mut().zip(x.data()) {
        let u = GELU_C * (x + 0.044715 * x * x * x);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
        *o *= d;
    }
    out
}

/// Mean softmax cross-entropy of `[K,H,W,D]` logits against `[H*W*D]`
/// labels. Labels must already be validated `< K`.
pub fn cross_entropy_mean_forward(logits: &Tensor, labels: &[u8]) -> f64 {
    let k = logits.shape()[0];
    let voxels = logits.len() / k;
    assert_eq!(labels.len(), voxels, "label count mismatch");
    let data = logits.data();
    let mut total = 0.0;
    for (v, &y) in labels.iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for c in 0..k {
            max = max.max(data[c * voxels + v]);
        }
        let mut sum = 0.0;
        for c in 0..k {
            sum += (data[c * voxels + v] - max).exp();
        }
        total += max + sum.ln() - data[y as usize * voxels + v];
    }
    total / voxels as f64
}

pub fn cross_entropy_mean_backward(g: f64, logits: &Tensor, labels: &[u8]) -> Tensor {
    let k = logits.shape()[0];
    let voxels = logits.len() / k;
    let data = logits.data();
    let mut out = Tensor::zeros(logits.shape());
    let scale = g / voxels as f64;
    for (v, &y) in labels.iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for c in 0..k {
            max = max.max(data[c * voxels + v]);
        }
        let mut sum = 0.0;
        for c in 0..k {
            sum += (data[c * voxels + v] - max).exp();
        }
        for c in 0..k {
            let p = (data[c * voxels + v] - max).exp() / sum;
            let target = if c == y as usize { 1.0 } else { 0.0 };
            out.data_mut()[c * voxels + v] = scale * (p - target);
        }
    }
    out
}

/// Channel-collapsed absolute activation map: `[C,X,Y,Z] -> [X*Y*Z]`,
/// `q_v = sum_c |x_{c,v}|`.
pub fn abs_channel_sum_forward(x: &Tensor) -> Tensor {
    let c = x.shape()[0];
    let s = x.len() / c;
    let mut out = Tensor::zeros(&[s]);
    for ch in 0..c {
        let xs = &x.data()[ch * s..(ch + 1) * s];
        for (o, xv) in out.data_mut().iter_mut().zip(xs) {
            *o += xv.abs();
        }
    }
    out
}

pub fn abs_channel_sum_backward(g: &Tensor, x: &Tensor) -> Tensor {
    let c = x.shape()[0];
    let s = x.len() / c;
    let mut out = Tensor::zeros(x.shape());
    for ch in 0..c {
        let xs = &x.data()[ch * s..(ch + 1) * s];
        let os = &mut out.data_mut()[ch * s..(ch + 1) * s];
        for ((o, xv), gv) in os.iter_mut().zip(xs).zip(g.data()) {
            *o = gv * sign(*xv);
        }
    }
    out
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `y = x / (||x||_2 + eps)`.
pub fn normalize_l2_forward(x: &Tensor, eps: f64) -> Tensor {
    let norm = l2(x.data());
    let denom = norm + eps;
    let mut out = x.clone();
    for v in out.data_mut() {
        *v /= denom;
    }
    out
}

pub fn normalize_l2_backward(g: &Tensor, x: &Tensor, eps: f64) -> Tensor {
    let norm = l2(x.data());
    let denom = norm + eps;
    let dot: f64 = g.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    let norm_guard = norm.max(1e-100);
    let mut out = g.clone();
    for (o, xv) in out.data_mut().iter_mut().zip(x.data()) {
        *o = *o / denom - xv * dot / (norm_guard * denom * denom);
    }
    out
}

/// Plain Euclidean norm of a vector, as a scalar.
pub fn l2_norm_forward(x: &Tensor) -> f64 {
    l2(x.data())
}

pub fn l2_norm_backward(g: f64, x: &Tensor) -> Tensor {
    let norm = l2(x.data()).max(1e-100);
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = g * *v / norm;
    }
    out
}

fn l2(xs: &[f64]) -> f64 {
    xs.iter().map(|v| v * v).sum::<f64>().sqrt()
}
