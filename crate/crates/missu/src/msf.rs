//! Multi-scale fusion blocks, the bottom-up fusion pyramid, attention maps,
//! and the self-distillation loss.
//!
//! Each of stages 1..3 gets four parallel atrous branches with theoretical
//! receptive fields 3, 7, 9 and 19; branch outputs are added back onto the
//! stem features. The pyramid then fuses refined features bottom-up:
//! `B^1 = Abar^1; B^s = W_A conv Abar^s + W_B conv B^{s-1}`. Self-distillation
//! matches L2-normalized channel-summed attention maps of B^s against A^s.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kernels::conv::ConvCfg;
use crate::params::{Init, ParamCtx, ParamSpec};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Norm guard for zero attention maps; zero feature maps occur at init.
pub const NORM_EPS: f64 = 1e-12;

/// Stages carrying MSF blocks (1-based).
pub const MSF_STAGES: [usize; 3] = [1, 2, 3];

/// Branch structure: (kernel, dilation) per conv, in application order.
/// Receptive fields: 3 / 7 / 9 / 19. The final rate-5 conv is what takes
/// branch 4 from RF 9 to 9 + 2*5 = 19.
pub const BRANCHES: [&[(usize, usize)]; 4] = [
    &[(3, 1)],
    &[(3, 3), (1, 1)],
    &[(3, 3), (1, 1), (3, 1)],
    &[(3, 3), (1, 1), (3, 1), (3, 5)],
];

/// Theoretical receptive field (cube side) of one branch.
pub fn branch_rf(branch: usize) -> usize {
    BRANCHES[branch]
        .iter()
        .map(|&(k, dil)| dil * (k - 1))
        .sum::<usize>()
        + 1
}

pub fn param_specs(cfg: &ModelConfig, specs: &mut Vec<ParamSpec>) {
    if cfg.msf_mode == crate::config::MsfMode::Off {
        return;
    }
    for &s in &MSF_STAGES {
        let ch = cfg.stage_channels(s);
        for (p, convs) in BRANCHES.iter().enumerate() {
            for (j, &(k, _)) in convs.iter().enumerate() {
                specs.push(ParamSpec {
                    name: format!("msf.s{s}.br{}.c{j}.w", p + 1),
                    shape: vec![ch, ch, k, k, k],
                    init: Init::ConvFanIn {
                        fan_in: ch * k * k * k,
                    },
                });
                specs.push(ParamSpec {
                    name: format!("msf.s{s}.br{}.c{j}.b", p + 1),
                    shape: vec![ch],
                    init: Init::Zeros,
                });
            }
        }
    }
    // Fusion pyramid: 1x1x1 stride-1 on the refined features, 3x3x3
    // stride-2 on the previous fusion output.
    for s in [2usize, 3] {
        let ch = cfg.stage_channels(s);
        let prev = cfg.stage_channels(s - 1);
        specs.push(ParamSpec {
            name: format!("msf.pyr{s}.wa.w"),
            shape: vec![ch, ch, 1, 1, 1],
            init: Init::ConvFanIn { fan_in: ch },
        });
        specs.push(ParamSpec {
            name: format!("msf.pyr{s}.wa.b"),
            shape: vec![ch],
            init: Init::Zeros,
        });
        specs.push(ParamSpec {
            name: format!("msf.pyr{s}.wb.w"),
            shape: vec![ch, prev, 3, 3, 3],
            init: Init::ConvFanIn { fan_in: prev * 27 },
        });
        specs.push(ParamSpec {
            name: format!("msf.pyr{s}.wb.b"),
            shape: vec![ch],
            init: Init::Zeros,
        });
    }
}

/// One branch alone (without the residual sum), for probing and fusion.
pub fn branch_forward(
    tape: &mut Tape,
    ctx: &mut ParamCtx,
    stage: usize,
    branch: usize,
    x: NodeId,
) -> NodeId {
    let mut h = x;
    for (j, &(k, dil)) in BRANCHES[branch].iter().enumerate() {
        let w = ctx.node(tape, &format!("msf.s{stage}.br{}.c{j}.w", branch + 1));
        let b = ctx.node(tape, &format!("msf.s{stage}.br{}.c{j}.b", branch + 1));
        let c = tape.conv3d(h, w, b, ConvCfg::same(k, dil));
        h = tape.relu(c);
    }
    h
}

/// Refined features `Abar^s = A^s + sum_p f_p(A^s)`. Stages 1..=3 only.
pub fn msf_refine(
    tape: &mut Tape,
    ctx: &mut ParamCtx,
    cfg: &ModelConfig,
    stage: usize,
    a: NodeId,
) -> Result<NodeId> {
    if !MSF_STAGES.contains(&stage) {
        return Err(Error::UnsupportedStage(stage));
    }
    let ch = cfg.stage_channels(stage);
    if tape.value(a).shape()[0] != ch {
        return Err(Error::ShapeError(format!(
            "stage {stage} expects {ch} channels, got {}",
            tape.value(a).shape()[0]
        )));
    }
    let mut out = a;
    for p in 0..BRANCHES.len() {
        let b = branch_forward(tape, ctx, stage, p, a);
        out = tape.add(out, b);
    }
    Ok(out)
}

/// Bottom-up fusion pyramid over the refined features.
pub fn msf_pyramid(
    tape: &mut Tape,
    ctx: &mut ParamCtx,
    refined: [NodeId; 3],
) -> [NodeId; 3] {
    let b1 = refined[0];
    let mut out = [b1, b1, b1];
    for s in [2usize, 3] {
        let wa = ctx.node(tape, &format!("msf.pyr{s}.wa.w"));
        let ba = ctx.node(tape, &format!("msf.pyr{s}.wa.b"));
        let wb = ctx.node(tape, &format!("msf.pyr{s}.wb.w"));
        let bb = ctx.node(tape, &format!("msf.pyr{s}.wb.b"));
        let a_term = tape.conv3d(refined[s - 1], wa, ba, ConvCfg::same(1, 1));
        let b_term = tape.conv3d(out[s - 2], wb, bb, ConvCfg::halving());
        out[s - 1] = tape.add(a_term, b_term);
    }
    out
}

/// Channel-collapsed absolute attention map of a feature tensor, flattened:
/// `q = vec(sum_c |F_c|)`, entries >= 0.
pub fn attention_map(f: &Tensor) -> Tensor {
    crate::kernels::loss::abs_channel_sum_forward(f)
}

/// Tape version of [`attention_map`].
pub fn attention_map_node(tape: &mut Tape, f: NodeId) -> NodeId {
    tape.abs_channel_sum(f)
}

/// Self-distillation loss over stages 1..3:
/// `L_sd = sum_s || qA/||qA|| - qB/||qB|| ||_2`.
///
/// Gradients flow into both sides; no stop-gradient is applied.
pub fn self_distill_loss(tape: &mut Tape, a: &[NodeId; 3], b: &[NodeId; 3]) -> NodeId {
    let mut total: Option<NodeId> = None;
    for s in 0..3 {
        let qa = attention_map_node(tape, a[s]);
        let qb = attention_map_node(tape, b[s]);
        let na = tape.normalize_l2(qa, NORM_EPS);
        let nb = tape.normalize_l2(qb, NORM_EPS);
        let diff = tape.sub(na, nb);
        let dist = tape.l2_norm(diff);
        total = Some(match total {
            Some(t) => tape.add(t, dist),
            None => dist,
        });
    }
    total.expect("three stages")
}

/// Gradient-probed receptive field of one branch: the bounding box of input
/// voxels with nonzero gradient from a single centered output voxel.
///
/// Probing uses strictly positive weights, biases and inputs so every ReLU
/// is active and no cancellation can shrink the measured footprint.
pub fn measure_branch_rf(channels: usize, branch: usize, size: usize) -> [usize; 3] {
    let mut params = crate::params::ParamSet::new();
    for (j, &(k, _)) in BRANCHES[branch].iter().enumerate() {
        params.insert(
            format!("msf.s1.br{}.c{j}.w", branch + 1),
            Tensor::full(&[channels, channels, k, k, k], 0.01),
        );
        params.insert(
            format!("msf.s1.br{}.c{j}.b", branch + 1),
            Tensor::full(&[channels], 0.1),
        );
    }
    let mut tape = Tape::new();
    let mut ctx = ParamCtx::new(&params);
    let x = tape.leaf(Tensor::full(&[channels, size, size, size], 1.0));
    let out = branch_forward(&mut tape, &mut ctx, 1, branch, x);

    // Seed gradient: one output voxel at the cube center, channel 0.
    let mut seed = Tensor::zeros(&[channels, size, size, size]);
    let c = size / 2;
    seed.data_mut()[(c * size + c) * size + c] = 1.0;
    let grads = tape.backward_seeded(out, seed);
    let g = grads.get(x).expect("input gradient");

    let mut lo = [size; 3];
    let mut hi = [0usize; 3];
    for ch in 0..channels {
        for xx in 0..size {
            for yy in 0..size {
                for zz in 0..size {
                    let v = g.data()[((ch * size + xx) * size + yy) * size + zz];
                    if v != 0.0 {
                        lo[0] = lo[0].min(xx);
                        hi[0] = hi[0].max(xx);
                        lo[1] = lo[1].min(yy);
                        hi[1] = hi[1].max(yy);
                        lo[2] = lo[2].min(zz);
                        hi[2] = hi[2].max(zz);
                    }
                }
            }
        }
    }
    [
        hi[0] - lo[0] + 1,
        hi[1] - lo[1] + 1,
        hi[2] - lo[2] + 1,
    ]
}
