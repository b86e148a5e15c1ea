//! 3D CNN stem producing the four-stage local feature pyramid.
//!
//! Each stage is two blocks of [3x3x3 conv, instance norm, ReLU]; stages are
//! joined by a stride-2 3x3x3 conv that doubles the channel count. Stage s
//! emits `base*2^(s-1)` channels at `1/2^(s-1)` of the input resolution.

use crate::config::{ModelConfig, STAGES};
use crate::error::{Error, Result};
use crate::kernels::conv::ConvCfg;
use crate::params::{Init, ParamCtx, ParamSpec};
use crate::tape::{NodeId, Tape};

/// Stage features A^1..A^4.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub stages: [NodeId; STAGES],
}

pub fn param_specs(cfg: &ModelConfig, specs: &mut Vec<ParamSpec>) {
    let mut in_ch = cfg.in_channels;
    for s in 1..=STAGES {
        let ch = cfg.stage_channels(s);
        for b in 1..=2 {
            let cin = if b == 1 { in_ch } else { ch };
            specs.push(ParamSpec {
                name: format!("enc.s{s}.b{b}.conv.w"),
                shape: vec![ch, cin, 3, 3, 3],
                init: Init::ConvFanIn { fan_in: cin * 27 },
            });
            specs.push(ParamSpec {
                name: format!("enc.s{s}.b{b}.conv.b"),
                shape: vec![ch],
                init: Init::Zeros,
            });
            specs.push(ParamSpec {
                name: format!("enc.s{s}.b{b}.norm.gamma"),
                shape: vec![ch],
                init: Init::Ones,
            });
            specs.push(ParamSpec {
                name: format!("enc.s{s}.b{b}.norm.beta"),
                shape: vec![ch],
                init: Init::Zeros,
            });
        }
        if s < STAGES {
            let next = cfg.stage_channels(s + 1);
            specs.push(ParamSpec {
                name: format!("enc.down{s}.conv.w"),
                shape: vec![next, ch, 3, 3, 3],
                init: Init::ConvFanIn { fan_in: ch * 27 },
            });
            specs.push(ParamSpec {
                name: format!("enc.down{s}.conv.b"),
                shape: vec![next],
                init: Init::Zeros,
            });
            in_ch = next;
        }
    }
}

/// Validate an input tensor against the configured geometry.
pub fn check_input(cfg: &ModelConfig, shape: &[usize]) -> Result<()> {
    let (h, w, d) = cfg.input_shape;
    if shape != [cfg.in_channels, h, w, d] {
        return Err(Error::ShapeError(format!(
            "expected input [{}, {}, {}, {}], got {:?}",
            cfg.in_channels, h, w, d, shape
        )));
    }
    Ok(())
}

/// Forward through the stem. `x` must already satisfy `check_input`.
pub fn encode(tape: &mut Tape, ctx: &mut ParamCtx, x: NodeId) -> FeaturePyramid {
    let mut h = x;
    let mut stages = [0; STAGES];
    for s in 1..=STAGES {
        for b in 1..=2 {
            let w = ctx.node(tape, &format!("enc.s{s}.b{b}.conv.w"));
            let bias = ctx.node(tape, &format!("enc.s{s}.b{b}.conv.b"));
            let gamma = ctx.node(tape, &format!("enc.s{s}.b{b}.norm.gamma"));
            let beta = ctx.node(tape, &format!("enc.s{s}.b{b}.norm.beta"));
            let c = tape.conv3d(h, w, bias, ConvCfg::same(3, 1));
            let n = tape.instance_norm(c, gamma, beta);
            h = tape.relu(n);
        }
        stages[s - 1] = h;
        if s < STAGES {
            let w = ctx.node(tape, &format!("enc.down{s}.conv.w"));
            let bias = ctx.node(tape, &format!("enc.down{s}.conv.b"));
            h = tape.conv3d(h, w, bias, ConvCfg::halving());
        }
    }
    FeaturePyramid { stages }
}
