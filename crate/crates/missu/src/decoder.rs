//! Decoder with configurable skip connections, the segmentation loss, and
//! the joint training objective.
//!
//! Three upsample(2x) -> concat -> 3x3x3 conv -> ReLU stages lift the global
//! features back to full resolution, followed by a 1x1x1 classification
//! head. Skips are counted from the deepest stage: `num_skips = 1` wires
//! only stage 3, `num_skips = 3` wires stages 3, 2 and 1.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kernels::conv::ConvCfg;
use crate::params::{Init, ParamCtx, ParamSpec};
use crate::tape::{NodeId, Tape};
use crate::volume::SegMask;

/// Conv input channels at decoder level `s` (3, 2, 1): the upsampled
/// carrier plus the skip when that level is wired.
fn level_in_channels(cfg: &ModelConfig, s: usize) -> usize {
    let carrier = cfg.stage_channels(s + 1);
    let wired = (4 - s) <= cfg.num_skips; // level 3 is the first skip
    if wired {
        carrier + cfg.stage_channels(s)
    } else {
        carrier
    }
}

pub fn param_specs(cfg: &ModelConfig, specs: &mut Vec<ParamSpec>) {
    for s in [3usize, 2, 1] {
        let cin = level_in_channels(cfg, s);
        let cout = cfg.stage_channels(s);
        specs.push(ParamSpec {
            name: format!("dec.up{s}.conv.w"),
            shape: vec![cout, cin, 3, 3, 3],
            init: Init::ConvFanIn { fan_in: cin * 27 },
        });
        specs.push(ParamSpec {
            name: format!("dec.up{s}.conv.b"),
            shape: vec![cout],
            init: Init::Zeros,
        });
    }
    specs.push(ParamSpec {
        name: "dec.head.w".into(),
        shape: vec![cfg.num_classes, cfg.base_channels, 1, 1, 1],
        init: Init::ConvFanIn {
            fan_in: cfg.base_channels,
        },
    });
    specs.push(ParamSpec {
        name: "dec.head.b".into(),
        shape: vec![cfg.num_classes],
        init: Init::Zeros,
    });
}

/// Decode from the deepest features to full-resolution logits.
///
/// `skips` are the candidate tensors for stages (3, 2, 1); only the first
/// `num_skips` are concatenated.
pub fn decode(
    tape: &mut Tape,
    ctx: &mut ParamCtx,
    cfg: &ModelConfig,
    z4: NodeId,
    skips: [NodeId; 3],
) -> Result<NodeId> {
    let mut h = z4;
    for (i, s) in [3usize, 2, 1].into_iter().enumerate() {
        h = tape.upsample2x(h);
        if i < cfg.num_skips {
            let skip = skips[i];
            let want_ch = cfg.stage_channels(s);
            let (sh, sw, sd) = cfg.stage_shape(s);
            if tape.value(skip).shape() != [want_ch, sh, sw, sd] {
                return Err(Error::ShapeError(format!(
                    "skip for stage {s}: expected [{want_ch}, {sh}, {sw}, {sd}], got {:?}",
                    tape.value(skip).shape()
                )));
            }
            h = tape.concat_c(h, skip);
        }
        let w = ctx.node(tape, &format!("dec.up{s}.conv.w"));
        let b = ctx.node(tape, &format!("dec.up{s}.conv.b"));
        let c = tape.conv3d(h, w, b, ConvCfg::same(3, 1));
        h = tape.relu(c);
    }
    let w = ctx.node(tape, "dec.head.w");
    let b = ctx.node(tape, "dec.head.b");
    Ok(tape.conv3d(h, w, b, ConvCfg::same(1, 1)))
}

/// Mean voxel-wise softmax cross-entropy.
pub fn seg_loss(tape: &mut Tape, logits: NodeId, mask: &SegMask) -> Result<NodeId> {
    let shape = tape.value(logits).shape().to_vec();
    let k = shape[0];
    if (shape[1], shape[2], shape[3]) != mask.shape {
        return Err(Error::ShapeError(format!(
            "logits spatial {:?} != mask {:?}",
            &shape[1..],
            mask.shape
        )));
    }
    mask.validate_labels(k)?;
    Ok(tape.cross_entropy_mean(logits, mask.data.clone()))
}

/// Joint objective `L = L_seg + lambda * L_sd`.
pub fn total_loss(
    tape: &mut Tape,
    l_seg: NodeId,
    l_sd: Option<NodeId>,
    lambda: f64,
) -> NodeId {
    match l_sd {
        Some(sd) => {
            let scaled = tape.scale(sd, lambda);
            tape.add(l_seg, scaled)
        }
        None => l_seg,
    }
}
