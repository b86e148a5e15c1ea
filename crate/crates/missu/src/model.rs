//! Full network assembly: stem -> transformer -> (MSF) -> decoder, plus the
//! training objective and the parameter registry shared by initialization,
//! checkpointing and complexity accounting.
//!
//! Dataflow depends on `msf_mode`:
//! - `off`: plain encoder/decoder (optionally with the transformer).
//! - `local`: the decoder consumes stem features; MSF and the distillation
//!   loss exist only in the training graph, so inference never touches
//!   `msf.*` parameters and their values cannot affect logits.
//! - `ms_output`: the decoder consumes fusion outputs; MSF is part of the
//!   inference graph.

use crate::config::{ModelConfig, MsfMode};
use crate::decoder;
use crate::encoder;
use crate::error::{Error, Result};
use crate::msf;
use crate::params::{init_params, ParamCtx, ParamSet, ParamSpec};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::transformer;
use crate::volume::{SegMask, Volume};

/// Which computation graph is meant: the training graph carries MSF and the
/// distillation loss in `local` mode, the inference graph does not.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphMode {
    Training,
    Inference,
}

/// Every learnable tensor of the configured architecture, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    encoder::param_specs(cfg, &mut specs);
    transformer::param_specs(cfg, &mut specs);
    msf::param_specs(cfg, &mut specs);
    decoder::param_specs(cfg, &mut specs);
    specs
}

/// Parameter names (with shapes) required to run a given graph.
pub fn required_specs(cfg: &ModelConfig, mode: GraphMode) -> Vec<ParamSpec> {
    param_specs(cfg)
        .into_iter()
        .filter(|s| {
            if mode == GraphMode::Inference && cfg.msf_mode == MsfMode::Local {
                !s.name.starts_with("msf.")
            } else {
                true
            }
        })
        .collect()
}

/// Check that `params` contains every tensor the graph needs, with the
/// right shapes.
pub fn validate_params(cfg: &ModelConfig, params: &ParamSet, mode: GraphMode) -> Result<()> {
    for spec in required_specs(cfg, mode) {
        match params.get(&spec.name) {
            None => return Err(Error::MissingTensor(spec.name)),
            Some(t) if t.shape() != spec.shape.as_slice() => {
                return Err(Error::TensorShapeMismatch {
                    name: spec.name,
                    expected: spec.shape,
                    found: t.shape().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Node handles produced by one forward pass.
pub struct ForwardOut {
    /// Stem features A^1..A^4.
    pub features: [NodeId; 4],
    /// Decoder input at the deepest stage (transformer output, or A^4 when
    /// the transformer is disabled).
    pub z4: NodeId,
    pub logits: NodeId,
    /// Fusion pyramid outputs B^1..B^3 when MSF ran.
    pub fused: Option<[NodeId; 3]>,
    pub l_seg: Option<NodeId>,
    pub l_sd: Option<NodeId>,
    /// Joint objective (only when a mask was supplied).
    pub loss: Option<NodeId>,
    /// Per-layer attention probabilities.
    pub attention: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Missu {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Missu {
    /// Fresh model with seeded initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&param_specs(&config), seed);
        Ok(Missu { config, params })
    }

    /// Wrap existing parameters (e.g. from a checkpoint); `mode` decides
    /// which groups must be present.
    pub fn from_params(config: ModelConfig, params: ParamSet, mode: GraphMode) -> Result<Self> {
        config.validate()?;
        validate_params(&config, &params, mode)?;
        Ok(Missu { config, params })
    }

    /// Training-graph forward. Computes the joint loss when `mask` is given.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        ctx: &mut ParamCtx,
        volume: &Tensor,
        mask: Option<&SegMask>,
    ) -> Result<ForwardOut> {
        self.forward(tape, ctx, volume, mask, GraphMode::Training)
    }

    /// Inference-graph forward: logits only, MSF skipped in `local` mode.
    pub fn forward_infer(
        &self,
        tape: &mut Tape,
        ctx: &mut ParamCtx,
        volume: &Tensor,
    ) -> Result<ForwardOut> {
        self.forward(tape, ctx, volume, None, GraphMode::Inference)
    }

    fn forward(
        &self,
        tape: &mut Tape,
        ctx: &mut ParamCtx,
        volume: &Tensor,
        mask: Option<&SegMask>,
        mode: GraphMode,
    ) -> Result<ForwardOut> {
        let cfg = &self.config;
        encoder::check_input(cfg, volume.shape())?;
        let x = tape.leaf(volume.clone());
        let pyramid = encoder::encode(tape, ctx, x);
        let a = pyramid.stages;

        let (z4, attention) = if cfg.use_transformer {
            let z0 = transformer::tokenize_embed(tape, ctx, cfg, a[3])?;
            let out = transformer::transformer_forward(tape, ctx, cfg, z0);
            (
                transformer::feature_map(tape, ctx, cfg, out.tokens),
                out.attention,
            )
        } else {
            (a[3], Vec::new())
        };

        // MSF runs when its output feeds the decoder, or when the
        // distillation loss needs it during training.
        let need_msf = match cfg.msf_mode {
            MsfMode::Off => false,
            MsfMode::MsOutput => true,
            MsfMode::Local => mode == GraphMode::Training && cfg.self_distill,
        };
        let fused = if need_msf {
            let refined = [
                msf::msf_refine(tape, ctx, cfg, 1, a[0])?,
                msf::msf_refine(tape, ctx, cfg, 2, a[1])?,
                msf::msf_refine(tape, ctx, cfg, 3, a[2])?,
            ];
            Some(msf::msf_pyramid(tape, ctx, refined))
        } else {
            None
        };

        // Skip order is (stage 3, stage 2, stage 1).
        let skips = match cfg.msf_mode {
            MsfMode::MsOutput => {
                let b = fused.expect("ms_output always computes the pyramid");
                [b[2], b[1], b[0]]
            }
            _ => [a[2], a[1], a[0]],
        };
        let logits = decoder::decode(tape, ctx, cfg, z4, skips)?;

        let (l_seg, l_sd, loss) = match mask {
            Some(mask) => {
                let l_seg = decoder::seg_loss(tape, logits, mask)?;
                let l_sd = match (&fused, cfg.self_distill && mode == GraphMode::Training) {
                    (Some(b), true) => Some(msf::self_distill_loss(tape, &[a[0], a[1], a[2]], b)),
                    _ => None,
                };
                let loss = decoder::total_loss(tape, l_seg, l_sd, cfg.lambda_sd);
                (Some(l_seg), l_sd, Some(loss))
            }
            None => (None, None, None),
        };

        Ok(ForwardOut {
            features: a,
            z4,
            logits,
            fused,
            l_seg,
            l_sd,
            loss,
            attention,
        })
    }

    /// Mean joint loss over a batch, for one optimization step.
    ///
    /// Returns (total, l_seg mean, l_sd mean) node ids.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        ctx: &mut ParamCtx,
        batch: &[(Tensor, SegMask)],
    ) -> Result<(NodeId, NodeId, Option<NodeId>)> {
        assert!(!batch.is_empty(), "batch must be nonempty");
        let mut seg_terms = Vec::with_capacity(batch.len());
        let mut sd_terms = Vec::with_capacity(batch.len());
        for (volume, mask) in batch {
            let out = self.forward_train(tape, ctx, volume, Some(mask))?;
            seg_terms.push(out.l_seg.expect("loss requested"));
            if let Some(sd) = out.l_sd {
                sd_terms.push(sd);
            }
        }
        let inv = 1.0 / batch.len() as f64;
        let mean = |tape: &mut Tape, terms: &[NodeId]| -> NodeId {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t);
            }
            tape.scale(acc, inv)
        };
        let l_seg = mean(tape, &seg_terms);
        let l_sd = if sd_terms.is_empty() {
            None
        } else {
            Some(mean(tape, &sd_terms))
        };
        let loss = decoder::total_loss(tape, l_seg, l_sd, self.config.lambda_sd);
        Ok((loss, l_seg, l_sd))
    }

    /// Run inference and return the argmax label mask.
    pub fn predict(&self, volume: &Volume) -> Result<SegMask> {
        let mut tape = Tape::new();
        let mut ctx = ParamCtx::new(&self.params);
        let out = self.forward_infer(&mut tape, &mut ctx, &volume.to_tensor())?;
        Ok(argmax_mask(tape.value(out.logits)))
    }
}

/// Voxel-wise argmax over the class axis of `[K,H,W,D]` logits. Ties break
/// toward the lower class index.
pub fn argmax_mask(logits: &Tensor) -> SegMask {
    let k = logits.shape()[0];
    let (h, w, d) = (logits.shape()[1], logits.shape()[2], logits.shape()[3]);
    let voxels = h * w * d;
    let mut mask = SegMask::new((h, w, d));
    for v in 0..voxels {
        let mut best = 0usize;
        let mut best_val = logits.data()[v];
        for c in 1..k {
            let val = logits.data()[c * voxels + v];
            if val > best_val {
                best_val = val;
                best = c;
            }
        }
        mask.data[v] = best as u8;
    }
    mask
}
