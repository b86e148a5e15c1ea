//! Analytic parameter and multiply-accumulate accounting for the training
//! and inference graphs at the configured input shape.
//!
//! Conventions (also printed in report headers): FLOPs = 2 * MACs; only
//! convolutions, linear projections and the attention score/context
//! products carry MACs; normalization, activations, reshapes and
//! interpolation count as zero. Parameter counts must agree exactly with
//! the tensors a real model materializes (tested against `param_specs`).

use crate::config::{ModelConfig, MsfMode, STAGES};
use crate::model::GraphMode;
use crate::msf::{BRANCHES, MSF_STAGES};
use crate::params::{group_of, ParamGroup};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerCount {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub mode: String,
    pub flops_convention: String,
    pub layers: Vec<LayerCount>,
    pub total_params: u64,
    pub total_macs: u64,
}

impl ComplexityReport {
    pub fn gflops(&self) -> f64 {
        2.0 * self.total_macs as f64 / 1e9
    }

    pub fn params_millions(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    /// Sum of parameters over one group prefix.
    pub fn group_params(&self, group: ParamGroup) -> u64 {
        self.layers
            .iter()
            .filter(|l| group_of(&l.name) == group)
            .map(|l| l.params)
            .sum()
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "graph: {}   ({})\n{:<28} {:>12} {:>16}\n",
            self.mode, self.flops_convention, "layer", "params", "MACs"
        );
        for l in &self.layers {
            out.push_str(&format!(
                "{:<28} {:>12} {:>16}\n",
                l.name, l.params, l.macs
            ));
        }
        out.push_str(&format!(
            "{:<28} {:>12} {:>16}\ntotal: {:.2}M params, {:.2} GFLOPs\n",
            "TOTAL",
            self.total_params,
            self.total_macs,
            self.params_millions(),
            self.gflops()
        ));
        out
    }
}

fn conv(name: &str, cin: usize, cout: usize, k: usize, out_voxels: usize) -> LayerCount {
    let weights = (cin * cout * k * k * k) as u64;
    LayerCount {
        name: name.to_string(),
        params: weights + cout as u64,
        macs: weights * out_voxels as u64,
    }
}

fn norm(name: &str, ch: usize) -> LayerCount {
    LayerCount {
        name: name.to_string(),
        params: 2 * ch as u64,
        macs: 0,
    }
}

fn linear(name: &str, cin: usize, cout: usize, tokens: usize, bias: bool) -> LayerCount {
    let weights = (cin * cout) as u64;
    LayerCount {
        name: name.to_string(),
        params: weights + if bias { cout as u64 } else { 0 },
        macs: weights * tokens as u64,
    }
}

fn voxels(shape: (usize, usize, usize)) -> usize {
    shape.0 * shape.1 * shape.2
}

/// Enumerate the layers of one graph with analytic parameter/MAC counts.
pub fn count_complexity(cfg: &ModelConfig, mode: GraphMode) -> ComplexityReport {
    let mut layers = Vec::new();

    // --- encoder stem ---
    let mut in_ch = cfg.in_channels;
    for s in 1..=STAGES {
        let ch = cfg.stage_channels(s);
        let vox = voxels(cfg.stage_shape(s));
        for b in 1..=2 {
            let cin = if b == 1 { in_ch } else { ch };
            layers.push(conv(&format!("enc.s{s}.b{b}.conv"), cin, ch, 3, vox));
            layers.push(norm(&format!("enc.s{s}.b{b}.norm"), ch));
        }
        if s < STAGES {
            let next = cfg.stage_channels(s + 1);
            let down_vox = voxels(cfg.stage_shape(s + 1));
            layers.push(conv(&format!("enc.down{s}.conv"), ch, next, 3, down_vox));
            in_ch = next;
        }
    }

    // --- transformer ---
    if cfg.use_transformer {
        let n4 = cfg.stage_channels(4);
        let d = cfg.embed_dim;
        let m = cfg.token_count();
        layers.push(linear("trans.embed", n4, d, m, false));
        layers.push(LayerCount {
            name: "trans.pos".into(),
            params: (m * d) as u64,
            macs: 0,
        });
        for l in 0..cfg.num_layers {
            layers.push(norm(&format!("trans.layer{l}.ln1"), d));
            for proj in ["wq", "wk", "wv", "wo"] {
                layers.push(linear(
                    &format!("trans.layer{l}.attn.{proj}"),
                    d,
                    d,
                    m,
                    true,
                ));
            }
            // Score and context products: M^2 * d each over all heads.
            layers.push(LayerCount {
                name: format!("trans.layer{l}.attn.matmul"),
                params: 0,
                macs: 2 * (m as u64) * (m as u64) * d as u64,
            });
            layers.push(norm(&format!("trans.layer{l}.ln2"), d));
            let hidden = cfg.ffn_multiplier * d;
            layers.push(linear(&format!("trans.layer{l}.ffn.w1"), d, hidden, m, true));
            layers.push(linear(&format!("trans.layer{l}.ffn.w2"), hidden, d, m, true));
        }
        layers.push(linear("trans.out", d, n4, m, true));
    }

    // --- multi-scale fusion (training graph only in local mode) ---
    let msf_in_graph = match (cfg.msf_mode, mode) {
        (MsfMode::Off, _) => false,
        (MsfMode::MsOutput, _) => true,
        (MsfMode::Local, GraphMode::Training) => true,
        (MsfMode::Local, GraphMode::Inference) => false,
    };
    if msf_in_graph {
        for &s in &MSF_STAGES {
            let ch = cfg.stage_channels(s);
            let vox = voxels(cfg.stage_shape(s));
            for (p, convs) in BRANCHES.iter().enumerate() {
                for (j, &(k, _)) in convs.iter().enumerate() {
                    layers.push(conv(
                        &format!("msf.s{s}.br{}.c{j}", p + 1),
                        ch,
                        ch,
                        k,
                        vox,
                    ));
                }
            }
        }
        for s in [2usize, 3] {
            let ch = cfg.stage_channels(s);
            let prev = cfg.stage_channels(s - 1);
            let vox = voxels(cfg.stage_shape(s));
            layers.push(conv(&format!("msf.pyr{s}.wa"), ch, ch, 1, vox));
            layers.push(conv(&format!("msf.pyr{s}.wb"), prev, ch, 3, vox));
        }
    }

    // --- decoder ---
    for s in [3usize, 2, 1] {
        let carrier = cfg.stage_channels(s + 1);
        let wired = (4 - s) <= cfg.num_skips;
        let cin = if wired {
            carrier + cfg.stage_channels(s)
        } else {
            carrier
        };
        let vox = voxels(cfg.stage_shape(s));
        layers.push(conv(
            &format!("dec.up{s}.conv"),
            cin,
            cfg.stage_channels(s),
            3,
            vox,
        ));
    }
    layers.push(conv(
        "dec.head",
        cfg.base_channels,
        cfg.num_classes,
        1,
        voxels(cfg.input_shape),
    ));

    let total_params = layers.iter().map(|l| l.params).sum();
    let total_macs = layers.iter().map(|l| l.macs).sum();
    ComplexityReport {
        mode: match mode {
            GraphMode::Training => "training".into(),
            GraphMode::Inference => "inference".into(),
        },
        flops_convention:
            "FLOPs = 2*MACs; conv/linear/attention matmuls counted, norm/act/resample = 0".into(),
        layers,
        total_params,
        total_macs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::param_specs;

    /// The analytic parameter count must equal the tensors a model would
    /// actually materialize, graph by graph.
    #[test]
    fn params_agree_with_actual_tensors() {
        for cfg in [
            ModelConfig::toy(),
            ModelConfig {
                msf_mode: MsfMode::Off,
                self_distill: false,
                ..ModelConfig::toy()
            },
            ModelConfig {
                msf_mode: MsfMode::MsOutput,
                self_distill: false,
                num_skips: 1,
                use_transformer: false,
                ..ModelConfig::toy()
            },
        ] {
            let spec_total: u64 = param_specs(&cfg).iter().map(|s| s.len() as u64).sum();
            let train = count_complexity(&cfg, GraphMode::Training);
            assert_eq!(train.total_params, spec_total, "training graph, {cfg:?}");

            let infer = count_complexity(&cfg, GraphMode::Inference);
            let infer_spec: u64 = crate::model::required_specs(&cfg, GraphMode::Inference)
                .iter()
                .map(|s| s.len() as u64)
                .sum();
            assert_eq!(infer.total_params, infer_spec, "inference graph, {cfg:?}");
        }
    }

    #[test]
    fn single_pointwise_conv_closed_form() {
        // A 1x1x1 conv Cin->Cout over X voxels: params = Cin*Cout + Cout,
        // MACs = Cin*Cout*X.
        let l = conv("t", 16, 4, 1, 32768);
        assert_eq!(l.params, 16 * 4 + 4);
        assert_eq!(l.macs, 16 * 4 * 32768);
    }

    #[test]
    fn local_mode_drops_msf_at_inference() {
        let cfg = ModelConfig::toy();
        let train = count_complexity(&cfg, GraphMode::Training);
        let infer = count_complexity(&cfg, GraphMode::Inference);
        assert!(train.total_params > infer.total_params);
        assert!(train.total_macs > infer.total_macs);
        assert_eq!(infer.group_params(ParamGroup::Msf), 0);
        assert!(train.group_params(ParamGroup::Msf) > 0);
    }

    #[test]
    fn ms_output_mode_keeps_msf_at_inference() {
        let cfg = ModelConfig {
            msf_mode: MsfMode::MsOutput,
            self_distill: false,
            ..ModelConfig::toy()
        };
        let train = count_complexity(&cfg, GraphMode::Training);
        let infer = count_complexity(&cfg, GraphMode::Inference);
        assert_eq!(train.total_params, infer.total_params);
        assert_eq!(train.total_macs, infer.total_macs);
    }

    #[test]
    fn accounting_is_additive_and_deterministic() {
        let cfg = ModelConfig::toy();
        let a = count_complexity(&cfg, GraphMode::Training);
        let b = count_complexity(&cfg, GraphMode::Training);
        assert_eq!(a.total_params, b.total_params);
        assert_eq!(a.total_macs, b.total_macs);
        assert_eq!(
            a.total_params,
            a.layers.iter().map(|l| l.params).sum::<u64>()
        );
        assert_eq!(a.total_macs, a.layers.iter().map(|l| l.macs).sum::<u64>());
    }
}
