//! Global feature modeling on the deepest stem features.
//!
//! A^4 is reshaped into M = (H/8)(W/8)(D/8) tokens, linearly embedded to
//! width d, offset by a learnable positional table (no class token), run
//! through L pre-norm transformer layers, and mapped back to a volumetric
//! tensor with the exact shape of A^4.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Init, ParamCtx, ParamSpec};
use crate::tape::{NodeId, Tape};

pub fn param_specs(cfg: &ModelConfig, specs: &mut Vec<ParamSpec>) {
    if !cfg.use_transformer {
        return;
    }
    let n4 = cfg.stage_channels(4);
    let d = cfg.embed_dim;
    let m = cfg.token_count();
    specs.push(ParamSpec {
        name: "trans.embed.w".into(),
        shape: vec![n4, d],
        init: Init::LinearFanIn { fan_in: n4 },
    });
    specs.push(ParamSpec {
        name: "trans.pos".into(),
        shape: vec![m, d],
        init: Init::Normal { std: 0.02 },
    });
    for l in 0..cfg.num_layers {
        for ln in ["ln1", "ln2"] {
            specs.push(ParamSpec {
                name: format!("trans.layer{l}.{ln}.gamma"),
                shape: vec![d],
                init: Init::Ones,
            });
            specs.push(ParamSpec {
                name: format!("trans.layer{l}.{ln}.beta"),
                shape: vec![d],
                init: Init::Zeros,
            });
        }
        for proj in ["wq", "wk", "wv", "wo"] {
            specs.push(ParamSpec {
                name: format!("trans.layer{l}.attn.{proj}"),
                shape: vec![d, d],
                init: Init::LinearFanIn { fan_in: d },
            });
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            specs.push(ParamSpec {
                name: format!("trans.layer{l}.attn.{bias}"),
                shape: vec![d],
                init: Init::Zeros,
            });
        }
        let hidden = cfg.ffn_multiplier * d;
        specs.push(ParamSpec {
            name: format!("trans.layer{l}.ffn.w1"),
            shape: vec![d, hidden],
            init: Init::LinearFanIn { fan_in: d },
        });
        specs.push(ParamSpec {
            name: format!("trans.layer{l}.ffn.b1"),
            shape: vec![hidden],
            init: Init::Zeros,
        });
        specs.push(ParamSpec {
            name: format!("trans.layer{l}.ffn.w2"),
            shape: vec![hidden, d],
            init: Init::LinearFanIn { fan_in: hidden },
        });
        specs.push(ParamSpec {
            name: format!("trans.layer{l}.ffn.b2"),
            shape: vec![d],
            init: Init::Zeros,
        });
    }
    specs.push(ParamSpec {
        name: "trans.out.w".into(),
        shape: vec![d, n4],
        init: Init::LinearFanIn { fan_in: d },
    });
    specs.push(ParamSpec {
        name: "trans.out.b".into(),
        shape: vec![n4],
        init: Init::Zeros,
    });
}

/// Tokenize A^4 and embed: `Z_0 = tokens(A4) E + E_pos`.
///
/// Errors when A^4 does not match the configured geometry (the positional
/// table is sized for one fixed M).
pub fn tokenize_embed(
    tape: &mut Tape,
    ctx: &mut ParamCtx,
    cfg: &ModelConfig,
    a4: NodeId,
) -> Result<NodeId> {
    let n4 = cfg.stage_channels(4);
    let (h, w, d) = cfg.stage_shape(4);
    if tape.value(a4).shape() != [n4, h, w, d] {
        return Err(Error::ShapeError(format!(
            "A4 shape {:?} does not match configured [{}, {}, {}, {}]; \
             the positional table is sized for a fixed token count",
            tape.value(a4).shape(),
            n4,
            h,
            w,
            d
        )));
    }
    let tokens = tape.vol_to_tokens(a4);
    let e = ctx.node(tape, "trans.embed.w");
    let projected = tape.matmul(tokens, e);
    let pos = ctx.node(tape, "trans.pos");
    Ok(tape.add(projected, pos))
}

/// Output of the transformer stack: final tokens plus the per-layer
/// attention probability nodes (for diagnostics and tests).
pub struct TransformerOut {
    pub tokens: NodeId,
    pub attention: Vec<NodeId>,
}

/// L pre-norm layers: `Z' = MSA(LN(Z)) + Z; Z = FFN(LN(Z')) + Z'`.
pub fn transformer_forward(
    tape: &mut Tape,
    ctx: &mut ParamCtx,
    cfg: &ModelConfig,
    z0: NodeId,
) -> TransformerOut {
    let mut z = z0;
    let mut attention = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let (msa, attn) = {
            let g1 = ctx.node(tape, &format!("trans.layer{l}.ln1.gamma"));
            let b1 = ctx.node(tape, &format!("trans.layer{l}.ln1.beta"));
            let normed = tape.layer_norm(z, g1, b1);
            msa_forward(tape, ctx, cfg, l, normed)
        };
        attention.push(attn);
        let z_mid = tape.add(msa, z);
        let g2 = ctx.node(tape, &format!("trans.layer{l}.ln2.gamma"));
        let b2 = ctx.node(tape, &format!("trans.layer{l}.ln2.beta"));
        let normed = tape.layer_norm(z_mid, g2, b2);
        let ff = ffn_forward(tape, ctx, l, normed);
        z = tape.add(ff, z_mid);
    }
    TransformerOut {
        tokens: z,
        attention,
    }
}

/// Multi-head self-attention over all tokens. Returns (output, probs).
pub fn msa_forward(
    tape: &mut Tape,
    ctx: &mut ParamCtx,
    cfg: &ModelConfig,
    layer: usize,
    z: NodeId,
) -> (NodeId, NodeId) {
    let heads = cfg.num_heads;
    let head_dim = cfg.embed_dim / heads;
    let project = |tape: &mut Tape, ctx: &mut ParamCtx, w: &str, b: &str, z: NodeId| {
        let wn = ctx.node(tape, &format!("trans.layer{layer}.attn.{w}"));
        let bn = ctx.node(tape, &format!("trans.layer{layer}.attn.{b}"));
        let p = tape.matmul(z, wn);
        tape.add_row_bias(p, bn)
    };
    let q = project(tape, ctx, "wq", "bq", z);
    let k = project(tape, ctx, "wk", "bk", z);
    let v = project(tape, ctx, "wv", "bv", z);
    let qh = tape.split_heads(q, heads);
    let kh = tape.split_heads(k, heads);
    let vh = tape.split_heads(v, heads);
    let scores = tape.bmm_nt(qh, kh);
    let scaled = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let probs = tape.softmax_last(scaled);
    let context = tape.bmm_nn(probs, vh);
    let merged = tape.merge_heads(context);
    let out = project(tape, ctx, "wo", "bo", merged);
    (out, probs)
}

fn ffn_forward(tape: &mut Tape, ctx: &mut ParamCtx, layer: usize, x: NodeId) -> NodeId {
    let w1 = ctx.node(tape, &format!("trans.layer{layer}.ffn.w1"));
    let b1 = ctx.node(tape, &format!("trans.layer{layer}.ffn.b1"));
    let w2 = ctx.node(tape, &format!("trans.layer{layer}.ffn.w2"));
    let b2 = ctx.node(tape, &format!("trans.layer{layer}.ffn.b2"));
    let h = tape.matmul(x, w1);
    let h = tape.add_row_bias(h, b1);
    let h = tape.gelu(h);
    let o = tape.matmul(h, w2);
    tape.add_row_bias(o, b2)
}

/// Map final tokens back to a `[N4, H/8, W/8, D/8]` volume through one
/// linear projection and the inverse token reshape.
pub fn feature_map(
    tape: &mut Tape,
    ctx: &mut ParamCtx,
    cfg: &ModelConfig,
    tokens: NodeId,
) -> NodeId {
    let w = ctx.node(tape, "trans.out.w");
    let b = ctx.node(tape, "trans.out.b");
    let p = tape.matmul(tokens, w);
    let p = tape.add_row_bias(p, b);
    tape.tokens_to_vol(p, cfg.stage_shape(4))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{init_params, ParamSet};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg_toy() -> ModelConfig {
        // N4 = 32, d = 64, M = 64 at input 32^3 with base 4.
        ModelConfig::toy()
    }

    fn transformer_params(cfg: &ModelConfig, seed: u64) -> ParamSet {
        let mut specs = Vec::new();
        param_specs(cfg, &mut specs);
        init_params(&specs, seed)
    }

    fn zero_layer_params(params: &mut ParamSet) {
        for (name, t) in params.iter_mut() {
            if name.contains(".attn.") || name.contains(".ffn.") {
                *t = Tensor::zeros(t.shape());
            }
        }
    }

    #[test]
    fn token_count_formula() {
        assert_eq!(ModelConfig::default().token_count(), 4096); // 16^3 at 128^3 input
        assert_eq!(cfg_toy().token_count(), 64);
    }

    #[test]
    fn embedding_weight_count_at_full_scale() {
        let cfg = ModelConfig::default();
        let mut specs = Vec::new();
        param_specs(&cfg, &mut specs);
        let e = specs.iter().find(|s| s.name == "trans.embed.w").unwrap();
        assert_eq!(e.len(), 128 * 512);
    }

    #[test]
    fn identity_embedding_reproduces_channel_vectors() {
        // E = [I; 0], E_pos = 0: token p equals the channel vector at voxel p.
        let cfg = cfg_toy();
        let mut params = transformer_params(&cfg, 2);
        let n4 = cfg.stage_channels(4);
        let d = cfg.embed_dim;
        let mut e = Tensor::zeros(&[n4, d]);
        for i in 0..n4 {
            e.data_mut()[i * d + i] = 1.0;
        }
        params.insert("trans.embed.w".into(), e);
        params.insert("trans.pos".into(), Tensor::zeros(&[cfg.token_count(), d]));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a4 = Tensor::randn(&[n4, 4, 4, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut ctx = ParamCtx::new(&params);
        let a4_node = tape.leaf(a4.clone());
        let z0 = tokenize_embed(&mut tape, &mut ctx, &cfg, a4_node).unwrap();
        let z = tape.value(z0);
        for p in 0..cfg.token_count() {
            for c in 0..n4 {
                let (x, rem) = (p / 16, p % 16);
                let (y, zc) = (rem / 4, rem % 4);
                let want = a4.data()[((c * 4 + x) * 4 + y) * 4 + zc];
                assert!((z.data()[p * d + c] - want).abs() < 1e-12);
            }
            for c in n4..d {
                assert_eq!(z.data()[p * d + c], 0.0);
            }
        }
    }

    #[test]
    fn wrong_token_count_is_rejected() {
        let cfg = cfg_toy();
        let params = transformer_params(&cfg, 2);
        let mut tape = Tape::new();
        let mut ctx = ParamCtx::new(&params);
        let bad = tape.leaf(Tensor::zeros(&[32, 2, 4, 4]));
        assert!(tokenize_embed(&mut tape, &mut ctx, &cfg, bad).is_err());
    }

    #[test]
    fn zero_weights_pass_tokens_through() {
        let cfg = cfg_toy();
        let mut params = transformer_params(&cfg, 4);
        zero_layer_params(&mut params);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0_val = Tensor::randn(&[cfg.token_count(), cfg.embed_dim], 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut ctx = ParamCtx::new(&params);
        let z0 = tape.leaf(z0_val.clone());
        let out = transformer_forward(&mut tape, &mut ctx, &cfg, z0);
        assert_eq!(tape.value(out.tokens), &z0_val);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = cfg_toy();
        let params = transformer_params(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z0_val = Tensor::randn(&[cfg.token_count(), cfg.embed_dim], 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut ctx = ParamCtx::new(&params);
        let z0 = tape.leaf(z0_val);
        let out = transformer_forward(&mut tape, &mut ctx, &cfg, z0);
        assert_eq!(out.attention.len(), cfg.num_layers);
        for attn in out.attention {
            let probs = tape.value(attn);
            let m = cfg.token_count();
            for row in probs.data().chunks(m) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_head_attention_matches_manual_computation() {
        // One layer, one head, M=2, d=2: explicit scalar evaluation of
        // softmax(Q K^T / sqrt(d)) V with the Q/K/V/O projections, wrapped in
        // the pre-norm residual form.
        let cfg = ModelConfig {
            num_layers: 1,
            num_heads: 1,
            embed_dim: 16,
            base_channels: 2,
            ..ModelConfig::toy()
        };
        // Work on a 2-token slice by overriding the geometry-dependent parts:
        // build the layer manually on a [2, d] input.
        let d = cfg.embed_dim;
        let params = transformer_params(&cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z_val = Tensor::randn(&[2, d], 1.0, &mut rng);

        let mut tape = Tape::new();
        let mut ctx = ParamCtx::new(&params);
        let z = tape.leaf(z_val.clone());
        let (msa, _) = msa_forward(&mut tape, &mut ctx, &cfg, 0, z);
        let got = tape.value(msa).clone();

        // Independent scalar route.
        let get = |n: &str| params.get(n).unwrap();
        let lin = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            let mut out = vec![0.0; d];
            for j in 0..d {
                let mut acc = b.data()[j];
                for i in 0..d {
                    acc += x[i] * w.data()[i * d + j];
                }
                out[j] = acc;
            }
            out
        };
        let rows: Vec<&[f64]> = z_val.data().chunks(d).collect();
        let q: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| lin(r, get("trans.layer0.attn.wq"), get("trans.layer0.attn.bq")))
            .collect();
        let k: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| lin(r, get("trans.layer0.attn.wk"), get("trans.layer0.attn.bk")))
            .collect();
        let v: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| lin(r, get("trans.layer0.attn.wv"), get("trans.layer0.attn.bv")))
            .collect();
        let scale = 1.0 / (d as f64).sqrt();
        for i in 0..2 {
            let mut s = [0.0f64; 2];
            for j in 0..2 {
                s[j] = q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let mx = s[0].max(s[1]);
            let e = [(s[0] - mx).exp(), (s[1] - mx).exp()];
            let p = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
            let ctxv: Vec<f64> = (0..d).map(|c| p[0] * v[0][c] + p[1] * v[1][c]).collect();
            let out = lin(
                &ctxv,
                get("trans.layer0.attn.wo"),
                get("trans.layer0.attn.bo"),
            );
            for c in 0..d {
                assert!(
                    (got.data()[i * d + c] - out[c]).abs() < 1e-10,
                    "token {i} channel {c}"
                );
            }
        }
    }

    #[test]
    fn feature_map_shape_matches_a4() {
        let cfg = cfg_toy();
        let params = transformer_params(&cfg, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tokens = Tensor::randn(&[cfg.token_count(), cfg.embed_dim], 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut ctx = ParamCtx::new(&params);
        let t = tape.leaf(tokens);
        let z4 = feature_map(&mut tape, &mut ctx, &cfg, t);
        assert_eq!(tape.value(z4).shape(), &[32, 4, 4, 4]);
    }

    #[test]
    fn pseudo_inverse_projection_roundtrips_a4() {
        // With E_pos = 0, zero transformer layers, and the output projection
        // set to the right inverse of E, the whole block reproduces A^4.
        let cfg = cfg_toy();
        let mut params = transformer_params(&cfg, 12);
        zero_layer_params(&mut params);
        let n4 = cfg.stage_channels(4);
        let d = cfg.embed_dim;
        params.insert("trans.pos".into(), Tensor::zeros(&[cfg.token_count(), d]));
        params.insert("trans.out.b".into(), Tensor::zeros(&[n4]));

        // Right inverse: W = E^T (E E^T)^{-1}, so E W = I.
        let e = params.get("trans.embed.w").unwrap().clone();
        let mut gram = vec![0.0; n4 * n4]; // E E^T
        for i in 0..n4 {
            for j in 0..n4 {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += e.data()[i * d + c] * e.data()[j * d + c];
                }
                gram[i * n4 + j] = acc;
            }
        }
        let inv = invert(&mut gram, n4);
        let mut w_out = Tensor::zeros(&[d, n4]);
        for c in 0..d {
            for j in 0..n4 {
                let mut acc = 0.0;
                for i in 0..n4 {
                    acc += e.data()[i * d + c] * inv[i * n4 + j];
                }
                w_out.data_mut()[c * n4 + j] = acc;
            }
        }
        params.insert("trans.out.w".into(), w_out);

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a4 = Tensor::randn(&[n4, 4, 4, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut ctx = ParamCtx::new(&params);
        let a4_node = tape.leaf(a4.clone());
        let z0 = tokenize_embed(&mut tape, &mut ctx, &cfg, a4_node).unwrap();
        let out = transformer_forward(&mut tape, &mut ctx, &cfg, z0);
        let z4 = feature_map(&mut tape, &mut ctx, &cfg, out.tokens);
        let max_err = tape
            .value(z4)
            .data()
            .iter()
            .zip(a4.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-5, "roundtrip error {max_err}");
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        // With E_pos = 0, permuting tokens permutes MSA output rows; with a
        // nonzero table the output changes.
        let cfg = ModelConfig {
            num_layers: 1,
            ..cfg_toy()
        };
        let params = transformer_params(&cfg, 14);
        let d = cfg.embed_dim;
        let m = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let z_val = Tensor::randn(&[m, d], 1.0, &mut rng);
        // Swap tokens 0 and 3.
        let mut z_perm = z_val.clone();
        for c in 0..d {
            z_perm.data_mut().swap(c, 3 * d + c);
        }
        let run = |z_val: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let mut ctx = ParamCtx::new(&params);
            let z = tape.leaf(z_val.clone());
            let (msa, _) = msa_forward(&mut tape, &mut ctx, &cfg, 0, z);
            tape.value(msa).clone()
        };
        let base = run(&z_val);
        let perm = run(&z_perm);
        for c in 0..d {
            assert!((base.data()[c] - perm.data()[3 * d + c]).abs() < 1e-10);
            assert!((base.data()[3 * d + c] - perm.data()[c]).abs() < 1e-10);
        }
        for t in [1usize, 2, 4, 5] {
            for c in 0..d {
                assert!((base.data()[t * d + c] - perm.data()[t * d + c]).abs() < 1e-10);
            }
        }
        // Nonzero positional table breaks the equivariance in tokenize_embed
        // by construction (different tokens get different offsets); check a
        // direct consequence: adding the table changes the embedding.
        let pos = params.get("trans.pos").unwrap();
        assert!(pos.data().iter().any(|&v| v != 0.0));
    }

    /// Gauss-Jordan inverse for the small Gram matrix in the roundtrip test.
    fn invert(a: &mut [f64], n: usize) -> Vec<f64> {
        let mut inv = vec![0.0; n * n];
        for i in 0..n {
            inv[i * n + i] = 1.0;
        }
        for col in 0..n {
            let mut pivot = col;
            for r in col + 1..n {
                if a[r * n + col].abs() > a[pivot * n + col].abs() {
                    pivot = r;
                }
            }
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
                inv.swap(col * n + j, pivot * n + j);
            }
            let p = a[col * n + col];
            for j in 0..n {
                a[col * n + j] /= p;
                inv[col * n + j] /= p;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = a[r * n + col];
                for j in 0..n {
                    a[r * n + j] -= f * a[col * n + j];
                    inv[r * n + j] -= f * inv[col * n + j];
                }
            }
        }
        inv
    }
}
