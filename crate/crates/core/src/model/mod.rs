//! The Chessformer: embedding with per-token offsets, a DeepNorm encoder
//! stack, the move-matrix policy head and three independent value heads,
//! plus parameter/FLOP accounting and checkpoint I/O.

mod checkpoint;
mod heads;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use heads::{
    policy_head, value_head, PolicyHeadOut, PolicyHeadParams, ValueHeadOut, ValueHeadParams,
    ValueOutputs,
};

use crate::attention::{
    apply_absolute, deepnorm_alpha, deepnorm_beta, encoder_layer, AttentionLayerParams,
    EncoderLayerParams, PosRepKind, PosRepTables,
};
use crate::autodiff::{AdError, Element, Graph, ParamId, ParamSet, Tensor, ValueId};
use crate::encoding::{InputEncoding, LegalMask, FEATURES, TOKENS};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Checkpoint/config format version; bumped on any change to parameter
/// shapes, names, or the fixed operation order.
pub const FORMAT_VERSION: u32 = 1;

fn default_d_value() -> usize {
    32
}

fn default_value_embed() -> usize {
    128
}

fn default_buckets() -> usize {
    32
}

fn default_format_version() -> u32 {
    FORMAT_VERSION
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub posrep: PosRepKind,
    #[serde(default = "default_d_value")]
    pub d_value: usize,
    #[serde(default = "default_value_embed")]
    pub value_embed: usize,
    /// K uniform score buckets over [-1, 1]; 0 disables the categorical
    /// outputs.
    #[serde(default = "default_buckets")]
    pub categorical_buckets: usize,
    #[serde(default = "default_format_version")]
    pub format_version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("d_model {d_model} is not divisible by heads {heads}")]
    HeadDivision { d_model: usize, heads: usize },
    #[error("at least one encoder layer is required")]
    NoLayers,
    #[error("categorical buckets must be 0 or at least 3, got {0}")]
    BadBuckets(usize),
    #[error("{0} must be positive")]
    ZeroDim(&'static str),
    #[error("unsupported format version {0}")]
    BadFormatVersion(u32),
}

impl ModelConfig {
    /// The desk-scale configuration: 8 layers, depth 256.
    pub fn cf_6m(posrep: PosRepKind) -> ModelConfig {
        ModelConfig {
            layers: 8,
            d_model: 256,
            heads: 8,
            d_ff: 256,
            posrep,
            d_value: default_d_value(),
            value_embed: default_value_embed(),
            categorical_buckets: default_buckets(),
            format_version: FORMAT_VERSION,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (v, name) in [
            (self.d_model, "d_model"),
            (self.heads, "heads"),
            (self.d_ff, "d_ff"),
            (self.d_value, "d_value"),
            (self.value_embed, "value_embed"),
        ] {
            if v == 0 {
                return Err(ConfigError::ZeroDim(name));
            }
        }
        if self.layers == 0 {
            return Err(ConfigError::NoLayers);
        }
        if self.d_model % self.heads != 0 {
            return Err(ConfigError::HeadDivision {
                d_model: self.d_model,
                heads: self.heads,
            });
        }
        if self.categorical_buckets != 0 && self.categorical_buckets < 3 {
            return Err(ConfigError::BadBuckets(self.categorical_buckets));
        }
        if self.format_version != FORMAT_VERSION {
            return Err(ConfigError::BadFormatVersion(self.format_version));
        }
        Ok(())
    }
}

/// Embedding parameter handles: input projection plus per-token additive
/// and multiplicative offsets (initialized to 0 and 1).
#[derive(Debug, Clone)]
pub struct EmbeddingParams {
    pub w_in: ParamId,
    pub add_offsets: ParamId,
    pub mul_offsets: ParamId,
}

/// Every parameter handle in the model, in registration order.
#[derive(Debug, Clone)]
pub struct ModelIds {
    pub embedding: EmbeddingParams,
    /// The learned absolute position table, present iff posrep = absolute.
    pub absolute: Option<ParamId>,
    pub layers: Vec<EncoderLayerParams>,
    pub policy: PolicyHeadParams,
    pub value_result: ValueHeadParams,
    pub value_q: ValueHeadParams,
    pub value_st: ValueHeadParams,
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
    pub ids: ModelIds,
}

enum Init {
    Xavier {
        fan_in: usize,
        fan_out: usize,
        scale: f64,
    },
    Zeros,
    Ones,
}

type MakeFn<'a> = &'a mut dyn FnMut(&str, &[usize], Init) -> Tensor<f32>;

fn reg(p: &mut ParamSet<f32>, make: MakeFn<'_>, name: &str, shape: &[usize], init: Init) -> ParamId {
    let t = make(name, shape, init);
    p.add(name, t)
}

fn xavier(fan_in: usize, fan_out: usize) -> Init {
    Init::Xavier {
        fan_in,
        fan_out,
        scale: 1.0,
    }
}

fn xavier_scaled(fan_in: usize, fan_out: usize, scale: f64) -> Init {
    Init::Xavier {
        fan_in,
        fan_out,
        scale,
    }
}

fn reg_value_head(
    p: &mut ParamSet<f32>,
    make: MakeFn<'_>,
    prefix: &str,
    cfg: &ModelConfig,
    wdl: bool,
) -> ValueHeadParams {
    let (d, dv, ve) = (cfg.d_model, cfg.d_value, cfg.value_embed);
    let proj = reg(p, make, &format!("{prefix}.proj"), &[d, dv], xavier(d, dv));
    let proj_bias = reg(p, make, &format!("{prefix}.proj_bias"), &[dv], Init::Zeros);
    let embed = reg(
        p,
        make,
        &format!("{prefix}.embed"),
        &[TOKENS * dv, ve],
        xavier(TOKENS * dv, ve),
    );
    let embed_bias = reg(p, make, &format!("{prefix}.embed_bias"), &[ve], Init::Zeros);
    let outputs = if wdl {
        ValueOutputs::Wdl(reg(
            p,
            make,
            &format!("{prefix}.wdl"),
            &[ve, 3],
            xavier(ve, 3),
        ))
    } else {
        let reward = reg(
            p,
            make,
            &format!("{prefix}.reward"),
            &[ve, 1],
            xavier(ve, 1),
        );
        let cat = (cfg.categorical_buckets > 0).then(|| {
            reg(
                p,
                make,
                &format!("{prefix}.cat"),
                &[ve, cfg.categorical_buckets],
                xavier(ve, cfg.categorical_buckets),
            )
        });
        let error = reg(p, make, &format!("{prefix}.error"), &[ve, 1], xavier(ve, 1));
        ValueOutputs::Scalar { reward, cat, error }
    };
    ValueHeadParams {
        proj,
        proj_bias,
        embed,
        embed_bias,
        outputs,
    }
}

/// Register every parameter in a fixed order, delegating tensor creation to
/// `make` (random init or zeros for checkpoint loading).
fn build_params(cfg: &ModelConfig, make: MakeFn<'_>) -> (ParamSet<f32>, ModelIds) {
    let d = cfg.d_model;
    let h = cfg.heads;
    let dh = d / h;
    let dff = cfg.d_ff;
    let alpha = deepnorm_alpha(cfg.layers);
    let beta = deepnorm_beta(cfg.layers);
    let mut p = ParamSet::new();

    let embedding = EmbeddingParams {
        w_in: reg(&mut p, make, "embed.w_in", &[FEATURES, d], xavier(FEATURES, d)),
        add_offsets: reg(&mut p, make, "embed.add", &[TOKENS, d], Init::Zeros),
        mul_offsets: reg(&mut p, make, "embed.mul", &[TOKENS, d], Init::Ones),
    };
    let absolute = (cfg.posrep == PosRepKind::Absolute)
        .then(|| reg(&mut p, make, "posrep.absolute", &[TOKENS, d], Init::Zeros));

    let mut layers = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let name = |s: &str| format!("layer{i}.{s}");
        let wq = reg(&mut p, make, &name("attn.wq"), &[d, d], xavier(d, d));
        let wk = reg(&mut p, make, &name("attn.wk"), &[d, d], xavier(d, d));
        let wv = reg(&mut p, make, &name("attn.wv"), &[d, d], xavier_scaled(d, d, beta));
        let wo = reg(&mut p, make, &name("attn.wo"), &[d, d], xavier_scaled(d, d, beta));
        let wo_bias = reg(&mut p, make, &name("attn.wo_bias"), &[d], Init::Zeros);
        let tables = match cfg.posrep {
            PosRepKind::Absolute => PosRepTables::Absolute,
            PosRepKind::RelativeBias => PosRepTables::RelativeBias {
                table: reg(&mut p, make, &name("attn.relbias"), &[h, 15, 15], Init::Zeros),
            },
            PosRepKind::Shaw => PosRepTables::Shaw {
                aq: reg(&mut p, make, &name("attn.aq"), &[TOKENS, TOKENS, dh], Init::Zeros),
                ak: reg(&mut p, make, &name("attn.ak"), &[TOKENS, TOKENS, dh], Init::Zeros),
                av: reg(&mut p, make, &name("attn.av"), &[TOKENS, TOKENS, dh], Init::Zeros),
            },
        };
        layers.push(EncoderLayerParams {
            attn: AttentionLayerParams {
                wq,
                wk,
                wv,
                wo,
                wo_bias,
                heads: h,
                tables,
            },
            ff1: reg(&mut p, make, &name("ff1"), &[d, dff], xavier_scaled(d, dff, beta)),
            ff1_bias: reg(&mut p, make, &name("ff1_bias"), &[dff], Init::Zeros),
            ff2: reg(&mut p, make, &name("ff2"), &[dff, d], xavier_scaled(dff, d, beta)),
            ff2_bias: reg(&mut p, make, &name("ff2_bias"), &[d], Init::Zeros),
            norm1: reg(&mut p, make, &name("norm1"), &[d], Init::Ones),
            norm2: reg(&mut p, make, &name("norm2"), &[d], Init::Ones),
            alpha,
        });
    }

    let policy = PolicyHeadParams {
        dense: reg(&mut p, make, "policy.dense", &[d, d], xavier(d, d)),
        dense_bias: reg(&mut p, make, "policy.dense_bias", &[d], Init::Zeros),
        wq_pol: reg(&mut p, make, "policy.wq", &[d, d], xavier(d, d)),
        wk_pol: reg(&mut p, make, "policy.wk", &[d, d], xavier(d, d)),
        promo: reg(&mut p, make, "policy.promo", &[d, 4], xavier(d, 4)),
        wq_soft: reg(&mut p, make, "policy.wq_soft", &[d, d], xavier(d, d)),
        wk_soft: reg(&mut p, make, "policy.wk_soft", &[d, d], xavier(d, d)),
        promo_soft: reg(&mut p, make, "policy.promo_soft", &[d, 4], xavier(d, 4)),
    };
    let value_result = reg_value_head(&mut p, make, "value_result", cfg, true);
    let value_q = reg_value_head(&mut p, make, "value_q", cfg, false);
    let value_st = reg_value_head(&mut p, make, "value_st", cfg, false);

    let ids = ModelIds {
        embedding,
        absolute,
        layers,
        policy,
        value_result,
        value_q,
        value_st,
    };
    (p, ids)
}

impl Model {
    /// Fresh model with Xavier-uniform weights, DeepNorm scaling on wv, wo
    /// and the feedforward matrices, zero position tables and neutral
    /// offsets.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model, ConfigError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, ids) = build_params(&config, &mut |_name, shape, init| match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Xavier {
                fan_in,
                fan_out,
                scale,
            } => {
                let limit = scale * (6.0 / (fan_in + fan_out) as f64).sqrt();
                let len = shape.iter().product();
                let data = (0..len)
                    .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * limit) as f32)
                    .collect();
                Tensor::from_vec(shape, data)
            }
        });
        Ok(Model {
            config,
            params,
            ids,
        })
    }

    /// Model with all parameters zeroed; checkpoint loading fills it in.
    pub(crate) fn zeroed(config: ModelConfig) -> Result<Model, ConfigError> {
        config.validate()?;
        let (params, ids) = build_params(&config, &mut |_, shape, _| Tensor::zeros(shape));
        Ok(Model {
            config,
            params,
            ids,
        })
    }

    /// Single-position inference. Softmaxes the policy over the legal mask
    /// (skipped when the mask is empty, i.e. a terminal position), the wdl
    /// logits, and the categorical outputs.
    pub fn forward(
        &self,
        enc: &InputEncoding,
        mask: &LegalMask,
        capture_attention: bool,
    ) -> Result<ModelOutput, AdError> {
        let mut g = Graph::new(Arc::new(self.params.clone()));
        let f = build_forward(&mut g, &self.config, &self.ids, enc, capture_attention)?;
        let policy_logits = g.value(f.policy_logits).clone();
        let soft_policy_logits = g.value(f.soft_policy_logits).clone();
        let policy = if mask.count() > 0 {
            let p = g.softmax_masked(f.policy_logits, Some(mask.as_slice().to_vec()))?;
            Some(g.value(p).clone())
        } else {
            None
        };
        let wdl_sm = g.softmax_masked(f.wdl_logits, None)?;
        let wdl = {
            let d = g.value(wdl_sm).data();
            [d[0], d[1], d[2]]
        };
        let grab_cat = |g: &mut Graph<f32>, id: Option<ValueId>| match id {
            Some(c) => {
                let s = g.softmax_masked(c, None)?;
                Ok(Some(g.value(s).data().to_vec()))
            }
            None => Ok(None),
        };
        let q_cat = grab_cat(&mut g, f.q_cat)?;
        let st_cat = grab_cat(&mut g, f.st_cat)?;
        let attention = capture_attention.then(|| {
            let h = self.config.heads;
            let mut t = Tensor::zeros(&[self.config.layers, h, TOKENS, TOKENS]);
            let td = t.data_mut();
            for (li, per_layer) in f.attention.iter().enumerate() {
                for (hi, &wid) in per_layer.iter().enumerate() {
                    let off = (li * h + hi) * TOKENS * TOKENS;
                    td[off..off + TOKENS * TOKENS].copy_from_slice(g.value(wid).data());
                }
            }
            t
        });
        Ok(ModelOutput {
            policy_logits,
            soft_policy_logits,
            policy,
            wdl,
            q: g.value(f.q).item(),
            q_cat,
            q_err: g.value(f.q_err).item(),
            st_q: g.value(f.st_q).item(),
            st_cat,
            st_err: g.value(f.st_err).item(),
            attention,
        })
    }
}

/// Raw head outputs on a graph, for the loss assembly and inference.
#[derive(Debug)]
pub struct ForwardIds {
    /// [4352] move logits, unmasked and un-softmaxed.
    pub policy_logits: ValueId,
    /// [4352] logits of the soft projection, trained by the softened loss.
    pub soft_policy_logits: ValueId,
    /// [1×3] win/draw/loss logits.
    pub wdl_logits: ValueId,
    pub q: ValueId,
    pub q_cat: Option<ValueId>,
    pub q_err: ValueId,
    pub st_q: ValueId,
    pub st_cat: Option<ValueId>,
    pub st_err: ValueId,
    /// Per layer, per head [64×64] attention weights; empty unless captured.
    pub attention: Vec<Vec<ValueId>>,
}

/// Inference outputs. Distributions are softmaxed; q, the error estimates
/// and the logits are raw.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub policy_logits: Tensor<f32>,
    /// Raw logits of the soft-policy projection (a training target; never
    /// used for move selection).
    pub soft_policy_logits: Tensor<f32>,
    /// Legal-masked policy distribution; None for terminal positions.
    pub policy: Option<Tensor<f32>>,
    /// Win/draw/loss from the mover's perspective.
    pub wdl: [f32; 3],
    pub q: f32,
    pub q_cat: Option<Vec<f32>>,
    pub q_err: f32,
    pub st_q: f32,
    pub st_cat: Option<Vec<f32>>,
    pub st_err: f32,
    /// [layers × heads × 64 × 64] when captured.
    pub attention: Option<Tensor<f32>>,
}

/// Token embedding: linear projection, Mish, then the learned additive and
/// multiplicative per-token offsets.
pub fn embed<T: Element>(
    g: &mut Graph<T>,
    emb: &EmbeddingParams,
    enc: &InputEncoding,
) -> Result<ValueId, AdError> {
    let data = enc
        .as_slice()
        .iter()
        .map(|&v| T::from_f64(v as f64))
        .collect();
    let x0 = g.input(Tensor::from_vec(&[TOKENS, FEATURES], data));
    let w_in = g.param(emb.w_in);
    let lin = g.matmul(x0, w_in)?;
    let act = g.mish(lin);
    let add = g.param(emb.add_offsets);
    let shifted = g.add(act, add)?;
    let mul = g.param(emb.mul_offsets);
    g.mul(shifted, mul)
}

/// Assemble the full forward pass on a graph. Checks activations for
/// finiteness after the embedding, every encoder layer, and each head, and
/// names the failing stage.
pub fn build_forward<T: Element>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    ids: &ModelIds,
    enc: &InputEncoding,
    capture_attention: bool,
) -> Result<ForwardIds, AdError> {
    let mut x = embed(g, &ids.embedding, enc)?;
    if let Some(c) = ids.absolute {
        x = apply_absolute(g, x, c)?;
    }
    if !g.value(x).all_finite() {
        return Err(AdError::NonFinite {
            context: "embedding".to_string(),
        });
    }
    let mut attention = Vec::new();
    for (i, layer) in ids.layers.iter().enumerate() {
        let (y, weights) = encoder_layer(g, x, layer)?;
        if !g.value(y).all_finite() {
            return Err(AdError::NonFinite {
                context: format!("encoder layer {i}"),
            });
        }
        if capture_attention {
            attention.push(weights);
        }
        x = y;
    }
    let pol = policy_head(g, x, &ids.policy, cfg.d_model)?;
    let result = value_head(g, x, &ids.value_result)?;
    let qh = value_head(g, x, &ids.value_q)?;
    let st = value_head(g, x, &ids.value_st)?;
    for (v, name) in [
        (pol.logits, "policy head"),
        (pol.soft_logits, "soft policy head"),
        (result.primary, "result value head"),
        (qh.primary, "q value head"),
        (st.primary, "short-term value head"),
    ] {
        if !g.value(v).all_finite() {
            return Err(AdError::NonFinite {
                context: name.to_string(),
            });
        }
    }
    Ok(ForwardIds {
        policy_logits: pol.logits,
        soft_policy_logits: pol.soft_logits,
        wdl_logits: result.primary,
        q: qh.primary,
        q_cat: qh.cat,
        q_err: qh.err.expect("scalar head emits an error estimate"),
        st_q: st.primary,
        st_cat: st.cat,
        st_err: st.err.expect("scalar head emits an error estimate"),
        attention,
    })
}

/// Exact parameter count from the declared shapes.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    let d = cfg.d_model as u64;
    let n = cfg.layers as u64;
    let h = cfg.heads as u64;
    let dh = d / h;
    let dff = cfg.d_ff as u64;
    let dv = cfg.d_value as u64;
    let ve = cfg.value_embed as u64;
    let k = cfg.categorical_buckets as u64;

    let embed = 112 * d + 2 * 64 * d;
    let posrep = match cfg.posrep {
        PosRepKind::Absolute => 64 * d,
        PosRepKind::RelativeBias => n * h * 15 * 15,
        PosRepKind::Shaw => n * 3 * 64 * 64 * dh,
    };
    let per_layer = 4 * d * d + d          // qkv + wo, wo bias
        + d * dff + dff + dff * d + d      // feedforward pair
        + 2 * d; // norm gains
    // Dense layer plus two move projections (main and soft), each wq + wk
    // and a promotion table.
    let policy = d * d + d + 2 * (2 * d * d + 4 * d);
    let value_common = d * dv + dv + 64 * dv * ve + ve;
    let result_head = value_common + ve * 3;
    let scalar_head = value_common + 2 * ve + if k > 0 { ve * k } else { 0 };
    embed + posrep + n * per_layer + policy + result_head + 2 * scalar_head
}

/// Analytic forward FLOPs, 2 per multiply-accumulate, matmul-like ops only.
/// Elementwise work (activations, norms, softmax, residuals, offsets and
/// all position-table additions) counts zero, so the three posreps cost the
/// same:
///   embed: 2·64·112·d
///   per layer: 3·2·64·d² (QKV) + 2·64²·d (scores) + 2·64²·d (values)
///              + 2·64·d² (output) + 2·2·64·d·d_ff (feedforward)
///   policy: 2·64·d² (dense) + 2 projections of 2·2·64·d² + 2·64²·d + 2·8·d·4
///   value head: 2·64·d·d_value + 2·(64·d_value)·value_embed + outputs
pub fn count_flops(cfg: &ModelConfig) -> u64 {
    let d = cfg.d_model as u64;
    let n = cfg.layers as u64;
    let dff = cfg.d_ff as u64;
    let dv = cfg.d_value as u64;
    let ve = cfg.value_embed as u64;
    let k = cfg.categorical_buckets as u64;

    let embed = 2 * 64 * 112 * d;
    let per_layer = 3 * 2 * 64 * d * d
        + 2 * 64 * 64 * d
        + 2 * 64 * 64 * d
        + 2 * 64 * d * d
        + 2 * 2 * 64 * d * dff;
    let projection = 2 * 2 * 64 * d * d + 2 * 64 * 64 * d + 2 * 8 * d * 4;
    let policy = 2 * 64 * d * d + 2 * projection;
    let value_common = 2 * 64 * d * dv + 2 * (64 * dv) * ve;
    let result_head = value_common + 2 * ve * 3;
    let scalar_head = value_common + 2 * ve * (2 + k);
    embed + n * per_layer + policy + result_head + 2 * scalar_head
}

/// FLOPs per move for the value-maximization agent, which evaluates about
/// 20 successor positions per decision.
pub fn value_agent_flops(cfg: &ModelConfig) -> u64 {
    20 * count_flops(cfg)
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::chess::{GameState, HistoryWindow};
    use crate::encoding::{encode_position, legal_mask};

    pub fn tiny_config(posrep: PosRepKind) -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            posrep,
            d_value: 8,
            value_embed: 16,
            categorical_buckets: 3,
            format_version: FORMAT_VERSION,
        }
    }

    pub fn startpos_inputs() -> (InputEncoding, LegalMask) {
        let w = HistoryWindow::start(GameState::startpos());
        (encode_position(&w), legal_mask(w.current()))
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::{startpos_inputs, tiny_config};
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOpts, Grads};
    use crate::chess::{GameState, HistoryWindow};
    use crate::encoding::{absolute_move_to_index, encode_position, legal_mask, POLICY_SIZE};

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config(PosRepKind::Shaw);
        cfg.heads = 3;
        assert_eq!(
            cfg.validate(),
            Err(ConfigError::HeadDivision {
                d_model: 8,
                heads: 3
            })
        );
        cfg = tiny_config(PosRepKind::Shaw);
        cfg.layers = 0;
        assert_eq!(cfg.validate(), Err(ConfigError::NoLayers));
        cfg = tiny_config(PosRepKind::Shaw);
        cfg.categorical_buckets = 2;
        assert_eq!(cfg.validate(), Err(ConfigError::BadBuckets(2)));
        cfg = tiny_config(PosRepKind::Shaw);
        cfg.categorical_buckets = 0;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn neutral_offsets_leave_mish_projection() {
        let model = Model::init(tiny_config(PosRepKind::RelativeBias), 1).unwrap();
        let (enc, _) = startpos_inputs();
        let mut g = Graph::new(Arc::new(model.params.clone()));
        let e = embed(&mut g, &model.ids.embedding, &enc).unwrap();

        let mut g2 = Graph::new(Arc::new(model.params.clone()));
        let data = enc.as_slice().to_vec();
        let x0 = g2.input(Tensor::from_vec(&[TOKENS, FEATURES], data));
        let w = g2.param(model.ids.embedding.w_in);
        let lin = g2.matmul(x0, w).unwrap();
        let want = g2.mish(lin);
        assert_eq!(g.value(e).data(), g2.value(want).data());
    }

    #[test]
    fn offsets_distinguish_identical_tokens() {
        let mut model = Model::init(tiny_config(PosRepKind::RelativeBias), 2).unwrap();
        let (enc, _) = startpos_inputs();
        // Tokens 16 and 17 are both empty squares with identical features.
        assert_eq!(
            &enc.as_slice()[16 * FEATURES..17 * FEATURES],
            &enc.as_slice()[17 * FEATURES..18 * FEATURES]
        );
        let run = |m: &Model| {
            let mut g = Graph::new(Arc::new(m.params.clone()));
            let e = embed(&mut g, &m.ids.embedding, &enc).unwrap();
            g.value(e).clone()
        };
        let neutral = run(&model);
        assert_eq!(
            &neutral.data()[16 * 8..17 * 8],
            &neutral.data()[17 * 8..18 * 8]
        );
        // Perturb the additive offsets: the same features now embed apart.
        {
            let t = model.params.value_mut(model.ids.embedding.add_offsets);
            t.data_mut()[16 * 8] = 0.5;
        }
        let offset = run(&model);
        assert_ne!(
            &offset.data()[16 * 8..17 * 8],
            &offset.data()[17 * 8..18 * 8]
        );
    }

    #[test]
    fn embed_gradient_check() {
        let model = Model::init(tiny_config(PosRepKind::RelativeBias), 3).unwrap();
        let params = model.params.convert::<f64>();
        let (enc, _) = startpos_inputs();
        let emb = model.ids.embedding.clone();
        let report = grad_check(
            &params,
            move |g| {
                let e = embed(g, &emb, &enc)?;
                let m = g.mish(e);
                Ok(g.sum(m))
            },
            &GradCheckOpts::default(),
        )
        .unwrap();
        assert!(report.passes(1e-5), "{report}");
    }

    #[test]
    fn forward_policy_is_masked_distribution() {
        let model = Model::init(tiny_config(PosRepKind::Shaw), 4).unwrap();
        let (enc, mask) = startpos_inputs();
        let out = model.forward(&enc, &mask, false).unwrap();
        let policy = out.policy.unwrap();
        let nonzero = policy.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 20);
        let sum: f32 = policy.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for (i, &v) in policy.data().iter().enumerate() {
            if !mask.as_slice()[i] {
                assert_eq!(v, 0.0);
            }
        }
        let wdl_sum: f32 = out.wdl.iter().sum();
        assert!((wdl_sum - 1.0).abs() < 1e-6);
        let cat = out.q_cat.unwrap();
        assert_eq!(cat.len(), 3);
        assert!((cat.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn policy_distribution_invariant_on_random_positions() {
        let cfg = ModelConfig {
            layers: 1,
            d_model: 16,
            heads: 2,
            d_ff: 16,
            posrep: PosRepKind::RelativeBias,
            d_value: 8,
            value_embed: 16,
            categorical_buckets: 0,
            format_version: FORMAT_VERSION,
        };
        let model = Model::init(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut checked = 0;
        while checked < 1000 {
            let mut window = HistoryWindow::start(GameState::startpos());
            for _ in 0..120 {
                let enc = encode_position(&window);
                let mask = legal_mask(window.current());
                let out = model.forward(&enc, &mask, false).unwrap();
                match out.policy {
                    Some(p) => {
                        let sum: f32 = p.data().iter().sum();
                        assert!((sum - 1.0).abs() < 1e-6);
                        for (i, &v) in p.data().iter().enumerate() {
                            if !mask.as_slice()[i] {
                                assert_eq!(v, 0.0, "illegal index {i} got probability");
                            }
                        }
                    }
                    None => assert_eq!(mask.count(), 0),
                }
                checked += 1;
                if checked == 1000 {
                    break;
                }
                let moves = window.current().legal_moves();
                if moves.is_empty() || window.current().game_result().is_some() {
                    break;
                }
                let mv = moves[rng.random_range(0..moves.len())];
                let next = window.current().apply_move(mv).unwrap();
                window = window.advanced(next);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Model::init(tiny_config(PosRepKind::Absolute), 6).unwrap();
        let (enc, mask) = startpos_inputs();
        let a = model.forward(&enc, &mask, true).unwrap();
        let b = model.forward(&enc, &mask, true).unwrap();
        assert_eq!(a.policy_logits.data(), b.policy_logits.data());
        assert_eq!(a.soft_policy_logits.data(), b.soft_policy_logits.data());
        assert_eq!(a.wdl, b.wdl);
        assert_eq!(a.q, b.q);
        assert_eq!(
            a.attention.unwrap().data(),
            b.attention.unwrap().data()
        );
    }

    #[test]
    fn promotion_logits_equal_base_when_promo_zero() {
        let mut model = Model::init(tiny_config(PosRepKind::Shaw), 7).unwrap();
        for id in [model.ids.policy.promo, model.ids.policy.promo_soft] {
            for v in model.params.value_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let (enc, mask) = startpos_inputs();
        let out = model.forward(&enc, &mask, false).unwrap();
        for logits in [out.policy_logits.data(), out.soft_policy_logits.data()] {
            for ff in 0..8usize {
                for tf in 0..8usize {
                    let base = logits[(48 + ff) * 64 + 56 + tf];
                    for piece in 0..4 {
                        assert_eq!(logits[4096 + (ff * 8 + tf) * 4 + piece], base);
                    }
                }
            }
        }
    }

    #[test]
    fn constant_policy_embeddings_give_uniform_base() {
        let cfg = tiny_config(PosRepKind::Absolute);
        let d = cfg.d_model;
        let mut model = Model::init(cfg, 8).unwrap();
        // Zero the dense weight so emb = mish(bias) is token-independent,
        // then pick Q/K projections mapping everything to e_0 with unit dot.
        for v in model.params.value_mut(model.ids.policy.dense).data_mut() {
            *v = 0.0;
        }
        for v in model
            .params
            .value_mut(model.ids.policy.dense_bias)
            .data_mut()
        {
            *v = 1.0;
        }
        let m = 1.0f32 * (1.0f32.exp().ln_1p()).tanh(); // mish(1)
        let col = |target: &mut Tensor<f32>, val: f32| {
            for v in target.data_mut() {
                *v = 0.0;
            }
            for r in 0..d {
                target.data_mut()[r * d] = val;
            }
        };
        // First columns 1/(d·m) make Q_from = K_to = [1, 0, ...], so every
        // from/to dot is 1 and base = 1/sqrt(d) uniformly.
        let inv = 1.0 / (d as f32 * m);
        col(model.params.value_mut(model.ids.policy.wq_pol), inv);
        col(model.params.value_mut(model.ids.policy.wk_pol), inv);
        let (enc, mask) = startpos_inputs();
        let out = model.forward(&enc, &mask, false).unwrap();
        let want = 1.0 / (d as f32).sqrt();
        for &v in &out.policy_logits.data()[..4096] {
            assert!((v - want).abs() < 1e-4, "{v} vs {want}");
        }
    }

    #[test]
    fn count_params_matches_registered_parameters() {
        for posrep in PosRepKind::ALL {
            let cfg = ModelConfig {
                layers: 2,
                d_model: 64,
                heads: 4,
                d_ff: 128,
                posrep,
                d_value: 32,
                value_embed: 128,
                categorical_buckets: 0,
                format_version: FORMAT_VERSION,
            };
            let model = Model::init(cfg.clone(), 9).unwrap();
            assert_eq!(
                count_params(&cfg),
                model.params.total_elements() as u64,
                "{posrep}"
            );
        }
        // With categorical buckets enabled too.
        let cfg = tiny_config(PosRepKind::Shaw);
        let model = Model::init(cfg.clone(), 10).unwrap();
        assert_eq!(count_params(&cfg), model.params.total_elements() as u64);
    }

    #[test]
    fn cf_6m_parameter_count_in_range() {
        let count = count_params(&ModelConfig::cf_6m(PosRepKind::Shaw));
        assert!(
            (5_000_000..=8_000_000).contains(&count),
            "CF-6M count {count}"
        );
    }

    #[test]
    fn doubling_d_ff_adds_expected_parameters() {
        let base = ModelConfig::cf_6m(PosRepKind::Shaw);
        let mut doubled = base.clone();
        doubled.d_ff *= 2;
        let delta = count_params(&doubled) - count_params(&base);
        let n = base.layers as u64;
        let d = base.d_model as u64;
        let dff = base.d_ff as u64;
        assert_eq!(delta, n * (2 * d * dff + dff));
    }

    #[test]
    fn flops_layer_term_is_linear() {
        let mut c1 = ModelConfig::cf_6m(PosRepKind::Absolute);
        let mut c2 = c1.clone();
        let mut c3 = c1.clone();
        c1.layers = 1;
        c2.layers = 2;
        c3.layers = 3;
        let (f1, f2, f3) = (count_flops(&c1), count_flops(&c2), count_flops(&c3));
        assert_eq!(f2 - f1, f3 - f2);
        // Doubling the layers doubles the layer term exactly.
        let mut c4 = c1.clone();
        c4.layers = 4;
        assert_eq!(count_flops(&c4) - f2, 2 * (f2 - f1));
        assert_eq!(value_agent_flops(&c2), 20 * f2);
    }

    #[test]
    fn analytic_flops_match_instrumented_tape() {
        let (enc, _) = startpos_inputs();
        for posrep in PosRepKind::ALL {
            let cfg = tiny_config(posrep);
            let model = Model::init(cfg.clone(), 11).unwrap();
            let mut g = Graph::new(Arc::new(model.params.clone()));
            build_forward(&mut g, &cfg, &model.ids, &enc, false).unwrap();
            let analytic = count_flops(&cfg);
            let instrumented = g.flops();
            let ratio = instrumented as f64 / analytic as f64;
            assert!(
                (ratio - 1.0).abs() < 0.05,
                "{posrep}: analytic {analytic} vs instrumented {instrumented}"
            );
        }
    }

    #[test]
    fn posrep_is_only_name_set_difference() {
        let names = |posrep: PosRepKind| -> std::collections::BTreeSet<String> {
            let model = Model::init(tiny_config(posrep), 12).unwrap();
            model
                .params
                .iter()
                .map(|(_, name, _)| name.to_string())
                .collect()
        };
        let absolute = names(PosRepKind::Absolute);
        let relbias = names(PosRepKind::RelativeBias);
        let shaw = names(PosRepKind::Shaw);
        let is_table = |n: &str| {
            n == "posrep.absolute" || n.ends_with(".relbias") || {
                let tail = n.rsplit('.').next().unwrap();
                tail == "aq" || tail == "ak" || tail == "av"
            }
        };
        let strip = |s: &std::collections::BTreeSet<String>| {
            s.iter()
                .filter(|n| !is_table(n))
                .cloned()
                .collect::<std::collections::BTreeSet<_>>()
        };
        assert_eq!(strip(&absolute), strip(&relbias));
        assert_eq!(strip(&relbias), strip(&shaw));
        assert!(absolute.iter().any(|n| n == "posrep.absolute"));
        assert!(relbias.iter().any(|n| n.ends_with(".relbias")));
        assert!(shaw.iter().any(|n| n.ends_with(".av")));
    }

    #[test]
    fn absolute_table_added_once_before_first_layer() {
        let mut model = Model::init(tiny_config(PosRepKind::Absolute), 13).unwrap();
        let c_id = model.ids.absolute.unwrap();
        {
            let t = model.params.value_mut(c_id);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = (i % 7) as f32 * 0.1 - 0.3;
            }
        }
        let (enc, _) = startpos_inputs();
        let mut g = Graph::new(Arc::new(model.params.clone()));
        let f = build_forward(&mut g, &model.config, &model.ids, &enc, false).unwrap();
        let got = g.value(f.policy_logits).clone();

        // Manual stack: embedding, one table addition, then the layers.
        let mut g2 = Graph::new(Arc::new(model.params.clone()));
        let e = embed(&mut g2, &model.ids.embedding, &enc).unwrap();
        let mut x = apply_absolute(&mut g2, e, c_id).unwrap();
        for layer in &model.ids.layers {
            let (y, _) = encoder_layer(&mut g2, x, layer).unwrap();
            x = y;
        }
        let want = policy_head(&mut g2, x, &model.ids.policy, model.config.d_model).unwrap();
        assert_eq!(got.data(), g2.value(want.logits).data());
    }

    #[test]
    fn nonfinite_weights_name_the_layer() {
        let mut model = Model::init(tiny_config(PosRepKind::Absolute), 14).unwrap();
        let wq1 = model.ids.layers[1].attn.wq;
        model.params.value_mut(wq1).data_mut()[0] = f32::NAN;
        let (enc, mask) = startpos_inputs();
        let err = model.forward(&enc, &mask, false).unwrap_err();
        assert_eq!(
            err.to_string(),
            "non-finite value in encoder layer 1"
        );
    }

    fn full_model_grad_check(posrep: PosRepKind) {
        let model = Model::init(tiny_config(posrep), 15).unwrap();
        let params = model.params.convert::<f64>();
        let (enc, _) = startpos_inputs();
        let cfg = model.config.clone();
        let ids = model.ids.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let wpol = Tensor::<f64>::from_vec(
            &[POLICY_SIZE],
            (0..POLICY_SIZE)
                .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                .collect(),
        );
        let report = grad_check(
            &params,
            move |g| {
                let f = build_forward(g, &cfg, &ids, &enc, false)?;
                let w = g.input(wpol.clone());
                let weighted = g.mul(f.policy_logits, w)?;
                let w2 = g.input(wpol.clone());
                let soft_weighted = g.mul(f.soft_policy_logits, w2)?;
                let both = g.add(weighted, soft_weighted)?;
                let mut loss = g.sum(both);
                for part in [
                    Some(f.wdl_logits),
                    Some(f.q),
                    f.q_cat,
                    Some(f.q_err),
                    Some(f.st_q),
                    f.st_cat,
                    Some(f.st_err),
                ]
                .into_iter()
                .flatten()
                {
                    let s = g.sum(part);
                    loss = g.add(loss, s)?;
                }
                Ok(loss)
            },
            &GradCheckOpts {
                coords_per_param: 50,
                ..GradCheckOpts::default()
            },
        )
        .unwrap();
        assert!(report.passes(1e-4), "{posrep}: {report}");
    }

    #[test]
    fn full_model_gradient_check_absolute() {
        full_model_grad_check(PosRepKind::Absolute);
    }

    #[test]
    fn full_model_gradient_check_relbias() {
        full_model_grad_check(PosRepKind::RelativeBias);
    }

    #[test]
    fn full_model_gradient_check_shaw() {
        full_model_grad_check(PosRepKind::Shaw);
    }

    #[test]
    fn backward_reaches_every_parameter() {
        let model = Model::init(tiny_config(PosRepKind::Shaw), 17).unwrap();
        let (enc, _) = startpos_inputs();
        let mut g = Graph::new(Arc::new(model.params.clone()));
        let f = build_forward(&mut g, &model.config, &model.ids, &enc, false).unwrap();
        let pol = g.sum(f.policy_logits);
        let soft = g.sum(f.soft_policy_logits);
        let wdl = g.sum(f.wdl_logits);
        let heads = g.add(pol, soft).unwrap();
        let mut loss = g.add(heads, wdl).unwrap();
        for part in [
            Some(f.q),
            f.q_cat,
            Some(f.q_err),
            Some(f.st_q),
            f.st_cat,
            Some(f.st_err),
        ]
        .into_iter()
        .flatten()
        {
            let s = g.sum(part);
            loss = g.add(loss, s).unwrap();
        }
        let mut grads = Grads::new(&model.params);
        g.backward(loss, &mut grads);
        for (id, name, _) in model.params.iter() {
            assert!(grads.get(id).is_some(), "no gradient reached {name}");
        }
    }

    #[test]
    fn startpos_move_indices_land_in_mask() {
        let (state, mask) = {
            let w = HistoryWindow::start(GameState::startpos());
            (w.current().clone(), legal_mask(w.current()))
        };
        for mv in state.legal_moves() {
            let idx = absolute_move_to_index(mv, state.side_to_move()).index();
            assert!(mask.as_slice()[idx]);
        }
    }
}
