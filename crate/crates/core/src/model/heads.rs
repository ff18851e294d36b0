//! Output heads. The policy head scores from/to square pairs with a scaled
//! dot product plus per-file promotion biases, twice: a main projection and
//! a soft projection off the same embedding, the latter trained only by the
//! temperature-softened policy loss. Each value head projects tokens down,
//! flattens, embeds, and emits its outputs. The three value heads share
//! nothing.

use crate::autodiff::{AdError, Element, GradSink, Graph, OpNode, ParamId, Tensor, ValueId};
use crate::encoding::POLICY_SIZE;

#[derive(Debug, Clone)]
pub struct PolicyHeadParams {
    pub dense: ParamId,
    pub dense_bias: ParamId,
    pub wq_pol: ParamId,
    pub wk_pol: ParamId,
    /// [d_model × 4], columns in promotion-code order N, B, R, Q.
    pub promo: ParamId,
    pub wq_soft: ParamId,
    pub wk_soft: ParamId,
    pub promo_soft: ParamId,
}

/// Main and soft move logits, both [4352].
#[derive(Debug)]
pub struct PolicyHeadOut {
    pub logits: ValueId,
    pub soft_logits: ValueId,
}

/// Head-specific output projections; none carry a bias.
#[derive(Debug, Clone)]
pub enum ValueOutputs {
    /// Game result: [value_embed × 3] for win/draw/loss logits.
    Wdl(ParamId),
    /// Reward heads (q and short-term): scalar reward, optional categorical
    /// logits, scalar error estimate.
    Scalar {
        reward: ParamId,
        cat: Option<ParamId>,
        error: ParamId,
    },
}

#[derive(Debug, Clone)]
pub struct ValueHeadParams {
    pub proj: ParamId,
    pub proj_bias: ParamId,
    pub embed: ParamId,
    pub embed_bias: ParamId,
    pub outputs: ValueOutputs,
}

/// All 4352 move logits: base[from, to] = Q_from·K_to / sqrt(d_model) for
/// the square-pair block, and base + promo_bias[to_file, piece] for the 256
/// promotion entries. The soft projection repeats the construction with its
/// own weights on the shared embedding.
pub fn policy_head<T: Element>(
    g: &mut Graph<T>,
    tokens: ValueId,
    p: &PolicyHeadParams,
    d_model: usize,
) -> Result<PolicyHeadOut, AdError> {
    let dense = g.param(p.dense);
    let dense_bias = g.param(p.dense_bias);
    let pre = g.linear(tokens, dense, Some(dense_bias))?;
    let emb = g.mish(pre);
    let logits = project_moves(g, emb, p.wq_pol, p.wk_pol, p.promo, d_model)?;
    let soft_logits = project_moves(g, emb, p.wq_soft, p.wk_soft, p.promo_soft, d_model)?;
    Ok(PolicyHeadOut {
        logits,
        soft_logits,
    })
}

fn project_moves<T: Element>(
    g: &mut Graph<T>,
    emb: ValueId,
    wq_id: ParamId,
    wk_id: ParamId,
    promo_id: ParamId,
    d_model: usize,
) -> Result<ValueId, AdError> {
    let wq = g.param(wq_id);
    let q = g.matmul(emb, wq)?;
    let wk = g.param(wk_id);
    let k = g.matmul(emb, wk)?;
    let e = g.matmul_nt(q, k)?;
    let base = g.scale(e, 1.0 / (d_model as f64).sqrt());
    // Promotion biases read K at the eight promotion-rank squares.
    let k_promo = g.slice_rows(k, 56, 8)?;
    let promo = g.param(promo_id);
    let promo_bias = g.matmul(k_promo, promo)?;
    assemble_policy(g, base, promo_bias)
}

/// Promotion index arithmetic: entry 4096 + (from_file·8 + to_file)·4 +
/// piece pairs the traversal's base logit with its promotion bias.
fn assemble_policy<T: Element>(
    g: &mut Graph<T>,
    base: ValueId,
    promo_bias: ValueId,
) -> Result<ValueId, AdError> {
    let bv = g.value(base);
    let pv = g.value(promo_bias);
    if bv.shape() != [64, 64] || pv.shape() != [8, 4] {
        return Err(AdError::Shape {
            op: "assemble_policy",
            lhs: bv.shape().to_vec(),
            rhs: pv.shape().to_vec(),
        });
    }
    let mut out = vec![T::ZERO; POLICY_SIZE];
    out[..4096].copy_from_slice(bv.data());
    for ff in 0..8 {
        for tf in 0..8 {
            let traversal = bv.data()[(48 + ff) * 64 + 56 + tf];
            for piece in 0..4 {
                out[4096 + (ff * 8 + tf) * 4 + piece] = traversal + pv.data()[tf * 4 + piece];
            }
        }
    }
    Ok(g.custom(
        Tensor::from_vec(&[POLICY_SIZE], out),
        vec![base, promo_bias],
        Box::new(PolicyAssembleOp),
    ))
}

struct PolicyAssembleOp;

impl<T: Element> OpNode<T> for PolicyAssembleOp {
    fn backward(&self, _out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        {
            let dbase = sink.grad(0);
            let dd = dbase.data_mut();
            for (d, &gv) in dd.iter_mut().zip(&g.data()[..4096]) {
                *d += gv;
            }
            for ff in 0..8 {
                for tf in 0..8 {
                    for piece in 0..4 {
                        dd[(48 + ff) * 64 + 56 + tf] +=
                            g.data()[4096 + (ff * 8 + tf) * 4 + piece];
                    }
                }
            }
        }
        let dpb = sink.grad(1);
        let pd = dpb.data_mut();
        for ff in 0..8 {
            for tf in 0..8 {
                for piece in 0..4 {
                    pd[tf * 4 + piece] += g.data()[4096 + (ff * 8 + tf) * 4 + piece];
                }
            }
        }
    }
}

/// Value IDs produced by one value head.
#[derive(Debug)]
pub struct ValueHeadOut {
    /// Wdl logits [1×3] for the result head, the reward scalar otherwise.
    pub primary: ValueId,
    pub cat: Option<ValueId>,
    pub err: Option<ValueId>,
}

pub fn value_head<T: Element>(
    g: &mut Graph<T>,
    tokens: ValueId,
    p: &ValueHeadParams,
) -> Result<ValueHeadOut, AdError> {
    let w = g.param(p.proj);
    let b = g.param(p.proj_bias);
    let pre = g.linear(tokens, w, Some(b))?;
    let proj = g.mish(pre);
    let flat_len = g.value(proj).len();
    let flat = g.reshape(proj, &[1, flat_len])?;
    let we = g.param(p.embed);
    let be = g.param(p.embed_bias);
    let pre2 = g.linear(flat, we, Some(be))?;
    let emb = g.mish(pre2);
    match &p.outputs {
        ValueOutputs::Wdl(w3) => {
            let wv = g.param(*w3);
            let out = g.matmul(emb, wv)?;
            Ok(ValueHeadOut {
                primary: out,
                cat: None,
                err: None,
            })
        }
        ValueOutputs::Scalar { reward, cat, error } => {
            let wr = g.param(*reward);
            let r = g.matmul(emb, wr)?;
            let c = match cat {
                Some(id) => {
                    let wc = g.param(*id);
                    Some(g.matmul(emb, wc)?)
                }
                None => None,
            };
            let wechk = g.param(*error);
            let e = g.matmul(emb, wechk)?;
            Ok(ValueHeadOut {
                primary: r,
                cat: c,
                err: Some(e),
            })
        }
    }
}
