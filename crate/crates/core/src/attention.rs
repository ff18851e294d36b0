//! Multi-head self-attention over the 64 board tokens, with the three
//! position representations, and the Post-LN/DeepNorm encoder layer.
//!
//! Everything here builds onto a [`Graph`]: the vanilla path is composed
//! from tape primitives, while the relative-bias gather and the two Shaw
//! terms are custom ops with hand-written backward passes (validated by the
//! gradient checker).

use crate::autodiff::{AdError, Element, GradSink, Graph, OpNode, ParamId, Tensor, ValueId};
use serde::{Deserialize, Serialize};

/// Which position representation a model carries. Fixed at construction and
/// serialized in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosRepKind {
    Absolute,
    RelativeBias,
    Shaw,
}

impl PosRepKind {
    pub const ALL: [PosRepKind; 3] = [
        PosRepKind::Absolute,
        PosRepKind::RelativeBias,
        PosRepKind::Shaw,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PosRepKind::Absolute => "absolute",
            PosRepKind::RelativeBias => "relative-bias",
            PosRepKind::Shaw => "shaw",
        }
    }
}

impl std::fmt::Display for PosRepKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PosRepKind {
    type Err = String;

    fn from_str(s: &str) -> Result<PosRepKind, String> {
        match s {
            "absolute" => Ok(PosRepKind::Absolute),
            "relative-bias" => Ok(PosRepKind::RelativeBias),
            "shaw" => Ok(PosRepKind::Shaw),
            other => Err(format!(
                "unknown position representation {other:?} (expected absolute, relative-bias or shaw)"
            )),
        }
    }
}

/// Per-layer position tables. Absolute embeddings live at the model level
/// (added once before layer 1), so that variant carries nothing here.
#[derive(Debug, Clone)]
pub enum PosRepTables {
    /// No per-layer tables; attention is the vanilla bitwise path.
    Absolute,
    /// b: [H × 15 × 15], indexed by (Δfile+7, Δrank+7).
    RelativeBias { table: ParamId },
    /// aQ, aK, aV: each [64 × 64 × d_head], shared across heads.
    Shaw {
        aq: ParamId,
        ak: ParamId,
        av: ParamId,
    },
}

/// Parameter handles for one attention sublayer. QKV projections carry no
/// bias; the output projection does.
#[derive(Debug, Clone)]
pub struct AttentionLayerParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub wo_bias: ParamId,
    pub heads: usize,
    pub tables: PosRepTables,
}

/// Parameter handles for a full encoder layer:
/// h = rmsnorm(α·x + attend(x)); y = rmsnorm(α·h + ff(h)).
#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub attn: AttentionLayerParams,
    pub ff1: ParamId,
    pub ff1_bias: ParamId,
    pub ff2: ParamId,
    pub ff2_bias: ParamId,
    pub norm1: ParamId,
    pub norm2: ParamId,
    /// DeepNorm residual gain.
    pub alpha: f64,
}

/// DeepNorm residual gain for an encoder-only stack of `layers` layers:
/// (2N)^(1/4). Computed as nested square roots so perfect fourth powers
/// come out exact.
pub fn deepnorm_alpha(layers: usize) -> f64 {
    (2.0 * layers as f64).sqrt().sqrt()
}

/// DeepNorm initialization scale for wv, wo and both feedforward matrices:
/// (8N)^(-1/4).
pub fn deepnorm_beta(layers: usize) -> f64 {
    1.0 / (8.0 * layers as f64).sqrt().sqrt()
}

/// Attention sublayer output: the projected values and the per-head
/// post-softmax weights ([tokens × tokens] each) for introspection.
#[derive(Debug)]
pub struct AttendOutput {
    pub z: ValueId,
    pub weights: Vec<ValueId>,
}

/// Add the absolute position table to the token embeddings. Applied once
/// per forward, before the first encoder layer.
pub fn apply_absolute<T: Element>(
    g: &mut Graph<T>,
    x: ValueId,
    table: ParamId,
) -> Result<ValueId, AdError> {
    let t = g.param(table);
    g.add(x, t)
}

/// Multi-head self-attention. Dispatches on the position tables: vanilla
/// for absolute (the table is applied elsewhere), logit augmentation for
/// relative-bias, and the Shaw score/value forms.
pub fn attend<T: Element>(
    g: &mut Graph<T>,
    x: ValueId,
    p: &AttentionLayerParams,
) -> Result<AttendOutput, AdError> {
    let xv = g.value(x);
    if !xv.all_finite() {
        return Err(AdError::NonFinite {
            context: "attend input".to_string(),
        });
    }
    let n = xv.rows();
    let d_model = xv.cols();
    assert!(
        d_model % p.heads == 0,
        "d_model {d_model} not divisible by {} heads",
        p.heads
    );
    assert!(n <= 64, "at most 64 board tokens, got {n}");
    let dh = d_model / p.heads;
    let inv_scale = 1.0 / (dh as f64).sqrt();

    let (wq, wk, wv) = (g.param(p.wq), g.param(p.wk), g.param(p.wv));
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;

    let mut outs = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let logits = match &p.tables {
            PosRepTables::Absolute => {
                let e = g.matmul_nt(qh, kh)?;
                g.scale(e, inv_scale)
            }
            PosRepTables::RelativeBias { table } => {
                let e = g.matmul_nt(qh, kh)?;
                let scaled = g.scale(e, inv_scale);
                let bias = relbias_expand(g, *table, h, n)?;
                g.add(scaled, bias)?
            }
            PosRepTables::Shaw { aq, ak, .. } => shaw_scores(g, qh, kh, *aq, *ak, inv_scale)?,
        };
        let alpha = g.softmax_masked(logits, None)?;
        let zh = match &p.tables {
            PosRepTables::Shaw { av, .. } => shaw_values(g, alpha, vh, *av)?,
            _ => g.matmul(alpha, vh)?,
        };
        outs.push(zh);
        weights.push(alpha);
    }
    let concat = g.concat_cols(&outs)?;
    let wo = g.param(p.wo);
    let wo_bias = g.param(p.wo_bias);
    let z = g.linear(concat, wo, Some(wo_bias))?;
    Ok(AttendOutput { z, weights })
}

/// Shaw-table attention. Same as [`attend`]; the name records that the
/// params must carry Shaw tables.
pub fn attend_shaw<T: Element>(
    g: &mut Graph<T>,
    x: ValueId,
    p: &AttentionLayerParams,
) -> Result<AttendOutput, AdError> {
    assert!(
        matches!(p.tables, PosRepTables::Shaw { .. }),
        "attend_shaw requires Shaw tables"
    );
    attend(g, x, p)
}

/// Add the relative bias to each head's logits: e'_ij = e_ij + b[h, Δfile+7,
/// Δrank+7]. `heads[h]` must be [n×n].
pub fn augment_logits_relbias<T: Element>(
    g: &mut Graph<T>,
    heads: &[ValueId],
    table: ParamId,
) -> Result<Vec<ValueId>, AdError> {
    let mut out = Vec::with_capacity(heads.len());
    for (h, &e) in heads.iter().enumerate() {
        let n = g.value(e).rows();
        let bias = relbias_expand(g, table, h, n)?;
        out.push(g.add(e, bias)?);
    }
    Ok(out)
}

/// One encoder layer. Returns the layer output and the attention weights.
pub fn encoder_layer<T: Element>(
    g: &mut Graph<T>,
    x: ValueId,
    p: &EncoderLayerParams,
) -> Result<(ValueId, Vec<ValueId>), AdError> {
    let att = attend(g, x, &p.attn)?;
    let sx = g.scale(x, p.alpha);
    let pre1 = g.add(sx, att.z)?;
    let n1 = g.param(p.norm1);
    let h = g.rmsnorm(pre1, n1)?;

    let (ff1, ff1_bias) = (g.param(p.ff1), g.param(p.ff1_bias));
    let (ff2, ff2_bias) = (g.param(p.ff2), g.param(p.ff2_bias));
    let inner = g.linear(h, ff1, Some(ff1_bias))?;
    let act = g.mish(inner);
    let ff = g.linear(act, ff2, Some(ff2_bias))?;
    let sh = g.scale(h, p.alpha);
    let pre2 = g.add(sh, ff)?;
    let n2 = g.param(p.norm2);
    let y = g.rmsnorm(pre2, n2)?;
    Ok((y, att.weights))
}

/// Bias cell for a (query i, key j) square pair: displacements are shifted
/// by +7 into [0, 14].
#[inline]
fn relbias_cell(head: usize, i: usize, j: usize) -> usize {
    let df = (j % 8) as isize - (i % 8) as isize;
    let dr = (j / 8) as isize - (i / 8) as isize;
    head * 225 + (df + 7) as usize * 15 + (dr + 7) as usize
}

/// Expand one head's 15×15 displacement table into an [n×n] logit bias.
fn relbias_expand<T: Element>(
    g: &mut Graph<T>,
    table: ParamId,
    head: usize,
    n: usize,
) -> Result<ValueId, AdError> {
    let t = g.param(table);
    let tv = g.value(t);
    let heads = tv.shape()[0];
    if tv.shape().len() != 3 || tv.shape()[1] != 15 || tv.shape()[2] != 15 || head >= heads {
        return Err(AdError::Shape {
            op: "relbias_expand",
            lhs: tv.shape().to_vec(),
            rhs: vec![head, 15, 15],
        });
    }
    let mut out = Tensor::zeros(&[n, n]);
    {
        let src = tv.data();
        let dst = out.data_mut();
        for i in 0..n {
            for j in 0..n {
                dst[i * n + j] = src[relbias_cell(head, i, j)];
            }
        }
    }
    Ok(g.custom(out, vec![t], Box::new(RelBiasExpandOp { head, n })))
}

struct RelBiasExpandOp {
    head: usize,
    n: usize,
}

impl<T: Element> OpNode<T> for RelBiasExpandOp {
    fn backward(&self, _out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let dt = sink.grad(0);
        let dd = dt.data_mut();
        for i in 0..self.n {
            for j in 0..self.n {
                dd[relbias_cell(self.head, i, j)] += g.data()[i * self.n + j];
            }
        }
    }
}

/// Shaw score term: e_ij = (q_i + aQ[i,j])·(k_j + aK[i,j]) / sqrt(d_head).
/// Summation order matches the plain matmul kernel so zero tables reproduce
/// vanilla attention bitwise.
fn shaw_scores<T: Element>(
    g: &mut Graph<T>,
    qh: ValueId,
    kh: ValueId,
    aq: ParamId,
    ak: ParamId,
    inv_scale: f64,
) -> Result<ValueId, AdError> {
    let aqv = g.param(aq);
    let akv = g.param(ak);
    let (q, k) = (g.value(qh).clone(), g.value(kh).clone());
    let (aqt, akt) = (g.value(aqv).clone(), g.value(akv).clone());
    let n = q.rows();
    let dh = q.cols();
    if aqt.shape() != [n, n, dh] || akt.shape() != [n, n, dh] {
        return Err(AdError::Shape {
            op: "shaw_scores",
            lhs: aqt.shape().to_vec(),
            rhs: vec![n, n, dh],
        });
    }
    let inv = T::from_f64(inv_scale);
    let mut e = Tensor::zeros(&[n, n]);
    {
        let (qd, kd) = (q.data(), k.data());
        let (aqd, akd) = (aqt.data(), akt.data());
        let ed = e.data_mut();
        for i in 0..n {
            for j in 0..n {
                let base = (i * n + j) * dh;
                let mut dot = T::ZERO;
                for t in 0..dh {
                    dot += (qd[i * dh + t] + aqd[base + t]) * (kd[j * dh + t] + akd[base + t]);
                }
                ed[i * n + j] = dot * inv;
            }
        }
    }
    Ok(g.custom(
        e,
        vec![qh, kh, aqv, akv],
        Box::new(ShawScoresOp {
            q,
            k,
            aq: aqt,
            ak: akt,
            inv,
        }),
    ))
}

struct ShawScoresOp<T> {
    q: Tensor<T>,
    k: Tensor<T>,
    aq: Tensor<T>,
    ak: Tensor<T>,
    inv: T,
}

impl<T: Element> OpNode<T> for ShawScoresOp<T> {
    fn backward(&self, _out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let n = self.q.rows();
        let dh = self.q.cols();
        let (qd, kd) = (self.q.data(), self.k.data());
        let (aqd, akd) = (self.aq.data(), self.ak.data());
        let mut dq = vec![T::ZERO; n * dh];
        let mut dk = vec![T::ZERO; n * dh];
        let mut daq = vec![T::ZERO; n * n * dh];
        let mut dak = vec![T::ZERO; n * n * dh];
        for i in 0..n {
            for j in 0..n {
                let gij = g.data()[i * n + j] * self.inv;
                let base = (i * n + j) * dh;
                for t in 0..dh {
                    let kk = kd[j * dh + t] + akd[base + t];
                    let qq = qd[i * dh + t] + aqd[base + t];
                    dq[i * dh + t] += gij * kk;
                    daq[base + t] += gij * kk;
                    dk[j * dh + t] += gij * qq;
                    dak[base + t] += gij * qq;
                }
            }
        }
        sink.add(0, &Tensor::from_vec(&[n, dh], dq));
        sink.add(1, &Tensor::from_vec(&[n, dh], dk));
        sink.add(2, &Tensor::from_vec(&[n, n, dh], daq));
        sink.add(3, &Tensor::from_vec(&[n, n, dh], dak));
    }

    fn flops(&self) -> u64 {
        let n = self.q.rows() as u64;
        let dh = self.q.cols() as u64;
        2 * n * n * dh
    }
}

/// Shaw value term: z_i = Σ_j α_ij (v_j + aV[i,j]). Accumulation order
/// matches the plain matmul kernel.
fn shaw_values<T: Element>(
    g: &mut Graph<T>,
    alpha: ValueId,
    vh: ValueId,
    av: ParamId,
) -> Result<ValueId, AdError> {
    let avv = g.param(av);
    let (a, v) = (g.value(alpha).clone(), g.value(vh).clone());
    let avt = g.value(avv).clone();
    let n = a.rows();
    let dh = v.cols();
    if avt.shape() != [n, n, dh] {
        return Err(AdError::Shape {
            op: "shaw_values",
            lhs: avt.shape().to_vec(),
            rhs: vec![n, n, dh],
        });
    }
    let mut z = Tensor::zeros(&[n, dh]);
    {
        let (ad, vd, avd) = (a.data(), v.data(), avt.data());
        let zd = z.data_mut();
        for i in 0..n {
            for j in 0..n {
                let aij = ad[i * n + j];
                let base = (i * n + j) * dh;
                for t in 0..dh {
                    zd[i * dh + t] += aij * (vd[j * dh + t] + avd[base + t]);
                }
            }
        }
    }
    Ok(g.custom(
        z,
        vec![alpha, vh, avv],
        Box::new(ShawValuesOp { a, v, av: avt }),
    ))
}

struct ShawValuesOp<T> {
    a: Tensor<T>,
    v: Tensor<T>,
    av: Tensor<T>,
}

impl<T: Element> OpNode<T> for ShawValuesOp<T> {
    fn backward(&self, _out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let n = self.a.rows();
        let dh = self.v.cols();
        let (ad, vd, avd) = (self.a.data(), self.v.data(), self.av.data());
        let mut da = vec![T::ZERO; n * n];
        let mut dv = vec![T::ZERO; n * dh];
        let mut dav = vec![T::ZERO; n * n * dh];
        for i in 0..n {
            for j in 0..n {
                let aij = ad[i * n + j];
                let base = (i * n + j) * dh;
                let mut acc = T::ZERO;
                for t in 0..dh {
                    let git = g.data()[i * dh + t];
                    acc += git * (vd[j * dh + t] + avd[base + t]);
                    dv[j * dh + t] += git * aij;
                    dav[base + t] += git * aij;
                }
                da[i * n + j] += acc;
            }
        }
        sink.add(0, &Tensor::from_vec(&[n, n], da));
        sink.add(1, &Tensor::from_vec(&[n, dh], dv));
        sink.add(2, &Tensor::from_vec(&[n, n, dh], dav));
    }

    fn flops(&self) -> u64 {
        let n = self.a.rows() as u64;
        let dh = self.v.cols() as u64;
        2 * n * n * dh
    }
}
