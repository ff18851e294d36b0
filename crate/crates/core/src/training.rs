//! Optimization: Nadam with gradient clipping, a piecewise-constant
//! learning-rate schedule, stochastic weight averaging, the training
//! loop, and held-out evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdError, Grads, Graph, ParamId, ParamSet, Tensor};
use crate::chess::HistoryWindow;
use crate::encoding::{encode_position, legal_mask, LegalMask};
use crate::losses::{total_loss, LossError, LossWeights, TargetSet};
use crate::model::{build_forward, save_checkpoint, CheckpointError, Model};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const NADAM_EPS: f64 = 1e-7;
pub const MAX_GRAD_NORM: f64 = 10.0;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite gradient in {0}")]
    NonFiniteGrad(String),
    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: u64, breakdown: String },
    #[error("swa finalize with zero snapshots")]
    EmptySwa,
    #[error("training stream exhausted at step {0}")]
    StreamExhausted(u64),
    #[error("schedule thresholds must be strictly increasing")]
    BadSchedule,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Scale all gradients by max_norm / norm when the global L2 norm
/// exceeds max_norm. Returns the pre-clip norm.
pub fn clip_gradients(
    grads: &mut Grads<f32>,
    params: &ParamSet<f32>,
    max_norm: f64,
) -> Result<f64, TrainError> {
    for (id, name, _) in params.iter() {
        if let Some(g) = grads.get(id) {
            if !g.all_finite() {
                return Err(TrainError::NonFiniteGrad(name.to_string()));
            }
        }
    }
    let norm = grads.global_l2_norm();
    if norm > max_norm {
        grads.scale((max_norm / norm) as f32);
    }
    Ok(norm)
}

/// Nadam first and second moments, one buffer per parameter, plus the
/// step counter. Moments start at zero and t at zero.
pub struct NadamState {
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: u64,
}

impl NadamState {
    pub fn new(params: &ParamSet<f32>) -> NadamState {
        let zeros: Vec<Tensor<f32>> = params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        NadamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Nadam update:
///   t <- t + 1
///   m <- b1 m + (1 - b1) g        v <- b2 v + (1 - b2) g^2
///   m_hat = m / (1 - b1^(t+1))    v_hat = v / (1 - b2^t)
///   theta <- theta - lr (b1 m_hat + (1 - b1) g / (1 - b1^t))
///                     / (sqrt(v_hat) + eps)
/// Missing gradients are zeros. Per-element math runs in f64; the
/// moments are stored back at parameter precision.
pub fn nadam_step(state: &mut NadamState, params: &mut ParamSet<f32>, grads: &Grads<f32>, lr: f64) {
    state.t += 1;
    let t = state.t as i32;
    let bc_m = 1.0 - BETA1.powi(t + 1);
    let bc_g = 1.0 - BETA1.powi(t);
    let bc_v = 1.0 - BETA2.powi(t);
    for i in 0..params.len() {
        let id = ParamId(i);
        let g = grads.get(id);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let theta = params.value_mut(id).data_mut();
        for j in 0..theta.len() {
            let gj = g.map_or(0.0, |t| t.data()[j] as f64);
            let mj = BETA1 * m[j] as f64 + (1.0 - BETA1) * gj;
            let vj = BETA2 * v[j] as f64 + (1.0 - BETA2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (BETA1 * mj / bc_m + (1.0 - BETA1) * gj / bc_g)
                / ((vj / bc_v).sqrt() + NADAM_EPS);
            theta[j] = (theta[j] as f64 - update) as f32;
        }
    }
}

/// Piecewise-constant learning rate: each (threshold, rate) point takes
/// effect at its threshold and holds until the next one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub points: Vec<(u64, f64)>,
}

impl Schedule {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.points.is_empty() {
            return Err(TrainError::BadSchedule);
        }
        for w in self.points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(TrainError::BadSchedule);
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let mut rate = self.points[0].1;
        for &(threshold, r) in &self.points {
            if step >= threshold {
                rate = r;
            } else {
                break;
            }
        }
        rate
    }

    /// CF-6M: 5e-4, then 1.58e-4 at 1.6M steps and 5e-5 at 1.8M.
    pub fn cf_6m() -> Schedule {
        Schedule {
            points: vec![(0, 5e-4), (1_600_000, 1.58e-4), (1_800_000, 5e-5)],
        }
    }

    /// CF-240M: 1e-3, then 3e-4 at 3.2M steps and 1e-4 at 3.6M.
    pub fn cf_240m() -> Schedule {
        Schedule {
            points: vec![(0, 1e-3), (3_200_000, 3e-4), (3_600_000, 1e-4)],
        }
    }

    /// The CF-6M shape compressed onto a short run: drops at 80% and 90%
    /// of the step budget.
    pub fn desk(steps: u64) -> Schedule {
        assert!(steps >= 10, "schedule needs at least 10 steps");
        Schedule {
            points: vec![
                (0, 5e-4),
                (steps * 8 / 10, 1.58e-4),
                (steps * 9 / 10, 5e-5),
            ],
        }
    }
}

/// Running sum of parameter snapshots in f64, finalized to their
/// arithmetic mean.
pub struct SwaState {
    sums: Vec<Tensor<f64>>,
    count: u64,
}

impl SwaState {
    pub fn new(params: &ParamSet<f32>) -> SwaState {
        SwaState {
            sums: params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect(),
            count: 0,
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn accumulate(&mut self, params: &ParamSet<f32>) {
        for (i, (_, _, t)) in params.iter().enumerate() {
            self.sums[i].add_assign(&t.convert::<f64>());
        }
        self.count += 1;
    }

    /// Mean of the accumulated snapshots on the base model's skeleton.
    pub fn finalize(&self, base: &Model) -> Result<Model, TrainError> {
        if self.count == 0 {
            return Err(TrainError::EmptySwa);
        }
        let mut params = base.params.clone();
        let n = self.count as f64;
        for (i, sum) in self.sums.iter().enumerate() {
            let mean: Vec<f32> = sum.data().iter().map(|&s| (s / n) as f32).collect();
            *params.value_mut(ParamId(i)) = Tensor::from_vec(sum.shape(), mean);
        }
        Ok(Model {
            config: base.config.clone(),
            params,
            ids: base.ids.clone(),
        })
    }
}

/// One JSONL metrics row. Steps are 0-based; the row for step s reports
/// the loss of the batch consumed at s (parameters before the update).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    /// Fraction of positions where the masked policy argmax matches the
    /// target argmax, ties to the lowest index on both sides.
    pub policy_accuracy: f64,
    pub policy_loss: f64,
    pub wdl_loss: f64,
    pub q_l2_loss: f64,
    /// All weighted loss terms, averaged per position.
    pub terms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Total optimization steps (0-based exclusive end).
    pub steps: u64,
    /// Steps already completed; training resumes here.
    pub start_step: u64,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub weights: LossWeights,
    pub max_grad_norm: f64,
    /// First 1-based step count eligible for an SWA snapshot.
    pub swa_start: u64,
    /// Snapshot every this many steps (0 disables SWA).
    pub swa_interval: u64,
    /// Evaluate on the held-out set every this many steps (0 disables).
    pub eval_interval: u64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_interval: u64,
}

impl TrainConfig {
    /// Desk-scale defaults: batch 256 for 20k steps, SWA over the last
    /// ten 500-step checkpoints.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            steps: 20_000,
            start_step: 0,
            batch_size: 256,
            schedule: Schedule::desk(20_000),
            weights: LossWeights::default(),
            max_grad_norm: MAX_GRAD_NORM,
            swa_start: 15_500,
            swa_interval: 500,
            eval_interval: 500,
            checkpoint_interval: 500,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutput {
    /// SWA mean model, when any snapshots were taken.
    pub swa: Option<Model>,
    pub metrics: Vec<MetricsRow>,
}

fn position_loss(
    model: &Model,
    window: &HistoryWindow,
    target: &TargetSet,
    weights: &LossWeights,
    grads: Option<&mut Grads<f32>>,
) -> Result<(f64, Vec<(&'static str, f64)>), TrainError> {
    let enc = encode_position(window);
    let mask = legal_mask(window.current());
    let mut g: Graph<f32> = Graph::new(Arc::new(model.params.clone()));
    let f = build_forward(&mut g, &model.config, &model.ids, &enc, false)?;
    let lg = total_loss(&mut g, &f, target, &mask, weights)?;
    let (total, terms) = lg.read(&g);
    if let Some(grads) = grads {
        g.backward(lg.total, grads);
    }
    Ok((total, terms))
}

/// Run the training loop: per step, average gradients over a batch from
/// the stream, clip, and apply Nadam at the scheduled rate. Held-out
/// evaluation, checkpointing, and SWA snapshots happen at their
/// configured intervals. Deterministic for a fixed stream and seed.
pub fn train<S>(
    model: &mut Model,
    stream: &mut S,
    test: &[(HistoryWindow, TargetSet)],
    cfg: &TrainConfig,
    mut jsonl: Option<&mut dyn Write>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutput, TrainError>
where
    S: Iterator<Item = (HistoryWindow, TargetSet)>,
{
    cfg.schedule.validate()?;
    assert!(cfg.batch_size >= 1, "batch size must be positive");
    let mut nadam = NadamState::new(&model.params);
    let mut swa = SwaState::new(&model.params);
    let mut metrics = Vec::new();
    for step in cfg.start_step..cfg.steps {
        let lr = cfg.schedule.lr_at(step);
        let mut grads = Grads::new(&model.params);
        let mut loss_acc = 0.0f64;
        let mut term_acc: BTreeMap<String, f64> = BTreeMap::new();
        for _ in 0..cfg.batch_size {
            let (window, target) = stream
                .next()
                .ok_or(TrainError::StreamExhausted(step))?;
            let (total, terms) =
                position_loss(model, &window, &target, &cfg.weights, Some(&mut grads)).map_err(
                    |e| match e {
                        TrainError::Ad(err) => TrainError::NonFiniteLoss {
                            step,
                            breakdown: err.to_string(),
                        },
                        other => other,
                    },
                )?;
            if !total.is_finite() {
                let breakdown: Vec<String> =
                    terms.iter().map(|(k, v)| format!("{k}={v}")).collect();
                return Err(TrainError::NonFiniteLoss {
                    step,
                    breakdown: breakdown.join(" "),
                });
            }
            loss_acc += total;
            for (k, v) in terms {
                *term_acc.entry(k.to_string()).or_insert(0.0) += v;
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        grads.scale(inv as f32);
        let loss = loss_acc * inv;
        for v in term_acc.values_mut() {
            *v *= inv;
        }
        let grad_norm = clip_gradients(&mut grads, &model.params, cfg.max_grad_norm)?;
        nadam_step(&mut nadam, &mut model.params, &grads, lr);

        let done = step + 1;
        let at = |interval: u64| interval > 0 && done % interval == 0;
        let policy_accuracy = if !test.is_empty() && (at(cfg.eval_interval) || done == cfg.steps) {
            Some(evaluate(model, test)?.policy_accuracy)
        } else {
            None
        };
        let row = MetricsRow {
            step,
            lr,
            loss,
            terms: term_acc,
            grad_norm,
            policy_accuracy,
        };
        if let Some(w) = jsonl.as_deref_mut() {
            serde_json::to_writer(&mut *w, &row).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        metrics.push(row);
        if at(cfg.swa_interval) && done >= cfg.swa_start {
            swa.accumulate(&model.params);
        }
        if let Some(dir) = checkpoint_dir {
            if at(cfg.checkpoint_interval) {
                save_checkpoint(model, &dir.join(format!("step-{done:06}.cfck")))?;
            }
        }
    }
    let swa_model = if swa.count() > 0 {
        Some(swa.finalize(model)?)
    } else {
        None
    };
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(model, &dir.join("final.cfck"))?;
        if let Some(avg) = &swa_model {
            save_checkpoint(avg, &dir.join("swa.cfck"))?;
        }
    }
    Ok(TrainOutput {
        swa: swa_model,
        metrics,
    })
}

pub(crate) fn argmax_masked(logits: &[f32], mask: &LegalMask) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for idx in mask.indices() {
        let i = idx.index();
        let v = logits[i];
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

fn argmax_target(pi: &[(crate::encoding::PolicyIndex, f32)]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for &(idx, p) in pi {
        let i = idx.index();
        let better = match best {
            None => true,
            Some((bi, bp)) => p > bp || (p == bp && i < bi),
        };
        if better {
            best = Some((i, p));
        }
    }
    best.map(|(i, _)| i)
}

/// Held-out metrics with the standard loss weights, averaged per
/// position. Runs pure forward passes: parameters are untouched.
pub fn evaluate(
    model: &Model,
    test: &[(HistoryWindow, TargetSet)],
) -> Result<EvalMetrics, TrainError> {
    let weights = LossWeights::default();
    let mut terms: BTreeMap<String, f64> = BTreeMap::new();
    let mut hits = 0usize;
    for (window, target) in test {
        let enc = encode_position(window);
        let mask = legal_mask(window.current());
        let mut g: Graph<f32> = Graph::new(Arc::new(model.params.clone()));
        let f = build_forward(&mut g, &model.config, &model.ids, &enc, false)?;
        let lg = total_loss(&mut g, &f, target, &mask, &weights)?;
        let (_, row) = lg.read(&g);
        for (k, v) in row {
            *terms.entry(k.to_string()).or_insert(0.0) += v;
        }
        let logits = g.value(f.policy_logits);
        if argmax_masked(logits.data(), &mask) == argmax_target(&target.pi) {
            hits += 1;
        }
    }
    let n = test.len().max(1) as f64;
    for v in terms.values_mut() {
        *v /= n;
    }
    let pick = |k: &str| terms.get(k).copied().unwrap_or(0.0);
    Ok(EvalMetrics {
        policy_accuracy: if test.is_empty() {
            0.0
        } else {
            hits as f64 / test.len() as f64
        },
        policy_loss: pick("policy"),
        wdl_loss: pick("wdl"),
        q_l2_loss: pick("q_l2"),
        terms,
    })
}
