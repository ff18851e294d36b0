//! The six training losses: policy cross-entropy, temperature-softened
//! policy cross-entropy, win/draw/loss cross-entropy, and L2 +
//! categorical + error terms for each of the q and short-term heads. The
//! error term sees the reward prediction through a detach, so its gradient
//! reaches the trunk only via the error estimate.

use crate::autodiff::{AdError, Element, Graph, Tensor, ValueId};
use crate::encoding::{LegalMask, PolicyIndex, POLICY_SIZE};
use crate::model::ForwardIds;

#[derive(Debug, Clone)]
pub struct LossWeights {
    pub c_pol: f64,
    pub c_softpol: f64,
    pub soft_temperature: f64,
    pub c_value_wdl: f64,
    pub c_value_l2: f64,
    pub c_value_cat: f64,
    pub c_value_error: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            c_pol: 1.0,
            c_softpol: 8.0,
            soft_temperature: 4.0,
            c_value_wdl: 1.0,
            c_value_l2: 1.0,
            c_value_cat: 0.1,
            c_value_error: 1.0,
        }
    }
}

/// Per-position training targets, all mover-perspective.
#[derive(Debug, Clone)]
pub struct TargetSet {
    /// Sparse policy distribution over legal indices.
    pub pi: Vec<(PolicyIndex, f32)>,
    /// One-hot win/draw/loss.
    pub result: [f32; 3],
    /// Final game reward in [-1, 1].
    pub q: f32,
    /// Short-term (exponentially discounted) reward in [-1, 1].
    pub q_st: f32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("target reward {0} outside [-1, 1]")]
    TargetRange(f64),
    #[error("policy target index {0} is not legal")]
    TargetOffMask(usize),
    #[error("policy target sums to {0}, not a distribution")]
    NotADistribution(f64),
    #[error("result target {0:?} is not one-hot")]
    BadResult([f32; 3]),
    #[error(transparent)]
    Ad(#[from] AdError),
}

impl TargetSet {
    pub fn validate(&self, mask: &LegalMask) -> Result<(), LossError> {
        let mut sum = 0.0f64;
        for &(idx, p) in &self.pi {
            if !mask.get(idx.index()) {
                return Err(LossError::TargetOffMask(idx.index()));
            }
            if p < 0.0 {
                return Err(LossError::NotADistribution(p as f64));
            }
            sum += p as f64;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(LossError::NotADistribution(sum));
        }
        let ones = self.result.iter().filter(|&&v| v == 1.0).count();
        let zeros = self.result.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != 2 {
            return Err(LossError::BadResult(self.result));
        }
        for q in [self.q, self.q_st] {
            if !(-1.0..=1.0).contains(&q) {
                return Err(LossError::TargetRange(q as f64));
            }
        }
        Ok(())
    }
}

/// Raise the distribution to the power 1/T and renormalize over its
/// support. Zero entries stay zero; ordering is preserved.
pub fn soften_policy(pi: &[(PolicyIndex, f32)], temperature: f64) -> Vec<(PolicyIndex, f32)> {
    let inv_t = 1.0 / temperature;
    let powered: Vec<(PolicyIndex, f64)> = pi
        .iter()
        .map(|&(i, p)| (i, (p as f64).powf(inv_t)))
        .collect();
    let z: f64 = powered.iter().map(|&(_, v)| v).sum();
    powered
        .into_iter()
        .map(|(i, v)| (i, (v / z) as f32))
        .collect()
}

/// Uniform bucket over [-1, 1]: min(K-1, floor((q+1)/2 · K)).
pub fn bucket(q: f64, k: usize) -> Result<usize, LossError> {
    if !(-1.0..=1.0).contains(&q) {
        return Err(LossError::TargetRange(q));
    }
    let raw = ((q + 1.0) / 2.0 * k as f64).floor() as usize;
    Ok(raw.min(k - 1))
}

/// The weighted loss terms on a graph, named for the metrics stream.
#[derive(Debug)]
pub struct LossGraph {
    pub total: ValueId,
    pub terms: Vec<(&'static str, ValueId)>,
}

impl LossGraph {
    /// Read every term (and the total) off the evaluated graph.
    pub fn read<T: Element>(&self, g: &Graph<T>) -> (f64, Vec<(&'static str, f64)>) {
        let terms = self
            .terms
            .iter()
            .map(|&(name, id)| (name, g.value(id).item().to_f64()))
            .collect();
        (g.value(self.total).item().to_f64(), terms)
    }
}

fn dense_policy_target<T: Element>(pi: &[(PolicyIndex, f32)]) -> Tensor<T> {
    let mut data = vec![T::ZERO; POLICY_SIZE];
    for &(idx, p) in pi {
        data[idx.index()] += T::from_f64(p as f64);
    }
    Tensor::from_vec(&[POLICY_SIZE], data)
}

/// Weighted sum of all loss terms for one position. The categorical terms
/// appear iff the model has categorical outputs; the breakdown lists each
/// weighted term, and the total is exactly their sum.
pub fn total_loss<T: Element>(
    g: &mut Graph<T>,
    f: &ForwardIds,
    targets: &TargetSet,
    mask: &LegalMask,
    w: &LossWeights,
) -> Result<LossGraph, LossError> {
    total_loss_impl(g, f, targets, mask, w, None)
}

/// Variant for finite-difference validation. The error terms replace the
/// live detached (q − q̂)² with the given constants (computed once at the
/// unperturbed parameters), so the surrogate's true derivative equals the
/// training loss's analytic gradient. Differencing `total_loss` itself
/// would see through the detach, which is identity in the forward pass.
pub fn total_loss_frozen<T: Element>(
    g: &mut Graph<T>,
    f: &ForwardIds,
    targets: &TargetSet,
    mask: &LegalMask,
    w: &LossWeights,
    frozen_sq: [f64; 2],
) -> Result<LossGraph, LossError> {
    total_loss_impl(g, f, targets, mask, w, Some(frozen_sq))
}

fn total_loss_impl<T: Element>(
    g: &mut Graph<T>,
    f: &ForwardIds,
    targets: &TargetSet,
    mask: &LegalMask,
    w: &LossWeights,
    frozen_sq: Option<[f64; 2]>,
) -> Result<LossGraph, LossError> {
    targets.validate(mask)?;
    let mask_vec = mask.as_slice().to_vec();
    let mut terms: Vec<(&'static str, ValueId)> = Vec::new();

    let ce = g.cross_entropy(
        f.policy_logits,
        dense_policy_target(&targets.pi),
        Some(mask_vec.clone()),
    )?;
    terms.push(("policy", g.scale(ce, w.c_pol)));

    let soft_pi = soften_policy(&targets.pi, w.soft_temperature);
    let soft_ce = g.cross_entropy(
        f.soft_policy_logits,
        dense_policy_target(&soft_pi),
        Some(mask_vec),
    )?;
    terms.push(("soft_policy", g.scale(soft_ce, w.c_softpol)));

    let result = Tensor::from_vec(
        &[1, 3],
        targets.result.iter().map(|&v| T::from_f64(v as f64)).collect(),
    );
    let wdl_ce = g.cross_entropy(f.wdl_logits, result, None)?;
    terms.push(("wdl", g.scale(wdl_ce, w.c_value_wdl)));

    let heads = [
        ("q_l2", "q_cat", "q_error", f.q, f.q_cat, f.q_err, targets.q),
        (
            "st_l2",
            "st_cat",
            "st_error",
            f.st_q,
            f.st_cat,
            f.st_err,
            targets.q_st,
        ),
    ];
    for (i, (l2_name, cat_name, err_name, primary, cat, err, q_target)) in
        heads.into_iter().enumerate()
    {
        let q_hat = g.reshape(primary, &[1])?;
        let q_in = g.input(Tensor::from_vec(&[1], vec![T::from_f64(q_target as f64)]));
        let l2 = g.mse(q_in, q_hat)?;
        terms.push((l2_name, g.scale(l2, w.c_value_l2)));

        if let Some(cat_id) = cat {
            let k = g.value(cat_id).cols();
            let mut one_hot = vec![T::ZERO; k];
            one_hot[bucket(q_target as f64, k)?] = T::ONE;
            let cat_ce = g.cross_entropy(cat_id, Tensor::from_vec(&[1, k], one_hot), None)?;
            terms.push((cat_name, g.scale(cat_ce, w.c_value_cat)));
        }

        // (ê − (q − q̂)²)² with q̂ detached: the reward projection gets no
        // gradient from this term.
        let sq = match frozen_sq {
            None => {
                let detached = g.detach(primary);
                let q_hat_det = g.reshape(detached, &[1])?;
                let diff = g.sub(q_in, q_hat_det)?;
                g.mul(diff, diff)?
            }
            Some(ks) => g.input(Tensor::from_vec(&[1], vec![T::from_f64(ks[i])])),
        };
        let e_hat = g.reshape(err, &[1])?;
        let residual = g.sub(e_hat, sq)?;
        let err_loss = g.mul(residual, residual)?;
        let err_scalar = g.sum(err_loss);
        terms.push((err_name, g.scale(err_scalar, w.c_value_error)));
    }

    let mut total = terms[0].1;
    for &(_, id) in &terms[1..] {
        total = g.add(total, id)?;
    }
    Ok(LossGraph { total, terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::PosRepKind;
    use crate::autodiff::{grad_check, GradCheckOpts, Grads, ParamSet};
    use crate::model::tests_support::{startpos_inputs, tiny_config};
    use crate::model::{build_forward, Model};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn pi(entries: &[(usize, f32)]) -> Vec<(PolicyIndex, f32)> {
        entries
            .iter()
            .map(|&(i, p)| (PolicyIndex::new(i).unwrap(), p))
            .collect()
    }

    /// Hand-built head outputs: every field is a plain graph input.
    fn manual_forward<T: Element>(
        g: &mut Graph<T>,
        policy_logits: Vec<T>,
        soft_logits: Vec<T>,
        wdl: [f64; 3],
        q: f64,
        q_cat: Option<Vec<T>>,
        q_err: f64,
        st_q: f64,
        st_cat: Option<Vec<T>>,
        st_err: f64,
    ) -> ForwardIds {
        let scalar = |g: &mut Graph<T>, v: f64| {
            g.input(Tensor::from_vec(&[1, 1], vec![T::from_f64(v)]))
        };
        let catv = |g: &mut Graph<T>, c: Option<Vec<T>>| {
            c.map(|v| {
                let k = v.len();
                g.input(Tensor::from_vec(&[1, k], v))
            })
        };
        let wdl_t = Tensor::from_vec(&[1, 3], wdl.iter().map(|&v| T::from_f64(v)).collect());
        let (q_cat, st_cat) = (catv(g, q_cat), catv(g, st_cat));
        ForwardIds {
            policy_logits: g.input(Tensor::from_vec(&[POLICY_SIZE], policy_logits)),
            soft_policy_logits: g.input(Tensor::from_vec(&[POLICY_SIZE], soft_logits)),
            wdl_logits: g.input(wdl_t),
            q: scalar(g, q),
            q_cat,
            q_err: scalar(g, q_err),
            st_q: scalar(g, st_q),
            st_cat,
            st_err: scalar(g, st_err),
            attention: Vec::new(),
        }
    }

    fn empty_graph() -> Graph<f64> {
        Graph::new(Arc::new(ParamSet::new()))
    }

    #[test]
    fn soften_fixed_points_and_hand_value() {
        let one_hot = pi(&[(7, 1.0)]);
        assert_eq!(soften_policy(&one_hot, 4.0), one_hot);
        let uniform = pi(&[(1, 0.5), (2, 0.5)]);
        let soft = soften_policy(&uniform, 4.0);
        assert!((soft[0].1 - 0.5).abs() < 1e-7);
        assert!((soft[1].1 - 0.5).abs() < 1e-7);
        // (0.9^0.25, 0.1^0.25) normalized.
        let skewed = soften_policy(&pi(&[(0, 0.9), (1, 0.1)]), 4.0);
        assert!((skewed[0].1 - 0.6340).abs() < 1e-3);
        assert!((skewed[1].1 - 0.3660).abs() < 1e-3);
    }

    #[test]
    fn soften_preserves_support_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.random_range(2..12);
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
            let z: f64 = raw.iter().sum();
            let dist: Vec<(PolicyIndex, f32)> = raw
                .iter()
                .enumerate()
                .map(|(i, &v)| (PolicyIndex::new(i * 3).unwrap(), (v / z) as f32))
                .collect();
            let soft = soften_policy(&dist, 4.0);
            assert_eq!(soft.len(), dist.len());
            let sum: f64 = soft.iter().map(|&(_, p)| p as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for (a, b) in dist.iter().zip(dist.iter().skip(1)) {
                let (sa, sb) = (
                    soft.iter().find(|e| e.0 == a.0).unwrap().1,
                    soft.iter().find(|e| e.0 == b.0).unwrap().1,
                );
                assert_eq!(a.1 > b.1, sa > sb);
                assert_eq!(a.1 < b.1, sa < sb);
            }
        }
    }

    #[test]
    fn bucket_boundaries() {
        assert_eq!(bucket(1.0, 32).unwrap(), 31);
        assert_eq!(bucket(0.0, 32).unwrap(), 16);
        assert_eq!(bucket(-1.0, 32).unwrap(), 0);
        assert_eq!(bucket(0.999, 32).unwrap(), 31);
        assert_eq!(bucket(-0.999, 32).unwrap(), 0);
        assert!(matches!(bucket(1.5, 32), Err(LossError::TargetRange(_))));
        assert!(matches!(bucket(-1.01, 32), Err(LossError::TargetRange(_))));
    }

    fn simple_targets(pi_entries: &[(usize, f32)], q: f32) -> TargetSet {
        TargetSet {
            pi: pi(pi_entries),
            result: [1.0, 0.0, 0.0],
            q,
            q_st: q,
        }
    }

    fn mask_over(indices: &[usize]) -> LegalMask {
        LegalMask::from_indices(indices)
    }

    #[test]
    fn perfect_predictions_vanish() {
        let mut g = empty_graph();
        let mut logits = vec![0.0f64; POLICY_SIZE];
        logits[5] = 40.0;
        let f = manual_forward(
            &mut g,
            logits.clone(),
            logits,
            [40.0, 0.0, 0.0],
            0.25,
            Some(vec![0.0, 40.0, 0.0]),
            0.0,
            0.25,
            Some(vec![0.0, 40.0, 0.0]),
            0.0,
        );
        // q = 0.25: bucket(0.25, 3) = floor(1.25/2*3) = 1; ê = (q − q̂)² = 0.
        let targets = simple_targets(&[(5, 1.0)], 0.25);
        let mask = mask_over(&[5, 6, 7]);
        let loss = total_loss(&mut g, &f, &targets, &mask, &LossWeights::default()).unwrap();
        let (total, terms) = loss.read(&g);
        assert!(total < 1e-5, "total {total}, terms {terms:?}");
        assert!(total >= 0.0);
    }

    #[test]
    fn uniform_examples_hit_entropy() {
        let mut g = empty_graph();
        let f = manual_forward(
            &mut g,
            vec![0.0f64; POLICY_SIZE],
            vec![0.0f64; POLICY_SIZE],
            [0.0, 0.0, 0.0],
            0.0,
            None,
            0.0,
            0.0,
            None,
            0.0,
        );
        let legal: Vec<usize> = (0..20).collect();
        let uniform: Vec<(usize, f32)> = legal.iter().map(|&i| (i, 0.05)).collect();
        let targets = simple_targets(&uniform, 0.0);
        let mask = mask_over(&legal);
        let loss = total_loss(&mut g, &f, &targets, &mask, &LossWeights::default()).unwrap();
        let (_, terms) = loss.read(&g);
        let by_name: std::collections::HashMap<_, _> = terms.iter().copied().collect();
        // Targets are stored as f32 (0.05 is inexact), so the sums are off
        // by ~1e-7 before the f64 cross-entropy.
        let ln20 = 20.0f64.ln();
        assert!((by_name["policy"] - ln20).abs() < 1e-5);
        // Softened uniform is uniform, so the soft term is 8·ln 20.
        assert!((by_name["soft_policy"] - 8.0 * ln20).abs() < 1e-4);
        assert!((by_name["wdl"] - 3.0f64.ln()).abs() < 1e-9);
        assert!(!by_name.contains_key("q_cat"));
        assert!(!by_name.contains_key("st_cat"));
    }

    #[test]
    fn weights_scale_terms_linearly() {
        let run = |w: &LossWeights| {
            let mut g = empty_graph();
            let f = manual_forward(
                &mut g,
                vec![0.0f64; POLICY_SIZE],
                vec![0.0f64; POLICY_SIZE],
                [0.3, -0.2, 0.1],
                0.5,
                Some(vec![0.2, 0.1, -0.3]),
                0.4,
                -0.5,
                Some(vec![0.0, 0.0, 0.0]),
                0.2,
            );
            let targets = simple_targets(&[(3, 0.75), (9, 0.25)], 0.5);
            let mask = mask_over(&[3, 9, 11]);
            let loss = total_loss(&mut g, &f, &targets, &mask, w).unwrap();
            let (total, terms) = loss.read(&g);
            (total, terms)
        };
        let base = LossWeights::default();
        let (_, t1) = run(&base);
        let mut doubled = base.clone();
        doubled.c_pol *= 2.0;
        let (_, t2) = run(&doubled);
        let get = |terms: &[(&str, f64)], name: &str| {
            terms.iter().find(|(n, _)| *n == name).unwrap().1
        };
        assert!((get(&t2, "policy") - 2.0 * get(&t1, "policy")).abs() < 1e-12);
        assert_eq!(get(&t2, "wdl"), get(&t1, "wdl"));
        // Total is the sum of the breakdown.
        let (total, terms) = run(&base);
        let sum: f64 = terms.iter().map(|(_, v)| v).sum();
        assert!((total - sum).abs() < 1e-12);
        for (name, v) in &terms {
            assert!(*v >= 0.0, "{name} negative: {v}");
        }
    }

    #[test]
    fn l2_and_error_hand_values() {
        let mut g = empty_graph();
        let f = manual_forward(
            &mut g,
            vec![0.0f64; POLICY_SIZE],
            vec![0.0f64; POLICY_SIZE],
            [0.0, 0.0, 0.0],
            0.0, // q̂ = 0 while q = 1: l2 = 1, and ê = 0 gives error loss 1
            None,
            0.0,
            1.0, // st q̂ = q: l2 = 0; ê = 0 = (q − q̂)²: error loss 0
            None,
            0.0,
        );
        let targets = simple_targets(&[(0, 1.0)], 1.0);
        let mask = mask_over(&[0]);
        let loss = total_loss(&mut g, &f, &targets, &mask, &LossWeights::default()).unwrap();
        let (_, terms) = loss.read(&g);
        let by_name: std::collections::HashMap<_, _> = terms.iter().copied().collect();
        assert!((by_name["q_l2"] - 1.0).abs() < 1e-12);
        assert!((by_name["q_error"] - 1.0).abs() < 1e-12);
        assert!(by_name["st_l2"].abs() < 1e-12);
        assert!(by_name["st_error"].abs() < 1e-12);
    }

    #[test]
    fn wdl_gradient_is_prediction_minus_target() {
        let mut params = ParamSet::new();
        let logits = params.add("logits", Tensor::from_vec(&[1, 3], vec![0.3f64, -0.1, 0.5]));
        let mut g = Graph::new(Arc::new(params.clone()));
        let l = g.param(logits);
        let target = [0.0f64, 1.0, 0.0];
        let ce = g
            .cross_entropy(l, Tensor::from_vec(&[1, 3], target.to_vec()), None)
            .unwrap();
        let mut grads = Grads::new(&params);
        g.backward(ce, &mut grads);
        let got = grads.get(logits).unwrap();
        let raw = [0.3f64, -0.1, 0.5];
        let z: f64 = raw.iter().map(|v| v.exp()).sum();
        for i in 0..3 {
            let want = raw[i].exp() / z - target[i];
            assert!((got.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_gradient_matches_closed_form() {
        let mut params = ParamSet::new();
        let qp = params.add("q_hat", Tensor::from_vec(&[1], vec![0.2f64]));
        let mut g = Graph::new(Arc::new(params.clone()));
        let q_hat = g.param(qp);
        let q_in = g.input(Tensor::from_vec(&[1], vec![0.9f64]));
        let l2 = g.mse(q_in, q_hat).unwrap();
        let mut grads = Grads::new(&params);
        g.backward(l2, &mut grads);
        // d/dq̂ (q − q̂)² = −2(q − q̂)
        let want = -2.0 * (0.9 - 0.2);
        assert!((grads.get(qp).unwrap().data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn bad_targets_rejected() {
        let mask = mask_over(&[3, 9]);
        let off_mask = simple_targets(&[(4, 1.0)], 0.0);
        assert_eq!(off_mask.validate(&mask), Err(LossError::TargetOffMask(4)));
        let not_dist = simple_targets(&[(3, 0.7), (9, 0.7)], 0.0);
        assert!(matches!(
            not_dist.validate(&mask),
            Err(LossError::NotADistribution(_))
        ));
        let bad_q = simple_targets(&[(3, 1.0)], 1.5);
        assert!(matches!(
            bad_q.validate(&mask),
            Err(LossError::TargetRange(_))
        ));
        let mut bad_result = simple_targets(&[(3, 1.0)], 0.0);
        bad_result.result = [0.5, 0.5, 0.0];
        assert!(matches!(
            bad_result.validate(&mask),
            Err(LossError::BadResult(_))
        ));
    }

    #[test]
    fn detach_blocks_reward_projection_gradient() {
        let model = Model::init(tiny_config(PosRepKind::RelativeBias), 21).unwrap();
        let (enc, mask) = startpos_inputs();
        let reward_id = match model.ids.value_q.outputs {
            crate::model::ValueOutputs::Scalar { reward, .. } => reward,
            _ => unreachable!(),
        };
        let targets = TargetSet {
            pi: mask.indices().map(|i| (i, 1.0 / 20.0)).collect(),
            result: [0.0, 1.0, 0.0],
            q: 0.3,
            q_st: -0.2,
        };
        // Error term alone: the reward projection must receive nothing.
        let only = |name: &'static str| {
            let mut w = LossWeights {
                c_pol: 0.0,
                c_softpol: 0.0,
                soft_temperature: 4.0,
                c_value_wdl: 0.0,
                c_value_l2: 0.0,
                c_value_cat: 0.0,
                c_value_error: 0.0,
            };
            match name {
                "error" => w.c_value_error = 1.0,
                "l2" => w.c_value_l2 = 1.0,
                _ => unreachable!(),
            }
            let mut g = Graph::new(Arc::new(model.params.clone()));
            let f = build_forward(&mut g, &model.config, &model.ids, &enc, false).unwrap();
            // Zero-weight terms still sit on the tape; they backpropagate
            // exact zeros, so only the named term contributes.
            let loss = total_loss(&mut g, &f, &targets, &mask, &w).unwrap();
            let mut grads = Grads::new(&model.params);
            g.backward(loss.total, &mut grads);
            grads
        };
        let err_grads = only("error");
        assert!(
            err_grads.get(reward_id).is_none()
                || err_grads
                    .get(reward_id)
                    .unwrap()
                    .data()
                    .iter()
                    .all(|&v| v == 0.0),
            "reward projection got gradient through the detach"
        );
        let l2_grads = only("l2");
        let l2_on_reward = l2_grads.get(reward_id).expect("l2 reaches the projection");
        assert!(l2_on_reward.data().iter().any(|&v| v != 0.0));
        // The error projection itself trains under the error loss.
        let error_id = match model.ids.value_q.outputs {
            crate::model::ValueOutputs::Scalar { error, .. } => error,
            _ => unreachable!(),
        };
        let err_on_err = err_grads.get(error_id).expect("error head trains");
        assert!(err_on_err.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn total_loss_gradient_check() {
        let model = Model::init(tiny_config(PosRepKind::Shaw), 22).unwrap();
        let params = model.params.convert::<f64>();
        let (enc, mask) = startpos_inputs();
        let cfg = model.config.clone();
        let ids = model.ids.clone();
        let targets = TargetSet {
            pi: mask
                .indices()
                .enumerate()
                .map(|(rank, i)| (i, ((rank + 1) as f32) / 210.0))
                .collect(),
            result: [0.0, 0.0, 1.0],
            q: 0.4,
            q_st: -0.7,
        };
        // Freeze the detached (q − q̂)² factors at the unperturbed point so
        // central differences measure the same function the analytic
        // gradient describes.
        let frozen = {
            let mut g = Graph::new(Arc::new(params.clone()));
            let f = build_forward(&mut g, &cfg, &ids, &enc, false).unwrap();
            let q_hat = g.value(f.q).item();
            let st_hat = g.value(f.st_q).item();
            [
                (targets.q as f64 - q_hat).powi(2),
                (targets.q_st as f64 - st_hat).powi(2),
            ]
        };
        let report = grad_check(
            &params,
            move |g| {
                let f = build_forward(g, &cfg, &ids, &enc, false)?;
                let loss =
                    total_loss_frozen(g, &f, &targets, &mask, &LossWeights::default(), frozen)
                        .map_err(|e| match e {
                            LossError::Ad(ad) => ad,
                            other => AdError::NonFinite {
                                context: other.to_string(),
                            },
                        })?;
                Ok(loss.total)
            },
            &GradCheckOpts {
                coords_per_param: 25,
                ..GradCheckOpts::default()
            },
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report}");
    }
}
