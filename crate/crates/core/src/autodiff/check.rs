//! Finite-difference gradient checking. Runs in f64: central differences
//! with h = 1e-5 give ~1e-10 truncation error, far below the pass
//! thresholds, so any real discrepancy is the tape's fault.

use super::graph::{Grads, Graph, ParamSet, ValueId};
use super::AdError;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct GradCheckOpts {
    /// Central-difference step.
    pub h: f64,
    /// Coordinates sampled per parameter (all of them if the tensor is
    /// smaller).
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts {
            h: 1e-5,
            coords_per_param: 50,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.worst_param {
            Some(name) => write!(
                f,
                "checked {} coords, max rel err {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
                self.coords_checked,
                self.max_rel_err,
                name,
                self.worst_index,
                self.worst_analytic,
                self.worst_numeric
            ),
            None => write!(f, "checked 0 coords"),
        }
    }
}

fn eval<F>(params: &ParamSet<f64>, build: &F) -> Result<f64, AdError>
where
    F: Fn(&mut Graph<f64>) -> Result<ValueId, AdError>,
{
    let mut graph = Graph::new(Arc::new(params.clone()));
    let loss = build(&mut graph)?;
    let v = graph.value(loss).item();
    if !v.is_finite() {
        return Err(AdError::NonFinite {
            context: "loss during finite differencing".to_string(),
        });
    }
    Ok(v)
}

/// Compare reverse-mode gradients against central differences.
///
/// `build` constructs the scalar loss on a fresh graph; it is called once
/// per perturbation, so it must be a pure function of the parameters it
/// reads through [`Graph::param`]. Every parameter in `params` is sampled,
/// whether or not the loss touches it (untouched parameters have zero
/// gradient on both sides).
pub fn grad_check<F>(
    params: &ParamSet<f64>,
    build: F,
    opts: &GradCheckOpts,
) -> Result<GradCheckReport, AdError>
where
    F: Fn(&mut Graph<f64>) -> Result<ValueId, AdError>,
{
    let mut graph = Graph::new(Arc::new(params.clone()));
    let loss_id = build(&mut graph)?;
    let loss = graph.value(loss_id).item();
    if !loss.is_finite() {
        return Err(AdError::NonFinite {
            context: "loss".to_string(),
        });
    }
    let mut grads = Grads::new(params);
    graph.backward(loss_id, &mut grads);
    for (id, name, _) in params.iter() {
        if let Some(g) = grads.get(id) {
            if !g.all_finite() {
                return Err(AdError::NonFinite {
                    context: format!("gradient of {name}"),
                });
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        coords_checked: 0,
        max_rel_err: 0.0,
        worst_param: None,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };

    for (id, name, value) in params.iter() {
        let n = value.len();
        if n == 0 {
            continue;
        }
        let count = n.min(opts.coords_per_param);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + rng.random_range(0..n - i);
            idx.swap(i, j);
        }
        idx.truncate(count);
        idx.sort_unstable();

        let analytic = grads.dense(id, params);
        for &coord in &idx {
            let base = value.data()[coord];
            let mut plus = params.clone();
            plus.value_mut(id).data_mut()[coord] = base + opts.h;
            let mut minus = params.clone();
            minus.value_mut(id).data_mut()[coord] = base - opts.h;
            let fd = (eval(&plus, &build)? - eval(&minus, &build)?) / (2.0 * opts.h);
            if !fd.is_finite() {
                return Err(AdError::NonFinite {
                    context: format!("finite difference of {name}[{coord}]"),
                });
            }
            let ad = analytic.data()[coord];
            let rel = (ad - fd).abs() / 1.0f64.max(ad.abs()).max(fd.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = Some(name.to_string());
                report.worst_index = coord;
                report.worst_analytic = ad;
                report.worst_numeric = fd;
            }
        }
    }
    Ok(report)
}
