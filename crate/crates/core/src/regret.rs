//! Finite-time regret and its high-probability bound.
//!
//! `R_T = (1/N) Tr((1/T) sum_{t=1..T} xi_t xi_t^T - Sigma)`, majorized by the
//! spectral norm of the same matrix. The bound has four terms: three decay
//! as `1/T` and a concentration term decays as `1/sqrt(T)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{build_error_system, is_stable, BeliefInit, ErrorSystem, EstimatorKind, EstimatorSpec};
use crate::graph::CommMatrix;
use crate::model::{stream_rng, ModelParams, World};
use crate::msd::steady_state_sigma;
use crate::simulate::run_error_path;
use crate::spectral::spectral_norm;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretValue {
    pub trace: f64,
    pub specnorm: f64,
}

/// Streaming `sum_t xi_t xi_t^T` via rank-one updates.
#[derive(Debug, Clone)]
pub struct SecondMoment {
    sum: DMatrix<f64>,
    count: usize,
}

impl SecondMoment {
    pub fn new(n: usize) -> Self {
        SecondMoment {
            sum: DMatrix::zeros(n, n),
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, xi: &DVector<f64>) -> Result<()> {
        if xi.len() != self.sum.nrows() {
            return Err(Error::DimensionMismatch {
                expected: self.sum.nrows(),
                got: xi.len(),
            });
        }
        self.sum.ger(1.0, xi, xi, 1.0);
        self.count += 1;
        Ok(())
    }

    /// Regret against `sigma` over the samples pushed so far.
    pub fn regret(&self, sigma: &DMatrix<f64>) -> Result<RegretValue> {
        let n = self.sum.nrows();
        if sigma.nrows() != n || sigma.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: sigma.nrows(),
            });
        }
        if self.count == 0 {
            return Err(Error::param("horizon", "need at least one step"));
        }
        let gap = &self.sum / self.count as f64 - sigma;
        let specnorm = spectral_norm(&gap)?;
        Ok(RegretValue {
            trace: gap.trace() / n as f64,
            specnorm,
        })
    }
}

/// Regret of the error sequence `xi_1..xi_T` against the steady state.
pub fn empirical_regret(errors: &[DVector<f64>], sigma: &DMatrix<f64>) -> Result<RegretValue> {
    let mut acc = SecondMoment::new(sigma.nrows());
    for xi in errors {
        acc.push(xi)?;
    }
    acc.regret(sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    /// `|xi_0|^2 / (1 - rho^2) / T`
    pub transient: f64,
    /// `2 s |xi_0| / (1 - rho)^2 / T`
    pub cross: f64,
    /// `s^2 / (1 - rho^2)^2 / T`
    pub tail: f64,
    /// `8 s^2 sqrt(2 ln(N / delta)) / (1 - rho)^2 / sqrt(T)`
    pub concentration: f64,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.transient + self.cross + self.tail + self.concentration
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub horizon: usize,
    pub n: usize,
    pub rho: f64,
    pub delta: f64,
    pub s_bound: f64,
    pub xi0_norm: f64,
    pub terms: BoundTerms,
    pub bound_total: f64,
    pub empirical: Option<RegretValue>,
}

pub fn regret_bound(sys: &ErrorSystem, xi0_norm: f64, s_bound: f64, horizon: usize, delta: f64) -> Result<RegretReport> {
    let rho = sys.rho;
    if !(rho < 1.0) {
        return Err(Error::Unstable {
            index: 0,
            lambda: f64::NAN,
            gain: rho,
        });
    }
    if !(s_bound > 0.0) || !s_bound.is_finite() {
        return Err(Error::param("s_bound", format!("{s_bound} must be positive")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::param("regret.delta", format!("{delta} must lie in (0, 1)")));
    }
    if horizon == 0 {
        return Err(Error::param("horizon", "must be >= 1"));
    }
    if !(xi0_norm >= 0.0) {
        return Err(Error::param("xi0_norm", "must be nonnegative"));
    }
    let t = horizon as f64;
    let n = sys.n();
    let gap = 1.0 - rho;
    let gap2 = 1.0 - rho * rho;
    let terms = BoundTerms {
        transient: xi0_norm * xi0_norm / gap2 / t,
        cross: 2.0 * s_bound * xi0_norm / (gap * gap) / t,
        tail: s_bound * s_bound / (gap2 * gap2) / t,
        concentration: 8.0 * s_bound * s_bound * (2.0 * (n as f64 / delta).ln()).sqrt() / (gap * gap) / t.sqrt(),
    };
    Ok(RegretReport {
        horizon,
        n,
        rho,
        delta,
        s_bound,
        xi0_norm,
        bound_total: terms.total(),
        terms,
        empirical: None,
    })
}

/// Almost-sure bound on `|s_t|`, the driving noise of the error recursion.
///
/// Both kinds share `sqrt(N) (|a alpha| w_max + r_max)`: averaging the
/// observation noise with a row-stochastic `P` cannot raise its sup norm.
pub fn noise_norm_bound(params: &ModelParams, p: &CommMatrix, spec: EstimatorSpec) -> Result<f64> {
    let (w_max, r_max) = match (params.w_max(), params.r_max()) {
        (Some(w), Some(r)) => (w, r),
        _ => return Err(Error::UnboundedNoise),
    };
    let c = match spec.kind {
        EstimatorKind::Hat | EstimatorKind::Tilde => 1.0,
    };
    Ok((p.n() as f64).sqrt() * ((params.a * spec.alpha).abs() * w_max * c + r_max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretRow {
    pub horizon: usize,
    pub trial: usize,
    pub regret_trace: f64,
    pub regret_specnorm: f64,
    pub bound_total: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretSummary {
    pub horizon: usize,
    pub trials: usize,
    pub violations: usize,
    pub violation_rate: f64,
    /// `delta + 3 sqrt(delta (1 - delta) / trials)`.
    pub allowed_rate: f64,
    pub median_trace: f64,
    pub median_abs_trace: f64,
    pub median_specnorm: f64,
    pub median_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretTable {
    pub kind: EstimatorKind,
    pub alpha: f64,
    pub n: usize,
    pub rho: f64,
    pub delta: f64,
    pub s_bound: f64,
    pub seed: u64,
    pub rows: Vec<RegretRow>,
    pub summary: Vec<RegretSummary>,
}

impl RegretTable {
    pub fn within_slack(&self) -> bool {
        self.summary.iter().all(|s| s.violation_rate <= s.allowed_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretConfig {
    pub delta: f64,
    pub trials: usize,
    pub seed: u64,
    pub init: BeliefInit,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len();
    if m % 2 == 1 {
        values[m / 2]
    } else {
        0.5 * (values[m / 2 - 1] + values[m / 2])
    }
}

/// One run per trial up to the largest horizon, with regret checkpoints at
/// every horizon in `grid`. Each trial's bound uses its own `|xi_0|`.
pub fn verify_bound(
    p: &CommMatrix,
    spec: EstimatorSpec,
    params: &ModelParams,
    grid: &[usize],
    cfg: &RegretConfig,
) -> Result<RegretTable> {
    params.validate()?;
    if grid.is_empty() || grid.contains(&0) {
        return Err(Error::param("regret.horizons", "need one or more positive horizons"));
    }
    if cfg.trials == 0 {
        return Err(Error::param("regret.trials", "must be >= 1"));
    }
    let mut horizons = grid.to_vec();
    horizons.sort_unstable();
    horizons.dedup();
    let sys = build_error_system(p, spec, params);
    if !is_stable(&sys) {
        return Err(Error::Unstable {
            index: 0,
            lambda: f64::NAN,
            gain: sys.rho,
        });
    }
    let s_bound = noise_norm_bound(params, p, spec)?;
    // validates delta and s before any simulation
    regret_bound(&sys, 0.0, s_bound, 1, cfg.delta)?;
    let sigma = steady_state_sigma(p, spec, params)?;
    let t_max = *horizons.last().expect("nonempty");
    let n = p.n();

    let per_trial = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| -> Result<Vec<RegretRow>> {
            let mut world = World::new(params, n, stream_rng(cfg.seed, trial as u64))?;
            let mut acc = SecondMoment::new(n);
            let mut xi0 = 0.0;
            let mut checkpoints = Vec::with_capacity(horizons.len());
            let mut next = 0;
            let mut failure = None;
            let tripped = run_error_path(p, &[spec], params, cfg.init, &mut world, t_max, |t, _, xi| {
                if failure.is_some() {
                    return;
                }
                if t == 0 {
                    xi0 = xi.norm();
                    return;
                }
                if let Err(e) = acc.push(xi) {
                    failure = Some(e);
                    return;
                }
                if next < horizons.len() && horizons[next] == t {
                    match acc.regret(&sigma) {
                        Ok(v) => checkpoints.push((t, v)),
                        Err(e) => failure = Some(e),
                    }
                    next += 1;
                }
            })?;
            if let Some(e) = failure {
                return Err(e);
            }
            if let Some(t) = tripped {
                return Err(Error::Diverged(format!("trial {trial}: overflow at t = {t}")));
            }
            checkpoints
                .into_iter()
                .map(|(t, v)| {
                    let bound = regret_bound(&sys, xi0, s_bound, t, cfg.delta)?.bound_total;
                    Ok(RegretRow {
                        horizon: t,
                        trial,
                        regret_trace: v.trace,
                        regret_specnorm: v.specnorm,
                        bound_total: bound,
                        violated: v.specnorm > bound,
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(cfg.trials * horizons.len());
    for (k, &h) in horizons.iter().enumerate() {
        for trial_rows in &per_trial {
            debug_assert_eq!(trial_rows[k].horizon, h);
            rows.push(trial_rows[k].clone());
        }
    }
    let allowed = cfg.delta + 3.0 * (cfg.delta * (1.0 - cfg.delta) / cfg.trials as f64).sqrt();
    let summary = horizons
        .iter()
        .map(|&h| {
            let at: Vec<&RegretRow> = rows.iter().filter(|r| r.horizon == h).collect();
            let violations = at.iter().filter(|r| r.violated).count();
            let pick = |f: &dyn Fn(&RegretRow) -> f64| median(&mut at.iter().map(|r| f(r)).collect::<Vec<_>>());
            RegretSummary {
                horizon: h,
                trials: at.len(),
                violations,
                violation_rate: violations as f64 / at.len() as f64,
                allowed_rate: allowed,
                median_trace: pick(&|r| r.regret_trace),
                median_abs_trace: pick(&|r| r.regret_trace.abs()),
                median_specnorm: pick(&|r| r.regret_specnorm),
                median_bound: pick(&|r| r.bound_total),
            }
        })
        .collect();
    Ok(RegretTable {
        kind: spec.kind,
        alpha: spec.alpha,
        n,
        rho: sys.rho,
        delta: cfg.delta,
        s_bound,
        seed: cfg.seed,
        rows,
        summary,
    })
}
