//! Monte Carlo trials of the distributed estimators.
//!
//! Every trial draws from its own ChaCha stream keyed by `(seed, trial)`, so
//! results do not depend on how trials are scheduled across threads.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{build_error_system, is_stable, update, BeliefInit, EstimatorKind, EstimatorSpec};
use crate::graph::CommMatrix;
use crate::model::{stream_rng, ModelParams, World};

/// Trials whose error norm exceeds this are aborted.
pub const OVERFLOW_GUARD: f64 = 1e12;

const BURN_IN_DECAY: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RecordMode {
    /// Time- and ensemble-averaged MSD only.
    #[default]
    Aggregate,
    /// Also the across-trial covariance of the final error.
    FinalCovariance,
    /// Also every trial's instantaneous MSD series.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub horizon: usize,
    pub trials: usize,
    /// `None` picks the default from the spectral radius.
    pub burn_in: Option<usize>,
    pub seed: u64,
    pub init: BeliefInit,
    pub record: RecordMode,
    /// Run unstable systems anyway; diverging trials are flagged, not fatal.
    pub allow_unstable: bool,
}

impl SimConfig {
    pub fn new(horizon: usize, trials: usize, seed: u64) -> Self {
        SimConfig {
            horizon,
            trials,
            burn_in: None,
            seed,
            init: BeliefInit::default(),
            record: RecordMode::default(),
            allow_unstable: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::param("horizon", "must be >= 1"));
        }
        if self.trials == 0 {
            return Err(Error::param("trials", "must be >= 1"));
        }
        if let Some(b) = self.burn_in {
            if b >= self.horizon {
                return Err(Error::param(
                    "burn_in",
                    format!("{b} must be below the horizon {}", self.horizon),
                ));
            }
        }
        Ok(())
    }

    /// Explicit burn-in, or the steps needed for `rho^t` to fall below 1e-6,
    /// capped at half the horizon.
    pub fn resolved_burn_in(&self, rho: f64) -> usize {
        if let Some(b) = self.burn_in {
            return b;
        }
        let cap = self.horizon / 2;
        if rho <= 0.0 {
            return 0;
        }
        if rho >= 1.0 {
            return cap;
        }
        let steps = (BURN_IN_DECAY.ln() / rho.ln()).ceil();
        if steps.is_finite() && steps >= 0.0 {
            (steps as usize).min(cap)
        } else {
            cap
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub kind: EstimatorKind,
    pub alpha: f64,
    pub n: usize,
    pub horizon: usize,
    pub trials: usize,
    pub seed: u64,
    pub burn_in: usize,
    pub empirical_msd: f64,
    pub stderr: f64,
    pub per_trial_msd: Vec<f64>,
    /// Trial average of `xi_T xi_T^T`.
    pub empirical_sigma: Option<DMatrix<f64>>,
    /// Trial average of `|xi_t|^2 / N` for `t = 0..=T`.
    pub per_step_msd: Option<Vec<f64>>,
    /// `|xi_t|^2 / N` for every trial and `t = 0..=T`.
    pub traces: Option<Vec<Vec<f64>>>,
    /// Spectral radius of the error dynamics.
    pub rho: f64,
    pub unstable: bool,
    /// Trials aborted by the overflow guard (only with `allow_unstable`).
    pub diverged_trials: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedResult {
    pub hat: SimResult,
    pub tilde: SimResult,
    /// Mean over trials of tilde minus hat time-averaged MSD.
    pub diff_mean: f64,
    pub diff_stderr: f64,
}

/// Runs every estimator in `specs` on one shared realization of the world
/// and calls `visit(t, k, xi)` with the error of estimator `k` at each
/// `t = 0..=horizon`.
///
/// Returns the step at which the overflow guard tripped, if it did.
pub fn run_error_path(
    p: &CommMatrix,
    specs: &[EstimatorSpec],
    params: &ModelParams,
    init: BeliefInit,
    world: &mut World,
    horizon: usize,
    mut visit: impl FnMut(usize, usize, &DVector<f64>),
) -> Result<Option<usize>> {
    let n = p.n();
    let mut y = world.observe();
    let mut beliefs: Vec<DVector<f64>> = specs.iter().map(|_| init.initial(&y)).collect();
    let mut xi = DVector::zeros(n);
    for t in 0..=horizon {
        let x = world.state();
        for (k, b) in beliefs.iter().enumerate() {
            xi.copy_from(b);
            xi.add_scalar_mut(-x);
            if !(xi.norm() <= OVERFLOW_GUARD) {
                return Ok(Some(t));
            }
            visit(t, k, &xi);
        }
        if t == horizon {
            break;
        }
        for (spec, b) in specs.iter().zip(beliefs.iter_mut()) {
            *b = update(*spec, b, &y, p, params.a)?;
        }
        world.advance();
        y = world.observe();
    }
    Ok(None)
}

struct TrialOutcome {
    msd: f64,
    final_error: DVector<f64>,
    series: Option<Vec<f64>>,
    diverged: bool,
}

fn run_trial(
    p: &CommMatrix,
    specs: &[EstimatorSpec],
    params: &ModelParams,
    sim: &SimConfig,
    burn_in: usize,
    trial: usize,
) -> Result<Vec<TrialOutcome>> {
    let n = p.n() as f64;
    let mut world = World::new(params, p.n(), stream_rng(sim.seed, trial as u64))?;
    let keep_series = sim.record == RecordMode::Full;
    let mut sums = vec![0.0; specs.len()];
    let mut finals = vec![DVector::zeros(p.n()); specs.len()];
    let mut series: Vec<Vec<f64>> = vec![Vec::new(); specs.len()];
    let horizon = sim.horizon;
    let tripped = run_error_path(p, specs, params, sim.init, &mut world, horizon, |t, k, xi| {
        let inst = xi.norm_squared() / n;
        if t > burn_in {
            sums[k] += inst;
        }
        if keep_series {
            series[k].push(inst);
        }
        if t == horizon {
            finals[k].copy_from(xi);
        }
    })?;
    if let Some(t) = tripped {
        if !sim.allow_unstable {
            return Err(Error::Diverged(format!(
                "trial {trial}: error norm exceeded {OVERFLOW_GUARD:e} at t = {t}"
            )));
        }
    }
    let span = (horizon - burn_in) as f64;
    Ok(sums
        .into_iter()
        .zip(finals)
        .zip(series)
        .map(|((sum, final_error), s)| TrialOutcome {
            msd: if tripped.is_some() { f64::NAN } else { sum / span },
            final_error,
            series: keep_series.then_some(s),
            diverged: tripped.is_some(),
        })
        .collect())
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / m;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Across-trial average of `xi xi^T` for the given final errors.
pub fn empirical_covariance(final_errors: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    if final_errors.len() < 2 {
        return Err(Error::param("trials", "need at least two trials for a covariance"));
    }
    let n = final_errors[0].len();
    let mut acc = DMatrix::zeros(n, n);
    for e in final_errors {
        if e.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: e.len() });
        }
        acc.ger(1.0, e, e, 1.0);
    }
    acc /= final_errors.len() as f64;
    Ok(DMatrix::from_fn(n, n, |i, j| 0.5 * (acc[(i, j)] + acc[(j, i)])))
}

fn check_stability(p: &CommMatrix, spec: EstimatorSpec, params: &ModelParams, sim: &SimConfig) -> Result<(f64, bool)> {
    let sys = build_error_system(p, spec, params);
    let stable = is_stable(&sys);
    if !stable && !sim.allow_unstable {
        let (index, gain) = sys
            .modes
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
            .map(|(i, g)| (i, g.abs()))
            .unwrap_or((0, sys.rho));
        return Err(Error::Unstable {
            index,
            lambda: p.eigenvalues().get(index).copied().unwrap_or(f64::NAN),
            gain,
        });
    }
    Ok((sys.rho, !stable))
}

fn run_many(
    p: &CommMatrix,
    specs: &[EstimatorSpec],
    params: &ModelParams,
    sim: &SimConfig,
) -> Result<(Vec<SimResult>, Vec<Vec<f64>>)> {
    sim.validate()?;
    params.validate()?;
    let checks = specs
        .iter()
        .map(|s| check_stability(p, *s, params, sim))
        .collect::<Result<Vec<_>>>()?;
    let rho = checks.iter().map(|c| c.0).fold(0.0, f64::max);
    let burn_in = sim.resolved_burn_in(rho);

    let outcomes = (0..sim.trials)
        .into_par_iter()
        .map(|trial| run_trial(p, specs, params, sim, burn_in, trial))
        .collect::<Result<Vec<_>>>()?;

    let n = p.n();
    let mut results = Vec::with_capacity(specs.len());
    let mut per_trial_all = Vec::with_capacity(specs.len());
    for (k, spec) in specs.iter().enumerate() {
        let per_trial: Vec<f64> = outcomes.iter().map(|o| o[k].msd).collect();
        let diverged: Vec<usize> = outcomes
            .iter()
            .enumerate()
            .filter(|(_, o)| o[k].diverged)
            .map(|(i, _)| i)
            .collect();
        let finite: Vec<f64> = per_trial.iter().copied().filter(|v| v.is_finite()).collect();
        let (mean, stderr) = mean_and_stderr(&finite);
        let empirical_sigma = if sim.record != RecordMode::Aggregate && sim.trials >= 2 {
            let finals: Vec<DVector<f64>> = outcomes
                .iter()
                .filter(|o| !o[k].diverged)
                .map(|o| o[k].final_error.clone())
                .collect();
            empirical_covariance(&finals).ok()
        } else {
            None
        };
        let traces: Option<Vec<Vec<f64>>> = if sim.record == RecordMode::Full {
            Some(outcomes.iter().map(|o| o[k].series.clone().unwrap_or_default()).collect())
        } else {
            None
        };
        let per_step_msd = traces.as_ref().map(|tr| {
            let kept: Vec<&Vec<f64>> = tr.iter().filter(|s| s.len() == sim.horizon + 1).collect();
            (0..=sim.horizon)
                .map(|t| kept.iter().map(|s| s[t]).sum::<f64>() / kept.len().max(1) as f64)
                .collect()
        });
        results.push(SimResult {
            kind: spec.kind,
            alpha: spec.alpha,
            n,
            horizon: sim.horizon,
            trials: sim.trials,
            seed: sim.seed,
            burn_in,
            empirical_msd: mean,
            stderr,
            per_trial_msd: per_trial.clone(),
            empirical_sigma,
            per_step_msd,
            traces,
            rho: checks[k].0,
            unstable: checks[k].1,
            diverged_trials: diverged,
        });
        per_trial_all.push(per_trial);
    }
    Ok((results, per_trial_all))
}

pub fn run_trials(p: &CommMatrix, spec: EstimatorSpec, params: &ModelParams, sim: &SimConfig) -> Result<SimResult> {
    let (mut results, _) = run_many(p, &[spec], params, sim)?;
    Ok(results.remove(0))
}

/// Hat and tilde on identical noise draws, so their difference has a much
/// smaller standard error than either estimate alone.
pub fn run_paired(p: &CommMatrix, alpha: f64, params: &ModelParams, sim: &SimConfig) -> Result<PairedResult> {
    let specs = [EstimatorSpec::hat(alpha)?, EstimatorSpec::tilde(alpha)?];
    let (mut results, per_trial) = run_many(p, &specs, params, sim)?;
    let diffs: Vec<f64> = per_trial[1]
        .iter()
        .zip(&per_trial[0])
        .map(|(t, h)| t - h)
        .filter(|d| d.is_finite())
        .collect();
    let (diff_mean, diff_stderr) = mean_and_stderr(&diffs);
    let tilde = results.pop().expect("two results");
    let hat = results.pop().expect("two results");
    Ok(PairedResult {
        hat,
        tilde,
        diff_mean,
        diff_stderr,
    })
}
