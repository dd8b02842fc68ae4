//! Steady-state mean-square deviation.
//!
//! For a stable error system the steady-state covariance solves
//! `Sigma = Q Sigma Q^T + S`. Because `Q = a (P - alpha I)` is diagonal in the
//! eigenbasis of `P`, the per-agent MSD `Tr(Sigma) / N` splits into an
//! innovation penalty carried by the consensus mode `1/sqrt(N)` and an
//! observation penalty summed over every eigenvalue of `P`:
//!
//! ```text
//! R = sigma_r^2 / (1 - a^2 (1 - alpha)^2)
//! W = (1/N) sum_i a^2 alpha^2 sigma_w^2 m_i / (1 - a^2 (lambda_i - alpha)^2)
//! ```
//!
//! with `m_i = 1` for the hat estimator and `m_i = lambda_i^2` for tilde.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{stable_alpha_interval, validate_alpha, ErrorSystem, EstimatorKind, EstimatorSpec};
use crate::graph::CommMatrix;
use crate::model::ModelParams;
use crate::numeric::{golden_section, simpson};

/// Modes with `1 - a^2 (lambda - alpha)^2` below this are rejected.
pub const SINGULAR_TOL: f64 = 1e-10;

const LYAPUNOV_MAX_ITERS: usize = 1_000_000;
const LYAPUNOV_REL_TOL: f64 = 1e-13;

const CYCLE_PANELS: usize = 1 << 14;
const CYCLE_MAX_PANELS: usize = 1 << 22;
const CYCLE_RICHARDSON_TOL: f64 = 1e-9;

const ALPHA_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsdReport {
    pub kind: EstimatorKind,
    pub alpha: f64,
    pub a: f64,
    pub sigma_r2: f64,
    pub sigma_w2: f64,
    pub n: usize,
    /// Innovation penalty.
    pub r_msd: f64,
    /// Observation penalty; the sum of `per_mode`.
    pub w_msd: f64,
    pub total: f64,
    /// Observation-penalty contribution of each eigenvalue of `P`, already
    /// divided by `N`, in descending eigenvalue order.
    pub per_mode: Vec<f64>,
}

fn mode_weight(kind: EstimatorKind, lambda: f64) -> f64 {
    match kind {
        EstimatorKind::Hat => 1.0,
        EstimatorKind::Tilde => lambda * lambda,
    }
}

/// `1 - a^2 (lambda - alpha)^2`, rejected when not safely positive.
fn mode_denominator(a: f64, lambda: f64, alpha: f64, index: usize) -> Result<f64> {
    let gain = a * (lambda - alpha);
    let d = 1.0 - gain * gain;
    if d < SINGULAR_TOL || d.is_nan() {
        return Err(Error::Unstable {
            index,
            lambda,
            gain: gain.abs(),
        });
    }
    Ok(d)
}

/// Innovation penalty `sigma_r^2 / (1 - a^2 (1 - alpha)^2)`.
pub fn r_msd(alpha: f64, params: &ModelParams) -> Result<f64> {
    let d = mode_denominator(params.a, 1.0, alpha, 0)?;
    Ok(params.sigma_r2 / d)
}

pub fn msd_closed_form(p: &CommMatrix, spec: EstimatorSpec, params: &ModelParams) -> Result<MsdReport> {
    validate_alpha(spec.alpha)?;
    params.validate()?;
    let n = p.n();
    let (a, alpha) = (params.a, spec.alpha);
    let obs = a * a * alpha * alpha * params.sigma_w2;
    let per_mode = p
        .eigenvalues()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let d = mode_denominator(a, l, alpha, i)?;
            Ok(obs * mode_weight(spec.kind, l) / d / n as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let r = r_msd(alpha, params)?;
    let w: f64 = per_mode.iter().sum();
    Ok(MsdReport {
        kind: spec.kind,
        alpha,
        a,
        sigma_r2: params.sigma_r2,
        sigma_w2: params.sigma_w2,
        n,
        r_msd: r,
        w_msd: w,
        total: r + w,
        per_mode,
    })
}

/// Full steady-state covariance from the eigen-expansion
/// `Sigma = sum_ij u_i u_i^T S u_j u_j^T / (1 - mu_i mu_j)`.
pub fn steady_state_sigma(p: &CommMatrix, spec: EstimatorSpec, params: &ModelParams) -> Result<DMatrix<f64>> {
    validate_alpha(spec.alpha)?;
    let sys = crate::estimator::build_error_system(p, spec, params);
    for (i, &l) in p.eigenvalues().iter().enumerate() {
        mode_denominator(params.a, l, spec.alpha, i)?;
    }
    let v = &p.spectrum().eigenvectors;
    let s_modal = v.transpose() * &sys.s * v;
    let n = p.n();
    let mu = &sys.modes;
    let sigma_modal = DMatrix::from_fn(n, n, |i, j| s_modal[(i, j)] / (1.0 - mu[i] * mu[j]));
    let out = v * sigma_modal * v.transpose();
    Ok(DMatrix::from_fn(n, n, |i, j| 0.5 * (out[(i, j)] + out[(j, i)])))
}

/// Fixed-point iteration `Sigma <- Q Sigma Q^T + S` from zero. Independent
/// of any eigendecomposition; used to cross-check the closed forms.
pub fn steady_state_sigma_oracle(sys: &ErrorSystem) -> Result<DMatrix<f64>> {
    if sys.rho >= 1.0 {
        let (index, gain) = sys
            .modes
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
            .map(|(i, g)| (i, g.abs()))
            .unwrap_or((0, sys.rho));
        return Err(Error::Unstable {
            index,
            lambda: f64::NAN,
            gain,
        });
    }
    let n = sys.n();
    let mut sigma = DMatrix::zeros(n, n);
    let qt = sys.q.transpose();
    for _ in 0..LYAPUNOV_MAX_ITERS {
        let next = &sys.q * &sigma * &qt + &sys.s;
        let change = (&next - &sigma).norm();
        let scale = 1.0 + sigma.norm();
        sigma = next;
        if !change.is_finite() {
            break;
        }
        if change < LYAPUNOV_REL_TOL * scale {
            return Ok(sigma);
        }
    }
    Err(Error::Diverged(format!(
        "Lyapunov iteration did not settle within {LYAPUNOV_MAX_ITERS} steps (rho = {})",
        sys.rho
    )))
}

/// Large-network limits of the named families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LimitFamily {
    /// `P = I - ((1 - alpha)/N) L_K`: every non-consensus eigenvalue equals alpha.
    CompleteMatched,
    /// `P = I - (scale/N) L_K`: non-consensus eigenvalues equal `1 - scale`.
    Complete { scale: f64 },
    /// `P = I - (c/N) L_S` for any fixed `c`: the bulk of the spectrum tends to 1.
    Star,
    /// `P = I - beta L_C` with fixed `beta`; spectrum `1 - beta (2 - 2 cos tau)`.
    Cycle { beta: f64 },
}

impl LimitFamily {
    /// Smallest limiting eigenvalue that carries spectral mass.
    fn lambda_floor(self, alpha: f64) -> f64 {
        match self {
            LimitFamily::CompleteMatched => alpha,
            LimitFamily::Complete { scale } => 1.0 - scale,
            LimitFamily::Star => 1.0,
            LimitFamily::Cycle { beta } => 1.0 - 4.0 * beta,
        }
    }
}

/// `N -> infinity` limit of the closed-form MSD for a named family.
pub fn msd_limit_named(family: LimitFamily, spec: EstimatorSpec, params: &ModelParams) -> Result<f64> {
    validate_alpha(spec.alpha)?;
    params.validate()?;
    let (a, alpha) = (params.a, spec.alpha);
    let r = r_msd(alpha, params)?;
    let obs = a * a * alpha * alpha * params.sigma_w2;
    let single = |lambda: f64| -> Result<f64> {
        let d = mode_denominator(a, lambda, alpha, 1)?;
        Ok(obs * mode_weight(spec.kind, lambda) / d)
    };
    let w = match family {
        LimitFamily::CompleteMatched => single(alpha)?,
        LimitFamily::Complete { scale } => single(1.0 - scale)?,
        LimitFamily::Star => single(1.0)?,
        LimitFamily::Cycle { beta } => {
            if !(beta >= 0.0) || !beta.is_finite() {
                return Err(Error::param("beta", format!("{beta} must be >= 0")));
            }
            // |lambda - alpha| peaks at an end of [1 - 4 beta, 1]
            mode_denominator(a, 1.0, alpha, 0)?;
            mode_denominator(a, family.lambda_floor(alpha), alpha, 1)?;
            cycle_integral(|tau| {
                let lambda = 1.0 - beta * (2.0 - 2.0 * tau.cos());
                let g = a * (lambda - alpha);
                obs * mode_weight(spec.kind, lambda) / (1.0 - g * g)
            })?
        }
    };
    Ok(r + w)
}

/// `(1/2pi) int_0^{2pi} f`, composite Simpson with a halving check.
fn cycle_integral(f: impl Fn(f64) -> f64) -> Result<f64> {
    let mut panels = CYCLE_PANELS;
    let mut coarse = simpson(&f, 0.0, 2.0 * PI, panels / 2) / (2.0 * PI);
    loop {
        let fine = simpson(&f, 0.0, 2.0 * PI, panels) / (2.0 * PI);
        if (fine - coarse).abs() < CYCLE_RICHARDSON_TOL {
            return Ok(fine);
        }
        if panels >= CYCLE_MAX_PANELS {
            return Err(Error::Numerical(format!(
                "cycle integral unresolved at {panels} panels (change {:e})",
                (fine - coarse).abs()
            )));
        }
        coarse = fine;
        panels *= 2;
    }
}

/// Steady-state prior variance of the centralized Kalman filter that sees
/// all `n` observations: the positive root of the scalar Riccati equation.
pub fn kalman_steady_state(params: &ModelParams, n: usize) -> Result<f64> {
    params.validate()?;
    if n == 0 {
        return Err(Error::param("n", "need at least one agent"));
    }
    if !(params.sigma_w2 > 0.0) {
        return Err(Error::param("sigma_w2", "must be positive for the Kalman baseline"));
    }
    let nf = n as f64;
    let (a2, sw, sr) = (params.a * params.a, params.sigma_w2, params.sigma_r2);
    let b = a2 * sw - sw + nf * sr;
    Ok((b + (b * b + 4.0 * nf * sw * sr).sqrt()) / (2.0 * nf))
}

/// Reference bound `(sigma_r^2 + alpha^2 sigma_w^2) / alpha` for `a = 1`.
pub fn msd_bound_reference(alpha: f64, params: &ModelParams) -> Result<f64> {
    validate_alpha(alpha)?;
    Ok((params.sigma_r2 + alpha * alpha * params.sigma_w2) / alpha)
}

/// Limiting MSD ratio of the complete network to the disconnected one for
/// the hat estimator.
pub fn connectivity_ratio(alpha: f64, params: &ModelParams) -> Result<f64> {
    validate_alpha(alpha)?;
    let d = mode_denominator(params.a, 1.0, alpha, 0)?;
    let obs = params.a * params.a * alpha * alpha * params.sigma_w2;
    let denom = params.sigma_r2 + obs;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((params.sigma_r2 + obs * d) / denom)
}

/// What [`optimize_alpha`] minimizes.
#[derive(Debug, Clone, Copy)]
pub enum AlphaObjective<'a> {
    ClosedForm { p: &'a CommMatrix, kind: EstimatorKind },
    Limit { family: LimitFamily, kind: EstimatorKind },
    MsdBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaOptimum {
    pub alpha: f64,
    pub value: f64,
}

impl AlphaObjective<'_> {
    pub fn evaluate(&self, alpha: f64, params: &ModelParams) -> Result<f64> {
        match *self {
            AlphaObjective::ClosedForm { p, kind } => {
                Ok(msd_closed_form(p, EstimatorSpec::new(kind, alpha)?, params)?.total)
            }
            AlphaObjective::Limit { family, kind } => {
                msd_limit_named(family, EstimatorSpec::new(kind, alpha)?, params)
            }
            AlphaObjective::MsdBound => msd_bound_reference(alpha, params),
        }
    }

    /// Interval of signal weights where the objective is defined.
    pub fn feasible_interval(&self, params: &ModelParams) -> Option<(f64, f64)> {
        let a = params.a;
        match *self {
            AlphaObjective::ClosedForm { p, .. } => stable_alpha_interval(p, a),
            AlphaObjective::MsdBound => Some((0.0, 1.0)),
            AlphaObjective::Limit { family, .. } => {
                if a == 0.0 {
                    return Some((0.0, 1.0));
                }
                let inv = 1.0 / a.abs();
                let lo = (1.0 - inv).max(0.0);
                let hi = match family {
                    LimitFamily::CompleteMatched | LimitFamily::Star => 1.0,
                    LimitFamily::Complete { .. } | LimitFamily::Cycle { .. } => {
                        (family.lambda_floor(0.0) + inv).min(1.0)
                    }
                };
                (lo < hi).then_some((lo, hi))
            }
        }
    }
}

/// Golden-section minimization over the feasible signal weights.
pub fn optimize_alpha(objective: AlphaObjective<'_>, params: &ModelParams) -> Result<AlphaOptimum> {
    params.validate()?;
    let (lo, hi) = objective.feasible_interval(params).ok_or(Error::Infeasible {
        a: params.a,
        bound: match objective {
            AlphaObjective::ClosedForm { p, .. } => crate::estimator::unbiasedness_bound(p),
            _ => f64::NAN,
        },
    })?;
    // stay off the open ends, where the objective blows up
    let margin = 1e-9;
    let lo = lo + margin;
    let hi = if hi < 1.0 { hi - margin } else { 1.0 };
    if lo >= hi {
        return Err(Error::Infeasible {
            a: params.a,
            bound: f64::NAN,
        });
    }
    let f = |al: f64| objective.evaluate(al, params).unwrap_or(f64::INFINITY);
    let (alpha, value) = golden_section(f, lo, hi, ALPHA_TOL);
    if !value.is_finite() {
        return Err(Error::Infeasible {
            a: params.a,
            bound: f64::NAN,
        });
    }
    Ok(AlphaOptimum { alpha, value })
}
