//! Belief updates and the collective error system.
//!
//! Both estimators apply one consensus step followed by an innovation step:
//!
//! ```text
//! hat:   x_i <- a ( sum_j p_ij x_j + alpha (y_i            - x_i) )
//! tilde: x_i <- a ( sum_j p_ij x_j + alpha (sum_j p_ij y_j - x_i) )
//! ```
//!
//! The stacked errors `xi_t = x_t - x_t 1` evolve as `xi_{t+1} = Q xi_t + s_t`
//! with `Q = a (P - alpha I)`. Because `Q` shares the eigenvectors of `P`, its
//! spectral radius is read straight off the spectrum of `P`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CommMatrix;
use crate::model::ModelParams;

/// Stability margin used by [`is_stable`].
pub const STABILITY_MARGIN: f64 = 1e-12;

pub type BeliefState = DVector<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Innovation from the agent's own observation.
    Hat,
    /// Innovation from the neighborhood-averaged observation.
    Tilde,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Hat => "hat",
            EstimatorKind::Tilde => "tilde",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    pub alpha: f64,
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind, alpha: f64) -> Result<Self> {
        validate_alpha(alpha)?;
        Ok(EstimatorSpec { kind, alpha })
    }

    pub fn hat(alpha: f64) -> Result<Self> {
        Self::new(EstimatorKind::Hat, alpha)
    }

    pub fn tilde(alpha: f64) -> Result<Self> {
        Self::new(EstimatorKind::Tilde, alpha)
    }
}

pub fn validate_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::param("alpha", format!("{alpha} is outside (0, 1]")))
    }
}

fn check_dims(beliefs: &DVector<f64>, y: &DVector<f64>, p: &CommMatrix) -> Result<()> {
    let n = p.n();
    for len in [beliefs.len(), y.len()] {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, got: len });
        }
    }
    Ok(())
}

pub fn update_hat(
    beliefs: &BeliefState,
    y: &DVector<f64>,
    p: &CommMatrix,
    a: f64,
    alpha: f64,
) -> Result<BeliefState> {
    check_dims(beliefs, y, p)?;
    let mut next = p.matrix() * beliefs;
    next.axpy(alpha, y, 1.0);
    next.axpy(-alpha, beliefs, 1.0);
    next *= a;
    Ok(next)
}

pub fn update_tilde(
    beliefs: &BeliefState,
    y: &DVector<f64>,
    p: &CommMatrix,
    a: f64,
    alpha: f64,
) -> Result<BeliefState> {
    check_dims(beliefs, y, p)?;
    let averaged = p.matrix() * y;
    let mut next = p.matrix() * beliefs;
    next.axpy(alpha, &averaged, 1.0);
    next.axpy(-alpha, beliefs, 1.0);
    next *= a;
    Ok(next)
}

pub fn update(
    spec: EstimatorSpec,
    beliefs: &BeliefState,
    y: &DVector<f64>,
    p: &CommMatrix,
    a: f64,
) -> Result<BeliefState> {
    match spec.kind {
        EstimatorKind::Hat => update_hat(beliefs, y, p, a, spec.alpha),
        EstimatorKind::Tilde => update_tilde(beliefs, y, p, a, spec.alpha),
    }
}

/// Linear error dynamics `xi_{t+1} = Q xi_t + s_t` with `Cov(s_t) = S`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorSystem {
    pub kind: EstimatorKind,
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub rho: f64,
    /// Eigenvalues of `Q`, aligned with the eigenvectors of `P`.
    pub modes: Vec<f64>,
}

impl ErrorSystem {
    pub fn n(&self) -> usize {
        self.q.nrows()
    }
}

/// Spectral radius of `a (P - alpha I)` from the spectrum of `P`.
pub fn spectral_radius(p: &CommMatrix, a: f64, alpha: f64) -> f64 {
    a.abs()
        * p.eigenvalues()
            .iter()
            .fold(0.0_f64, |acc, &l| acc.max((l - alpha).abs()))
}

pub fn build_error_system(p: &CommMatrix, spec: EstimatorSpec, params: &ModelParams) -> ErrorSystem {
    let n = p.n();
    let a = params.a;
    let alpha = spec.alpha;
    let q = (p.matrix() - DMatrix::identity(n, n) * alpha) * a;
    let obs = a * a * alpha * alpha * params.sigma_w2;
    let observation_cov = match spec.kind {
        EstimatorKind::Hat => DMatrix::identity(n, n) * obs,
        EstimatorKind::Tilde => p.matrix() * p.matrix() * obs,
    };
    let s = DMatrix::from_element(n, n, params.sigma_r2) + observation_cov;
    let modes = p.eigenvalues().iter().map(|l| a * (l - alpha)).collect();
    ErrorSystem {
        kind: spec.kind,
        q,
        s,
        rho: spectral_radius(p, a, alpha),
        modes,
    }
}

/// Largest `|a|` for which some signal weight gives asymptotically unbiased
/// estimates: `2 / (1 - lambda_N(P))`. Infinite when `lambda_N = 1`.
pub fn unbiasedness_bound(p: &CommMatrix) -> f64 {
    let gap = 1.0 - p.lambda_min();
    if gap <= 0.0 {
        f64::INFINITY
    } else {
        2.0 / gap
    }
}

/// Signal weight minimizing `max(1 - alpha, |alpha - lambda_N|)`.
pub fn optimal_alpha_for_stability(p: &CommMatrix) -> f64 {
    (1.0 + p.lambda_min()) / 2.0
}

pub fn is_stable(sys: &ErrorSystem) -> bool {
    sys.rho < 1.0 - STABILITY_MARGIN
}

/// Open interval of signal weights in `(0, 1]` with `rho(Q) < 1`, or `None`.
/// The upper end is closed when it equals 1.
pub fn stable_alpha_interval(p: &CommMatrix, a: f64) -> Option<(f64, f64)> {
    if a == 0.0 {
        return Some((0.0, 1.0));
    }
    let inv = 1.0 / a.abs();
    // rho = |a| max(1 - alpha, alpha - lambda_N) for alpha <= 1
    let lo = (1.0 - inv).max(0.0);
    let hi = (p.lambda_min() + inv).min(1.0);
    (lo < hi).then_some((lo, hi))
}

/// Per-agent belief initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BeliefInit {
    /// `x_{i,0} = y_{i,0}`.
    #[default]
    FirstObservation,
    Zeros,
}

impl BeliefInit {
    pub fn initial(self, y0: &DVector<f64>) -> BeliefState {
        match self {
            BeliefInit::FirstObservation => y0.clone(),
            BeliefInit::Zeros => DVector::zeros(y0.len()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{comm_complete_scaled, comm_metropolis, Graph};
    use crate::model::{stream_rng, World};
    use crate::spectral::eig_sym;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_comm(seed: u64, n: usize) -> CommMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Graph::random_connected(n, 0.4, &mut rng).unwrap();
        comm_metropolis(&g).unwrap()
    }

    #[test]
    fn alpha_range_is_enforced() {
        assert!(EstimatorSpec::hat(0.0).is_err());
        assert!(EstimatorSpec::hat(1.0).is_ok());
        assert!(EstimatorSpec::tilde(1.2).is_err());
        assert!(EstimatorSpec::tilde(f64::NAN).is_err());
    }

    #[test]
    fn pure_innovation_with_identity() {
        let p = CommMatrix::identity(4).unwrap();
        let b = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
        let y = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let out = update_hat(&b, &y, &p, 1.7, 1.0).unwrap();
        assert!((out - &y * 1.7).amax() < 1e-15);
        let tilde = update_tilde(&b, &y, &p, 1.7, 0.4).unwrap();
        let hat = update_hat(&b, &y, &p, 1.7, 0.4).unwrap();
        assert_eq!(tilde, hat);
    }

    #[test]
    fn consensus_fixed_direction() {
        let p = random_comm(3, 7);
        let b = DVector::from_element(7, 2.5);
        let y = DVector::from_element(7, -10.0);
        let out = update_hat(&b, &y, &p, 0.8, 1e-12).unwrap();
        assert!(out.iter().all(|v| (v - 0.8 * 2.5).abs() < 1e-9));
    }

    #[test]
    fn hat_and_tilde_agree_without_observation_noise() {
        let p = random_comm(5, 6);
        let b = DVector::from_fn(6, |i, _| i as f64);
        let y = DVector::from_element(6, 3.0);
        let hat = update_hat(&b, &y, &p, 1.1, 0.6).unwrap();
        let tilde = update_tilde(&b, &y, &p, 1.1, 0.6).unwrap();
        assert!((hat - tilde).amax() < 1e-14);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = CommMatrix::identity(3).unwrap();
        let b = DVector::zeros(2);
        let y = DVector::zeros(3);
        assert!(matches!(
            update_hat(&b, &y, &p, 1.0, 0.5),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    /// The realized error recursion must match `Q xi + s` built from the
    /// same noise draws.
    #[test]
    fn error_recursion_matches_closed_recursion() {
        let p = random_comm(11, 8);
        let params = ModelParams::gaussian(1.05, 0.7, 1.3);
        for kind in [EstimatorKind::Hat, EstimatorKind::Tilde] {
            let spec = EstimatorSpec::new(kind, 0.45).unwrap();
            let sys = build_error_system(&p, spec, &params);
            let mut world = World::new(&params, 8, stream_rng(2, 0)).unwrap();
            let y0 = world.observe();
            let mut beliefs = BeliefInit::FirstObservation.initial(&y0);
            let mut y = y0;
            for _ in 0..100 {
                let x = world.state();
                let xi = beliefs.map(|b| b - x);
                let w = y.map(|v| v - x);
                let next_beliefs = update(spec, &beliefs, &y, &p, params.a).unwrap();
                let x_next = world.advance();
                let r = x_next - params.a * x;
                let noise_part = match kind {
                    EstimatorKind::Hat => &w * (spec.alpha * params.a),
                    EstimatorKind::Tilde => p.matrix() * &w * (spec.alpha * params.a),
                };
                let s = noise_part - DVector::from_element(8, r);
                let predicted = &sys.q * &xi + s;
                let actual = next_beliefs.map(|b| b - x_next);
                let scale = 1.0 + actual.amax();
                assert!((predicted - actual).amax() <= 1e-12 * scale);
                beliefs = next_beliefs;
                y = world.observe();
            }
        }
    }

    #[test]
    fn error_system_examples() {
        let params = ModelParams::gaussian(1.0, 1.0, 1.0);
        let sys = build_error_system(&CommMatrix::identity(5).unwrap(), EstimatorSpec::hat(1.0).unwrap(), &params);
        assert_eq!(sys.q, DMatrix::zeros(5, 5));
        assert_eq!(sys.rho, 0.0);
        assert!(is_stable(&sys));

        let alpha = 0.35;
        let a = 1.4;
        let p = comm_complete_scaled(6, 1.0 - alpha).unwrap();
        let params = ModelParams::gaussian(a, 0.5, 2.0);
        let sys = build_error_system(&p, EstimatorSpec::hat(alpha).unwrap(), &params);
        assert!((sys.rho - a * (1.0 - alpha)).abs() < 1e-12);
        let diag = 0.5 + a * a * alpha * alpha * 2.0;
        for i in 0..6 {
            for j in 0..6 {
                let expected = if i == j { diag } else { 0.5 };
                assert!((sys.s[(i, j)] - expected).abs() < 1e-12);
            }
        }
        let tilde = build_error_system(&p, EstimatorSpec::tilde(alpha).unwrap(), &params);
        let p2 = p.matrix() * p.matrix();
        let expected = DMatrix::from_element(6, 6, 0.5) + p2 * (a * a * alpha * alpha * 2.0);
        assert!((tilde.s - expected).amax() < 1e-12);
    }

    #[test]
    fn stability_examples() {
        let p = CommMatrix::identity(3).unwrap();
        let params = ModelParams::gaussian(2.0, 1.0, 1.0);
        assert!(is_stable(&build_error_system(&p, EstimatorSpec::hat(1.0).unwrap(), &params)));
        let half = build_error_system(&p, EstimatorSpec::hat(0.5).unwrap(), &params);
        assert_eq!(half.rho, 1.0);
        assert!(!is_stable(&half));
    }

    #[test]
    fn rho_matches_fresh_eigensolve_and_power_iteration() {
        for seed in 0..10 {
            let p = random_comm(100 + seed, 9);
            let params = ModelParams::gaussian(1.3, 1.0, 1.0);
            let sys = build_error_system(&p, EstimatorSpec::tilde(0.3 + 0.05 * seed as f64).unwrap(), &params);
            let direct = eig_sym(&sys.q)
                .unwrap()
                .eigenvalues
                .iter()
                .fold(0.0_f64, |acc, l| acc.max(l.abs()));
            assert!((direct - sys.rho).abs() < 1e-12);
            let q2 = &sys.q * &sys.q;
            let mut x = DVector::from_fn(9, |i, _| 1.0 + (i as f64).sin());
            for _ in 0..5000 {
                x = &q2 * &x;
                x /= x.norm();
            }
            let power = (&sys.q * &x).norm();
            assert!((power - sys.rho).abs() < 1e-8, "{power} vs {}", sys.rho);
        }
    }

    #[test]
    fn unbiasedness_bound_examples() {
        // Metropolis on K_4: p_ij = 1/4, lambda_N = 0
        let k4 = comm_metropolis(&crate::graph::build_named_graph(crate::graph::GraphFamily::Complete, 4).unwrap()).unwrap();
        assert!((unbiasedness_bound(&k4) - 2.0).abs() < 1e-12);
        assert!((optimal_alpha_for_stability(&k4) - 0.5).abs() < 1e-12);
        assert!((spectral_radius(&k4, 1.0, 0.5) - 0.5).abs() < 1e-12);
        // lambda_N = -1/3 on the 10-cycle with Metropolis weights
        let c10 = comm_metropolis(&crate::graph::build_named_graph(crate::graph::GraphFamily::Cycle, 10).unwrap()).unwrap();
        assert!((unbiasedness_bound(&c10) - 1.5).abs() < 1e-12);
        assert!((optimal_alpha_for_stability(&c10) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(unbiasedness_bound(&CommMatrix::identity(3).unwrap()), f64::INFINITY);
    }

    #[test]
    fn bound_is_tight_on_alpha_grid() {
        for seed in 0..5 {
            let p = random_comm(200 + seed, 8);
            let bound = unbiasedness_bound(&p);
            let grid: Vec<f64> = (1..=10_000).map(|k| k as f64 * 1e-4).collect();
            let below = bound * (1.0 - 1e-3);
            let above = bound * (1.0 + 1e-3);
            assert!(grid.iter().any(|&al| spectral_radius(&p, below, al) < 1.0));
            assert!(grid.iter().all(|&al| spectral_radius(&p, above, al) >= 1.0));
        }
    }

    #[test]
    fn optimal_alpha_minimizes_rho() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..10 {
            let p = random_comm(300 + seed, 7);
            let a: f64 = rng.random_range(0.5..2.0);
            let star = optimal_alpha_for_stability(&p);
            let best = spectral_radius(&p, a, star);
            for k in 1..=1000 {
                let al = k as f64 * 1e-3;
                assert!(best <= spectral_radius(&p, a, al) + 1e-12);
            }
        }
    }

    #[test]
    fn stable_interval_matches_rho() {
        let p = random_comm(17, 8);
        let a = 0.9 * unbiasedness_bound(&p);
        let (lo, hi) = stable_alpha_interval(&p, a).unwrap();
        for k in 1..=1000 {
            let al = k as f64 * 1e-3;
            let inside = al > lo && al < hi;
            let stable = spectral_radius(&p, a, al) < 1.0;
            if (al - lo).abs() > 1e-9 && (al - hi).abs() > 1e-9 {
                assert_eq!(inside, stable, "alpha {al}");
            }
        }
        assert!(stable_alpha_interval(&p, 1.1 * unbiasedness_bound(&p)).is_none());
    }

    #[test]
    fn zero_noise_errors_decay_geometrically() {
        let p = random_comm(23, 6);
        let params = ModelParams::gaussian(1.2, 0.0, 0.0);
        for kind in [EstimatorKind::Hat, EstimatorKind::Tilde] {
            let spec = EstimatorSpec::new(kind, optimal_alpha_for_stability(&p)).unwrap();
            let sys = build_error_system(&p, spec, &params);
            let mut beliefs = DVector::from_fn(6, |i, _| (i as f64 - 2.5) * 3.0);
            let xi0 = beliefs.norm();
            let y = DVector::zeros(6);
            for t in 1..=50 {
                beliefs = update(spec, &beliefs, &y, &p, params.a).unwrap();
                assert!(beliefs.norm() <= sys.rho.powi(t) * xi0 * (1.0 + 1e-10) + 1e-300);
            }
        }
    }

    #[test]
    fn mean_error_follows_q_powers() {
        let p = random_comm(31, 5);
        let params = ModelParams::gaussian(1.1, 0.5, 1.0);
        let spec = EstimatorSpec::hat(0.5).unwrap();
        let sys = build_error_system(&p, spec, &params);
        let xi0 = DVector::from_vec(vec![4.0, -3.0, 2.0, 0.0, 1.0]);
        let trials = 10_000;
        let steps = 6;
        let mut sums = vec![DVector::zeros(5); steps];
        let mut sq = vec![DVector::zeros(5); steps];
        for trial in 0..trials {
            let mut world = World::new(&params, 5, stream_rng(77, trial)).unwrap();
            let mut beliefs = xi0.clone();
            for t in 0..steps {
                let y = world.observe();
                beliefs = update(spec, &beliefs, &y, &p, params.a).unwrap();
                let x = world.advance();
                let xi = beliefs.map(|b| b - x);
                sums[t] += &xi;
                sq[t] += xi.component_mul(&xi);
            }
        }
        let mut expected = xi0.clone();
        for t in 0..steps {
            expected = &sys.q * expected;
            let n = trials as f64;
            let mean = &sums[t] / n;
            for i in 0..5 {
                let var = sq[t][i] / n - mean[i] * mean[i];
                let se = (var / n).sqrt();
                assert!((mean[i] - expected[i]).abs() <= 4.0 * se, "t={t} i={i}");
            }
        }
    }
}
