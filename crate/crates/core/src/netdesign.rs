//! Single-edge network design.
//!
//! Adding edge `{i, j}` with weight `eps` moves `P` to `P + eps dP` with
//! `dP = -(e_i - e_j)(e_i - e_j)^T`. To first order eigenvalue `k` shifts by
//! `z_k = -eps (v_k[i] - v_k[j])^2`, and the tilde observation penalty moves
//! by `(a^2 alpha^2 sigma_w^2 / N) sum_k h_k` with
//!
//! ```text
//! h_k = z_k (2 (1 - alpha^2 a^2) lambda_k + 2 a^2 alpha lambda_k^2) / (1 - a^2 (lambda_k - alpha)^2)^2
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{EstimatorKind, EstimatorSpec};
use crate::graph::{CommMatrix, EdgePerturbation, PerturbSign};
use crate::model::ModelParams;
use crate::msd::msd_closed_form;

pub const DEFAULT_TOP_K: usize = 10;

const DEFAULT_EPS_FRACTION: f64 = 0.1;
const DEFAULT_EPS_CAP: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeCandidate {
    pub i: usize,
    pub j: usize,
    pub eps: f64,
    /// `sum_k h_k`; tilde only.
    pub score_first_order: Option<f64>,
    /// Linearized change of the tilde MSD, `(a^2 alpha^2 sigma_w^2 / N) sum_k h_k`.
    pub delta_msd_first_order: Option<f64>,
    /// Lower bound on `sum_k h_k`; present when `P` is PSD and `|a alpha| < 1`.
    pub lower_bound: Option<f64>,
    /// `MSD(P_eps) - MSD(P)` from a fresh decomposition of `P_eps`.
    pub delta_msd_exact: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSearch {
    pub kind: EstimatorKind,
    pub eps: f64,
    pub psd: bool,
    /// Sign guarantees hold: tilde, PSD `P` and `|a alpha| < 1`.
    pub guaranteed: bool,
    pub candidates: Vec<EdgeCandidate>,
    pub notices: Vec<String>,
}

/// `min(0.1 * min_i p_ii, 1e-2)`.
pub fn default_eps(p: &CommMatrix) -> f64 {
    (DEFAULT_EPS_FRACTION * p.min_diagonal()).min(DEFAULT_EPS_CAP)
}

fn check_candidate(p: &CommMatrix, i: usize, j: usize, eps: f64) -> Result<()> {
    let n = p.n();
    if i >= n || j >= n || i == j {
        return Err(Error::InvalidPerturbation(format!("({i}, {j}) is not a pair of distinct agents below {n}")));
    }
    if p.get(i, j) != 0.0 {
        return Err(Error::InvalidPerturbation(format!("{{{i}, {j}}} is already an edge")));
    }
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::param("design.eps", format!("{eps} must be >= 0")));
    }
    Ok(())
}

/// First-order eigenvalue shifts `z_k = -eps (v_k[i] - v_k[j])^2`.
pub fn z_scores(p: &CommMatrix, i: usize, j: usize, eps: f64) -> Result<Vec<f64>> {
    check_candidate(p, i, j, eps)?;
    let v = &p.spectrum().eigenvectors;
    Ok((0..p.n())
        .map(|k| {
            let d = v[(i, k)] - v[(j, k)];
            -eps * d * d
        })
        .collect())
}

fn require_tilde(spec: EstimatorSpec) -> Result<()> {
    if spec.kind != EstimatorKind::Tilde {
        return Err(Error::param("estimator.kind", "the first-order edge score is defined for tilde only"));
    }
    Ok(())
}

/// Derivative weights `h_k / z_k`, rejecting unstable modes.
fn h_weights(p: &CommMatrix, alpha: f64, a: f64) -> Result<Vec<f64>> {
    let c = 1.0 - alpha * alpha * a * a;
    p.eigenvalues()
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            let g = a * (l - alpha);
            let d = 1.0 - g * g;
            if d < crate::msd::SINGULAR_TOL {
                return Err(Error::Unstable {
                    index: k,
                    lambda: l,
                    gain: g.abs(),
                });
            }
            Ok((2.0 * c * l + 2.0 * a * a * alpha * l * l) / (d * d))
        })
        .collect()
}

/// `sum_k h_k(i, j)`; the tilde MSD moves by `(a^2 alpha^2 sigma_w^2 / N)`
/// times this for small `eps`.
pub fn first_order_score(p: &CommMatrix, spec: EstimatorSpec, params: &ModelParams, i: usize, j: usize, eps: f64) -> Result<f64> {
    require_tilde(spec)?;
    let weights = h_weights(p, spec.alpha, params.a)?;
    let z = z_scores(p, i, j, eps)?;
    Ok(z.iter().zip(&weights).map(|(z, w)| z * w).sum())
}

pub fn first_order_delta_msd(p: &CommMatrix, spec: EstimatorSpec, params: &ModelParams, i: usize, j: usize, eps: f64) -> Result<f64> {
    let score = first_order_score(p, spec, params, i, j, eps)?;
    let a = params.a;
    Ok(a * a * spec.alpha * spec.alpha * params.sigma_w2 / p.n() as f64 * score)
}

/// `MSD(P') - MSD(P)` where `P'` adds or removes the weighted edge.
pub fn exact_delta_msd(
    p: &CommMatrix,
    spec: EstimatorSpec,
    params: &ModelParams,
    pert: EdgePerturbation,
    sign: PerturbSign,
) -> Result<f64> {
    let base = msd_closed_form(p, spec, params)?;
    if pert.eps == 0.0 {
        return Ok(0.0);
    }
    let moved = p.perturb(pert, sign)?;
    let next = msd_closed_form(&moved, spec, params)?;
    // the innovation penalty does not depend on P
    Ok(next.w_msd - base.w_msd)
}

/// Whether the lower bound and the sign guarantees apply.
pub fn bound_applies(p: &CommMatrix, spec: EstimatorSpec, params: &ModelParams) -> bool {
    spec.kind == EstimatorKind::Tilde && p.is_psd() && (params.a * spec.alpha).abs() < 1.0
}

/// Lower bound on `sum_k h_k(i, j)` through `p_ii + p_jj` and the entries of
/// `P^2`, with `zeta_max = max_{k>1} |lambda_k - alpha|`.
pub fn lower_bound(p: &CommMatrix, spec: EstimatorSpec, params: &ModelParams, i: usize, j: usize, eps: f64) -> Result<f64> {
    check_candidate(p, i, j, eps)?;
    let (a, alpha) = (params.a, spec.alpha);
    let zeta = p
        .eigenvalues()
        .iter()
        .skip(1)
        .fold(0.0_f64, |acc, &l| acc.max((l - alpha).abs()));
    let d = 1.0 - a * a * zeta * zeta;
    if d < crate::msd::SINGULAR_TOL {
        return Err(Error::Unstable {
            index: 1,
            lambda: f64::NAN,
            gain: (a * zeta).abs(),
        });
    }
    let m = p.matrix();
    let p2 = |r: usize, c: usize| m.row(r).dot(&m.column(c).transpose());
    let self_term = (1.0 - alpha * alpha * a * a) * (m[(i, i)] + m[(j, j)]);
    let walk_term = a * a * alpha * (p2(i, i) + p2(j, j) - 2.0 * p2(i, j));
    Ok(-2.0 * eps * (self_term + walk_term) / (d * d))
}

/// Scores every non-edge. Tilde candidates are ranked by the first-order
/// score with exact recomputation for the `top_k` best; hat candidates are
/// ranked by exact change alone. Ties go to the lexicographically smaller pair.
pub fn optimal_edge_search(
    p: &CommMatrix,
    spec: EstimatorSpec,
    params: &ModelParams,
    eps: Option<f64>,
    top_k: usize,
) -> Result<EdgeSearch> {
    let eps = eps.unwrap_or_else(|| default_eps(p));
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::param("design.eps", format!("{eps} must be positive (is some self-weight zero?)")));
    }
    // base must be stable
    msd_closed_form(p, spec, params)?;
    let psd = p.is_psd();
    let guaranteed = bound_applies(p, spec, params);
    let mut notices = Vec::new();
    if !psd {
        notices.push(format!(
            "P is not positive semidefinite (lambda_N = {:.6e}); sign guarantees disabled",
            p.lambda_min()
        ));
    }
    if spec.kind == EstimatorKind::Hat {
        notices.push("hat estimator: exact changes only, no first-order score or sign guarantee".to_string());
    }
    let pairs = p.graph().non_edges();
    if pairs.is_empty() {
        notices.push("graph is complete; there is no edge to add".to_string());
        return Ok(EdgeSearch {
            kind: spec.kind,
            eps,
            psd,
            guaranteed,
            candidates: Vec::new(),
            notices,
        });
    }
    let admissible: Vec<(usize, usize)> = pairs
        .iter()
        .copied()
        .filter(|&(i, j)| eps < p.get(i, i).min(p.get(j, j)))
        .collect();
    if admissible.len() < pairs.len() {
        notices.push(format!(
            "{} non-edges skipped: eps = {eps:e} is not below both self-weights",
            pairs.len() - admissible.len()
        ));
    }
    let exact = |i: usize, j: usize| exact_delta_msd(p, spec, params, EdgePerturbation { i, j, eps }, PerturbSign::Add);
    let lexi = |x: &EdgeCandidate, y: &EdgeCandidate| (x.i, x.j).cmp(&(y.i, y.j));

    let mut candidates: Vec<EdgeCandidate> = match spec.kind {
        EstimatorKind::Tilde => {
            let weights = h_weights(p, spec.alpha, params.a)?;
            let scale = params.a * params.a * spec.alpha * spec.alpha * params.sigma_w2 / p.n() as f64;
            let mut c = admissible
                .par_iter()
                .map(|&(i, j)| {
                    // score per unit eps keeps the ranking identical across eps
                    let z = z_scores(p, i, j, 1.0)?;
                    let unit: f64 = z.iter().zip(&weights).map(|(z, w)| z * w).sum();
                    let score = eps * unit;
                    let lower = if guaranteed { Some(lower_bound(p, spec, params, i, j, eps)?) } else { None };
                    Ok(EdgeCandidate {
                        i,
                        j,
                        eps,
                        score_first_order: Some(score),
                        delta_msd_first_order: Some(scale * score),
                        lower_bound: lower,
                        delta_msd_exact: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            c.sort_by(|x, y| {
                x.score_first_order
                    .unwrap_or(f64::NAN)
                    .total_cmp(&y.score_first_order.unwrap_or(f64::NAN))
                    .then_with(|| lexi(x, y))
            });
            let top = top_k.min(c.len());
            let exacts = c[..top]
                .par_iter()
                .map(|cand| exact(cand.i, cand.j))
                .collect::<Result<Vec<_>>>()?;
            for (cand, e) in c.iter_mut().zip(exacts) {
                cand.delta_msd_exact = Some(e);
            }
            c
        }
        EstimatorKind::Hat => {
            let mut c = admissible
                .par_iter()
                .map(|&(i, j)| {
                    Ok(EdgeCandidate {
                        i,
                        j,
                        eps,
                        score_first_order: None,
                        delta_msd_first_order: None,
                        lower_bound: None,
                        delta_msd_exact: Some(exact(i, j)?),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            c.sort_by(|x, y| {
                x.delta_msd_exact
                    .unwrap_or(f64::NAN)
                    .total_cmp(&y.delta_msd_exact.unwrap_or(f64::NAN))
                    .then_with(|| lexi(x, y))
            });
            c
        }
    };
    candidates.shrink_to_fit();
    Ok(EdgeSearch {
        kind: spec.kind,
        eps,
        psd,
        guaranteed,
        candidates,
        notices,
    })
}
