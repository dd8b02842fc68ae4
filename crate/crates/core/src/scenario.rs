//! TOML scenario files.
//!
//! ```toml
//! seed = 7
//!
//! [graph]
//! family = "cycle"        # complete | star | cycle | path
//! n = 10                  # or: edges = [[0, 1], [1, 2]] with n
//!
//! [weights]
//! method = "laplacian"    # metropolis | laplacian | explicit
//! beta = 0.2              # or scale = c, meaning beta = c / n
//!
//! [model]
//! a = 1.0
//! sigma_r2 = 1.0
//! sigma_w2 = 1.0
//! noise = { family = "uniform" }
//!
//! [estimator]
//! kind = "tilde"
//! alpha = "max-stability" # or a number in (0, 1]
//! ```
//!
//! Unknown keys are rejected. Every omitted section or key takes the default
//! shown by [`Scenario::to_toml`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{optimal_alpha_for_stability, validate_alpha, BeliefInit, EstimatorKind, EstimatorSpec};
use crate::graph::{build_named_graph, comm_from_laplacian, comm_metropolis, CommMatrix, Graph, GraphFamily};
use crate::model::{InitialState, ModelParams, NoiseFamily};
use crate::netdesign::DEFAULT_TOP_K;
use crate::regret::RegretConfig;
use crate::simulate::{RecordMode, SimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub graph: GraphSection,
    #[serde(default)]
    pub weights: WeightSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub estimator: EstimatorSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub regret: RegretSection,
    #[serde(default)]
    pub design: DesignSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<GraphFamily>,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<[usize; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightSpec {
    // struct form so stray keys are still rejected
    Metropolis {},
    /// `P = I - beta L`; give either `beta` or `scale` (`beta = scale / n`).
    Laplacian {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        beta: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale: Option<f64>,
    },
    Explicit { matrix: Vec<Vec<f64>> },
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec::Metropolis {}
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub a: f64,
    pub sigma_r2: f64,
    pub sigma_w2: f64,
    pub x0: InitialState,
    pub noise: NoiseFamily,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            a: 1.0,
            sigma_r2: 1.0,
            sigma_w2: 1.0,
            x0: InitialState::default(),
            noise: NoiseFamily::default(),
        }
    }
}

impl ModelSection {
    pub fn params(&self) -> ModelParams {
        ModelParams {
            a: self.a,
            sigma_r2: self.sigma_r2,
            sigma_w2: self.sigma_w2,
            x0: self.x0,
            noise: self.noise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlphaRule {
    /// `(1 + lambda_N) / 2`, which minimizes the spectral radius at `a = 1`.
    #[serde(rename = "max-stability")]
    MaxStability,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaChoice {
    Value(f64),
    Rule(AlphaRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSection {
    pub kind: EstimatorKind,
    pub alpha: AlphaChoice,
    pub init: BeliefInit,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        EstimatorSection {
            kind: EstimatorKind::Tilde,
            alpha: AlphaChoice::Rule(AlphaRule::MaxStability),
            init: BeliefInit::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub horizon: usize,
    pub trials: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    pub record: RecordMode,
    pub allow_unstable: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            horizon: 10_000,
            trials: 32,
            burn_in: None,
            record: RecordMode::Aggregate,
            allow_unstable: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegretSection {
    pub delta: f64,
    pub horizons: Vec<usize>,
    pub trials: usize,
}

impl Default for RegretSection {
    fn default() -> Self {
        RegretSection {
            delta: 0.05,
            horizons: (8..=14).map(|k| 1usize << k).collect(),
            trials: 400,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignSection {
    /// Defaults to `min(0.1 * min_i p_ii, 1e-2)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    pub top_k: usize,
}

impl Default for DesignSection {
    fn default() -> Self {
        DesignSection {
            eps: None,
            top_k: DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Grid `alpha = k / steps` for `k = 1..=steps`.
    pub steps: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { steps: 200 }
    }
}

/// Everything a subcommand needs, built from a validated scenario.
#[derive(Debug, Clone)]
pub struct Setup {
    pub graph: Graph,
    pub p: CommMatrix,
    pub params: ModelParams,
    pub spec: EstimatorSpec,
}

fn field(path: &str, reason: impl Into<String>) -> Error {
    Error::Scenario {
        path: path.to_string(),
        reason: reason.into(),
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_scenario(&text)
}

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let scenario: Scenario = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    scenario.validate()?;
    Ok(scenario)
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let g = &self.graph;
        match (&g.family, &g.edges) {
            (Some(_), Some(_)) => return Err(field("graph", "give either `family` or `edges`, not both")),
            (None, None) => return Err(field("graph", "need `family` or `edges`")),
            (Some(f), None) if g.n < f.min_nodes() => {
                return Err(field("graph.n", format!("{f} needs at least {} nodes", f.min_nodes())))
            }
            (None, Some(edges)) => {
                if let Some(e) = edges.iter().find(|e| e[0] >= g.n || e[1] >= g.n || e[0] == e[1]) {
                    return Err(field("graph.edges", format!("{e:?} is not an edge on nodes 0..{}", g.n)));
                }
            }
            _ => {}
        }
        if g.n == 0 {
            return Err(field("graph.n", "must be >= 1"));
        }
        match &self.weights {
            WeightSpec::Metropolis {} => {}
            WeightSpec::Laplacian { beta, scale } => match (beta, scale) {
                (Some(b), None) if *b >= 0.0 && b.is_finite() => {}
                (None, Some(s)) if *s >= 0.0 && s.is_finite() => {}
                (Some(_), None) => return Err(field("weights.beta", "must be >= 0")),
                (None, Some(_)) => return Err(field("weights.scale", "must be >= 0")),
                _ => return Err(field("weights", "laplacian weights need exactly one of `beta` or `scale`")),
            },
            WeightSpec::Explicit { matrix } => {
                if matrix.len() != g.n || matrix.iter().any(|r| r.len() != g.n) {
                    return Err(field("weights.matrix", format!("must be {0}x{0}", g.n)));
                }
            }
        }
        self.model.params().validate().map_err(|e| e.in_section("model"))?;
        if let AlphaChoice::Value(a) = self.estimator.alpha {
            validate_alpha(a).map_err(|e| e.in_section("estimator"))?;
        }
        self.sim_config().validate().map_err(|e| e.in_section("simulation"))?;
        let r = &self.regret;
        if !(r.delta > 0.0 && r.delta < 1.0) {
            return Err(field("regret.delta", format!("{} is outside (0, 1)", r.delta)));
        }
        if r.horizons.is_empty() || r.horizons.contains(&0) {
            return Err(field("regret.horizons", "need one or more positive horizons"));
        }
        if r.trials == 0 {
            return Err(field("regret.trials", "must be >= 1"));
        }
        if let Some(eps) = self.design.eps {
            if !(eps > 0.0) || !eps.is_finite() {
                return Err(field("design.eps", format!("{eps} must be positive")));
            }
        }
        if self.sweep.steps < 2 {
            return Err(field("sweep.steps", "must be >= 2"));
        }
        Ok(())
    }

    pub fn build_graph(&self) -> Result<Graph> {
        let g = &self.graph;
        match (&g.family, &g.edges) {
            (Some(f), _) => build_named_graph(*f, g.n),
            (None, Some(edges)) => Graph::new(g.n, edges.iter().map(|e| (e[0], e[1]))),
            (None, None) => Err(field("graph", "need `family` or `edges`")),
        }
    }

    pub fn build(&self) -> Result<Setup> {
        let graph = self.build_graph()?;
        let p = match &self.weights {
            WeightSpec::Metropolis {} => comm_metropolis(&graph)?,
            WeightSpec::Laplacian { beta, scale } => {
                let b = match (beta, scale) {
                    (Some(b), _) => *b,
                    (None, Some(s)) => s / graph.n() as f64,
                    (None, None) => return Err(field("weights", "need `beta` or `scale`")),
                };
                comm_from_laplacian(&graph, b).map_err(|e| e.in_section("weights"))?
            }
            WeightSpec::Explicit { matrix } => {
                let n = graph.n();
                let m = nalgebra::DMatrix::from_fn(n, n, |i, j| matrix[i][j]);
                CommMatrix::from_matrix(m, Some(&graph))?
            }
        };
        let alpha = self.resolve_alpha(&p);
        let spec = EstimatorSpec::new(self.estimator.kind, alpha).map_err(|e| e.in_section("estimator"))?;
        Ok(Setup {
            graph,
            params: self.model.params(),
            p,
            spec,
        })
    }

    pub fn resolve_alpha(&self, p: &CommMatrix) -> f64 {
        match self.estimator.alpha {
            AlphaChoice::Value(a) => a,
            AlphaChoice::Rule(AlphaRule::MaxStability) => optimal_alpha_for_stability(p),
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        let s = &self.simulation;
        SimConfig {
            horizon: s.horizon,
            trials: s.trials,
            burn_in: s.burn_in,
            seed: self.seed,
            init: self.estimator.init,
            record: s.record,
            allow_unstable: s.allow_unstable,
        }
    }

    pub fn regret_config(&self) -> RegretConfig {
        RegretConfig {
            delta: self.regret.delta,
            trials: self.regret.trials,
            seed: self.seed,
            init: self.estimator.init,
        }
    }

    /// The scenario with every default written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Io(format!("cannot serialize scenario: {e}")))
    }
}
