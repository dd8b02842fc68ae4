//! Command-line front end.
//!
//! Every subcommand reads a scenario, writes its artifacts into `--out`
//! together with `scenario.resolved.toml`, and reports warnings on stderr.
//! Exit status is 0 on success, 2 for invalid input, 3 for an unstable
//! configuration and 1 otherwise.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{
    build_error_system, spectral_radius, stable_alpha_interval, unbiasedness_bound, optimal_alpha_for_stability,
    EstimatorKind, EstimatorSpec,
};
use crate::msd::{
    connectivity_ratio, kalman_steady_state, msd_bound_reference, msd_closed_form, optimize_alpha, AlphaObjective,
    AlphaOptimum, MsdReport,
};
use crate::netdesign::{optimal_edge_search, EdgeSearch};
use crate::regret::{verify_bound, RegretSummary};
use crate::scenario::{load_scenario, Scenario, Setup};
use crate::simulate::{run_trials, RecordMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_UNSTABLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "netlearn", version, about = "Distributed tracking of a dynamic state over a network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form MSD, spectrum and stability report
    Analyze(RunArgs),
    /// Monte Carlo estimate of the MSD
    Simulate(RunArgs),
    /// Empirical regret against its high-probability bound
    Regret(RunArgs),
    /// Rank candidate edges by their effect on the MSD
    DesignEdge(RunArgs),
    /// Closed-form MSD and spectral radius over a grid of signal weights
    SweepAlpha(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Analyze(_) => "analyze",
            Command::Simulate(_) => "simulate",
            Command::Regret(_) => "regret",
            Command::DesignEdge(_) => "design-edge",
            Command::SweepAlpha(_) => "sweep-alpha",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Analyze(a)
            | Command::Simulate(a)
            | Command::Regret(a)
            | Command::DesignEdge(a)
            | Command::SweepAlpha(a) => a,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Scenario file (TOML)
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory, created if missing
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Simulation horizon; for `regret`, the single horizon to check
    #[arg(long)]
    pub horizon: Option<usize>,
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        EXIT_VALIDATION
    } else if err.is_instability() {
        EXIT_UNSTABLE
    } else {
        EXIT_FAILURE
    }
}

pub fn hint(err: &Error) -> Option<&'static str> {
    match err {
        Error::Unstable { .. } => Some("lower |a| or pick alpha inside the stable interval reported by `analyze`"),
        Error::Infeasible { .. } => Some("|a| must stay below 2 / (1 - lambda_N(P)); add edges or reweight P"),
        Error::Diverged(_) => Some("set simulation.allow_unstable = true to record diverging demo runs"),
        Error::Parse(_) => Some("check the scenario syntax and key names"),
        Error::Scenario { .. } | Error::InvalidParameter { .. } => Some("fix the named field in the scenario"),
        Error::InvalidCommMatrix(_) | Error::Asymmetric { .. } => {
            Some("weights must be symmetric, doubly stochastic and supported on the graph")
        }
        _ => None,
    }
}

fn warn(msg: impl AsRef<str>) {
    eprintln!("warning: {}", msg.as_ref());
}

/// 17 significant digits.
pub fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f).unwrap_or_default()
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn apply_overrides(scenario: &mut Scenario, args: &RunArgs) -> Result<()> {
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(trials) = args.trials {
        scenario.simulation.trials = trials;
        scenario.regret.trials = trials;
    }
    if let Some(h) = args.horizon {
        scenario.simulation.horizon = h;
        scenario.regret.horizons = vec![h];
    }
    scenario.validate()
}

/// Loads the scenario, applies flag overrides and runs the subcommand.
/// Returns the files written.
pub fn run(command: &Command) -> Result<Vec<PathBuf>> {
    let args = command.args();
    let mut scenario = load_scenario(&args.scenario)?;
    apply_overrides(&mut scenario, args)?;
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let resolved = args.out.join("scenario.resolved.toml");
    fs::write(&resolved, scenario.to_toml()?).map_err(|e| io_err(&resolved, e))?;
    let setup = scenario.build()?;
    let mut files = match command {
        Command::Analyze(_) => analyze(&scenario, &setup, &args.out)?,
        Command::Simulate(_) => simulate(&scenario, &setup, &args.out)?,
        Command::Regret(_) => regret(&scenario, &setup, &args.out)?,
        Command::DesignEdge(_) => design_edge(&scenario, &setup, &args.out)?,
        Command::SweepAlpha(_) => sweep_alpha(&scenario, &setup, &args.out)?,
    };
    files.insert(0, resolved);
    Ok(files)
}

fn check_rate(setup: &Setup) {
    let bound = unbiasedness_bound(&setup.p);
    if setup.params.a.abs() >= bound {
        warn(format!(
            "|a| = {} is not below the unbiasedness bound 2 / (1 - lambda_N) = {bound}; no signal weight keeps the error bounded",
            setup.params.a.abs()
        ));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindAnalysis {
    pub rho: f64,
    pub stable: bool,
    pub msd: Option<MsdReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOutput {
    pub scenario: Scenario,
    pub seed: u64,
    pub n: usize,
    pub alpha: f64,
    pub eigenvalues: Vec<f64>,
    pub unbiasedness_bound: f64,
    pub alpha_max_stability: f64,
    pub stable_alpha_interval: Option<(f64, f64)>,
    pub psd: bool,
    pub hat: KindAnalysis,
    pub tilde: KindAnalysis,
    pub kalman_steady_state: Option<f64>,
    pub msd_bound_reference: f64,
    pub connectivity_ratio: Option<f64>,
}

fn analyze(scenario: &Scenario, setup: &Setup, out: &Path) -> Result<Vec<PathBuf>> {
    check_rate(setup);
    let Setup { p, params, spec, .. } = setup;
    if !p.is_psd() {
        warn(format!("P is not positive semidefinite (lambda_N = {:e})", p.lambda_min()));
    }
    let kind = |k: EstimatorKind| -> Result<KindAnalysis> {
        let s = EstimatorSpec::new(k, spec.alpha)?;
        let sys = build_error_system(p, s, params);
        let msd = match msd_closed_form(p, s, params) {
            Ok(r) => Some(r),
            Err(e) if e.is_instability() => {
                warn(format!("{k}: {e}"));
                None
            }
            Err(e) => return Err(e),
        };
        Ok(KindAnalysis {
            rho: sys.rho,
            stable: msd.is_some(),
            msd,
        })
    };
    let hat = kind(EstimatorKind::Hat)?;
    let tilde = kind(EstimatorKind::Tilde)?;
    let output = AnalyzeOutput {
        scenario: scenario.clone(),
        seed: scenario.seed,
        n: p.n(),
        alpha: spec.alpha,
        eigenvalues: p.eigenvalues().to_vec(),
        unbiasedness_bound: unbiasedness_bound(p),
        alpha_max_stability: optimal_alpha_for_stability(p),
        stable_alpha_interval: stable_alpha_interval(p, params.a),
        psd: p.is_psd(),
        kalman_steady_state: kalman_steady_state(params, p.n()).ok(),
        msd_bound_reference: msd_bound_reference(spec.alpha, params)?,
        connectivity_ratio: connectivity_ratio(spec.alpha, params).ok(),
        hat,
        tilde,
    };
    let json = out.join("analyze.json");
    write_json(&json, &output)?;
    let csv = out.join("modes.csv");
    let per_mode = |k: &KindAnalysis, i: usize| k.msd.as_ref().map(|m| m.per_mode[i]);
    write_csv(
        &csv,
        &["k", "lambda", "gain", "w_hat", "w_tilde"],
        p.eigenvalues().iter().enumerate().map(|(i, &l)| {
            vec![
                i.to_string(),
                fmt_f(l),
                fmt_f((params.a * (l - spec.alpha)).abs()),
                fmt_opt(per_mode(&output.hat, i)),
                fmt_opt(per_mode(&output.tilde, i)),
            ]
        }),
    )?;
    Ok(vec![json, csv])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateOutput {
    pub empirical_msd: f64,
    pub stderr: f64,
    pub closed_form_msd: Option<f64>,
    pub n: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub trials: usize,
    pub seed: u64,
    pub kind: EstimatorKind,
    pub alpha: f64,
    pub burn_in: usize,
    pub rho: f64,
    pub unstable: bool,
    pub diverged_trials: Vec<usize>,
    pub per_trial_msd: Vec<f64>,
    pub empirical_sigma: Option<Vec<Vec<f64>>>,
    pub scenario: Scenario,
}

fn simulate(scenario: &Scenario, setup: &Setup, out: &Path) -> Result<Vec<PathBuf>> {
    check_rate(setup);
    let sim = scenario.sim_config();
    let res = run_trials(&setup.p, setup.spec, &setup.params, &sim)?;
    if res.unstable {
        warn(format!("unstable configuration (rho = {}); results are a divergence demo", res.rho));
    }
    let closed = msd_closed_form(&setup.p, setup.spec, &setup.params).ok().map(|r| r.total);
    if let (Some(c), Some(series)) = (closed, res.per_step_msd.as_ref()) {
        let tail = &series[series.len() / 2..];
        let late = tail.iter().sum::<f64>() / tail.len() as f64;
        if late > 2.0 * c {
            warn(format!("late per-step MSD averages {late:e}, more than twice the closed form {c:e}"));
        }
    }
    let output = SimulateOutput {
        empirical_msd: res.empirical_msd,
        stderr: res.stderr,
        closed_form_msd: closed,
        n: res.n,
        horizon: res.horizon,
        trials: res.trials,
        seed: res.seed,
        kind: res.kind,
        alpha: res.alpha,
        burn_in: res.burn_in,
        rho: res.rho,
        unstable: res.unstable,
        diverged_trials: res.diverged_trials.clone(),
        per_trial_msd: res.per_trial_msd.clone(),
        empirical_sigma: res
            .empirical_sigma
            .as_ref()
            .map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect()),
        scenario: scenario.clone(),
    };
    let json = out.join("simulate.json");
    write_json(&json, &output)?;
    let mut files = vec![json];
    if sim.record == RecordMode::Full {
        let csv = out.join("per_step.csv");
        let traces = res.traces.unwrap_or_default();
        write_csv(
            &csv,
            &["trial", "t", "msd_instant"],
            traces
                .iter()
                .enumerate()
                .flat_map(|(trial, s)| s.iter().enumerate().map(move |(t, v)| vec![trial.to_string(), t.to_string(), fmt_f(*v)])),
        )?;
        files.push(csv);
    }
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretOutput {
    pub kind: EstimatorKind,
    pub alpha: f64,
    pub n: usize,
    pub rho: f64,
    pub delta: f64,
    pub s_bound: f64,
    pub trials: usize,
    pub seed: u64,
    pub within_slack: bool,
    pub summary: Vec<RegretSummary>,
    pub scenario: Scenario,
}

fn regret(scenario: &Scenario, setup: &Setup, out: &Path) -> Result<Vec<PathBuf>> {
    check_rate(setup);
    let cfg = scenario.regret_config();
    let table = verify_bound(&setup.p, setup.spec, &setup.params, &scenario.regret.horizons, &cfg)?;
    let csv = out.join("regret.csv");
    write_csv(
        &csv,
        &["T", "trial", "regret_trace", "regret_specnorm", "bound_total", "violated"],
        table.rows.iter().map(|r| {
            vec![
                r.horizon.to_string(),
                r.trial.to_string(),
                fmt_f(r.regret_trace),
                fmt_f(r.regret_specnorm),
                fmt_f(r.bound_total),
                r.violated.to_string(),
            ]
        }),
    )?;
    if !table.within_slack() {
        warn("violation rate exceeds delta plus binomial slack at some horizon");
    }
    let output = RegretOutput {
        kind: table.kind,
        alpha: table.alpha,
        n: table.n,
        rho: table.rho,
        delta: table.delta,
        s_bound: table.s_bound,
        trials: cfg.trials,
        seed: table.seed,
        within_slack: table.within_slack(),
        summary: table.summary,
        scenario: scenario.clone(),
    };
    let json = out.join("regret.json");
    write_json(&json, &output)?;
    Ok(vec![csv, json])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignOutput {
    pub seed: u64,
    pub alpha: f64,
    pub search: EdgeSearch,
    pub scenario: Scenario,
}

fn design_edge(scenario: &Scenario, setup: &Setup, out: &Path) -> Result<Vec<PathBuf>> {
    check_rate(setup);
    let search = optimal_edge_search(&setup.p, setup.spec, &setup.params, scenario.design.eps, scenario.design.top_k)?;
    for n in &search.notices {
        warn(n);
    }
    let csv = out.join("design_edge.csv");
    write_csv(
        &csv,
        &["i", "j", "score_first_order", "lower_bound", "delta_msd_exact"],
        search.candidates.iter().map(|c| {
            vec![
                c.i.to_string(),
                c.j.to_string(),
                fmt_opt(c.score_first_order),
                fmt_opt(c.lower_bound),
                fmt_opt(c.delta_msd_exact),
            ]
        }),
    )?;
    let json = out.join("design_edge.json");
    write_json(
        &json,
        &DesignOutput {
            seed: scenario.seed,
            alpha: setup.spec.alpha,
            search,
            scenario: scenario.clone(),
        },
    )?;
    Ok(vec![csv, json])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub msd_hat: Option<f64>,
    pub msd_tilde: Option<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub seed: u64,
    pub n: usize,
    pub grid_min_hat: Option<AlphaOptimum>,
    pub grid_min_tilde: Option<AlphaOptimum>,
    pub golden_hat: Option<AlphaOptimum>,
    pub golden_tilde: Option<AlphaOptimum>,
    pub stable_alpha_interval: Option<(f64, f64)>,
    pub scenario: Scenario,
}

pub fn sweep_points(setup: &Setup, steps: usize) -> Vec<SweepPoint> {
    let Setup { p, params, .. } = setup;
    (1..=steps)
        .map(|k| {
            let alpha = k as f64 / steps as f64;
            let msd = |kind| {
                EstimatorSpec::new(kind, alpha)
                    .and_then(|s| msd_closed_form(p, s, params))
                    .ok()
                    .map(|r| r.total)
            };
            SweepPoint {
                alpha,
                msd_hat: msd(EstimatorKind::Hat),
                msd_tilde: msd(EstimatorKind::Tilde),
                rho: spectral_radius(p, params.a, alpha),
            }
        })
        .collect()
}

fn grid_min(points: &[SweepPoint], pick: impl Fn(&SweepPoint) -> Option<f64>) -> Option<AlphaOptimum> {
    points
        .iter()
        .filter_map(|pt| pick(pt).map(|v| AlphaOptimum { alpha: pt.alpha, value: v }))
        .min_by(|x, y| x.value.total_cmp(&y.value))
}

fn sweep_alpha(scenario: &Scenario, setup: &Setup, out: &Path) -> Result<Vec<PathBuf>> {
    check_rate(setup);
    let points = sweep_points(setup, scenario.sweep.steps);
    let csv = out.join("sweep_alpha.csv");
    write_csv(
        &csv,
        &["alpha", "msd_hat", "msd_tilde", "rho"],
        points
            .iter()
            .map(|pt| vec![fmt_f(pt.alpha), fmt_opt(pt.msd_hat), fmt_opt(pt.msd_tilde), fmt_f(pt.rho)]),
    )?;
    let golden = |kind| match optimize_alpha(AlphaObjective::ClosedForm { p: &setup.p, kind }, &setup.params) {
        Ok(o) => Ok(Some(o)),
        Err(e) if e.is_instability() => Ok(None),
        Err(e) => Err(e),
    };
    let output = SweepOutput {
        seed: scenario.seed,
        n: setup.p.n(),
        grid_min_hat: grid_min(&points, |pt| pt.msd_hat),
        grid_min_tilde: grid_min(&points, |pt| pt.msd_tilde),
        golden_hat: golden(EstimatorKind::Hat)?,
        golden_tilde: golden(EstimatorKind::Tilde)?,
        stable_alpha_interval: stable_alpha_interval(&setup.p, setup.params.a),
        scenario: scenario.clone(),
    };
    let json = out.join("sweep_alpha.json");
    write_json(&json, &output)?;
    if output.golden_hat.is_none() && output.grid_min_hat.is_none() {
        return Err(Error::Infeasible {
            a: setup.params.a,
            bound: unbiasedness_bound(&setup.p),
        });
    }
    Ok(vec![csv, json])
}
