use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use netlearn::cli::{run, AnalyzeOutput, Command, DesignOutput, RunArgs, SimulateOutput, SweepOutput};
use netlearn::scenario::load_scenario;

fn write_scenario(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("scenario.toml");
    fs::write(&path, text).unwrap();
    path
}

fn args(scenario: &Path, out: PathBuf) -> RunArgs {
    RunArgs {
        scenario: scenario.to_path_buf(),
        out,
        seed: None,
        trials: None,
        horizon: None,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const K10: &str = r#"
seed = 5
[graph]
family = "complete"
n = 10
[model]
a = 0.9
sigma_r2 = 1.5
sigma_w2 = 0.5
[estimator]
kind = "hat"
alpha = 0.5
"#;

#[test]
fn analyze_complete_graph_matches_hand_formula() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), K10);
    let files = run(&Command::Analyze(args(&scenario, dir.path().join("out")))).unwrap();
    assert!(files.iter().any(|f| f.ends_with("scenario.resolved.toml")));
    let out: AnalyzeOutput = read_json(&dir.path().join("out/analyze.json"));

    // Metropolis on K_10 averages uniformly: spectrum {1, 0 x 9}
    let (a, al, sr, sw, n) = (0.9_f64, 0.5_f64, 1.5_f64, 0.5_f64, 10.0_f64);
    let g1 = 1.0 - a * a * (1.0 - al) * (1.0 - al);
    let g0 = 1.0 - a * a * al * al;
    let r = sr / g1;
    let c = a * a * al * al * sw;
    let hat = r + (c / g1 + 9.0 * c / g0) / n;
    let tilde = r + c / g1 / n;
    let got_hat = out.hat.msd.as_ref().unwrap().total;
    let got_tilde = out.tilde.msd.as_ref().unwrap().total;
    assert!((got_hat - hat).abs() < 1e-12 * hat, "{got_hat} vs {hat}");
    assert!((got_tilde - tilde).abs() < 1e-12 * tilde, "{got_tilde} vs {tilde}");
    assert_eq!(out.n, 10);
    assert!(out.psd);

    let modes = fs::read_to_string(dir.path().join("out/modes.csv")).unwrap();
    assert_eq!(modes.lines().next().unwrap(), "k,lambda,gain,w_hat,w_tilde");
    assert_eq!(modes.lines().count(), 11);
}

#[test]
fn resolved_scenario_reloads_to_the_same_value() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), K10);
    run(&Command::Analyze(args(&scenario, dir.path().join("out")))).unwrap();
    let original = load_scenario(&scenario).unwrap();
    let resolved = load_scenario(&dir.path().join("out/scenario.resolved.toml")).unwrap();
    assert_eq!(original, resolved);
    let out: AnalyzeOutput = read_json(&dir.path().join("out/analyze.json"));
    assert_eq!(out.scenario, original);
}

#[test]
fn sweep_on_large_star_finds_golden_ratio_minimum() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(
        dir.path(),
        r#"
[graph]
family = "star"
n = 200
[weights]
method = "laplacian"
scale = 1.0
[estimator]
kind = "hat"
[sweep]
steps = 400
"#,
    );
    run(&Command::SweepAlpha(args(&scenario, dir.path().join("out")))).unwrap();
    let out: SweepOutput = read_json(&dir.path().join("out/sweep_alpha.json"));
    let min = out.grid_min_hat.unwrap();
    assert!((min.value - 1.618).abs() < 0.02, "{min:?}");
    let golden = out.golden_hat.unwrap();
    assert!(golden.value <= min.value + 1e-9);

    let csv = fs::read_to_string(dir.path().join("out/sweep_alpha.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "alpha,msd_hat,msd_tilde,rho");
    assert_eq!(csv.lines().count(), 401);
}

#[test]
fn design_on_complete_graph_is_empty_not_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), K10);
    run(&Command::DesignEdge(args(&scenario, dir.path().join("out")))).unwrap();
    let out: DesignOutput = read_json(&dir.path().join("out/design_edge.json"));
    assert!(out.search.candidates.is_empty());
    assert!(!out.search.notices.is_empty());
    let csv = fs::read_to_string(dir.path().join("out/design_edge.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn design_ranks_tilde_candidates_on_a_path() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(
        dir.path(),
        r#"
[graph]
family = "path"
n = 6
[weights]
method = "laplacian"
beta = 0.25
[model]
a = 0.95
[estimator]
kind = "tilde"
alpha = 0.8
[design]
top_k = 3
"#,
    );
    run(&Command::DesignEdge(args(&scenario, dir.path().join("out")))).unwrap();
    let out: DesignOutput = read_json(&dir.path().join("out/design_edge.json"));
    let c = &out.search.candidates;
    assert_eq!(c.len(), 10);
    assert!(c.windows(2).all(|w| w[0].score_first_order <= w[1].score_first_order));
    assert_eq!(c.iter().filter(|x| x.delta_msd_exact.is_some()).count(), 3);
}

#[test]
fn simulate_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), K10);
    let mut a = args(&scenario, dir.path().join("out"));
    a.trials = Some(4);
    a.horizon = Some(500);
    a.seed = Some(77);
    run(&Command::Simulate(a)).unwrap();
    let out: SimulateOutput = read_json(&dir.path().join("out/simulate.json"));
    assert_eq!(out.trials, 4);
    assert_eq!(out.seed, 77);
    assert_eq!(out.per_trial_msd.len(), 4);
}

fn binary(dir: &Path, sub: &str, scenario: &Path) -> std::process::Output {
    Process::new(env!("CARGO_BIN_EXE_netlearn"))
        .arg(sub)
        .arg("--scenario")
        .arg(scenario)
        .arg("--out")
        .arg(dir.join(sub))
        .output()
        .unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_scenario(dir.path(), K10);
    assert_eq!(binary(dir.path(), "analyze", &good).status.code(), Some(0));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[graph]\nfamily = \"cycle\"\nn = 5\nbogus = 1\n").unwrap();
    let out = binary(dir.path(), "analyze", &bad);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    // far past the unbiasedness bound of a cycle
    let unstable = dir.path().join("unstable.toml");
    fs::write(
        &unstable,
        "[graph]\nfamily = \"cycle\"\nn = 6\n[model]\na = 5.0\n[estimator]\nalpha = 0.5\n",
    )
    .unwrap();
    assert_eq!(binary(dir.path(), "simulate", &unstable).status.code(), Some(3));

    let missing = dir.path().join("missing.toml");
    assert_ne!(binary(dir.path(), "analyze", &missing).status.code(), Some(0));
}
