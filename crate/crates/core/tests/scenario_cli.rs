use std::fs;
use std::path::Path;
use std::process::Command;

use gameirl::model_based::IterationTrace;
use gameirl::scenario::{emit_plot_data, load_config, parse_config, run_scenario, ScenarioConfig};
use gameirl::Error;

const CONFIGS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");

fn config(name: &str, out: &Path) -> ScenarioConfig {
    let mut cfg = load_config(format!("{CONFIGS}/{name}.toml")).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn scalar_smoke_follows_hand_recursion() {
    let dir = tempfile::tempdir().unwrap();
    let artifacts = run_scenario(&config("scalar_smoke", dir.path())).unwrap();
    let trace = &artifacts.alg1.as_ref().unwrap().trace;
    // P^i = (Q^i + 4) / 4, K^(i+1) = P^i, Q^(i+1) = (P^i)^2.
    let mut q = 1.0f64;
    for rec in trace.records.iter().take(200) {
        let p = (q + 4.0) / 4.0;
        assert!((rec.p[(0, 0)] - p).abs() <= 1e-9, "iteration {}", rec.iter);
        assert!((rec.k[(0, 0)] - p).abs() <= 1e-9);
        q = p * p;
        assert!((rec.q_next[(0, 0)] - q).abs() <= 1e-9);
    }
    assert!(artifacts.passed());
}

#[test]
fn reference_scenario_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_scenario(&config("two_state_game", a.path())).unwrap();
    let second = run_scenario(&config("two_state_game", b.path())).unwrap();
    emit_plot_data(&first).unwrap();
    emit_plot_data(&second).unwrap();
    let fa = csv_files(a.path());
    let fb = csv_files(b.path());
    assert!(fa.len() >= 10, "{:?}", fa.iter().map(|f| &f.0).collect::<Vec<_>>());
    assert_eq!(fa, fb);
}

#[test]
fn summary_matches_emitted_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let artifacts = run_scenario(&config("two_state_game", dir.path())).unwrap();
    let summary = fs::read_to_string(&artifacts.summary_path).unwrap();
    for run in artifacts.runs() {
        let trace = IterationTrace::read_csv(fs::File::open(&run.trace_path).unwrap()).unwrap();
        assert_eq!(trace.records.len(), run.trace.records.len());
        let last = trace.records.last().unwrap();
        let gain_error = (&last.k - &artifacts.k_t).norm();
        assert_eq!(gain_error, run.summary.gain_error);
        let label = run.summary.algorithm;
        let line = format!("{label}.gain_error = {}", gameirl::sim::fmt_f64(gain_error));
        assert!(summary.contains(&line), "missing `{line}`");
        assert!(summary.contains(&format!("{label}.iterations = {}", trace.records.len())));

        let traj = fs::read_to_string(&run.trajectory_path).unwrap();
        assert_eq!(traj.lines().count(), cfg_samples(&artifacts) + 2);
        assert_eq!(traj.lines().next().unwrap(), "t,x_1,x_2,xT_1,xT_2");
    }

    let plots = emit_plot_data(&artifacts).unwrap();
    for p in &plots {
        let name = p.file_name().unwrap().to_string_lossy();
        let text = fs::read_to_string(p).unwrap();
        if name.starts_with("trajectory_overlay") {
            assert_eq!(text.lines().count(), cfg_samples(&artifacts) + 2);
        } else {
            let last_gain = text
                .lines()
                .rfind(|l| l.starts_with("gain_error,"))
                .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
                .unwrap();
            assert!(last_gain <= 0.01, "{name}: {last_gain}");
        }
    }
}

fn cfg_samples(a: &gameirl::scenario::RunArtifacts) -> usize {
    a.primary().unwrap().trajectories.t.len() - 1
}

#[test]
fn config_round_trip_preserves_fields() {
    let cfg = load_config(format!("{CONFIGS}/two_state_game.toml")).unwrap();
    let again = parse_config(&cfg.to_toml_string()).unwrap();
    assert_eq!(cfg, again);
    assert_eq!(cfg.dynamics.a().as_slice(), &[-1.0, 2.2, 2.0, 1.7]);
}

#[test]
fn config_validation_names_fields() {
    let missing_expert = "dynamics.A = 0.0\ndynamics.B = 1.0\ndynamics.D = 0.0\nlearner.Q0 = 1.0\nlearner.R = 1.0\nlearner.gamma = 1.0\n";
    match parse_config(missing_expert) {
        Err(Error::Config(msg)) => assert!(msg.contains("expert"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let bad_r = format!("{missing_expert}expert.K = 2.0\n").replace("learner.R = 1.0", "learner.R = -1.0");
    match parse_config(&bad_r) {
        Err(Error::Config(msg)) => assert!(msg.contains("learner.R"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let both = format!("{missing_expert}expert.K = 2.0\nexpert.Q = 1.0\nexpert.R = 1.0\nexpert.gamma = 2.0\n");
    assert!(matches!(parse_config(&both), Err(Error::Config(_))));
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gameirl")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let smoke = format!("{CONFIGS}/scalar_smoke.toml");

    let ok = cli(&["alg1", "--config", &smoke, "--out", out, "--quiet"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(ok.stdout.is_empty());
    assert!(dir.path().join("trace_alg1.csv").exists());

    let cfg = fs::read_to_string(&smoke)
        .unwrap()
        .replace("run.max_iters = 20000", "run.max_iters = 5");
    let short = dir.path().join("short.toml");
    fs::write(&short, cfg).unwrap();
    let failed = cli(&["verify", "--config", short.to_str().unwrap(), "--out", out, "--quiet"]);
    assert_eq!(failed.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&failed.stderr).contains("check failed"));

    let missing = cli(&["verify", "--config", "/nonexistent.toml"]);
    assert_eq!(missing.status.code(), Some(1));
    let no_config = cli(&["gare"]);
    assert_eq!(no_config.status.code(), Some(1));
}

#[test]
fn cli_gare_and_collect() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let two_state = format!("{CONFIGS}/two_state_game.toml");
    let gare = cli(&["gare", "--config", &two_state]);
    assert_eq!(gare.status.code(), Some(0));
    let text = String::from_utf8_lossy(&gare.stdout);
    assert!(text.contains("1.986") && text.contains("3.577"), "{text}");

    let collect = cli(&["collect", "--config", &two_state, "--out", out]);
    assert_eq!(
        collect.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&collect.stderr)
    );
    assert!(dir.path().join("expert_batch.csv").exists());
    assert!(dir.path().join("learner_batch.csv").exists());

    let reseeded = tempfile::tempdir().unwrap();
    let again = cli(&[
        "collect",
        "--config",
        &two_state,
        "--out",
        reseeded.path().to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert_eq!(again.status.code(), Some(0));
    assert_ne!(
        fs::read(dir.path().join("expert_batch.csv")).unwrap(),
        fs::read(reseeded.path().join("expert_batch.csv")).unwrap()
    );
}
