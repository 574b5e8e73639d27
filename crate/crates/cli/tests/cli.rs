use std::path::Path;
use std::process::Command;

fn swflow(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_swflow"))
        .args(args)
        .env("SWFLOW_THREADS", "1")
        .output()
        .expect("run swflow")
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, json).unwrap();
    path.display().to_string()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect()
}

const SMALL: &str = r#"{
    "flow": {"steps": 8, "n_particles": 200},
    "gmm": {"n_target": 400},
    "barycenter": {"exact_num_quantiles": 400},
    "fair": {"dataset": {"kind": "two_group", "n": 600, "n_features": 3, "shift": 1.0, "noise": 0.3, "seed": 2}, "n_test": 200}
}"#;

#[test]
fn gmm_flow_writes_loss_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = swflow(&["gmm-flow", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for mode in ["stochastic", "liouville"] {
        let run = out.join("gmm-flow").join(mode).join("seed0");
        assert_eq!(read_csv(&run.join("loss.csv")).len(), 8);
        for k in [0, 4, 8] {
            assert!(run.join(format!("particles_step{k}.csv")).exists());
        }
        assert!(run.join("record.json").exists());
    }
    let spec = std::fs::read_to_string(out.join("gmm-flow/gmm_spec.json")).unwrap();
    assert!(spec.contains("components"));
}

#[test]
fn single_mode_and_seed_range() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = swflow(&[
        "gmm-flow", "--config", &cfg, "--out", out.to_str().unwrap(), "--mode", "stochastic",
        "--seed", "3", "--seeds", "3", "--quiet",
    ]);
    assert!(o.status.success());
    let base = out.join("gmm-flow");
    assert!(!base.join("liouville").exists());
    for s in 3..6 {
        assert!(base.join(format!("stochastic/seed{s}/loss.csv")).exists());
    }
    let summary = read_csv(&base.join("variance_summary.csv"));
    assert_eq!(summary.len(), 1);
    assert_eq!(summary[0][0], "stochastic");
    assert_eq!(summary[0][1], "3");
}

#[test]
fn barycenter_reports_small_gap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"flow": {"steps": 60, "n_particles": 800}, "barycenter": {"exact_num_quantiles": 800}}"#,
    );
    let out = dir.path().join("out");
    let o = swflow(&["barycenter", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let gaps = read_csv(&out.join("barycenter/gap.csv"));
    assert_eq!(gaps.len(), 2);
    for row in gaps {
        let gap: f64 = row[2].parse().unwrap();
        assert!(gap < 0.05, "gap {gap}");
    }
}

#[test]
fn fair_alpha_zero_reproduces_base() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = swflow(&[
        "fair", "--config", &cfg, "--out", out.to_str().unwrap(), "--alphas", "0", "--seeds", "2",
        "--quiet",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fair = out.join("fair");
    let mut mses = Vec::new();
    for m in ["exact_1d", "swf_stochastic", "swf_liouville"] {
        let rows = read_csv(&fair.join(format!("sweep_{m}.csv")));
        assert_eq!(rows.len(), 2);
        mses.extend(rows.into_iter().map(|r| r[4].clone()));
    }
    assert!(mses.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(read_csv(&fair.join("comparison.csv")).len(), 3);
}

#[test]
fn fair_row_count_is_the_grid_size() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"flow": {"steps": 5, "n_particles": 100},
            "fair": {"dataset": {"kind": "health_surrogate", "n": 400, "n_conditions": 12, "noise": 0.05, "seed": 1},
                     "n_test": 100, "alphas": [0, 0.5, 1], "lambdas": [0.0001, 0.001], "methods": ["exact_1d", "swf_stochastic"]},
            "seeds": [0, 1]}"#,
    );
    let out = dir.path().join("out");
    let o = swflow(&["fair", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for m in ["exact_1d", "swf_stochastic"] {
        assert_eq!(read_csv(&out.join(format!("fair/sweep_{m}.csv"))).len(), 3 * 2 * 2);
        assert_eq!(read_csv(&out.join(format!("fair/sweep_{m}_summary.csv"))).len(), 3 * 2);
    }
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), SMALL);
    assert!(swflow(&["validate", "--config", &good, "--quiet"]).status.success());
    let o = swflow(&["fair", "--config", &good, "--validate", "--out", dir.path().join("nope").to_str().unwrap()]);
    assert!(o.status.success());
    assert!(!dir.path().join("nope").exists());

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"flow": {"h": -1}}"#).unwrap();
    assert_eq!(swflow(&["validate", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
    std::fs::write(&bad, r#"{"unknown": 1}"#).unwrap();
    assert_eq!(swflow(&["gmm-flow", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(swflow(&["validate", "--config", "/nonexistent.json"]).status.code(), Some(1));
}

#[test]
fn numeric_failure_exits_2_with_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    // a collapsed initial cloud has zero KDE bandwidth
    let cfg = write_config(
        dir.path(),
        r#"{"flow": {"steps": 5, "n_particles": 50, "lambda": 0.01, "init": {"kind": "gaussian", "sigma": 1e-300}},
            "gmm": {"n_target": 100}}"#,
    );
    let out = dir.path().join("out");
    let o = swflow(&["gmm-flow", "--config", &cfg, "--out", out.to_str().unwrap(), "--mode", "liouville"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let record = std::fs::read_to_string(out.join("gmm-flow/liouville/seed0/record.json")).unwrap();
    assert!(record.contains("score overflow"));
}

#[test]
fn exact_method_has_lowest_ks_at_full_remap() {
    use swflow::data::{split, synth_two_group_regression};
    use swflow::fair::{fit_base_regressor, pareto_sweep, FairMethod};
    use swflow::{FlowConfig, Mode};

    let mut exact_best = 0;
    for seed in 0..10u64 {
        let ds = synth_two_group_regression(800, 3, 1.0, 0.3, seed).unwrap();
        let (train, test) = split(&ds, 600, seed).unwrap();
        let base = fit_base_regressor(&train, 1e-6).unwrap();
        let ks = |method: FairMethod| {
            pareto_sweep(&train, &test, &base, &method, &[1.0], &[1e-4], &[seed]).unwrap()[0].ks
        };
        let flow = |mode| FlowConfig {
            mode,
            steps: 30,
            n_particles: 300,
            h: 1.0,
            lambda: 1e-4,
            ..FlowConfig::default()
        };
        let exact = ks(FairMethod::Exact1d);
        let sto = ks(FairMethod::SwfBarycenter(flow(Mode::Stochastic)));
        let lio = ks(FairMethod::SwfBarycenter(flow(Mode::Liouville)));
        if exact <= sto.min(lio) {
            exact_best += 1;
        }
    }
    assert!(exact_best >= 8, "exact lowest in {exact_best}/10");
}
