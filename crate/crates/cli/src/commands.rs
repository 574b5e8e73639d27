//! Subcommand runners. Each writes its artifacts under `out_dir/<command>/`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Serialize;
use swflow::barycenter::{exact_barycenter_of_samples, run_barycenter_flow, BarycenterProblem, GroupSample};
use swflow::data::{self, GmmSpec, GroupedDataset};
use swflow::fair::{self, FairMethod, SweepRow, SweepSummary};
use swflow::{w2_squared_1d, Empirical1D, Error, FlowConfig, Mode, ParticleCloud, Result, RunRecord};

use crate::config::{DatasetSource, RunConfigFile, SampleSource};

/// Progress messages on stderr.
#[derive(Debug, Clone, Copy)]
pub struct Log {
    pub quiet: bool,
}

impl Log {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// What a command run produced. `numeric_failures` counts runs that stopped
/// early; their partial artifacts are still written.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub numeric_failures: usize,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.numeric_failures > 0 {
            2
        } else {
            0
        }
    }
}

/// 0 success, 1 configuration or input error, 2 numeric failure.
pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(o) => o.exit_code(),
        Err(e) if e.is_numeric() => 2,
        Err(_) => 1,
    }
}

fn fmt(v: f64) -> String {
    v.to_string()
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn write_cloud(path: &Path, cloud: &ParticleCloud) -> Result<()> {
    let d = cloud.dim();
    let mut header: Vec<String> = (1..=d).map(|m| format!("x{m}")).collect();
    if cloud.log_density.is_some() {
        header.push("logrho".into());
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..cloud.len()).map(|i| {
        let mut r: Vec<String> = cloud.positions.row(i).iter().map(|&v| fmt(v)).collect();
        if let Some(lr) = &cloud.log_density {
            r.push(fmt(lr[i]));
        }
        r
    });
    write_rows(path, &header, rows)
}

fn write_matrix(path: &Path, x: &Array2<f64>) -> Result<()> {
    let header: Vec<String> = (1..=x.ncols()).map(|m| format!("x{m}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_rows(path, &header, x.rows().into_iter().map(|r| r.iter().map(|&v| fmt(v)).collect::<Vec<_>>()))
}

/// `loss.csv`, one `particles_step{k}.csv` per snapshot and `record.json`.
pub fn write_record(dir: &Path, record: &RunRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    let rows = (0..record.sw_raw.len()).map(|k| {
        vec![
            (k + 1).to_string(),
            fmt(record.sw_raw[k]),
            fmt(record.sw_db[k]),
            fmt(record.mean_drift[k]),
        ]
    });
    write_rows(&dir.join("loss.csv"), &["step", "sw_raw", "sw_db", "mean_drift"], rows)?;
    for snap in &record.snapshots {
        write_cloud(&dir.join(format!("particles_step{}.csv", snap.step)), snap)?;
    }
    write_json(&dir.join("record.json"), record)
}

/// Reads a numeric CSV with a header row into an `n×d` matrix.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let d = rdr.headers()?.len();
    let mut values = Vec::new();
    let mut n = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::CsvRow {
                row: i + 1,
                msg: format!("column {}: cannot parse {cell:?} as a number", j + 1),
            })?;
            values.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data(format!("{} has no data rows", path.display())));
    }
    Array2::from_shape_vec((n, d), values).map_err(|e| Error::Data(e.to_string()))
}

fn command_dir(cfg: &RunConfigFile, name: &str) -> Result<PathBuf> {
    let dir = cfg.out_dir.join(name);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn flow_for(cfg: &RunConfigFile, mode: Mode, seed: u64) -> FlowConfig {
    FlowConfig {
        mode,
        seed,
        ..cfg.flow.clone()
    }
}

fn finals(records: &[(Mode, u64, RunRecord)], mode: Mode) -> Vec<f64> {
    records
        .iter()
        .filter(|r| r.0 == mode)
        .filter_map(|r| r.2.final_sw())
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Runs every `(mode, seed)` pair, writes each record and a per-mode summary
/// of the final cost across seeds.
fn run_all<F>(cfg: &RunConfigFile, dir: &Path, log: Log, mut run: F) -> Result<(Outcome, Vec<(Mode, u64, RunRecord)>)>
where
    F: FnMut(&FlowConfig) -> Result<RunRecord>,
{
    let mut outcome = Outcome::default();
    let mut records = Vec::new();
    for mode in cfg.mode.modes() {
        for &seed in &cfg.seeds {
            let flow = flow_for(cfg, mode, seed);
            let record = run(&flow)?;
            let sub = dir.join(mode.name()).join(format!("seed{seed}"));
            write_record(&sub, &record)?;
            match &record.error {
                Some(e) => {
                    outcome.numeric_failures += 1;
                    log.say(format!("{} seed {seed}: {e}", mode.name()));
                }
                None => log.say(format!(
                    "{} seed {seed}: final sw {:.6e}",
                    mode.name(),
                    record.final_sw().unwrap_or(f64::NAN)
                )),
            }
            records.push((mode, seed, record));
        }
    }
    let rows: Vec<Vec<String>> = cfg
        .mode
        .modes()
        .into_iter()
        .map(|mode| {
            let raw = finals(&records, mode);
            let db: Vec<f64> = raw.iter().map(|&v| swflow::sliced::to_db(v)).collect();
            let (m, s) = mean_std(&raw);
            let (mdb, sdb) = mean_std(&db);
            vec![mode.name().into(), raw.len().to_string(), fmt(m), fmt(s), fmt(mdb), fmt(sdb)]
        })
        .collect();
    write_rows(
        &dir.join("variance_summary.csv"),
        &["mode", "n_seeds", "final_sw_mean", "final_sw_std", "final_db_mean", "final_db_std"],
        rows,
    )?;
    Ok((outcome, records))
}

pub fn gmm_target(cfg: &RunConfigFile) -> Result<(GmmSpec, Array2<f64>)> {
    let spec = match &cfg.gmm.spec_path {
        Some(p) => serde_json::from_str::<GmmSpec>(&fs::read_to_string(p)?)?,
        None => GmmSpec::random(cfg.gmm.dim, cfg.gmm.components, cfg.gmm.target_seed)?,
    };
    let spec = spec.with_seed(cfg.gmm.target_seed);
    let sample = data::sample_gmm(&spec, cfg.gmm.n_target)?;
    Ok((spec, sample))
}

/// Flows toward a Gaussian-mixture target with each selected integrator.
pub fn cmd_gmm_flow(cfg: &RunConfigFile, log: Log) -> Result<Outcome> {
    cfg.validate()?;
    let dir = command_dir(cfg, "gmm-flow")?;
    let (spec, target) = gmm_target(cfg)?;
    write_json(&dir.join("gmm_spec.json"), &spec)?;
    write_matrix(&dir.join("target.csv"), &target)?;
    let (outcome, _) = run_all(cfg, &dir, log, |flow| swflow::run_flow(target.view(), flow))?;
    Ok(outcome)
}

fn load_group(src: &SampleSource) -> Result<Array2<f64>> {
    match src {
        SampleSource::Csv { path } => read_matrix(path),
        SampleSource::Gmm { spec, n } => data::sample_gmm(spec, *n),
    }
}

/// Barycenter flow over the configured groups, plus the exact 1D barycenter
/// and the W2² gap to it when the data are scalar.
pub fn cmd_barycenter(cfg: &RunConfigFile, log: Log) -> Result<Outcome> {
    cfg.validate()?;
    let dir = command_dir(cfg, "barycenter")?;
    let samples = cfg
        .barycenter
        .groups
        .iter()
        .map(load_group)
        .collect::<Result<Vec<_>>>()?;
    let base = match &cfg.barycenter.weights {
        Some(w) => BarycenterProblem::new(
            samples
                .iter()
                .zip(w)
                .map(|(s, &weight)| GroupSample { sample: s.clone(), weight })
                .collect(),
            cfg.flow.clone(),
        )?,
        None => BarycenterProblem::with_empirical_weights(samples, cfg.flow.clone())?,
    };
    let weight_rows = base
        .groups()
        .iter()
        .enumerate()
        .map(|(s, g)| vec![s.to_string(), g.sample.nrows().to_string(), fmt(g.weight)]);
    write_rows(&dir.join("groups.csv"), &["group", "n", "weight"], weight_rows)?;

    let (outcome, records) = run_all(cfg, &dir, log, |flow| {
        let mut p = base.clone();
        p.config = flow.clone();
        run_barycenter_flow(&p)
    })?;

    if base.dim() == 1 {
        let views: Vec<_> = base.groups().iter().map(|g| (g.sample.view(), g.weight)).collect();
        let nq = cfg.barycenter.exact_num_quantiles;
        let exact = exact_barycenter_of_samples(&views, nq)?;
        write_rows(
            &dir.join("exact_barycenter.csv"),
            &["x1"],
            exact.values().iter().map(|&v| vec![fmt(v)]),
        )?;
        let mut gaps = Vec::new();
        for (mode, seed, rec) in &records {
            let cloud = Empirical1D::new(rec.final_cloud.positions.iter().copied().collect())?;
            let grid = cloud.len().max(exact.len()) * 2;
            let gap = w2_squared_1d(&cloud, &exact, grid)?;
            log.say(format!("{} seed {seed}: gap to exact barycenter {gap:.3e}", mode.name()));
            gaps.push(vec![mode.name().to_string(), seed.to_string(), fmt(gap)]);
        }
        write_rows(&dir.join("gap.csv"), &["mode", "seed", "w2_gap"], gaps)?;
    }
    Ok(outcome)
}

/// Loads or generates the fairness dataset, target scaled to `[0, 1]` if asked.
pub fn fair_dataset(cfg: &RunConfigFile) -> Result<GroupedDataset> {
    let ds = match &cfg.fair.dataset {
        DatasetSource::Csv { path, schema } => data::load_csv(path, schema)?,
        DatasetSource::HealthSurrogate { n, n_conditions, noise, seed } => {
            data::synth_health_surrogate_with_noise(*n, *n_conditions, *noise, *seed)?
        }
        DatasetSource::TwoGroup { n, n_features, shift, noise, seed } => {
            data::synth_two_group_regression(*n, *n_features, *shift, *noise, *seed)?
        }
    };
    if !cfg.fair.normalize_target {
        return Ok(ds);
    }
    let (lo, hi) = ds
        .target
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    ds.with_target(ds.target.iter().map(|v| (v - lo) / span).collect())
}

fn fair_method(name: &str, flow: &FlowConfig) -> FairMethod {
    match name {
        "swf_stochastic" => FairMethod::SwfBarycenter(FlowConfig {
            mode: Mode::Stochastic,
            ..flow.clone()
        }),
        "swf_liouville" => FairMethod::SwfBarycenter(FlowConfig {
            mode: Mode::Liouville,
            ..flow.clone()
        }),
        _ => FairMethod::Exact1d,
    }
}

fn sweep_rows(rows: &[SweepRow]) -> impl Iterator<Item = Vec<String>> + '_ {
    rows.iter().map(|r| {
        vec![
            r.method.clone(),
            fmt(r.alpha),
            fmt(r.lambda),
            r.seed.to_string(),
            fmt(r.mse),
            fmt(r.ks),
        ]
    })
}

fn summary_rows(rows: &[SweepSummary]) -> impl Iterator<Item = Vec<String>> + '_ {
    rows.iter().map(|r| {
        vec![
            r.method.clone(),
            fmt(r.alpha),
            fmt(r.lambda),
            r.n_seeds.to_string(),
            fmt(r.mse_mean),
            fmt(r.mse_std),
            fmt(r.ks_mean),
            fmt(r.ks_std),
        ]
    })
}

/// Fits the base model, sweeps every method over the alpha/lambda/seed grid
/// and writes a comparison table at the largest alpha.
pub fn cmd_fair(cfg: &RunConfigFile, log: Log) -> Result<Outcome> {
    cfg.validate()?;
    let dir = command_dir(cfg, "fair")?;
    let fc = &cfg.fair;
    let ds = fair_dataset(cfg)?;
    if fc.n_test >= ds.len() {
        return Err(Error::InvalidConfig(format!(
            "n_test {} leaves no training rows out of {}",
            fc.n_test,
            ds.len()
        )));
    }
    let (train, test) = data::split(&ds, ds.len() - fc.n_test, fc.split_seed)?;
    let base = fair::fit_base_regressor(&train, fc.ridge)?;
    write_json(&dir.join("base_model.json"), &base)?;
    let base_mse = fair::mse(&base.predict(&test)?, &test.target)?;
    log.say(format!(
        "fair: {} train / {} test rows, {} groups, base test mse {base_mse:.6e}",
        train.len(),
        test.len(),
        ds.n_groups()
    ));

    let alpha_max = fc.alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut comparison = Vec::new();
    let mut outcome = Outcome::default();
    for name in &fc.methods {
        let method = fair_method(name, &cfg.flow);
        let rows = match fair::pareto_sweep(&train, &test, &base, &method, &fc.alphas, &fc.lambdas, &cfg.seeds) {
            Ok(rows) => rows,
            Err(e) if e.is_numeric() => {
                log.say(format!("{name}: {e}"));
                outcome.numeric_failures += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let summary = fair::summarize(&rows);
        write_rows(
            &dir.join(format!("sweep_{name}.csv")),
            &["method", "alpha", "lambda", "seed", "mse", "ks"],
            sweep_rows(&rows),
        )?;
        write_rows(
            &dir.join(format!("sweep_{name}_summary.csv")),
            &["method", "alpha", "lambda", "n_seeds", "mse_mean", "mse_std", "ks_mean", "ks_std"],
            summary_rows(&summary),
        )?;
        for s in summary.iter().filter(|s| s.alpha == alpha_max) {
            log.say(format!(
                "{name} lambda {}: mse {:.4e} ± {:.1e}, ks {:.4} ± {:.4}",
                s.lambda, s.mse_mean, s.mse_std, s.ks_mean, s.ks_std
            ));
            comparison.push(vec![
                s.method.clone(),
                fmt(s.lambda),
                ds.n_groups().to_string(),
                fmt(s.alpha),
                fmt(s.mse_mean),
                fmt(s.mse_std),
                fmt(s.ks_mean),
                fmt(s.ks_std),
                fmt(s.mse_mean * 1e4),
                fmt(s.mse_std * 1e4),
                fmt(s.ks_mean * 100.0),
                fmt(s.ks_std * 100.0),
            ]);
        }
    }
    write_rows(
        &dir.join("comparison.csv"),
        &[
            "method", "lambda", "groups", "alpha", "mse_mean", "mse_std", "ks_mean", "ks_std",
            "mse_x1e4_mean", "mse_x1e4_std", "ks_pct_mean", "ks_pct_std",
        ],
        comparison,
    )?;
    Ok(outcome)
}
