//! JSON run configuration shared by all subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use swflow::data::{CsvSchema, GmmComponent, GmmSpec};
use swflow::{Error, FlowConfig, Mode, Result};

/// Which integrators to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSelection {
    Stochastic,
    Liouville,
    Both,
}

impl ModeSelection {
    pub fn modes(self) -> Vec<Mode> {
        match self {
            ModeSelection::Stochastic => vec![Mode::Stochastic],
            ModeSelection::Liouville => vec![Mode::Liouville],
            ModeSelection::Both => vec![Mode::Stochastic, Mode::Liouville],
        }
    }
}

impl std::str::FromStr for ModeSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(ModeSelection::Stochastic),
            "liouville" => Ok(ModeSelection::Liouville),
            "both" => Ok(ModeSelection::Both),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmSection {
    /// JSON [`GmmSpec`]; when absent a random spec is drawn.
    pub spec_path: Option<PathBuf>,
    pub dim: usize,
    pub components: usize,
    /// Seed of the random spec and of the target sample.
    pub target_seed: u64,
    pub n_target: usize,
}

impl Default for GmmSection {
    fn default() -> Self {
        Self {
            spec_path: None,
            dim: 2,
            components: 10,
            target_seed: 0,
            n_target: 2000,
        }
    }
}

/// One group sample for the barycenter command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SampleSource {
    /// Numeric CSV with a header row; every column is a coordinate.
    Csv { path: PathBuf },
    Gmm { spec: GmmSpec, n: usize },
}

fn normal_source(mean: f64, seed: u64) -> SampleSource {
    SampleSource::Gmm {
        spec: GmmSpec {
            components: vec![GmmComponent {
                weight: 1.0,
                mean: vec![mean],
                var: vec![1.0],
            }],
            seed,
        },
        n: 2000,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BarycenterSection {
    pub groups: Vec<SampleSource>,
    /// Defaults to `n_s / n`.
    pub weights: Option<Vec<f64>>,
    /// Resolution of the exact 1D barycenter.
    pub exact_num_quantiles: usize,
}

impl Default for BarycenterSection {
    fn default() -> Self {
        Self {
            groups: vec![normal_source(-2.0, 1), normal_source(2.0, 2)],
            weights: None,
            exact_num_quantiles: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Csv { path: PathBuf, schema: CsvSchema },
    HealthSurrogate { n: usize, n_conditions: usize, noise: f64, seed: u64 },
    TwoGroup { n: usize, n_features: usize, shift: f64, noise: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FairSection {
    pub dataset: DatasetSource,
    pub n_test: usize,
    pub split_seed: u64,
    pub ridge: f64,
    /// Min-max scale the target to `[0, 1]` before splitting.
    pub normalize_target: bool,
    pub alphas: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Any of `exact_1d`, `swf_stochastic`, `swf_liouville`.
    pub methods: Vec<String>,
}

pub const FAIR_METHODS: [&str; 3] = ["exact_1d", "swf_stochastic", "swf_liouville"];

impl Default for FairSection {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::TwoGroup {
                n: 2000,
                n_features: 5,
                shift: 1.0,
                noise: 0.3,
                seed: 0,
            },
            n_test: 300,
            split_seed: 0,
            ridge: 1e-6,
            normalize_target: true,
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            lambdas: vec![1e-4],
            methods: FAIR_METHODS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub flow: FlowConfig,
    pub mode: ModeSelection,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub gmm: GmmSection,
    pub barycenter: BarycenterSection,
    pub fair: FairSection,
}

/// Flow defaults for experiment runs: 30 directions, `h = 1`, `λ = 1e-4`,
/// 100 quantiles.
pub fn default_flow() -> FlowConfig {
    FlowConfig {
        h: 1.0,
        lambda: 1e-4,
        n_theta: 30,
        steps: 100,
        num_quantiles: 100,
        n_particles: 1000,
        ..FlowConfig::default()
    }
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            flow: default_flow(),
            mode: ModeSelection::Both,
            seeds: vec![0],
            out_dir: PathBuf::from("swflow-out"),
            gmm: GmmSection::default(),
            barycenter: BarycenterSection::default(),
            fair: FairSection::default(),
        }
    }
}

/// Overlays `patch` on `base`. Objects merge key by key unless both carry a
/// different `kind` tag; everything else is replaced.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            let retagged = matches!((b.get("kind"), p.get("kind")), (Some(x), Some(y)) if x != y);
            if retagged {
                *b = p;
                return;
            }
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

impl RunConfigFile {
    /// Parses a partial config; missing fields take the file defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let patch: Value = serde_json::from_str(text)?;
        if !patch.is_object() {
            return Err(Error::InvalidConfig("config must be a JSON object".into()));
        }
        let mut merged = serde_json::to_value(Self::default())?;
        merge(&mut merged, patch);
        serde_json::from_value(merged).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.flow.validate()?;
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty".into());
        }
        let exists = |p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("missing file {}", p.display())))
            }
        };
        if let Some(p) = &self.gmm.spec_path {
            exists(p)?;
        } else if self.gmm.dim == 0 || self.gmm.components == 0 {
            return bad("gmm dim and components must be >= 1".into());
        }
        if self.gmm.n_target == 0 {
            return bad("gmm n_target must be >= 1".into());
        }
        if self.barycenter.groups.is_empty() {
            return bad("barycenter needs at least one group".into());
        }
        for g in &self.barycenter.groups {
            match g {
                SampleSource::Csv { path } => exists(path)?,
                SampleSource::Gmm { spec, n } => {
                    spec.validate()?;
                    if *n == 0 {
                        return bad("group sample size must be >= 1".into());
                    }
                }
            }
        }
        if let Some(w) = &self.barycenter.weights {
            if w.len() != self.barycenter.groups.len() {
                return bad("barycenter weights and groups differ in length".into());
            }
            swflow::sliced::validate_weights(w)?;
        }
        if self.barycenter.exact_num_quantiles < 2 {
            return bad("exact_num_quantiles must be >= 2".into());
        }
        let fair = &self.fair;
        if let DatasetSource::Csv { path, .. } = &fair.dataset {
            exists(path)?;
        }
        if fair.alphas.is_empty() || fair.lambdas.is_empty() || fair.methods.is_empty() {
            return bad("fair grids must be non-empty".into());
        }
        if let Some(a) = fair.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return bad(format!("alpha {a} outside [0, 1]"));
        }
        if let Some(l) = fair.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return bad(format!("lambda {l} must be >= 0"));
        }
        if let Some(m) = fair.methods.iter().find(|m| !FAIR_METHODS.contains(&m.as_str())) {
            return bad(format!("unknown fair method {m:?}"));
        }
        if !(fair.ridge.is_finite() && fair.ridge >= 0.0) {
            return bad(format!("ridge must be >= 0, got {}", fair.ridge));
        }
        if fair.n_test == 0 {
            return bad("n_test must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(RunConfigFile::from_json("{}").unwrap(), RunConfigFile::default());
        RunConfigFile::default().validate().unwrap();
    }

    #[test]
    fn partial_sections_keep_file_defaults() {
        let cfg = RunConfigFile::from_json(r#"{"flow": {"steps": 7}, "fair": {"alphas": [0]}}"#)
            .unwrap();
        assert_eq!(cfg.flow.steps, 7);
        assert_eq!(cfg.flow.h, 1.0);
        assert_eq!(cfg.flow.lambda, 1e-4);
        assert_eq!(cfg.fair.alphas, vec![0.0]);
        assert_eq!(cfg.fair.n_test, 300);
    }

    #[test]
    fn retagged_sources_replace_defaults() {
        let cfg = RunConfigFile::from_json(
            r#"{"fair": {"dataset": {"kind": "health_surrogate", "n": 500, "n_conditions": 62, "noise": 0.05, "seed": 1}}}"#,
        )
        .unwrap();
        assert!(matches!(cfg.fair.dataset, DatasetSource::HealthSurrogate { n: 500, .. }));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfigFile::from_json(r#"{"flw": {}}"#).is_err());
        assert!(RunConfigFile::from_json(r#"{"flow": {"stepz": 3}}"#).is_err());
        let cfg = RunConfigFile::from_json(r#"{"fair": {"alphas": [1.5]}}"#).unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfigFile::from_json(r#"{"seeds": []}"#).unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfigFile::from_json(
            r#"{"barycenter": {"groups": [{"kind": "csv", "path": "/nonexistent/x.csv"}]}}"#,
        )
        .unwrap();
        assert!(cfg.validate().is_err());
    }
}
