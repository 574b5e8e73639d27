//! Synthetic generators, CSV ingestion and train/test splitting.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal covariance.
    pub var: Vec<f64>,
}

/// Diagonal Gaussian mixture plus the seed its samples are drawn with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub components: Vec<GmmComponent>,
    pub seed: u64,
}

impl GmmSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let Some(first) = self.components.first() else {
            return bad("gmm has no components".into());
        };
        let d = first.mean.len();
        if d == 0 {
            return bad("gmm dimension is zero".into());
        }
        let mut total = 0.0;
        for c in &self.components {
            if c.mean.len() != d || c.var.len() != d {
                return bad("gmm components disagree on dimension".into());
            }
            if !(c.weight.is_finite() && c.weight > 0.0) {
                return bad(format!("gmm weight {} is not positive", c.weight));
            }
            if c.var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return bad("gmm variances must be positive".into());
            }
            if c.mean.iter().any(|v| !v.is_finite()) {
                return bad("gmm means must be finite".into());
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("gmm weights sum to {total}"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    /// Random mixture whose centroids are pairwise at least 4 × the largest
    /// component standard deviation apart.
    pub fn random(d: usize, k: usize, seed: u64) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(Error::InvalidConfig("gmm needs d >= 1 and k >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stds: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(0.2..0.6)).collect())
            .collect();
        let max_std = stds.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
        let min_dist = 4.0 * max_std;
        // box large enough that k well-separated centres fit comfortably
        let half_width = (min_dist * (k as f64).powf(1.0 / d as f64)).max(4.0);
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut attempts = 0usize;
        while means.len() < k {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::InvalidConfig("could not place gmm centroids".into()));
            }
            let c: Vec<f64> = (0..d)
                .map(|_| rng.random_range(-half_width..half_width))
                .collect();
            let far = means.iter().all(|m| {
                m.iter()
                    .zip(&c)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
                    >= min_dist
            });
            if far {
                means.push(c);
            }
        }
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        let components = means
            .into_iter()
            .zip(stds)
            .zip(raw)
            .map(|((mean, std), w)| GmmComponent {
                weight: w / total,
                mean,
                var: std.iter().map(|s| s * s).collect(),
            })
            .collect();
        let spec = Self { components, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// `n` draws from the mixture, seeded by `spec.seed`.
pub fn sample_gmm(spec: &GmmSpec, n: usize) -> Result<Array2<f64>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig("sample size must be >= 1".into()));
    }
    let d = spec.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let chooser = WeightedIndex::new(spec.components.iter().map(|c| c.weight))
        .map_err(|e| Error::InvalidConfig(format!("gmm weights: {e}")))?;
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let c = &spec.components[chooser.sample(&mut rng)];
        for m in 0..d {
            data.push(c.mean[m] + c.var[m].sqrt() * normal(&mut rng));
        }
    }
    Ok(Array2::from_shape_vec((n, d), data).expect("shape"))
}

/// Tabular rows with a dense group label per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedDataset {
    pub features: Array2<f64>,
    pub sensitive: Vec<usize>,
    pub target: Vec<f64>,
    /// `count(s) / n` for each group.
    pub group_weights: Vec<f64>,
    /// Original label of each dense group index.
    pub group_labels: Vec<String>,
    pub feature_names: Vec<String>,
}

impl GroupedDataset {
    pub fn new(
        features: Array2<f64>,
        sensitive: Vec<usize>,
        target: Vec<f64>,
        group_labels: Vec<String>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let n = features.nrows();
        if n == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        if sensitive.len() != n || target.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: sensitive.len().min(target.len()),
            });
        }
        if feature_names.len() != features.ncols() {
            return Err(Error::LengthMismatch {
                left: feature_names.len(),
                right: features.ncols(),
            });
        }
        if let Some(&s) = sensitive.iter().find(|&&s| s >= group_labels.len()) {
            return Err(Error::UnknownGroup(s));
        }
        let mut ds = Self {
            features,
            sensitive,
            target,
            group_weights: Vec::new(),
            group_labels,
            feature_names,
        };
        let counts = ds.group_counts();
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Data(format!(
                "group {:?} has no rows",
                ds.group_labels[empty]
            )));
        }
        ds.group_weights = counts.iter().map(|&c| c as f64 / n as f64).collect();
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn n_groups(&self) -> usize {
        self.group_labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_groups()];
        for &s in &self.sensitive {
            counts[s] += 1;
        }
        counts
    }

    /// Rows at `indices`, keeping the full group label set.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.features.select(Axis(0), indices),
            indices.iter().map(|&i| self.sensitive[i]).collect(),
            indices.iter().map(|&i| self.target[i]).collect(),
            self.group_labels.clone(),
            self.feature_names.clone(),
        )
    }

    /// Same rows with a replaced target column.
    pub fn with_target(&self, target: Vec<f64>) -> Result<Self> {
        Self::new(
            self.features.clone(),
            self.sensitive.clone(),
            target,
            self.group_labels.clone(),
            self.feature_names.clone(),
        )
    }
}

/// How the sensitive column becomes group labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SensitiveEncoding {
    /// Each distinct string is a group.
    #[default]
    Categorical,
    /// Numeric column split into `"above"` (> threshold) and `"below"`.
    Threshold(f64),
    /// Numeric column binned at its empirical quantiles into `k` groups.
    Quantiles(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub feature_columns: Vec<String>,
    pub sensitive_column: String,
    pub target_column: String,
    #[serde(default)]
    pub sensitive_encoding: SensitiveEncoding,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<GroupedDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<GroupedDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing column {name:?}")))
    };
    let feature_idx = schema
        .feature_columns
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;
    let sensitive_idx = column(&schema.sensitive_column)?;
    let target_idx = column(&schema.target_column)?;

    let mut features = Vec::new();
    let mut raw_sensitive = Vec::new();
    let mut target = Vec::new();
    let mut n = 0;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let cell = |idx: usize, name: &str| -> Result<&str> {
            match rec.get(idx) {
                Some(s) if !s.is_empty() => Ok(s),
                _ => Err(Error::CsvRow {
                    row,
                    msg: format!("missing value in column {name:?}"),
                }),
            }
        };
        let number = |idx: usize, name: &str| -> Result<f64> {
            let s = cell(idx, name)?;
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::CsvRow {
                    row,
                    msg: format!("column {name:?}: cannot parse {s:?} as a number"),
                }),
            }
        };
        for (&idx, name) in feature_idx.iter().zip(&schema.feature_columns) {
            features.push(number(idx, name)?);
        }
        raw_sensitive.push(cell(sensitive_idx, &schema.sensitive_column)?.to_string());
        target.push(number(target_idx, &schema.target_column)?);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("csv has no data rows".into()));
    }
    let labels = encode_sensitive(&raw_sensitive, &schema.sensitive_encoding, &schema.sensitive_column)?;
    let (sensitive, group_labels) = densify(&labels);
    let features =
        Array2::from_shape_vec((n, feature_idx.len()), features).expect("shape");
    GroupedDataset::new(
        features,
        sensitive,
        target,
        group_labels,
        schema.feature_columns.clone(),
    )
}

fn encode_sensitive(
    raw: &[String],
    encoding: &SensitiveEncoding,
    column: &str,
) -> Result<Vec<String>> {
    let numeric = || -> Result<Vec<f64>> {
        raw.iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse::<f64>().map_err(|_| Error::CsvRow {
                    row: i + 1,
                    msg: format!("column {column:?}: cannot parse {s:?} as a number"),
                })
            })
            .collect()
    };
    match encoding {
        SensitiveEncoding::Categorical => Ok(raw.to_vec()),
        SensitiveEncoding::Threshold(t) => Ok(numeric()?
            .into_iter()
            .map(|v| if v > *t { "above" } else { "below" }.to_string())
            .collect()),
        SensitiveEncoding::Quantiles(k) => {
            if *k == 0 {
                return Err(Error::InvalidConfig("quantile groups must be >= 1".into()));
            }
            let values = numeric()?;
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            // upper edges of the first k-1 bins
            let edges: Vec<f64> = (1..*k).map(|j| sorted[(j * n / k).min(n - 1)]).collect();
            let width = (k.saturating_sub(1)).to_string().len();
            Ok(values
                .iter()
                .map(|v| {
                    let bin = edges.partition_point(|e| e <= v);
                    format!("q{bin:0width$}")
                })
                .collect())
        }
    }
}

/// Dense indices over the sorted distinct labels.
fn densify(labels: &[String]) -> (Vec<usize>, Vec<String>) {
    let distinct: Vec<String> = labels
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index = labels
        .iter()
        .map(|l| distinct.binary_search(l).expect("present"))
        .collect();
    (index, distinct)
}

pub const SAVED_GROUP_COLUMN: &str = "group";
pub const SAVED_TARGET_COLUMN: &str = "target";

/// Writes the dataset with its feature names, a `group` label column and a
/// `target` column. Values use the shortest round-trip float format.
pub fn save_csv(dataset: &GroupedDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_csv(dataset, file)
}

pub fn write_csv<W: Write>(dataset: &GroupedDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = dataset.feature_names.iter().map(String::as_str).collect();
    header.push(SAVED_GROUP_COLUMN);
    header.push(SAVED_TARGET_COLUMN);
    w.write_record(&header)?;
    for i in 0..dataset.len() {
        let mut rec: Vec<String> = dataset.features.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(dataset.group_labels[dataset.sensitive[i]].clone());
        rec.push(dataset.target[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Schema matching [`save_csv`] output.
pub fn saved_schema(dataset: &GroupedDataset) -> CsvSchema {
    CsvSchema {
        feature_columns: dataset.feature_names.clone(),
        sensitive_column: SAVED_GROUP_COLUMN.into(),
        target_column: SAVED_TARGET_COLUMN.into(),
        sensitive_encoding: SensitiveEncoding::Categorical,
    }
}

const SPLIT_ATTEMPTS: usize = 100;

/// Seeded random split; every group keeps at least two rows on each side.
pub fn split(
    dataset: &GroupedDataset,
    n_train: usize,
    seed: u64,
) -> Result<(GroupedDataset, GroupedDataset)> {
    let n = dataset.len();
    if n_train == 0 || n_train >= n {
        return Err(Error::InvalidConfig(format!(
            "n_train must be in 1..{n}, got {n_train}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..SPLIT_ATTEMPTS {
        order.shuffle(&mut rng);
        let mut train: Vec<usize> = order[..n_train].to_vec();
        let mut test: Vec<usize> = order[n_train..].to_vec();
        let ok = |idx: &[usize]| {
            let mut counts = vec![0usize; dataset.n_groups()];
            for &i in idx {
                counts[dataset.sensitive[i]] += 1;
            }
            counts.iter().all(|&c| c >= 2)
        };
        if ok(&train) && ok(&test) {
            train.sort_unstable();
            test.sort_unstable();
            return Ok((dataset.subset(&train)?, dataset.subset(&test)?));
        }
    }
    Err(Error::Data(format!(
        "no split with >= 2 rows per group on both sides after {SPLIT_ATTEMPTS} attempts"
    )))
}

/// Two groups with shifted features and targets:
/// `y = x·β + shift·s + noise·ε`, with `x ~ N(0.5 s, I)`.
pub fn synth_two_group_regression(
    n: usize,
    n_features: usize,
    shift: f64,
    noise: f64,
    seed: u64,
) -> Result<GroupedDataset> {
    if n < 4 {
        return Err(Error::InvalidConfig("need at least 4 rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta: Vec<f64> = (0..n_features).map(|_| normal(&mut rng) * 0.5).collect();
    let mut features = Vec::with_capacity(n * n_features);
    let mut sensitive = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n);
    for i in 0..n {
        // alternate the first rows so both groups are present even for tiny n
        let s = if i < 4 { i % 2 } else { usize::from(rng.random_bool(0.5)) };
        let mut y = shift * s as f64;
        for b in &beta {
            let x = normal(&mut rng) + 0.5 * s as f64;
            features.push(x);
            y += b * x;
        }
        y += noise * normal(&mut rng);
        sensitive.push(s);
        target.push(y);
    }
    GroupedDataset::new(
        Array2::from_shape_vec((n, n_features), features).expect("shape"),
        sensitive,
        target,
        vec!["0".into(), "1".into()],
        (1..=n_features).map(|j| format!("x{j}")).collect(),
    )
}

/// Minimum number of positive rows per condition column.
pub const MIN_CONDITION_COUNT: usize = 30;

/// Health-spending-like surrogate with the default noise level.
pub fn synth_health_surrogate(n: usize, n_conditions: usize, seed: u64) -> Result<GroupedDataset> {
    synth_health_surrogate_with_noise(n, n_conditions, 0.05, seed)
}

/// Binary condition indicators, a binary sensitive attribute that raises the
/// prevalence of a quarter of the conditions, and a min-max normalized target
/// that is a sparse positive combination of conditions and group plus
/// right-skewed noise.
pub fn synth_health_surrogate_with_noise(
    n: usize,
    n_conditions: usize,
    noise: f64,
    seed: u64,
) -> Result<GroupedDataset> {
    if n < 100 {
        return Err(Error::InvalidConfig(format!("surrogate needs n >= 100, got {n}")));
    }
    if n_conditions == 0 {
        return Err(Error::InvalidConfig("surrogate needs >= 1 condition".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sensitive: Vec<usize> = (0..n)
        .map(|i| if i < 4 { i % 2 } else { usize::from(rng.random_bool(0.5)) })
        .collect();

    let floor = MIN_CONDITION_COUNT as f64 / n as f64;
    let p_lo = (1.5 * floor).max(0.03).min(0.5);
    let p_hi = (p_lo + 0.1).max(0.35).min(0.6);
    let correlated = (n_conditions / 4).max(1);

    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(n_conditions);
    for c in 0..n_conditions {
        let base = rng.random_range(p_lo..p_hi);
        let mut attempts = 0;
        let col = loop {
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::Data("could not meet the condition prevalence floor".into()));
            }
            let col: Vec<f64> = sensitive
                .iter()
                .map(|&s| {
                    let p = if c < correlated {
                        if s == 1 { (base * 1.6).min(0.95) } else { base * 0.6 }
                    } else {
                        base
                    };
                    f64::from(u8::from(rng.random_bool(p)))
                })
                .collect();
            if col.iter().sum::<f64>() >= MIN_CONDITION_COUNT as f64 {
                break col;
            }
        };
        columns.push(col);
    }

    let n_active = (n_conditions / 5).max(1).min(n_conditions);
    let mut active: Vec<usize> = (0..n_conditions).collect();
    active.shuffle(&mut rng);
    active.truncate(n_active);
    let coef: Vec<(usize, f64)> = active
        .iter()
        .map(|&c| (c, Distribution::<f64>::sample(&Exp1, &mut rng) + 0.2))
        .collect();
    let group_effect = 0.5;
    let skew_mean = 0.5f64.exp();
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let mut y = group_effect * sensitive[i] as f64;
            for &(c, b) in &coef {
                y += b * columns[c][i];
            }
            if noise > 0.0 {
                y += noise * (normal(&mut rng).exp() - skew_mean);
            }
            y
        })
        .collect();
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let target = raw.iter().map(|v| (v - lo) / span).collect();

    let mut features = Array2::zeros((n, n_conditions));
    for (c, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            features[[i, c]] = *v;
        }
    }
    GroupedDataset::new(
        features,
        sensitive,
        target,
        vec!["0".into(), "1".into()],
        (1..=n_conditions).map(|j| format!("hcc{j}")).collect(),
    )
}
