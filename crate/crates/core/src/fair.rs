//! Post-processing a regressor toward demographic parity.
//!
//! A base model `f(x, s)` is fitted by ridge regression. Its predictions are
//! remapped per group through `Q* ∘ F_s`, where `F_s` is the CDF of the
//! group's training predictions and `Q*` the quantile function of their 1D
//! barycenter. `alpha` interpolates between the base and the remapped output.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barycenter::exact_barycenter_1d;
use crate::data::GroupedDataset;
use crate::error::{Error, Result};
use crate::flow::{run_weighted_flow, FlowConfig};
use crate::ot1d::Empirical1D;

/// `y = x·slopes + group_effects[s] + intercept`; `group_effects[0] = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub slopes: Vec<f64>,
    pub group_effects: Vec<f64>,
    pub intercept: f64,
}

impl LinearModel {
    pub fn predict_one(&self, x: &[f64], s: usize) -> Result<f64> {
        if x.len() != self.slopes.len() {
            return Err(Error::DimensionMismatch {
                expected: self.slopes.len(),
                got: x.len(),
            });
        }
        let effect = self.group_effects.get(s).ok_or(Error::UnknownGroup(s))?;
        let linear: f64 = x.iter().zip(&self.slopes).map(|(a, b)| a * b).sum();
        Ok(linear + effect + self.intercept)
    }

    pub fn predict(&self, data: &GroupedDataset) -> Result<Vec<f64>> {
        data.features
            .rows()
            .into_iter()
            .zip(&data.sensitive)
            .map(|(row, &s)| {
                let x = row.to_vec();
                self.predict_one(&x, s)
            })
            .collect()
    }
}

/// Relative pivot size below which an unregularized system counts as singular.
const SINGULAR_TOL: f64 = 1e-12;

/// Ridge least squares on features plus one-hot group indicators (the first
/// group is the reference level). The intercept is not penalized.
pub fn fit_base_regressor(train: &GroupedDataset, ridge: f64) -> Result<LinearModel> {
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(Error::InvalidConfig(format!("ridge must be >= 0, got {ridge}")));
    }
    let n = train.len();
    let p = train.n_features();
    let groups = train.n_groups();
    let m = p + groups.saturating_sub(1);

    let column = |i: usize, j: usize| -> f64 {
        if j < p {
            train.features[[i, j]]
        } else {
            f64::from(u8::from(train.sensitive[i] == j - p + 1))
        }
    };
    let mut means = vec![0.0; m];
    for (j, mean) in means.iter_mut().enumerate() {
        *mean = (0..n).map(|i| column(i, j)).sum::<f64>() / n as f64;
    }
    let y_mean = train.target.iter().sum::<f64>() / n as f64;

    let coef = if m == 0 {
        DVector::zeros(0)
    } else {
        // centred normal equations absorb the unpenalized intercept
        let x = DMatrix::from_fn(n, m, |i, j| column(i, j) - means[j]);
        let y = DVector::from_iterator(n, train.target.iter().map(|t| t - y_mean));
        let mut gram = x.transpose() * &x;
        let scale = gram.diagonal().max();
        for j in 0..m {
            gram[(j, j)] += ridge;
        }
        let rhs = x.transpose() * y;
        let chol = gram.clone().cholesky().ok_or(Error::SingularDesign)?;
        if ridge == 0.0 {
            let l = chol.l_dirty();
            let min_pivot = (0..m).map(|j| l[(j, j)] * l[(j, j)]).fold(f64::INFINITY, f64::min);
            if !(min_pivot > SINGULAR_TOL * scale) {
                return Err(Error::SingularDesign);
            }
        }
        chol.solve(&rhs)
    };
    if coef.iter().any(|c| !c.is_finite()) {
        return Err(Error::SingularDesign);
    }
    let intercept = y_mean - coef.iter().zip(&means).map(|(c, m)| c * m).sum::<f64>();
    let mut group_effects = vec![0.0; groups.max(1)];
    group_effects[1..].copy_from_slice(&coef.as_slice()[p..]);
    Ok(LinearModel {
        slopes: coef.as_slice()[..p].to_vec(),
        group_effects,
        intercept,
    })
}

/// How the barycenter quantile function is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FairMethod {
    Exact1d,
    /// Barycenter flow on the scalar per-group predictions; `Q*` is the
    /// final cloud.
    SwfBarycenter(FlowConfig),
}

impl FairMethod {
    pub fn name(&self) -> String {
        match self {
            FairMethod::Exact1d => "exact_1d".into(),
            FairMethod::SwfBarycenter(cfg) => format!("swf_{}", cfg.mode.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairPredictor {
    pub base: LinearModel,
    /// CDF of the training predictions of each group.
    pub group_cdfs: Vec<Empirical1D>,
    pub weights: Vec<f64>,
    pub barycenter: Empirical1D,
    alpha: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("alpha must be in [0, 1], got {alpha}")))
    }
}

pub fn build_fair_predictor(
    base: &LinearModel,
    train: &GroupedDataset,
    method: &FairMethod,
    alpha: f64,
) -> Result<FairPredictor> {
    check_alpha(alpha)?;
    let preds = base.predict(train)?;
    let mut per_group = vec![Vec::new(); train.n_groups()];
    for (y, &s) in preds.iter().zip(&train.sensitive) {
        per_group[s].push(*y);
    }
    if let Some(s) = per_group.iter().position(|g| g.len() < 2) {
        return Err(Error::Data(format!(
            "group {:?} needs >= 2 training rows",
            train.group_labels[s]
        )));
    }
    let group_cdfs = per_group
        .into_iter()
        .map(Empirical1D::new)
        .collect::<Result<Vec<_>>>()?;
    let weights = train.group_weights.clone();
    let barycenter = match method {
        FairMethod::Exact1d => {
            // tabulate at the largest group size so a lone group maps to itself
            let nq = group_cdfs.iter().map(Empirical1D::len).max().unwrap_or(2);
            let pairs: Vec<(Empirical1D, f64)> = group_cdfs
                .iter()
                .cloned()
                .zip(weights.iter().copied())
                .collect();
            exact_barycenter_1d(&pairs, nq)?
        }
        FairMethod::SwfBarycenter(config) => {
            let samples: Vec<ndarray::Array2<f64>> = group_cdfs
                .iter()
                .map(|e| ndarray::Array2::from_shape_vec((e.len(), 1), e.values().to_vec()).expect("shape"))
                .collect();
            let views: Vec<_> = samples
                .iter()
                .zip(&weights)
                .map(|(s, &w)| (s.view(), w))
                .collect();
            let record = run_weighted_flow(&views, config)?;
            if let (Some(msg), Some(step)) = (&record.error, record.failed_step) {
                return Err(Error::Step {
                    step,
                    source: Box::new(Error::Data(msg.clone())),
                });
            }
            Empirical1D::new(record.final_cloud.positions.iter().copied().collect())?
        }
    };
    Ok(FairPredictor {
        base: base.clone(),
        group_cdfs,
        weights,
        barycenter,
        alpha,
    })
}

impl FairPredictor {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            alpha,
            ..self.clone()
        })
    }

    /// `(1 - α)·y0 + α·Q*(F_s(y0))` with `y0` the base prediction.
    pub fn predict(&self, x: &[f64], s: usize) -> Result<f64> {
        let y0 = self.base.predict_one(x, s)?;
        self.remap(y0, s)
    }

    /// Remaps a base prediction of group `s`.
    pub fn remap(&self, y0: f64, s: usize) -> Result<f64> {
        let cdf = self.group_cdfs.get(s).ok_or(Error::UnknownGroup(s))?;
        if self.alpha == 0.0 {
            return Ok(y0);
        }
        let y1 = cdf.transport_to(y0, &self.barycenter);
        Ok((1.0 - self.alpha) * y0 + self.alpha * y1)
    }

    pub fn predict_dataset(&self, data: &GroupedDataset) -> Result<Vec<f64>> {
        let base = self.base.predict(data)?;
        base.iter()
            .zip(&data.sensitive)
            .map(|(&y, &s)| self.remap(y, s))
            .collect()
    }
}

pub fn mse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: targets.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptySample);
    }
    let sum: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(g, y)| (y - g) * (y - g))
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// Largest sup-distance between the prediction step CDFs of any two groups.
///
/// `groups` holds dense labels; every label below the maximum must occur.
pub fn ks_distance(predictions: &[f64], groups: &[usize]) -> Result<f64> {
    if predictions.len() != groups.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: groups.len(),
        });
    }
    let n_groups = groups.iter().max().map_or(0, |m| m + 1);
    ks_distance_with_groups(predictions, groups, n_groups)
}

/// [`ks_distance`] with an explicit group count, so absent groups are reported.
pub fn ks_distance_with_groups(
    predictions: &[f64],
    groups: &[usize],
    n_groups: usize,
) -> Result<f64> {
    if n_groups < 2 {
        return Err(Error::TooFewGroupsKs);
    }
    if predictions.iter().any(|p| p.is_nan()) {
        return Err(Error::NonFinite("predictions"));
    }
    let mut per_group = vec![Vec::new(); n_groups];
    for (&y, &s) in predictions.iter().zip(groups) {
        per_group.get_mut(s).ok_or(Error::UnknownGroup(s))?.push(y);
    }
    if let Some(s) = per_group.iter().position(Vec::is_empty) {
        return Err(Error::EmptyGroupKs(s));
    }
    for g in &mut per_group {
        g.sort_by(f64::total_cmp);
    }
    let mut worst = 0.0f64;
    for a in 0..n_groups {
        for b in a + 1..n_groups {
            worst = worst.max(ks_pair(&per_group[a], &per_group[b]));
        }
    }
    Ok(worst)
}

/// Merge scan over two sorted samples with right-continuous step CDFs.
fn ks_pair(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best = 0.0f64;
    while i < a.len() || j < b.len() {
        let t = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub alpha: f64,
    pub lambda: f64,
    pub seed: u64,
    pub mse: f64,
    pub ks: f64,
}

/// Mean and sample standard deviation across seeds for one `(alpha, lambda)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub method: String,
    pub alpha: f64,
    pub lambda: f64,
    pub n_seeds: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub ks_mean: f64,
    pub ks_std: f64,
}

/// Evaluates test MSE and KS on the `alphas × lambdas × seeds` grid.
///
/// The exact method is fitted once; the flow method once per `(lambda, seed)`
/// with those values overriding its config. Rows come out ordered by lambda,
/// then seed, then alpha.
pub fn pareto_sweep(
    train: &GroupedDataset,
    test: &GroupedDataset,
    base: &LinearModel,
    method: &FairMethod,
    alphas: &[f64],
    lambdas: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() || lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("sweep grids must be non-empty".into()));
    }
    for &a in alphas {
        check_alpha(a)?;
    }
    if test.n_groups() != train.n_groups() {
        return Err(Error::Data("train and test disagree on the group set".into()));
    }
    let name = method.name();
    let grid: Vec<(f64, u64)> = lambdas
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    let shared = match method {
        FairMethod::Exact1d => Some(build_fair_predictor(base, train, method, 1.0)?),
        FairMethod::SwfBarycenter(_) => None,
    };
    let blocks = grid
        .par_iter()
        .map(|&(lambda, seed)| {
            let fitted = match (&shared, method) {
                (Some(fp), _) => fp.clone(),
                (None, FairMethod::SwfBarycenter(cfg)) => {
                    let cfg = FlowConfig {
                        lambda,
                        seed,
                        ..cfg.clone()
                    };
                    build_fair_predictor(base, train, &FairMethod::SwfBarycenter(cfg), 1.0)?
                }
                (None, FairMethod::Exact1d) => unreachable!(),
            };
            alphas
                .iter()
                .map(|&alpha| {
                    let preds = fitted.with_alpha(alpha)?.predict_dataset(test)?;
                    Ok(SweepRow {
                        method: name.clone(),
                        alpha,
                        lambda,
                        seed,
                        mse: mse(&preds, &test.target)?,
                        ks: ks_distance_with_groups(&preds, &test.sensitive, test.n_groups())?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(blocks.into_iter().flatten().collect())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups rows by `(method, alpha, lambda)` in first-seen order.
pub fn summarize(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut keys: Vec<(String, f64, f64)> = Vec::new();
    for r in rows {
        let key = (r.method.clone(), r.alpha, r.lambda);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(method, alpha, lambda)| {
            let cell: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.method == method && r.alpha == alpha && r.lambda == lambda)
                .collect();
            let (mse_mean, mse_std) = mean_std(&cell.iter().map(|r| r.mse).collect::<Vec<_>>());
            let (ks_mean, ks_std) = mean_std(&cell.iter().map(|r| r.ks).collect::<Vec<_>>());
            SweepSummary {
                method,
                alpha,
                lambda,
                n_seeds: cell.len(),
                mse_mean,
                mse_std,
                ks_mean,
                ks_std,
            }
        })
        .collect()
}
