//! Random projections, the sliced-Wasserstein distance and the sliced drift.
//!
//! The drift at a point `x` superposes, over directions `θ_n` and target
//! groups `s`, the 1D Kantorovich potential derivatives between the projected
//! cloud and each projected target:
//!
//! ```text
//! v(x) = -(1/N_θ) Σ_n Σ_s p_s ψ'_{s,n}(<θ_n, x>) θ_n
//! ```

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot1d::{potential_derivative, w2_squared_1d, Empirical1D};

/// Tolerance on `Σ p_s = 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Unit directions on `S^{d-1}`, one per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSet {
    directions: Array2<f64>,
    seed: u64,
}

impl ProjectionSet {
    /// Wraps explicit directions, normalizing each row.
    pub fn from_directions(directions: Array2<f64>, seed: u64) -> Result<Self> {
        if directions.nrows() == 0 || directions.ncols() == 0 {
            return Err(Error::EmptyProjectionSet);
        }
        let mut directions = directions.as_standard_layout().into_owned();
        for mut row in directions.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::NonFinite("projection direction"));
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(Self { directions, seed })
    }

    pub fn dim(&self) -> usize {
        self.directions.ncols()
    }

    pub fn len(&self) -> usize {
        self.directions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.nrows() == 0
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn direction(&self, n: usize) -> &[f64] {
        let d = self.dim();
        &self.directions.as_slice().expect("standard layout")[n * d..(n + 1) * d]
    }

    pub fn directions(&self) -> ArrayView2<'_, f64> {
        self.directions.view()
    }
}

/// Draws `n_theta` i.i.d. uniform directions by normalizing Gaussian vectors.
pub fn sample_directions(d: usize, n_theta: usize, seed: u64) -> Result<ProjectionSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_directions_with(d, n_theta, seed, &mut rng)
}

pub(crate) fn sample_directions_with(
    d: usize,
    n_theta: usize,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<ProjectionSet> {
    if d == 0 || n_theta == 0 {
        return Err(Error::EmptyProjectionSet);
    }
    let mut data = Vec::with_capacity(d * n_theta);
    let mut row = vec![0.0; d];
    for _ in 0..n_theta {
        loop {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-300 {
                data.extend(row.iter().map(|v| v / norm));
                break;
            }
        }
    }
    let directions = Array2::from_shape_vec((n_theta, d), data).expect("shape");
    Ok(ProjectionSet { directions, seed })
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Inner product of every row of `positions` with `direction`.
pub fn project(positions: ArrayView2<'_, f64>, direction: &[f64]) -> Result<Vec<f64>> {
    if positions.ncols() != direction.len() {
        return Err(Error::DimensionMismatch {
            expected: direction.len(),
            got: positions.ncols(),
        });
    }
    Ok(positions
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .zip(direction)
                .map(|(x, t)| x * t)
                .sum::<f64>()
        })
        .collect())
}

/// Sorted projections of `positions` onto every direction.
pub fn project_all(
    positions: ArrayView2<'_, f64>,
    projections: &ProjectionSet,
) -> Result<Vec<Empirical1D>> {
    if positions.nrows() == 0 {
        return Err(Error::EmptySample);
    }
    if positions.ncols() != projections.dim() {
        return Err(Error::DimensionMismatch {
            expected: projections.dim(),
            got: positions.ncols(),
        });
    }
    (0..projections.len())
        .into_par_iter()
        .map(|n| Empirical1D::new(project(positions, projections.direction(n))?))
        .collect()
}

/// Monte Carlo sliced W2²: the average of per-direction squared 1D distances.
pub fn sw2_distance(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    projections: &ProjectionSet,
    num_quantiles: usize,
) -> Result<f64> {
    let pa = project_all(a, projections)?;
    let pb = project_all(b, projections)?;
    sliced_w2_from_slices(&pa, &pb, num_quantiles)
}

pub(crate) fn sliced_w2_from_slices(
    a: &[Empirical1D],
    b: &[Empirical1D],
    num_quantiles: usize,
) -> Result<f64> {
    let per_dir: Vec<f64> = a
        .par_iter()
        .zip(b.par_iter())
        .map(|(x, y)| w2_squared_1d(x, y, num_quantiles))
        .collect::<Result<_>>()?;
    Ok(per_dir.iter().sum::<f64>() / per_dir.len() as f64)
}

/// `10 log10(raw)`; `-inf` for a zero cost.
pub fn to_db(raw: f64) -> f64 {
    10.0 * raw.log10()
}

/// Sum that does not depend on the order of `terms`.
pub(crate) fn order_free_sum(terms: &mut [f64]) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Projected target quantile tables for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetGroup {
    pub weight: f64,
    pub tables: Vec<Empirical1D>,
}

/// Per-(direction, group) target tables shared by every step of a flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicedTarget {
    groups: Vec<TargetGroup>,
    num_quantiles: usize,
}

pub fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::InvalidWeights("no groups".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::InvalidWeights(format!("weight {w} is not positive")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::InvalidWeights(format!("weights sum to {total}")));
    }
    Ok(())
}

impl SlicedTarget {
    /// Projects each group sample on every direction.
    ///
    /// Samples larger than `num_quantiles` are stored as their quantile table
    /// at that resolution; smaller ones are kept whole.
    pub fn build(
        projections: &ProjectionSet,
        groups: &[(ArrayView2<'_, f64>, f64)],
        num_quantiles: usize,
    ) -> Result<Self> {
        let weights: Vec<f64> = groups.iter().map(|g| g.1).collect();
        validate_weights(&weights)?;
        let groups = groups
            .iter()
            .map(|(sample, weight)| {
                let tables = project_all(*sample, projections)?
                    .into_iter()
                    .map(|e| {
                        if e.len() > num_quantiles {
                            e.quantile_table(num_quantiles)
                        } else {
                            e.with_num_quantiles(num_quantiles)
                        }
                    })
                    .collect();
                Ok(TargetGroup {
                    weight: *weight,
                    tables,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            groups,
            num_quantiles,
        })
    }

    pub fn single(
        projections: &ProjectionSet,
        sample: ArrayView2<'_, f64>,
        num_quantiles: usize,
    ) -> Result<Self> {
        Self::build(projections, &[(sample, 1.0)], num_quantiles)
    }

    pub fn groups(&self) -> &[TargetGroup] {
        &self.groups
    }

    pub fn num_directions(&self) -> usize {
        self.groups[0].tables.len()
    }

    pub fn num_quantiles(&self) -> usize {
        self.num_quantiles
    }

    /// `Σ_s p_s SW²(cloud, ν_s)` given the cloud's per-direction projections.
    pub fn objective(&self, cloud_slices: &[Empirical1D]) -> Result<f64> {
        let mut terms = self
            .groups
            .iter()
            .map(|g| {
                sliced_w2_from_slices(cloud_slices, &g.tables, self.num_quantiles)
                    .map(|sw| g.weight * sw)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(order_free_sum(&mut terms))
    }
}

/// The potential part of the drift field for a frozen source (cloud) state.
pub struct PotentialField<'a> {
    pub sources: &'a [Empirical1D],
    pub targets: &'a SlicedTarget,
    pub projections: &'a ProjectionSet,
}

impl PotentialField<'_> {
    pub fn new<'a>(
        sources: &'a [Empirical1D],
        targets: &'a SlicedTarget,
        projections: &'a ProjectionSet,
    ) -> Result<PotentialField<'a>> {
        if sources.len() != projections.len() {
            return Err(Error::LengthMismatch {
                left: sources.len(),
                right: projections.len(),
            });
        }
        if targets.num_directions() != projections.len() {
            return Err(Error::LengthMismatch {
                left: targets.num_directions(),
                right: projections.len(),
            });
        }
        Ok(PotentialField {
            sources,
            targets,
            projections,
        })
    }

    /// Writes the drift at `x` into `out`.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let groups = self.targets.groups();
        let mut terms = Vec::with_capacity(groups.len());
        for (n, source) in self.sources.iter().enumerate() {
            let theta = self.projections.direction(n);
            let z = dot(theta, x);
            let coef = if groups.len() == 1 {
                potential_derivative(z, source, &groups[0].tables[n])
            } else {
                terms.clear();
                terms.extend(
                    groups
                        .iter()
                        .map(|g| g.weight * potential_derivative(z, source, &g.tables[n])),
                );
                order_free_sum(&mut terms)
            };
            for (o, t) in out.iter_mut().zip(theta) {
                *o -= coef * t;
            }
        }
        let scale = 1.0 / self.sources.len() as f64;
        out.iter_mut().for_each(|o| *o *= scale);
    }

    /// Drift at every row of `positions`.
    pub fn eval_all(&self, positions: ArrayView2<'_, f64>) -> Array2<f64> {
        let d = positions.ncols();
        let mut out = vec![0.0; positions.len()];
        out.par_chunks_mut(d).enumerate().for_each(|(i, o)| {
            let x: Vec<f64> = positions.row(i).to_vec();
            self.eval(&x, o);
        });
        Array2::from_shape_vec(positions.raw_dim(), out).expect("shape")
    }
}

/// Sliced drift of the cloud toward `targets`, rebuilding the cloud's
/// projected CDFs from `positions`.
pub fn sliced_drift(
    positions: ArrayView2<'_, f64>,
    targets: &SlicedTarget,
    projections: &ProjectionSet,
) -> Result<Array2<f64>> {
    let sources = project_all(positions, projections)?;
    let field = PotentialField::new(&sources, targets, projections)?;
    Ok(field.eval_all(positions))
}
