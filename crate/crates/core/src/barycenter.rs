//! Sliced-Wasserstein barycenter flows and the exact 1D barycenter.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{run_weighted_flow, FlowConfig, RunRecord};
use crate::ot1d::{quantile_grid, Empirical1D};
use crate::sliced::{order_free_sum, validate_weights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub sample: Array2<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarycenterProblem {
    groups: Vec<GroupSample>,
    pub config: FlowConfig,
}

impl BarycenterProblem {
    pub fn new(groups: Vec<GroupSample>, config: FlowConfig) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidWeights("no groups".into()));
        }
        let weights: Vec<f64> = groups.iter().map(|g| g.weight).collect();
        validate_weights(&weights)?;
        let d = groups[0].sample.ncols();
        for g in &groups {
            if g.sample.nrows() == 0 {
                return Err(Error::EmptySample);
            }
            if g.sample.ncols() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: g.sample.ncols(),
                });
            }
        }
        Ok(Self { groups, config })
    }

    /// Weights `p_s = n_s / n` from the sample sizes.
    pub fn with_empirical_weights(samples: Vec<Array2<f64>>, config: FlowConfig) -> Result<Self> {
        let total: usize = samples.iter().map(|s| s.nrows()).sum();
        let groups = samples
            .into_iter()
            .map(|sample| GroupSample {
                weight: sample.nrows() as f64 / total as f64,
                sample,
            })
            .collect();
        Self::new(groups, config)
    }

    pub fn groups(&self) -> &[GroupSample] {
        &self.groups
    }

    pub fn dim(&self) -> usize {
        self.groups[0].sample.ncols()
    }

    fn views(&self) -> Vec<(ArrayView2<'_, f64>, f64)> {
        self.groups
            .iter()
            .map(|g| (g.sample.view(), g.weight))
            .collect()
    }
}

/// Flows particles toward the weighted sliced barycenter of the groups.
///
/// The recorded cost is `Σ_s p_s SW²(cloud, ν_s)`.
pub fn run_barycenter_flow(problem: &BarycenterProblem) -> Result<RunRecord> {
    run_weighted_flow(&problem.views(), &problem.config)
}

/// Exact 1D W2 barycenter: `Q*(τ_j) = Σ_s p_s Q_s(τ_j)` on the midpoint grid.
pub fn exact_barycenter_1d(
    groups: &[(Empirical1D, f64)],
    num_quantiles: usize,
) -> Result<Empirical1D> {
    let weights: Vec<f64> = groups.iter().map(|g| g.1).collect();
    validate_weights(&weights)?;
    if num_quantiles == 0 {
        return Err(Error::InvalidConfig("num_quantiles must be >= 1".into()));
    }
    let mut terms = Vec::with_capacity(groups.len());
    let values = quantile_grid(num_quantiles)
        .map(|tau| {
            terms.clear();
            terms.extend(groups.iter().map(|(e, w)| w * e.quantile_clamped(tau)));
            order_free_sum(&mut terms)
        })
        .collect();
    Ok(Empirical1D::new(values)?.with_num_quantiles(num_quantiles))
}

/// [`exact_barycenter_1d`] on raw `n×1` samples.
pub fn exact_barycenter_of_samples(
    groups: &[(ArrayView2<'_, f64>, f64)],
    num_quantiles: usize,
) -> Result<Empirical1D> {
    let empiricals = groups
        .iter()
        .map(|(s, w)| {
            if s.ncols() != 1 {
                return Err(Error::ExactBarycenterNot1d);
            }
            Ok((Empirical1D::new(s.iter().copied().collect())?, *w))
        })
        .collect::<Result<Vec<_>>>()?;
    exact_barycenter_1d(&empiricals, num_quantiles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{run_flow, Mode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(n: usize, d: usize, mean: f64, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| {
            mean + Distribution::<f64>::sample(&StandardNormal, &mut rng)
        })
    }

    fn small_config(mode: Mode, seed: u64) -> FlowConfig {
        FlowConfig {
            mode,
            steps: 20,
            n_particles: 200,
            n_theta: 10,
            lambda: 0.001,
            seed,
            ..FlowConfig::default()
        }
    }

    #[test]
    fn exact_single_group_is_its_table() {
        let e = Empirical1D::new(vec![3.0, 1.0, 2.0, 8.0, 5.0]).unwrap();
        let b = exact_barycenter_1d(&[(e.clone(), 1.0)], 50).unwrap();
        assert_eq!(b.values(), e.quantile_table(50).values());
    }

    #[test]
    fn exact_point_masses_meet_in_the_middle() {
        let a = Empirical1D::new(vec![0.0; 3]).unwrap();
        let b = Empirical1D::new(vec![4.0; 3]).unwrap();
        let bar = exact_barycenter_1d(&[(a, 0.5), (b, 0.5)], 100).unwrap();
        assert!(bar.values().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn exact_gaussian_pair() {
        let a = normal(5000, 1, -2.0, 1);
        let b = normal(5000, 1, 2.0, 2);
        let bar = exact_barycenter_of_samples(&[(a.view(), 0.5), (b.view(), 0.5)], 100).unwrap();
        assert!(bar.mean().abs() < 0.05, "mean {}", bar.mean());
        assert!((bar.std() - 1.0).abs() < 0.05, "std {}", bar.std());
    }

    #[test]
    fn exact_requires_1d() {
        let a = normal(10, 2, 0.0, 1);
        assert!(matches!(
            exact_barycenter_of_samples(&[(a.view(), 1.0)], 10),
            Err(Error::ExactBarycenterNot1d)
        ));
    }

    #[test]
    fn exact_is_permutation_invariant() {
        let groups: Vec<(Empirical1D, f64)> = [(0.2, -1.0), (0.5, 0.3), (0.3, 7.0)]
            .iter()
            .enumerate()
            .map(|(i, &(w, m))| {
                let s = normal(37 + i * 11, 1, m, i as u64);
                (Empirical1D::new(s.iter().copied().collect()).unwrap(), w)
            })
            .collect();
        let fwd = exact_barycenter_1d(&groups, 64).unwrap();
        let rev: Vec<_> = groups.iter().rev().cloned().collect();
        let rot = vec![groups[1].clone(), groups[2].clone(), groups[0].clone()];
        assert_eq!(fwd, exact_barycenter_1d(&rev, 64).unwrap());
        assert_eq!(fwd, exact_barycenter_1d(&rot, 64).unwrap());
    }

    #[test]
    fn single_group_matches_plain_flow() {
        let target = normal(300, 2, 1.5, 4);
        for mode in [Mode::Stochastic, Mode::Liouville] {
            let cfg = small_config(mode, 9);
            let bary = BarycenterProblem::new(
                vec![GroupSample {
                    sample: target.clone(),
                    weight: 1.0,
                }],
                cfg.clone(),
            )
            .unwrap();
            let a = run_barycenter_flow(&bary).unwrap();
            let b = run_flow(target.view(), &cfg).unwrap();
            assert_eq!(a.final_cloud, b.final_cloud);
            assert_eq!(a.sw_raw, b.sw_raw);
        }
    }

    #[test]
    fn flow_is_permutation_invariant() {
        let g1 = normal(150, 2, -1.0, 1);
        let g2 = normal(120, 2, 2.0, 2);
        let cfg = small_config(Mode::Liouville, 3);
        let p = BarycenterProblem::new(
            vec![
                GroupSample { sample: g1.clone(), weight: 0.3 },
                GroupSample { sample: g2.clone(), weight: 0.7 },
            ],
            cfg.clone(),
        )
        .unwrap();
        let q = BarycenterProblem::new(
            vec![
                GroupSample { sample: g2, weight: 0.7 },
                GroupSample { sample: g1, weight: 0.3 },
            ],
            cfg,
        )
        .unwrap();
        let a = run_barycenter_flow(&p).unwrap();
        let b = run_barycenter_flow(&q).unwrap();
        assert_eq!(a.final_cloud, b.final_cloud);
        assert_eq!(a.sw_raw, b.sw_raw);
    }

    #[test]
    fn identical_groups_converge_to_the_common_sample() {
        let g = normal(400, 2, 3.0, 5);
        let cfg = small_config(Mode::Stochastic, 1);
        let single = run_flow(g.view(), &cfg).unwrap();
        let bary = BarycenterProblem::new(
            vec![
                GroupSample { sample: g.clone(), weight: 0.5 },
                GroupSample { sample: g.clone(), weight: 0.5 },
            ],
            cfg,
        )
        .unwrap();
        let r = run_barycenter_flow(&bary).unwrap();
        assert!(r.final_sw().unwrap() < 2.0 * single.final_sw().unwrap());
    }

    #[test]
    fn gaussian_pair_flow_recovers_standard_normal() {
        let a = normal(3000, 1, -2.0, 11);
        let b = normal(3000, 1, 2.0, 12);
        let cfg = FlowConfig {
            mode: Mode::Stochastic,
            lambda: 0.001,
            n_theta: 1,
            n_particles: 1000,
            steps: 100,
            seed: 2,
            ..FlowConfig::default()
        };
        let p = BarycenterProblem::with_empirical_weights(vec![a, b], cfg).unwrap();
        let r = run_barycenter_flow(&p).unwrap();
        let e = Empirical1D::new(r.final_cloud.positions.iter().copied().collect()).unwrap();
        assert!(e.mean().abs() < 0.15, "mean {}", e.mean());
        assert!((e.std() - 1.0).abs() < 0.15, "std {}", e.std());
    }

    #[test]
    fn rejects_bad_problems() {
        let a = normal(10, 1, 0.0, 0);
        let b = normal(10, 2, 0.0, 0);
        let cfg = FlowConfig::default();
        assert!(BarycenterProblem::new(vec![], cfg.clone()).is_err());
        assert!(BarycenterProblem::new(
            vec![
                GroupSample { sample: a.clone(), weight: 0.5 },
                GroupSample { sample: b, weight: 0.5 },
            ],
            cfg.clone()
        )
        .is_err());
        assert!(BarycenterProblem::new(
            vec![
                GroupSample { sample: a.clone(), weight: 0.6 },
                GroupSample { sample: a, weight: 0.6 },
            ],
            cfg
        )
        .is_err());
    }
}
