//! Particle integrators for sliced-Wasserstein flows.
//!
//! Two integrators advance the same entropy-regularized flow:
//!
//! * **stochastic**: Euler-Maruyama, `x ← x + h v(x) + sqrt(2 λ h) Z`;
//! * **liouville**: the diffusion is folded into the drift as `-λ ∇log ρ`,
//!   and every particle carries its log-density, advanced along the
//!   characteristic by `log ρ ← log ρ - h ∇·ṽ(x)`.
//!
//! The score `∇log ρ` comes from a Gaussian KDE over the current cloud and the
//! divergence from central finite differences of the full drift field.
//!
//! A step reads only the step-k cloud and writes a fresh step-(k+1) cloud, so
//! per-particle work runs in parallel without changing results.

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot1d::{Empirical1D, DEFAULT_NUM_QUANTILES};
use crate::sliced::{
    project_all, sample_directions_with, to_db, PotentialField, ProjectionSet, SlicedTarget,
};

// RNG streams derived from one run seed.
const STREAM_INIT: u64 = 1;
const STREAM_DIRECTIONS: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_TEST_INIT: u64 = 4;
const STREAM_TEST_NOISE: u64 = 5;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Stochastic,
    Liouville,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Stochastic => "stochastic",
            Mode::Liouville => "liouville",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(Mode::Stochastic),
            "liouville" => Ok(Mode::Liouville),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

/// Initial distribution `μ0`, centred at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitDistribution {
    Gaussian { sigma: f64 },
    UniformBall { radius: f64 },
}

impl InitDistribution {
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        match *self {
            InitDistribution::Gaussian { sigma } => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                -0.5 * d * (2.0 * std::f64::consts::PI * sigma * sigma).ln()
                    - r2 / (2.0 * sigma * sigma)
            }
            InitDistribution::UniformBall { radius } => -log_ball_volume(x.len(), radius),
        }
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            InitDistribution::Gaussian { sigma } => sigma,
            InitDistribution::UniformBall { radius } => radius,
        };
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidConfig(format!("init scale must be > 0, got {v}")));
        }
        Ok(())
    }
}

/// `log |B(0, r)|` in `d` dimensions, from `V_d = V_{d-2} 2π r² / d`.
pub fn log_ball_volume(d: usize, radius: f64) -> f64 {
    let mut log_v = if d % 2 == 0 { 0.0 } else { (2.0 * radius).ln() };
    let mut k = if d % 2 == 0 { 2 } else { 3 };
    while k <= d {
        log_v += (2.0 * std::f64::consts::PI * radius * radius / k as f64).ln();
        k += 2;
    }
    log_v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// `n^{-1/(d+4)} σ̂_m` per coordinate.
    Scott,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub mode: Mode,
    /// Step size.
    pub h: f64,
    /// Entropic regularization.
    pub lambda: f64,
    /// Number of steps K.
    pub steps: usize,
    pub n_theta: usize,
    pub num_quantiles: usize,
    pub n_particles: usize,
    pub kde_bandwidth: Bandwidth,
    /// Finite-difference step for the divergence; `None` uses 1e-4 times the
    /// cloud's bounding-box diagonal.
    pub fd_epsilon: Option<f64>,
    pub seed: u64,
    pub init: InitDistribution,
    /// Draw fresh directions every step instead of once per run.
    pub redraw_directions: bool,
    /// Keep the per-step cloud quantile tables for test-stage replay.
    pub record_trace: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Liouville,
            h: 0.5,
            lambda: 0.001,
            steps: 100,
            n_theta: 30,
            num_quantiles: DEFAULT_NUM_QUANTILES,
            n_particles: 1000,
            kde_bandwidth: Bandwidth::Scott,
            fd_epsilon: None,
            seed: 0,
            init: InitDistribution::Gaussian { sigma: 1.0 },
            redraw_directions: false,
            record_trace: false,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.h.is_finite() && self.h > 0.0) {
            return bad(format!("h must be > 0, got {}", self.h));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.n_theta == 0 {
            return bad("n_theta must be >= 1".into());
        }
        if self.num_quantiles < 2 {
            return bad("num_quantiles must be >= 2".into());
        }
        if self.n_particles == 0 {
            return bad("n_particles must be >= 1".into());
        }
        if let Some(eps) = self.fd_epsilon {
            if !(eps.is_finite() && eps > 0.0) {
                return bad(format!("fd_epsilon must be > 0, got {eps}"));
            }
        }
        if let Bandwidth::Fixed(b) = self.kde_bandwidth {
            if !(b.is_finite() && b > 0.0) {
                return bad(format!("kde bandwidth must be > 0, got {b}"));
            }
        }
        if self.mode == Mode::Liouville && self.lambda > 0.0 && self.n_particles < 2 {
            return bad("liouville mode with lambda > 0 needs >= 2 particles".into());
        }
        self.init.validate()
    }
}

/// Particle positions (N×d) with an optional per-particle log-density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleCloud {
    pub positions: Array2<f64>,
    pub log_density: Option<Vec<f64>>,
    pub step: usize,
}

impl ParticleCloud {
    pub fn new(positions: Array2<f64>) -> Result<Self> {
        if positions.nrows() == 0 || positions.ncols() == 0 {
            return Err(Error::EmptySample);
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("positions"));
        }
        Ok(Self {
            positions: positions.as_standard_layout().into_owned(),
            log_density: None,
            step: 0,
        })
    }

    pub fn with_log_density(mut self, log_density: Vec<f64>) -> Result<Self> {
        if log_density.len() != self.len() {
            return Err(Error::LengthMismatch {
                left: log_density.len(),
                right: self.len(),
            });
        }
        self.log_density = Some(log_density);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.positions.ncols()
    }

    fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.positions.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }

    fn bbox_diagonal(&self) -> f64 {
        self.positions
            .columns()
            .into_iter()
            .map(|c| {
                let (lo, hi) = c
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    });
                (hi - lo) * (hi - lo)
            })
            .sum::<f64>()
            .sqrt()
    }
}

pub fn init_cloud(config: &FlowConfig, dim: usize) -> Result<ParticleCloud> {
    let mut rng = stream_rng(config.seed, STREAM_INIT);
    init_cloud_with(config, dim, config.n_particles, &mut rng)
}

/// Fresh particles for a test-stage replay, independent of the training cloud.
pub fn init_test_cloud(config: &FlowConfig, dim: usize, n: usize) -> Result<ParticleCloud> {
    let mut rng = stream_rng(config.seed, STREAM_TEST_INIT);
    init_cloud_with(config, dim, n, &mut rng)
}

fn init_cloud_with(
    config: &FlowConfig,
    dim: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ParticleCloud> {
    config.init.validate()?;
    if dim == 0 || n == 0 {
        return Err(Error::EmptySample);
    }
    let mut data = Vec::with_capacity(n * dim);
    let mut row = vec![0.0; dim];
    for _ in 0..n {
        match config.init {
            InitDistribution::Gaussian { sigma } => {
                for v in row.iter_mut() {
                    *v = sigma * Distribution::<f64>::sample(&StandardNormal, rng);
                }
            }
            InitDistribution::UniformBall { radius } => {
                let norm = loop {
                    for v in row.iter_mut() {
                        *v = StandardNormal.sample(rng);
                    }
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 1e-300 {
                        break norm;
                    }
                };
                let u: f64 = rand::Rng::random(rng);
                let r = radius * u.powf(1.0 / dim as f64);
                row.iter_mut().for_each(|v| *v *= r / norm);
            }
        }
        data.extend_from_slice(&row);
    }
    let positions = Array2::from_shape_vec((n, dim), data).expect("shape");
    let mut cloud = ParticleCloud::new(positions)?;
    if config.mode == Mode::Liouville {
        let logs = (0..n).map(|i| config.init.log_density(cloud.row(i))).collect();
        cloud.log_density = Some(logs);
    }
    Ok(cloud)
}

/// Scott's rule bandwidth per coordinate.
pub fn scott_bandwidth(positions: ArrayView2<'_, f64>) -> Vec<f64> {
    let n = positions.nrows() as f64;
    let d = positions.ncols() as f64;
    let factor = n.powf(-1.0 / (d + 4.0));
    positions
        .columns()
        .into_iter()
        .map(|c| {
            let mean = c.sum() / n;
            let var = c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
            factor * var.sqrt()
        })
        .collect()
}

/// Gaussian-KDE score `∇log ρ̂` with a diagonal bandwidth.
pub struct KdeScore {
    /// Row-major kernel centres.
    flat: Vec<f64>,
    inv_bw2: Vec<f64>,
}

impl KdeScore {
    pub fn new(points: ArrayView2<'_, f64>, bandwidths: &[f64]) -> Result<Self> {
        if points.nrows() < 2 {
            return Err(Error::ScoreTooFewParticles);
        }
        if bandwidths.len() != points.ncols() {
            return Err(Error::DimensionMismatch {
                expected: points.ncols(),
                got: bandwidths.len(),
            });
        }
        if bandwidths.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::ScoreOverflow);
        }
        Ok(Self {
            flat: points.iter().copied().collect(),
            inv_bw2: bandwidths.iter().map(|b| 1.0 / (b * b)).collect(),
        })
    }

    /// Score at an arbitrary point; the kernel sum includes any particle at `x`.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        self.accumulate(x, out, None);
    }

    /// Score at `x` plus its exact divergence
    /// `Σ_m b_m⁻² (b_m⁻² Var_w[p_m - x_m] - 1)`, with `w` the kernel weights.
    pub fn eval_with_divergence(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let mut second = vec![0.0; x.len()];
        self.accumulate(x, out, Some(&mut second));
        let mut div = 0.0;
        for ((o, sq), ib) in out.iter().zip(&second).zip(&self.inv_bw2) {
            let mean = o / ib;
            let var = (sq - mean * mean).max(0.0);
            div += ib * (ib * var - 1.0);
        }
        div
    }

    /// Writes the score into `out` and, if asked, the weighted second moments
    /// `E_w[(p_m - x_m)^2]` into `second`.
    fn accumulate(&self, x: &[f64], out: &mut [f64], mut second: Option<&mut [f64]>) {
        // log-sum-exp: exponents first, then weights relative to the largest
        let d = x.len();
        let exponents: Vec<f64> = self
            .flat
            .chunks_exact(d)
            .map(|p| {
                let mut a = 0.0;
                for ((xm, pm), ib) in x.iter().zip(p.iter()).zip(&self.inv_bw2) {
                    let diff = pm - xm;
                    a -= 0.5 * diff * diff * ib;
                }
                a
            })
            .collect();
        let max_a = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.iter_mut().for_each(|o| *o = 0.0);
        if let Some(sq) = second.as_deref_mut() {
            sq.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut total = 0.0;
        for (p, &a) in self.flat.chunks_exact(d).zip(&exponents) {
            let rel = a - max_a;
            // below f64 resolution next to the leading weight of 1
            if rel < NEGLIGIBLE_LOG_WEIGHT {
                continue;
            }
            let w = rel.exp();
            total += w;
            for (m, (xm, pm)) in x.iter().zip(p.iter()).enumerate() {
                let diff = pm - xm;
                out[m] += w * diff;
                if let Some(sq) = second.as_deref_mut() {
                    sq[m] += w * diff * diff;
                }
            }
        }
        for (m, ib) in self.inv_bw2.iter().enumerate() {
            out[m] *= ib / total;
            if let Some(sq) = second.as_deref_mut() {
                sq[m] /= total;
            }
        }
    }
}

const NEGLIGIBLE_LOG_WEIGHT: f64 = -50.0;

pub(crate) fn resolve_bandwidth(bw: Bandwidth, positions: ArrayView2<'_, f64>) -> Vec<f64> {
    match bw {
        Bandwidth::Scott => scott_bandwidth(positions),
        Bandwidth::Fixed(b) => vec![b; positions.ncols()],
    }
}

/// KDE score at every particle with an isotropic bandwidth.
pub fn estimate_score(positions: ArrayView2<'_, f64>, bandwidth: f64) -> Result<Array2<f64>> {
    estimate_score_diag(positions, &vec![bandwidth; positions.ncols()])
}

pub fn estimate_score_diag(
    positions: ArrayView2<'_, f64>,
    bandwidths: &[f64],
) -> Result<Array2<f64>> {
    let kde = KdeScore::new(positions, bandwidths)?;
    let d = positions.ncols();
    let mut out = vec![0.0; positions.len()];
    out.par_chunks_mut(d).enumerate().for_each(|(i, o)| {
        let x = positions.row(i).to_vec();
        kde.eval(&x, o);
    });
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::ScoreOverflow);
    }
    Ok(Array2::from_shape_vec(positions.raw_dim(), out).expect("shape"))
}

/// Central-difference divergence `Σ_m [f_m(x + ε e_m) - f_m(x - ε e_m)] / 2ε`.
pub fn divergence_of_drift<F>(field: F, x: &[f64], fd_epsilon: f64) -> Result<f64>
where
    F: Fn(&[f64], &mut [f64]),
{
    if !(fd_epsilon.is_finite() && fd_epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "fd_epsilon must be > 0, got {fd_epsilon}"
        )));
    }
    let d = x.len();
    let mut probe = x.to_vec();
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    let mut div = 0.0;
    for m in 0..d {
        probe[m] = x[m] + fd_epsilon;
        field(&probe, &mut plus);
        probe[m] = x[m] - fd_epsilon;
        field(&probe, &mut minus);
        probe[m] = x[m];
        div += (plus[m] - minus[m]) / (2.0 * fd_epsilon);
    }
    if !div.is_finite() {
        return Err(Error::NonFinite("divergence"));
    }
    Ok(div)
}

/// One explicit Euler step of the augmented `(x, log ρ)` dynamics for a
/// deterministic field: `x ← x + h f(x)`, `log ρ ← log ρ - h ∇·f(x)`.
///
/// Returns the new cloud and the mean particle speed `|f(x)|`.
pub fn liouville_update<F>(
    cloud: &ParticleCloud,
    field: F,
    h: f64,
    fd_epsilon: f64,
) -> Result<(ParticleCloud, f64)>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    liouville_update_with(cloud, h, |x, v| {
        field(x, v);
        divergence_of_drift(&field, x, fd_epsilon)
    })
}

/// Euler step where `field_div` writes the velocity at `x` and returns its
/// divergence.
fn liouville_update_with<F>(cloud: &ParticleCloud, h: f64, field_div: F) -> Result<(ParticleCloud, f64)>
where
    F: Fn(&[f64], &mut [f64]) -> Result<f64> + Sync,
{
    let logs = cloud
        .log_density
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("liouville update needs log-density".into()))?;
    let d = cloud.dim();
    let results: Vec<Result<(Vec<f64>, f64, f64)>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let x = cloud.row(i);
            let mut v = vec![0.0; d];
            let div = field_div(x, &mut v)?;
            let speed = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            let next: Vec<f64> = x.iter().zip(&v).map(|(xm, vm)| xm + h * vm).collect();
            Ok((next, logs[i] - h * div, speed))
        })
        .collect();
    let mut positions = Vec::with_capacity(cloud.positions.len());
    let mut new_logs = Vec::with_capacity(cloud.len());
    let mut speed_total = 0.0;
    for r in results {
        let (x, l, s) = r?;
        positions.extend(x);
        new_logs.push(l);
        speed_total += s;
    }
    if positions.iter().chain(&new_logs).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("liouville update"));
    }
    let next = ParticleCloud {
        positions: Array2::from_shape_vec(cloud.positions.raw_dim(), positions).expect("shape"),
        log_density: Some(new_logs),
        step: cloud.step + 1,
    };
    Ok((next, speed_total / cloud.len() as f64))
}

fn fd_epsilon_for(config: &FlowConfig, cloud: &ParticleCloud) -> f64 {
    config.fd_epsilon.unwrap_or_else(|| {
        let diag = cloud.bbox_diagonal();
        if diag > 0.0 {
            1e-4 * diag
        } else {
            1e-8
        }
    })
}

fn stochastic_update(
    cloud: &ParticleCloud,
    field: &PotentialField<'_>,
    config: &FlowConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ParticleCloud, f64)> {
    let drift = field.eval_all(cloud.positions.view());
    let mean_speed = drift
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .sum::<f64>()
        / cloud.len() as f64;
    let mut positions = &cloud.positions + &(drift * config.h);
    if config.lambda > 0.0 {
        let scale = (2.0 * config.lambda * config.h).sqrt();
        // sequential draws, particle-major
        for v in positions.iter_mut() {
            *v += scale * Distribution::<f64>::sample(&StandardNormal, rng);
        }
    }
    if positions.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("stochastic update"));
    }
    Ok((
        ParticleCloud {
            positions,
            log_density: None,
            step: cloud.step + 1,
        },
        mean_speed,
    ))
}

fn liouville_sliced_update(
    cloud: &ParticleCloud,
    field: &PotentialField<'_>,
    config: &FlowConfig,
) -> Result<(ParticleCloud, f64)> {
    let eps = fd_epsilon_for(config, cloud);
    if config.lambda == 0.0 {
        return liouville_update(cloud, |x, out| field.eval(x, out), config.h, eps);
    }
    let bw = resolve_bandwidth(config.kde_bandwidth, cloud.positions.view());
    let kde = KdeScore::new(cloud.positions.view(), &bw)?;
    let lambda = config.lambda;
    // the potential part is piecewise linear, so finite differences suit it;
    // the KDE score has a closed-form divergence
    let total = |x: &[f64], out: &mut [f64]| -> Result<f64> {
        let potential = |y: &[f64], o: &mut [f64]| field.eval(y, o);
        let div_potential = divergence_of_drift(potential, x, eps)?;
        let mut score = vec![0.0; x.len()];
        let div_score = kde.eval_with_divergence(x, &mut score);
        field.eval(x, out);
        for (o, s) in out.iter_mut().zip(&score) {
            *o -= lambda * s;
        }
        Ok(div_potential - lambda * div_score)
    };
    liouville_update_with(cloud, config.h, total).map_err(|e| match e {
        Error::NonFinite(_) => Error::ScoreOverflow,
        other => other,
    })
}

fn check_mode(cloud: &ParticleCloud, config: &FlowConfig, want: Mode) -> Result<()> {
    if config.mode != want {
        return Err(Error::InvalidConfig(format!(
            "{} step called with mode {}",
            want.name(),
            config.mode.name()
        )));
    }
    if want == Mode::Liouville && cloud.log_density.is_none() {
        return Err(Error::InvalidConfig("liouville step needs log-density".into()));
    }
    Ok(())
}

/// One Euler-Maruyama step of the sliced flow.
pub fn stochastic_step(
    cloud: &ParticleCloud,
    targets: &SlicedTarget,
    projections: &ProjectionSet,
    config: &FlowConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ParticleCloud> {
    check_mode(cloud, config, Mode::Stochastic)?;
    let sources = project_all(cloud.positions.view(), projections)?;
    let field = PotentialField::new(&sources, targets, projections)?;
    Ok(stochastic_update(cloud, &field, config, rng)?.0)
}

/// One deterministic Liouville step of the sliced flow, with log-density transport.
pub fn liouville_step(
    cloud: &ParticleCloud,
    targets: &SlicedTarget,
    projections: &ProjectionSet,
    config: &FlowConfig,
) -> Result<ParticleCloud> {
    check_mode(cloud, config, Mode::Liouville)?;
    let sources = project_all(cloud.positions.view(), projections)?;
    let field = PotentialField::new(&sources, targets, projections)?;
    Ok(liouville_sliced_update(cloud, &field, config)?.0)
}

/// Cloud quantile tables per step, for replaying a trained flow on new particles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrace {
    pub projections: ProjectionSet,
    pub targets: SlicedTarget,
    /// `cloud_tables[k][n]`: the step-k cloud projected on direction `n`,
    /// tabulated at `num_quantiles` levels.
    pub cloud_tables: Vec<Vec<Empirical1D>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: FlowConfig,
    /// Weighted sliced cost after each step.
    pub sw_raw: Vec<f64>,
    pub sw_db: Vec<f64>,
    pub mean_drift: Vec<f64>,
    /// Seconds per step. Not reproducible; kept out of the CSV outputs.
    pub wall_clock: Vec<f64>,
    pub initial_cloud: ParticleCloud,
    pub final_cloud: ParticleCloud,
    /// Clouds at steps 0, K/2 and K.
    pub snapshots: Vec<ParticleCloud>,
    /// Set when the run stopped early; the series then cover the completed steps.
    pub error: Option<String>,
    pub failed_step: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace: Option<FlowTrace>,
}

impl RunRecord {
    pub fn final_sw(&self) -> Option<f64> {
        self.sw_raw.last().copied()
    }

    pub fn is_complete(&self) -> bool {
        self.error.is_none()
    }
}

/// Runs the flow toward a single target sample.
pub fn run_flow(target: ArrayView2<'_, f64>, config: &FlowConfig) -> Result<RunRecord> {
    run_weighted_flow(&[(target, 1.0)], config)
}

/// Runs the flow toward the weighted superposition of several targets.
///
/// Invalid inputs return `Err`; numeric failure mid-run returns the partial
/// record with `error` set.
pub fn run_weighted_flow(
    groups: &[(ArrayView2<'_, f64>, f64)],
    config: &FlowConfig,
) -> Result<RunRecord> {
    config.validate()?;
    if groups.is_empty() {
        return Err(Error::InvalidWeights("no groups".into()));
    }
    let dim = groups[0].0.ncols();
    if let Some(g) = groups.iter().find(|g| g.0.ncols() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: g.0.ncols(),
        });
    }
    let mut dir_rng = stream_rng(config.seed, STREAM_DIRECTIONS);
    let mut noise_rng = stream_rng(config.seed, STREAM_NOISE);
    let mut projections = sample_directions_with(dim, config.n_theta, config.seed, &mut dir_rng)?;
    let mut targets = SlicedTarget::build(&projections, groups, config.num_quantiles)?;
    let initial = init_cloud(config, dim)?;

    let record_trace = config.record_trace && !config.redraw_directions;
    let mut trace_tables = Vec::new();

    let k_total = config.steps;
    let snapshot_steps = snapshot_steps(k_total);
    let mut record = RunRecord {
        config: config.clone(),
        sw_raw: Vec::with_capacity(k_total),
        sw_db: Vec::with_capacity(k_total),
        mean_drift: Vec::with_capacity(k_total),
        wall_clock: Vec::with_capacity(k_total),
        initial_cloud: initial.clone(),
        final_cloud: initial.clone(),
        snapshots: vec![initial.clone()],
        error: None,
        failed_step: None,
        trace: None,
    };

    let mut cloud = initial;
    let mut sources = project_all(cloud.positions.view(), &projections)?;
    for k in 0..k_total {
        let started = Instant::now();
        if config.redraw_directions && k > 0 {
            projections = sample_directions_with(dim, config.n_theta, config.seed, &mut dir_rng)?;
            targets = SlicedTarget::build(&projections, groups, config.num_quantiles)?;
            sources = project_all(cloud.positions.view(), &projections)?;
        }
        if record_trace {
            trace_tables.push(
                sources
                    .iter()
                    .map(|s| s.quantile_table(config.num_quantiles))
                    .collect::<Vec<_>>(),
            );
        }
        let step = (|| {
            let field = PotentialField::new(&sources, &targets, &projections)?;
            let (next, speed) = match config.mode {
                Mode::Stochastic => stochastic_update(&cloud, &field, config, &mut noise_rng)?,
                Mode::Liouville => liouville_sliced_update(&cloud, &field, config)?,
            };
            let next_sources = project_all(next.positions.view(), &projections)?;
            let cost = targets.objective(&next_sources)?;
            Ok::<_, Error>((next, next_sources, speed, cost))
        })();
        match step {
            Ok((next, next_sources, speed, cost)) => {
                cloud = next;
                sources = next_sources;
                record.sw_raw.push(cost);
                record.sw_db.push(to_db(cost));
                record.mean_drift.push(speed);
                record.wall_clock.push(started.elapsed().as_secs_f64());
                if snapshot_steps.contains(&(k + 1)) {
                    record.snapshots.push(cloud.clone());
                }
            }
            Err(e) => {
                let e = Error::Step {
                    step: k,
                    source: Box::new(e),
                };
                record.error = Some(e.to_string());
                record.failed_step = Some(k);
                break;
            }
        }
    }
    record.final_cloud = cloud;
    if record_trace {
        record.trace = Some(FlowTrace {
            projections,
            targets,
            cloud_tables: trace_tables,
        });
    }
    Ok(record)
}

fn snapshot_steps(k: usize) -> Vec<usize> {
    let mut s = vec![k / 2, k];
    s.retain(|&x| x > 0);
    s.dedup();
    s
}

/// Test-stage cost series of fresh particles pushed by a trained flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub sw_raw: Vec<f64>,
    pub sw_db: Vec<f64>,
    pub final_cloud: ParticleCloud,
    pub error: Option<String>,
}

/// Moves `fresh` with the training cloud's per-step CDFs from `trace`
/// instead of its own.
///
/// The Liouville score term still comes from the fresh cloud's own KDE.
pub fn replay_flow(
    trace: &FlowTrace,
    config: &FlowConfig,
    fresh: ParticleCloud,
) -> Result<ReplayRecord> {
    config.validate()?;
    if fresh.dim() != trace.projections.dim() {
        return Err(Error::DimensionMismatch {
            expected: trace.projections.dim(),
            got: fresh.dim(),
        });
    }
    let mut rng = stream_rng(config.seed, STREAM_TEST_NOISE);
    let mut cloud = fresh;
    let mut out = ReplayRecord {
        sw_raw: Vec::with_capacity(trace.cloud_tables.len()),
        sw_db: Vec::with_capacity(trace.cloud_tables.len()),
        final_cloud: cloud.clone(),
        error: None,
    };
    for (k, tables) in trace.cloud_tables.iter().enumerate() {
        let step = (|| {
            let field = PotentialField::new(tables, &trace.targets, &trace.projections)?;
            let (next, _) = match config.mode {
                Mode::Stochastic => stochastic_update(&cloud, &field, config, &mut rng)?,
                Mode::Liouville => liouville_sliced_update(&cloud, &field, config)?,
            };
            let slices = project_all(next.positions.view(), &trace.projections)?;
            let cost = trace.targets.objective(&slices)?;
            Ok::<_, Error>((next, cost))
        })();
        match step {
            Ok((next, cost)) => {
                cloud = next;
                out.sw_raw.push(cost);
                out.sw_db.push(to_db(cost));
            }
            Err(e) => {
                out.error = Some(
                    Error::Step {
                        step: k,
                        source: Box::new(e),
                    }
                    .to_string(),
                );
                break;
            }
        }
    }
    out.final_cloud = cloud;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot1d::w2_squared_1d;
    use ndarray::array;

    fn normal_cloud(n: usize, d: usize, mean: f64, sd: f64, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| mean + sd * Distribution::<f64>::sample(&StandardNormal, &mut rng))
    }

    fn one_d(cloud: &Array2<f64>) -> Empirical1D {
        Empirical1D::new(cloud.iter().copied().collect()).unwrap()
    }

    #[test]
    fn kde_divergence_matches_finite_differences() {
        let pts = normal_cloud(300, 3, 0.0, 1.0, 21);
        let kde = KdeScore::new(pts.view(), &[0.4, 0.6, 0.5]).unwrap();
        for x in [[0.1, -0.3, 0.7], [2.0, 1.0, -1.5], [0.0, 0.0, 0.0]] {
            let mut score = [0.0; 3];
            let mut plain = [0.0; 3];
            let div = kde.eval_with_divergence(&x, &mut score);
            kde.eval(&x, &mut plain);
            for (a, b) in score.iter().zip(&plain) {
                assert!((a - b).abs() < 1e-12);
            }
            let fd = divergence_of_drift(|y, o| kde.eval(y, o), &x, 1e-5).unwrap();
            assert!((div - fd).abs() < 1e-5 * fd.abs().max(1.0), "{div} vs {fd}");
        }
    }

    #[test]
    fn init_log_density_examples() {
        let g = InitDistribution::Gaussian { sigma: 1.0 };
        assert!((g.log_density(&[0.0, 0.0]) + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let b = InitDistribution::UniformBall { radius: 2.0 };
        assert!((b.log_density(&[0.3]) + 4f64.ln()).abs() < 1e-12);
        // unit disc has area π, unit 3-ball 4π/3
        assert!((log_ball_volume(2, 1.0) - std::f64::consts::PI.ln()).abs() < 1e-12);
        assert!((log_ball_volume(3, 1.0) - (4.0 * std::f64::consts::PI / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn init_cloud_is_seeded() {
        let cfg = FlowConfig {
            n_particles: 50,
            init: InitDistribution::UniformBall { radius: 2.0 },
            ..FlowConfig::default()
        };
        let a = init_cloud(&cfg, 1).unwrap();
        assert_eq!(a, init_cloud(&cfg, 1).unwrap());
        assert!(a.positions.iter().all(|v| v.abs() <= 2.0));
        for l in a.log_density.as_ref().unwrap() {
            assert!((l + 4f64.ln()).abs() < 1e-12);
        }
        let stoch = FlowConfig {
            mode: Mode::Stochastic,
            ..cfg
        };
        assert!(init_cloud(&stoch, 1).unwrap().log_density.is_none());
    }

    #[test]
    fn score_of_two_points_points_inward() {
        let x = array![[-1.0], [1.0]];
        let s = estimate_score(x.view(), 0.8).unwrap();
        assert!(s[[1, 0]] < 0.0);
        assert!(s[[0, 0]] > 0.0);
    }

    #[test]
    fn score_is_antisymmetric_for_symmetric_cloud() {
        let half = normal_cloud(50, 2, 0.0, 1.0, 4);
        let mut all = half.clone();
        all.append(ndarray::Axis(0), (-&half).view()).unwrap();
        let s = estimate_score(all.view(), 0.4).unwrap();
        for i in 0..50 {
            for m in 0..2 {
                assert!((s[[i, m]] + s[[i + 50, m]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn score_errors() {
        let one = array![[0.0, 1.0]];
        assert!(matches!(
            estimate_score(one.view(), 1.0),
            Err(Error::ScoreTooFewParticles)
        ));
        let two = array![[0.0], [1.0]];
        assert!(matches!(estimate_score(two.view(), 0.0), Err(Error::ScoreOverflow)));
    }

    #[test]
    fn divergence_examples() {
        let identity = |x: &[f64], out: &mut [f64]| out.copy_from_slice(x);
        let d = divergence_of_drift(identity, &[0.3, -1.2], 1e-4).unwrap();
        assert!((d - 2.0).abs() < 1e-6);

        let constant = |_: &[f64], out: &mut [f64]| out.copy_from_slice(&[3.0, -1.0]);
        assert!(divergence_of_drift(constant, &[5.0, 5.0], 1e-4).unwrap().abs() < 1e-9);

        let square = |x: &[f64], out: &mut [f64]| {
            out[0] = x[0] * x[0];
            out[1] = 0.0;
        };
        let d = divergence_of_drift(square, &[1.0, 0.0], 1e-4).unwrap();
        assert!((d - 2.0).abs() < 1e-6);

        assert!(divergence_of_drift(identity, &[0.0], 0.0).is_err());
        let blowup = |_: &[f64], out: &mut [f64]| out[0] = f64::NAN;
        assert!(divergence_of_drift(blowup, &[0.0], 1e-3).is_err());
    }

    #[test]
    fn linear_contraction_log_density() {
        // f(x) = -x in d = 2 has divergence -2, so log ρ grows by 2 t.
        let cfg = FlowConfig {
            n_particles: 200,
            init: InitDistribution::Gaussian { sigma: 2.0 },
            ..FlowConfig::default()
        };
        let start = init_cloud(&cfg, 2).unwrap();
        let mut cloud = start.clone();
        for _ in 0..100 {
            cloud = liouville_update(&cloud, |x, out| {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = -v;
                }
            }, 0.01, 1e-4)
            .unwrap()
            .0;
        }
        let l0 = start.log_density.unwrap();
        let l1 = cloud.log_density.unwrap();
        for (a, b) in l0.iter().zip(&l1) {
            assert!((b - (a + 2.0)).abs() < 1e-3);
        }
    }

    #[test]
    fn steps_check_mode() {
        let cfg = FlowConfig {
            mode: Mode::Stochastic,
            n_particles: 10,
            ..FlowConfig::default()
        };
        let cloud = init_cloud(&cfg, 1).unwrap();
        let p = crate::sliced::sample_directions(1, 1, 0).unwrap();
        let t = SlicedTarget::single(&p, cloud.positions.view(), 100).unwrap();
        assert!(liouville_step(&cloud, &t, &p, &cfg).is_err());
    }

    #[test]
    fn fixed_points_when_cloud_is_target() {
        let target = normal_cloud(100, 1, 0.0, 1.0, 3);
        let p = ProjectionSet::from_directions(array![[1.0]], 0).unwrap();
        let t = SlicedTarget::single(&p, target.view(), 100).unwrap();

        let cfg = FlowConfig {
            mode: Mode::Stochastic,
            lambda: 0.0,
            ..FlowConfig::default()
        };
        let cloud = ParticleCloud::new(target.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let next = stochastic_step(&cloud, &t, &p, &cfg, &mut rng).unwrap();
        for (a, b) in next.positions.iter().zip(target.iter()) {
            assert!((a - b).abs() < 1e-6);
        }

        let cfg = FlowConfig {
            mode: Mode::Liouville,
            lambda: 0.0,
            ..FlowConfig::default()
        };
        let cloud = ParticleCloud::new(target.clone())
            .unwrap()
            .with_log_density(vec![0.0; 100])
            .unwrap();
        let next = liouville_step(&cloud, &t, &p, &cfg).unwrap();
        for (a, b) in next.positions.iter().zip(target.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn stochastic_runs_are_seeded() {
        let target = normal_cloud(200, 2, 3.0, 1.0, 1);
        let cfg = FlowConfig {
            mode: Mode::Stochastic,
            lambda: 0.05,
            steps: 5,
            n_particles: 100,
            n_theta: 10,
            ..FlowConfig::default()
        };
        let a = run_flow(target.view(), &cfg).unwrap();
        let b = run_flow(target.view(), &cfg).unwrap();
        assert_eq!(a.final_cloud, b.final_cloud);
        assert_eq!(a.sw_raw, b.sw_raw);
        let c = run_flow(target.view(), &FlowConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.final_cloud, c.final_cloud);
    }

    #[test]
    fn zero_steps_gives_empty_series() {
        let target = normal_cloud(20, 1, 0.0, 1.0, 1);
        let cfg = FlowConfig {
            steps: 0,
            n_particles: 10,
            ..FlowConfig::default()
        };
        let r = run_flow(target.view(), &cfg).unwrap();
        assert!(r.sw_raw.is_empty() && r.mean_drift.is_empty() && r.wall_clock.is_empty());
        assert_eq!(r.final_cloud, r.initial_cloud);
        assert_eq!(r.snapshots.len(), 1);
    }

    #[test]
    fn series_lengths_match_steps_and_snapshots() {
        let target = normal_cloud(100, 2, 2.0, 0.5, 1);
        let cfg = FlowConfig {
            steps: 6,
            n_particles: 60,
            n_theta: 8,
            lambda: 0.01,
            ..FlowConfig::default()
        };
        let r = run_flow(target.view(), &cfg).unwrap();
        assert!(r.is_complete());
        assert_eq!(r.sw_raw.len(), 6);
        assert_eq!(r.sw_db.len(), 6);
        assert_eq!(r.mean_drift.len(), 6);
        let steps: Vec<usize> = r.snapshots.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![0, 3, 6]);
        assert!(r.final_sw().unwrap() < r.sw_raw[0]);
    }

    #[test]
    fn numeric_failure_yields_partial_record() {
        let target = normal_cloud(50, 1, 0.0, 1.0, 2);
        let cfg = FlowConfig {
            steps: 5,
            n_particles: 20,
            lambda: 0.1,
            kde_bandwidth: Bandwidth::Fixed(1e-300),
            ..FlowConfig::default()
        };
        let r = run_flow(target.view(), &cfg).unwrap();
        assert_eq!(r.failed_step, Some(0));
        assert!(r.error.as_ref().unwrap().contains("score overflow"));
        assert!(r.sw_raw.is_empty());
    }

    #[test]
    fn replay_moves_fresh_particles_toward_target() {
        let target = normal_cloud(500, 1, 4.0, 1.0, 8);
        let cfg = FlowConfig {
            mode: Mode::Liouville,
            lambda: 0.0,
            steps: 30,
            n_particles: 300,
            n_theta: 1,
            record_trace: true,
            ..FlowConfig::default()
        };
        let r = run_flow(target.view(), &cfg).unwrap();
        let trace = r.trace.as_ref().unwrap();
        assert_eq!(trace.cloud_tables.len(), 30);
        let fresh = init_test_cloud(&cfg, 1, 300).unwrap();
        let replay = replay_flow(trace, &cfg, fresh).unwrap();
        assert!(replay.error.is_none());
        let w = w2_squared_1d(&one_d(&replay.final_cloud.positions), &one_d(&target), 100).unwrap();
        assert!(w < 0.1, "test-stage w2 = {w}");
    }

    #[test]
    fn config_validation() {
        assert!(FlowConfig::default().validate().is_ok());
        for bad in [
            FlowConfig { h: 0.0, ..FlowConfig::default() },
            FlowConfig { lambda: -1.0, ..FlowConfig::default() },
            FlowConfig { fd_epsilon: Some(0.0), ..FlowConfig::default() },
            FlowConfig { n_theta: 0, ..FlowConfig::default() },
            FlowConfig { num_quantiles: 1, ..FlowConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = FlowConfig {
            kde_bandwidth: Bandwidth::Fixed(0.3),
            init: InitDistribution::UniformBall { radius: 3.0 },
            ..FlowConfig::default()
        };
        let s = serde_json::to_string(&cfg).unwrap();
        let back: FlowConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
        let partial: FlowConfig = serde_json::from_str(r#"{"mode": "stochastic", "h": 1.0}"#).unwrap();
        assert_eq!(partial.mode, Mode::Stochastic);
        assert_eq!(partial.steps, 100);
    }
}
