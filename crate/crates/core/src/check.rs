//! Comparisons against the closed forms of a [`GaussianWorld`]: learned-score
//! error and moments of reverse-SDE samples.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::SampleConfig;
use crate::error::{Error, Result};
use crate::modality::ModalityPartition;
use crate::net::MmCsnParams;
use crate::oracle::GaussianWorld;
use crate::sampler::{generate, NetScore, ScoreSource};
use crate::sde::SdeSchedule;
use crate::tensor::Tensor;
use crate::train::perturb_state;

/// Times at which score error is averaged.
pub const SCORE_TIMES: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// One-sample Kolmogorov–Smirnov statistic against `N(mean, sd²)`.
pub fn ks_statistic_normal(samples: &[f64], mean: f64, sd: f64) -> Result<f64> {
    let normal = Normal::new(mean, sd).map_err(|e| Error::Numerical(format!("reference normal: {e}")))?;
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    Ok(xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max))
}

/// Relative L2 error `‖ŝ − s‖ / ‖s‖` of the network score over `n_points`
/// perturbed draws of the world, averaged over [`SCORE_TIMES`].
pub fn score_error(
    params: &MmCsnParams,
    world: &GaussianWorld,
    partition: &ModalityPartition,
    schedule: &SdeSchedule,
    n_points: usize,
    seed: u64,
) -> Result<f64> {
    let data = world.sample_joint(n_points, seed)?;
    let net = NetScore {
        params,
        modalities: world.modalities(),
        schedule: *schedule,
    };
    let mut total = 0.0;
    for (k, &t) in SCORE_TIMES.iter().enumerate() {
        let eps = Tensor::randn(data.images.shape(), seed.wrapping_add(1 + k as u64))?;
        let ts = vec![t; n_points];
        let state = perturb_state(&data.images, partition, &ts, &eps, schedule)?;
        let learned = net.score(&state, t, partition)?;
        let exact = world.score_state(&state, t, partition, schedule)?;
        let (mut num, mut den) = (0.0, 0.0);
        for (a, b) in learned.data().iter().zip(exact.data()) {
            num += (a - b) * (a - b);
            den += b * b;
        }
        total += (num / den).sqrt();
    }
    Ok(total / SCORE_TIMES.len() as f64)
}

#[derive(Clone, Debug)]
pub struct MomentReport {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub expected_mean: DVector<f64>,
    pub expected_cov: DMatrix<f64>,
    /// Largest KS statistic over the synthesized coordinates.
    pub ks: f64,
}

impl MomentReport {
    pub fn mean_err(&self) -> f64 {
        (&self.mean - &self.expected_mean).abs().max()
    }

    pub fn cov_err(&self) -> f64 {
        (&self.cov - &self.expected_cov).abs().max()
    }
}

/// Draws `draws` completions with every conditional entry fixed to
/// `b_values` and compares their sample moments with the closed-form
/// conditional.
pub fn sampler_moments(
    source: &dyn ScoreSource,
    world: &GaussianWorld,
    partition: &ModalityPartition,
    b_values: &[f64],
    cfg: &SampleConfig,
    draws: usize,
    seed: u64,
) -> Result<MomentReport> {
    if draws < 2 {
        return Err(Error::Contract("moment check needs >= 2 draws".into()));
    }
    let (expected_mean, expected_cov) = world.conditional_moments(b_values, partition)?;
    let d = world.dim();
    let c = world.modalities().len();
    let per = c * d;
    let mut row = vec![0.0; per];
    for (k, &m) in partition.cond().iter().enumerate() {
        row[m * d..(m + 1) * d].copy_from_slice(&b_values[k * d..(k + 1) * d]);
    }
    let cond = Tensor::new(&[draws, c, 1, d], row.repeat(draws))?;
    let out = generate(source, &cond, partition, cfg, seed)?;
    let idx: Vec<usize> = partition.synth().iter().flat_map(|&m| m * d..(m + 1) * d).collect();
    let k = idx.len();
    let samples = DMatrix::from_fn(draws, k, |s, j| out.data()[s * per + idx[j]]);
    let mean = DVector::from_fn(k, |j, _| samples.column(j).mean());
    let centered = DMatrix::from_fn(draws, k, |s, j| samples[(s, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (draws - 1) as f64;
    let mut ks: f64 = 0.0;
    for j in 0..k {
        let col: Vec<f64> = samples.column(j).iter().copied().collect();
        ks = ks.max(ks_statistic_normal(&col, expected_mean[j], expected_cov[(j, j)].sqrt())?);
    }
    Ok(MomentReport {
        mean,
        cov,
        expected_mean,
        expected_cov,
        ks,
    })
}
