//! Conditional reverse-time generation by Euler–Maruyama.
//!
//! Starting from `a₁ ~ N(0, I)` on the synthesized channels, each of the `T`
//! steps applies
//! `a ← a − f(t)·a·Δt + g(t)²·score·Δt + g(t)·n·√Δt` at `t_k = k/T`,
//! `k = T, …, 1`. The conditional channels are copied in once and never
//! written again. Every draw owns a generator seeded with `seed + draw`, so a
//! batch of draws is identical to the same draws made one at a time.

use crate::config::SampleConfig;
use crate::error::{Error, Result};
use crate::modality::{ModalityPartition, ModalitySet};
use crate::net::{residual_output, MmCsnParams};
use crate::oracle::GaussianWorld;
use crate::rng::SeededRng;
use crate::sde::SdeSchedule;
use crate::tensor::Tensor;

/// Anything that yields the conditional score for a batch of states.
pub trait ScoreSource {
    fn modalities(&self) -> &ModalitySet;

    fn schedule(&self) -> &SdeSchedule;

    /// Score `[N, |C|, H, W]` of `state` at time `t`; zero on the `B` channels.
    fn score(&self, state: &Tensor, t: f64, partition: &ModalityPartition) -> Result<Tensor>;
}

/// The trained network read through its residual output: score = output
/// minus input.
pub struct NetScore<'a> {
    pub params: &'a MmCsnParams,
    pub modalities: &'a ModalitySet,
    pub schedule: SdeSchedule,
}

impl ScoreSource for NetScore<'_> {
    fn modalities(&self) -> &ModalitySet {
        self.modalities
    }

    fn schedule(&self) -> &SdeSchedule {
        &self.schedule
    }

    fn score(&self, state: &Tensor, t: f64, partition: &ModalityPartition) -> Result<Tensor> {
        let n = state.dim(0);
        let out = residual_output(self.params, state, &vec![t; n], partition, &self.schedule)?;
        let data = out.data().iter().zip(state.data()).map(|(o, s)| o - s).collect();
        Tensor::new(state.shape(), data)
    }
}

/// The closed-form conditional score of a Gaussian world.
pub struct OracleScore<'a> {
    pub world: &'a GaussianWorld,
    pub schedule: SdeSchedule,
}

impl ScoreSource for OracleScore<'_> {
    fn modalities(&self) -> &ModalitySet {
        self.world.modalities()
    }

    fn schedule(&self) -> &SdeSchedule {
        &self.schedule
    }

    fn score(&self, state: &Tensor, t: f64, partition: &ModalityPartition) -> Result<Tensor> {
        self.world.score_state(state, t, partition, &self.schedule)
    }
}

/// Completes `cond` (`[N, |C|, H, W]`; only the `B` channels are read) by
/// integrating the reverse SDE. Returns the full state with the synthesized
/// `A` channels filled in and `B` channels equal to the input bit for bit.
///
/// `observe` sees the state after every step, with the step index counting
/// from 0.
pub fn generate_observed(
    source: &dyn ScoreSource,
    cond: &Tensor,
    partition: &ModalityPartition,
    cfg: &SampleConfig,
    seed: u64,
    observe: &mut dyn FnMut(usize, &Tensor),
) -> Result<Tensor> {
    let count = source.modalities().len();
    if partition.count() != count {
        return Err(Error::Contract(format!(
            "partition over {} modalities for a source with {count}",
            partition.count()
        )));
    }
    let (n, plane) = match *cond.shape() {
        [n, c, h, w] if c == count => (n, h * w),
        _ => {
            return Err(Error::Contract(format!(
                "conditional input {:?} does not carry the source's {count} modalities",
                cond.shape()
            )))
        }
    };
    if cfg.steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let schedule = *source.schedule();
    let synth = partition.synth();

    let mut rngs: Vec<SeededRng> = (0..n as u64).map(|d| SeededRng::new(seed.wrapping_add(d))).collect();
    let mut state = cond.clone();
    for (s, rng) in rngs.iter_mut().enumerate() {
        for &i in synth {
            let base = (s * count + i) * plane;
            rng.fill_normal(&mut state.data_mut()[base..base + plane]);
        }
    }

    let steps = cfg.steps;
    let dt = 1.0 / steps as f64;
    let sqrt_dt = dt.sqrt();
    for (idx, k) in (1..=steps).rev().enumerate() {
        let t = k as f64 * dt;
        let f = schedule.drift_coeff(t)?;
        let g = schedule.diffusion_coeff(t)?;
        // The kernel score is undefined below t_min; only reachable when T > 1/t_min.
        let score = source.score(&state, t.max(schedule.t_min), partition)?;
        let noisy = k > 1 || cfg.final_noise;
        for (s, rng) in rngs.iter_mut().enumerate() {
            for &i in synth {
                let base = (s * count + i) * plane;
                for p in base..base + plane {
                    let a = state.data()[p];
                    let z = if noisy { rng.normal() } else { 0.0 };
                    state.data_mut()[p] = a - f * a * dt + g * g * score.data()[p] * dt + g * z * sqrt_dt;
                }
            }
        }
        if !state.all_finite() {
            return Err(Error::NanSample { step: idx });
        }
        observe(idx, &state);
    }
    Ok(state)
}

pub fn generate(
    source: &dyn ScoreSource,
    cond: &Tensor,
    partition: &ModalityPartition,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<Tensor> {
    generate_observed(source, cond, partition, cfg, seed, &mut |_, _| {})
}

/// Pixelwise mean and standard deviation (`n − 1` denominator) over
/// `n_draws` completions of the single subject `cond` (`[|C|, H, W]`), using
/// draw seeds `seed, seed + 1, …`.
pub fn uncertainty_map(
    source: &dyn ScoreSource,
    cond: &Tensor,
    partition: &ModalityPartition,
    cfg: &SampleConfig,
    n_draws: usize,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    if n_draws < 2 {
        return Err(Error::Contract(format!("uncertainty map needs >= 2 draws, got {n_draws}")));
    }
    if cond.ndim() != 3 {
        return Err(Error::shape(cond.shape(), "expected one subject [|C|, H, W]"));
    }
    let batch = Tensor::stack(&vec![cond.clone(); n_draws])?;
    let out = generate(source, &batch, partition, cfg, seed)?;
    let len = cond.len();
    let mut mean = vec![0.0; len];
    for d in 0..n_draws {
        for (m, v) in mean.iter_mut().zip(&out.data()[d * len..(d + 1) * len]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_draws as f64);
    let mut var = vec![0.0; len];
    for d in 0..n_draws {
        for ((acc, v), m) in var.iter_mut().zip(&out.data()[d * len..(d + 1) * len]).zip(&mean) {
            *acc += (v - m).powi(2);
        }
    }
    let std = var.iter().map(|v| (v / (n_draws - 1) as f64).sqrt()).collect();
    Ok((Tensor::new(cond.shape(), mean)?, Tensor::new(cond.shape(), std)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle_setup() -> (GaussianWorld, ModalityPartition) {
        (
            GaussianWorld::bivariate(0.8).unwrap(),
            ModalityPartition::new(2, &[0], false).unwrap(),
        )
    }

    fn cond_batch(n: usize, b: f64) -> Tensor {
        let mut data = vec![0.0; n * 2];
        for s in 0..n {
            data[s * 2 + 1] = b;
        }
        Tensor::new(&[n, 2, 1, 1], data).unwrap()
    }

    #[test]
    fn batch_equals_single_draws() {
        let (world, p) = oracle_setup();
        let src = OracleScore {
            world: &world,
            schedule: SdeSchedule::default(),
        };
        let cfg = SampleConfig {
            steps: 50,
            ..SampleConfig::default()
        };
        let batch = generate(&src, &cond_batch(4, 1.0), &p, &cfg, 10).unwrap();
        for d in 0..4 {
            let one = generate(&src, &cond_batch(1, 1.0), &p, &cfg, 10 + d as u64).unwrap();
            assert_eq!(one.data(), &batch.data()[d * 2..d * 2 + 2]);
        }
    }

    #[test]
    fn final_noise_switch_changes_last_step_only() {
        let (world, p) = oracle_setup();
        let src = OracleScore {
            world: &world,
            schedule: SdeSchedule::default(),
        };
        let mut cfg = SampleConfig {
            steps: 20,
            ..SampleConfig::default()
        };
        let mut with = Vec::new();
        generate_observed(&src, &cond_batch(2, 1.0), &p, &cfg, 3, &mut |_, s| with.push(s.clone())).unwrap();
        cfg.final_noise = false;
        let mut without = Vec::new();
        generate_observed(&src, &cond_batch(2, 1.0), &p, &cfg, 3, &mut |_, s| without.push(s.clone())).unwrap();
        assert_eq!(with[..19], without[..19]);
        assert_ne!(with[19], without[19]);
    }

    #[test]
    fn contract_errors() {
        let (world, p) = oracle_setup();
        let src = OracleScore {
            world: &world,
            schedule: SdeSchedule::default(),
        };
        let cfg = SampleConfig::default();
        let wrong = Tensor::zeros(&[1, 3, 1, 1]).unwrap();
        assert!(matches!(generate(&src, &wrong, &p, &cfg, 0), Err(Error::Contract(_))));
        let p3 = ModalityPartition::new(3, &[0], false).unwrap();
        assert!(matches!(generate(&src, &cond_batch(1, 0.0), &p3, &cfg, 0), Err(Error::Contract(_))));
        let one = Tensor::zeros(&[2, 1, 1]).unwrap();
        assert!(matches!(uncertainty_map(&src, &one, &p, &cfg, 1, 0), Err(Error::Contract(_))));
    }
}
