//! Denoising score matching over random modality partitions.
//!
//! One network serves every partition: each step draws a partition, a
//! minibatch, per-sample times `t ~ U[t_min, 1]` and noise `ε`, perturbs only
//! the synthesized channels and regresses `ε` from the masked input. All
//! randomness of step `k` comes from stream `k` of the training seed, so a run
//! resumed from a checkpoint at step `k` continues exactly as the unbroken
//! run would.

use crate::config::{Config, PartitionSchedule};
use crate::error::{Error, Result};
use crate::modality::{enumerate_partitions_with, masked_input, sample_partition, Dataset, ModalityPartition, ModalitySet};
use crate::net::{residual_output, MmCsnParams};
use crate::rng::SeededRng;
use crate::sde::SdeSchedule;
use crate::tensor::{Adam, AdamState, Tape, Tensor};

/// Per-sample weight applied to `½(ε̂ − ε)²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    /// Equal weights; the residual objective scaled by `σ(t)²`.
    SigmaSquared,
    /// `1/σ(t)²`; the residual objective with no time weighting.
    Literal,
}

impl Weighting {
    fn weight(self, sigma: f64) -> f64 {
        match self {
            Self::SigmaSquared => 1.0,
            Self::Literal => 1.0 / (sigma * sigma),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DsmLoss {
    /// Mean of `per_sample`.
    pub value: f64,
    /// `½·w·mean over A channels and pixels of (ε̂ − ε)²` for each sample.
    pub per_sample: Vec<f64>,
    /// Squared residual `NN − (a_t + S, b)` summed over the `B` channels.
    pub cond_term: f64,
}

/// `clean` with the `A` channels replaced by `α(t)·a₀ + σ(t)·ε`.
pub fn perturb_state(
    clean: &Tensor,
    partition: &ModalityPartition,
    t: &[f64],
    eps: &Tensor,
    schedule: &SdeSchedule,
) -> Result<Tensor> {
    let (n, c, plane) = batch_dims(clean, partition.count())?;
    clean.ensure_same_shape(eps, "perturb_state")?;
    if t.len() != n {
        return Err(Error::Contract(format!("{} time values for batch of {n}", t.len())));
    }
    let mut state = clean.clone();
    for (s, &ts) in t.iter().enumerate() {
        let (alpha, sigma) = schedule.marginal_params(ts)?;
        for &i in partition.synth() {
            let base = (s * c + i) * plane;
            for k in base..base + plane {
                state.data_mut()[k] = alpha * clean.data()[k] + sigma * eps.data()[k];
            }
        }
    }
    Ok(state)
}

fn batch_dims(x: &Tensor, count: usize) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] if c == count => Ok((n, c, h * w)),
        _ => Err(Error::shape(x.shape(), format!("expected [N, {count}, H, W]"))),
    }
}

fn check_loss_inputs(partition: &ModalityPartition, t: &[f64], schedule: &SdeSchedule) -> Result<()> {
    if partition.synth().is_empty() {
        return Err(Error::Contract("denoising loss needs a nonempty synthesis set".into()));
    }
    for &ts in t {
        schedule.check_score_time(ts)?;
    }
    Ok(())
}

/// The noise-regression loss on one batch, evaluated without a tape.
pub fn dsm_loss(
    params: &MmCsnParams,
    clean: &Tensor,
    partition: &ModalityPartition,
    t: &[f64],
    eps: &Tensor,
    schedule: &SdeSchedule,
    weighting: Weighting,
) -> Result<DsmLoss> {
    check_loss_inputs(partition, t, schedule)?;
    let state = perturb_state(clean, partition, t, eps, schedule)?;
    let (_, c, plane) = batch_dims(clean, partition.count())?;
    let eps_hat = params.raw_forward(&masked_input(&state, partition)?, t, &partition.code())?;
    let count = (partition.synth().len() * plane) as f64;
    let mut per_sample = Vec::with_capacity(t.len());
    for (s, &ts) in t.iter().enumerate() {
        let (_, sigma) = schedule.marginal_params(ts)?;
        let mut acc = 0.0;
        for &i in partition.synth() {
            let base = (s * c + i) * plane;
            for k in base..base + plane {
                let d = eps_hat.data()[k] - eps.data()[k];
                acc += d * d;
            }
        }
        per_sample.push(0.5 * weighting.weight(sigma) * acc / count);
    }
    let out = residual_output(params, &state, t, partition, schedule)?;
    let mut cond_term = 0.0;
    for s in 0..t.len() {
        for &i in partition.cond() {
            let base = (s * c + i) * plane;
            for k in base..base + plane {
                let d = out.data()[k] - clean.data()[k];
                cond_term += d * d;
            }
        }
    }
    let value = per_sample.iter().sum::<f64>() / t.len() as f64;
    Ok(DsmLoss {
        value,
        per_sample,
        cond_term,
    })
}

/// The same per-sample objective written on the residual output:
/// `½σ(t)²·mean over A of ((a_t + S) − NN)²` with the kernel score
/// `S = −ε/σ(t)` as target.
pub fn residual_form_loss(
    params: &MmCsnParams,
    clean: &Tensor,
    partition: &ModalityPartition,
    t: &[f64],
    eps: &Tensor,
    schedule: &SdeSchedule,
) -> Result<Vec<f64>> {
    check_loss_inputs(partition, t, schedule)?;
    let state = perturb_state(clean, partition, t, eps, schedule)?;
    let (_, c, plane) = batch_dims(clean, partition.count())?;
    let out = residual_output(params, &state, t, partition, schedule)?;
    let count = (partition.synth().len() * plane) as f64;
    t.iter()
        .enumerate()
        .map(|(s, &ts)| {
            let (_, sigma) = schedule.marginal_params(ts)?;
            let mut acc = 0.0;
            for &i in partition.synth() {
                let base = (s * c + i) * plane;
                for k in base..base + plane {
                    let target = state.data()[k] - eps.data()[k] / sigma;
                    let d = target - out.data()[k];
                    acc += d * d;
                }
            }
            Ok(0.5 * sigma * sigma * acc / count)
        })
        .collect()
}

/// Random draws consumed by one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraws {
    pub partition: ModalityPartition,
    pub indices: Vec<usize>,
    pub t: Vec<f64>,
    pub eps: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Index of the completed step (0-based).
    pub step: u64,
    pub loss: f64,
    pub partition: ModalityPartition,
}

/// Everything needed to continue training or to sample: raw and averaged
/// parameters, optimizer moments, step counter and the full configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: Config,
    pub modalities: ModalitySet,
    pub params: MmCsnParams,
    pub ema: MmCsnParams,
    pub adam: AdamState,
    pub step: u64,
}

impl TrainState {
    pub fn new(config: Config, modalities: ModalitySet) -> Result<Self> {
        config.validate()?;
        let params = MmCsnParams::init(config.net.clone(), modalities.len(), config.train.seed)?;
        let adam = AdamState::new(
            Adam {
                lr: config.train.lr,
                ..Adam::default()
            },
            params.tensors(),
        )?;
        Ok(Self {
            ema: params.clone(),
            params,
            adam,
            step: 0,
            config,
            modalities,
        })
    }

    pub fn schedule(&self) -> SdeSchedule {
        self.config.sde
    }

    fn weighting(&self) -> Weighting {
        if self.config.train.literal_objective {
            Weighting::Literal
        } else {
            Weighting::SigmaSquared
        }
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.modalities != self.modalities {
            return Err(Error::Contract(format!(
                "dataset modalities {:?} differ from the model's {:?}",
                data.modalities.names(),
                self.modalities.names()
            )));
        }
        let (h, w) = data.spatial();
        let m = self.config.net.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(
                data.images.shape(),
                format!("spatial extents must be divisible by {m}"),
            ));
        }
        Ok(())
    }

    /// The partition, minibatch, times and noise of training step `step`.
    pub fn draws_for_step(&self, data: &Dataset, step: u64) -> Result<StepDraws> {
        if data.is_empty() {
            return Err(Error::Contract("empty dataset".into()));
        }
        let mut rng = SeededRng::with_stream(self.config.train.seed, step);
        let count = self.modalities.len();
        let allow = self.config.allow_unconditional;
        let partition = match self.config.train.partition_schedule {
            PartitionSchedule::Uniform => sample_partition(count, allow, &mut rng)?,
            PartitionSchedule::Cycle => {
                let all = enumerate_partitions_with(count, allow)?;
                all[(step % all.len() as u64) as usize].clone()
            }
        };
        let b = self.config.train.batch_size;
        let indices: Vec<usize> = (0..b).map(|_| rng.below(data.len())).collect();
        let t_min = self.config.sde.t_min;
        let t: Vec<f64> = (0..b).map(|_| t_min + (1.0 - t_min) * rng.uniform()).collect();
        let (h, w) = data.spatial();
        let mut eps = Tensor::zeros(&[b, count, h, w])?;
        rng.fill_normal(eps.data_mut());
        Ok(StepDraws {
            partition,
            indices,
            t,
            eps,
        })
    }

    /// One Adam update on a fresh Monte Carlo estimate of the objective,
    /// followed by the parameter-average update.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepReport> {
        self.check_data(data)?;
        let draws = self.draws_for_step(data, self.step)?;
        let schedule = self.schedule();
        let partition = &draws.partition;
        let clean = data.gather(&draws.indices)?;
        let state = perturb_state(&clean, partition, &draws.t, &draws.eps, &schedule)?;
        let input = masked_input(&state, partition)?;

        let (b, c, plane) = batch_dims(&clean, partition.count())?;
        let weighting = self.weighting();
        let mut weights = vec![0.0; b * c * plane];
        for (s, &ts) in draws.t.iter().enumerate() {
            let (_, sigma) = schedule.marginal_params(ts)?;
            let w = weighting.weight(sigma);
            for &i in partition.synth() {
                let base = (s * c + i) * plane;
                weights[base..base + plane].fill(w);
            }
        }
        let norm = 0.5 / (b * partition.synth().len() * plane) as f64;

        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, true);
        let x = tape.constant(input);
        let eps_hat = self
            .params
            .forward_on_tape(&mut tape, &vars, x, &draws.t, &partition.code())?;
        let target = tape.constant(draws.eps.clone());
        let diff = tape.sub(eps_hat, target)?;
        let sq = tape.mul(diff, diff)?;
        let wv = tape.constant(Tensor::new(clean.shape(), weights)?);
        let weighted = tape.mul(sq, wv)?;
        let total = tape.sum(weighted);
        let loss_var = tape.scale(total, norm);
        let loss = tape.value(loss_var).item()?;
        if !loss.is_finite() {
            return Err(Error::NanLoss {
                step: self.step,
                partition: partition.label(&self.modalities),
                t: draws.t.clone(),
            });
        }
        let grads = tape.backward(loss_var)?.into_vec();
        self.adam.step(self.params.tensors_mut(), &grads)?;

        // Warm-up: early averages would otherwise be dominated by the
        // initialization for ~1/(1 - decay) steps.
        let warm = (1 + self.step) as f64 / (10 + self.step) as f64;
        let d = self.config.train.ema_decay.min(warm);
        for (e, p) in self.ema.tensors_mut().iter_mut().zip(self.params.tensors()) {
            for (ev, &pv) in e.data_mut().iter_mut().zip(p.data()) {
                *ev = d * *ev + (1.0 - d) * pv;
            }
        }
        let report = StepReport {
            step: self.step,
            loss,
            partition: draws.partition,
        };
        self.step += 1;
        Ok(report)
    }

    /// Runs until `self.step == until`, reporting every step to `observe`.
    pub fn train_until(
        &mut self,
        data: &Dataset,
        until: u64,
        mut observe: impl FnMut(&StepReport),
    ) -> Result<Vec<f64>> {
        let mut losses = Vec::new();
        while self.step < until {
            let r = self.train_step(data)?;
            observe(&r);
            losses.push(r.loss);
        }
        Ok(losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use crate::oracle::GaussianWorld;

    fn small_config() -> Config {
        let mut cfg = Config::default();
        cfg.net = NetConfig {
            widths: vec![8],
            embed_dim: 8,
        };
        cfg.train.batch_size = 8;
        cfg.train.seed = 3;
        cfg
    }

    #[test]
    fn fresh_network_loss_is_half_mean_square_noise() {
        // ε̂ = 0 at initialization, so the loss is ½·mean(ε²) ≈ ½.
        let cfg = small_config();
        let state = TrainState::new(cfg, ModalitySet::numbered(3).unwrap()).unwrap();
        let clean = Tensor::rand_uniform(&[100, 3, 10, 10], 0.0, 1.0, 1).unwrap();
        let eps = Tensor::randn(&[100, 3, 10, 10], 2).unwrap();
        let t: Vec<f64> = (0..100).map(|i| 0.01 + 0.0099 * i as f64).collect();
        let p = ModalityPartition::new(3, &[1], false).unwrap();
        let l = dsm_loss(&state.params, &clean, &p, &t, &eps, &state.schedule(), Weighting::SigmaSquared).unwrap();
        assert!((l.value - 0.5).abs() < 0.02, "{}", l.value);
        assert_eq!(l.cond_term, 0.0);
    }

    #[test]
    fn empty_synthesis_set_is_unrepresentable() {
        assert!(ModalityPartition::new(2, &[], true).is_err());
        assert!(ModalityPartition::from_bitmask(2, 0, true).is_err());
    }

    #[test]
    fn tape_loss_matches_direct_loss() {
        let world = GaussianWorld::correlated3();
        let data = world.sample_joint(64, 5).unwrap();
        let mut state = TrainState::new(small_config(), data.modalities.clone()).unwrap();
        // Move off the zero-output initialization first.
        state.train_until(&data, 3, |_| {}).unwrap();
        let draws = state.draws_for_step(&data, 3).unwrap();
        let clean = data.gather(&draws.indices).unwrap();
        let direct = dsm_loss(
            &state.params,
            &clean,
            &draws.partition,
            &draws.t,
            &draws.eps,
            &state.schedule(),
            Weighting::SigmaSquared,
        )
        .unwrap();
        let r = state.train_step(&data).unwrap();
        assert!((r.loss - direct.value).abs() <= 1e-12 * direct.value.abs().max(1.0));
    }

    #[test]
    fn step_draws_are_seeded_and_in_range() {
        let world = GaussianWorld::correlated3();
        let data = world.sample_joint(10, 5).unwrap();
        let state = TrainState::new(small_config(), data.modalities.clone()).unwrap();
        let a = state.draws_for_step(&data, 7).unwrap();
        assert_eq!(a, state.draws_for_step(&data, 7).unwrap());
        assert_ne!(a, state.draws_for_step(&data, 8).unwrap());
        assert!(a.t.iter().all(|&t| (1e-3..=1.0).contains(&t)));
        assert!(a.indices.iter().all(|&i| i < 10));
    }

    #[test]
    fn cycle_schedule_visits_in_order() {
        let world = GaussianWorld::correlated3();
        let data = world.sample_joint(10, 5).unwrap();
        let mut cfg = small_config();
        cfg.train.partition_schedule = PartitionSchedule::Cycle;
        let state = TrainState::new(cfg, data.modalities.clone()).unwrap();
        let all = enumerate_partitions_with(3, false).unwrap();
        for k in 0..12u64 {
            assert_eq!(state.draws_for_step(&data, k).unwrap().partition, all[(k % 6) as usize]);
        }
    }

    #[test]
    fn mismatched_dataset_rejected() {
        let world = GaussianWorld::bivariate(0.5).unwrap();
        let data = world.sample_joint(10, 5).unwrap();
        let mut state = TrainState::new(small_config(), ModalitySet::numbered(3).unwrap()).unwrap();
        assert!(matches!(state.train_step(&data), Err(Error::Contract(_))));
    }

    #[test]
    fn ema_warms_up_before_reaching_its_decay() {
        let world = GaussianWorld::correlated3();
        let data = world.sample_joint(32, 5).unwrap();
        let mut state = TrainState::new(small_config(), data.modalities.clone()).unwrap();
        let init = state.ema.clone();
        state.train_step(&data).unwrap();
        // First update uses decay 1/10.
        for ((e, i), p) in state.ema.tensors().iter().zip(init.tensors()).zip(state.params.tensors()) {
            for ((ev, iv), pv) in e.data().iter().zip(i.data()).zip(p.data()) {
                assert!((ev - (0.1 * iv + 0.9 * pv)).abs() <= 1e-15);
            }
        }
    }
}
