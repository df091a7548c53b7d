use mmscore::check::sampler_moments;
use mmscore::config::{Config, SampleConfig};
use mmscore::modality::{masked_input, Dataset, ModalityPartition, ModalitySet};
use mmscore::net::NetConfig;
use mmscore::oracle::GaussianWorld;
use mmscore::sampler::{generate, uncertainty_map, NetScore, OracleScore};
use mmscore::sde::SdeSchedule;
use mmscore::train::TrainState;
use mmscore::{Error, Tensor};

fn oracle(world: &GaussianWorld) -> OracleScore<'_> {
    OracleScore {
        world,
        schedule: SdeSchedule::default(),
    }
}

fn cond_b(b: f64) -> Tensor {
    Tensor::new(&[2, 1, 1], vec![0.0, b]).unwrap()
}

fn synth_first() -> ModalityPartition {
    ModalityPartition::new(2, &[0], false).unwrap()
}

#[test]
fn discretization_error_shrinks_with_steps() {
    let world = GaussianWorld::bivariate(0.8).unwrap();
    let p = synth_first();
    let err = |steps: usize| {
        let cfg = SampleConfig {
            steps,
            ..SampleConfig::default()
        };
        let r = sampler_moments(&oracle(&world), &world, &p, &[1.0], &cfg, 20_000, 1).unwrap();
        (r.mean[0] - r.expected_mean[0]).abs() + (r.cov[(0, 0)] - r.expected_cov[(0, 0)]).abs()
    };
    let (e50, e100, e1000) = (err(50), err(100), err(1000));
    assert!(e1000 <= e100 && e100 <= e50, "errors {e50} {e100} {e1000}");
}

#[test]
fn same_seed_same_output() {
    let world = GaussianWorld::correlated3();
    let data = world.sample_joint(4, 2).unwrap();
    let p = ModalityPartition::new(3, &[1, 2], false).unwrap();
    let cfg = SampleConfig {
        steps: 100,
        ..SampleConfig::default()
    };
    let a = generate(&oracle(&world), &data.images, &p, &cfg, 5).unwrap();
    let b = generate(&oracle(&world), &data.images, &p, &cfg, 5).unwrap();
    let c = generate(&oracle(&world), &data.images, &p, &cfg, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn oracle_uncertainty_matches_conditional_std() {
    let world = GaussianWorld::bivariate(0.8).unwrap();
    let (mean, std) = uncertainty_map(&oracle(&world), &cond_b(1.0), &synth_first(), &SampleConfig::default(), 200, 3)
        .unwrap();
    assert!((std.data()[0] - 0.6).abs() <= 0.05, "std {}", std.data()[0]);
    assert_eq!(std.data()[1], 0.0);
    assert_eq!(mean.data()[1], 1.0);
}

#[test]
fn mean_over_draws_converges_at_clt_rate() {
    // Spread of the per-map mean across independent replicates: doubling the
    // draws scales it by 1/sqrt(2), quadrupling by 1/2.
    let world = GaussianWorld::bivariate(0.8).unwrap();
    let cfg = SampleConfig {
        steps: 100,
        ..SampleConfig::default()
    };
    let spread = |n: usize| {
        let reps = 300;
        let means: Vec<f64> = (0..reps)
            .map(|r| {
                let seed = 1_000_000 * n as u64 + (r * n) as u64;
                let (m, _) = uncertainty_map(&oracle(&world), &cond_b(1.0), &synth_first(), &cfg, n, seed).unwrap();
                m.data()[0]
            })
            .collect();
        let mu = means.iter().sum::<f64>() / reps as f64;
        (means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt()
    };
    let (s8, s16, s32) = (spread(8), spread(16), spread(32));
    let half = std::f64::consts::FRAC_1_SQRT_2;
    // A std estimate from 300 replicates has relative error about 4%.
    assert!((s16 / s8 - half).abs() < 0.12, "ratio {}", s16 / s8);
    assert!((s32 / s8 - 0.5).abs() < 0.08, "ratio {}", s32 / s8);
}

#[test]
fn uncertainty_map_rejects_single_draw() {
    let world = GaussianWorld::bivariate(0.8).unwrap();
    let r = uncertainty_map(&oracle(&world), &cond_b(1.0), &synth_first(), &SampleConfig::default(), 1, 0);
    assert!(matches!(r, Err(Error::Contract(_))));
}

fn train_net(data: &Dataset, seed: u64) -> TrainState {
    let mut cfg = Config::default();
    cfg.net = NetConfig {
        widths: vec![32],
        embed_dim: 32,
    };
    cfg.train.batch_size = 64;
    cfg.train.seed = seed;
    let mut s = TrainState::new(cfg, data.modalities.clone()).unwrap();
    s.train_until(data, 5000, |_| {}).unwrap();
    s
}

#[test]
fn trained_networks_reflect_data_uncertainty() {
    let correlated = GaussianWorld::bivariate(0.8).unwrap().sample_joint(4000, 1).unwrap();
    // Both modalities carry the same value: no conditional uncertainty.
    let b = Tensor::randn(&[4000], 2).unwrap();
    let mut images = Vec::with_capacity(8000);
    for v in b.data() {
        images.extend([*v, *v]);
    }
    let degenerate = Dataset::new(
        ModalitySet::numbered(2).unwrap(),
        Tensor::new(&[4000, 2, 1, 1], images).unwrap(),
    )
    .unwrap();

    let cfg = SampleConfig::default();
    let p = synth_first();
    let cond = Tensor::new(&[2, 1, 1], vec![0.0, 1.0]).unwrap();
    let std_for = |data: &Dataset| {
        let state = train_net(data, 4);
        let net = NetScore {
            params: &state.ema,
            modalities: &state.modalities,
            schedule: state.schedule(),
        };
        let (_, std) = uncertainty_map(&net, &cond, &p, &cfg, 200, 9).unwrap();
        (std.data()[0], state)
    };
    let (std_corr, state) = std_for(&correlated);
    let (std_degen, _) = std_for(&degenerate);
    assert!(std_degen < 0.5 * std_corr, "degenerate {std_degen} vs correlated {std_corr}");

    // The trained network depends on both the configuration code and the
    // conditional pixels.
    let state_in = Tensor::new(&[1, 2, 1, 1], vec![0.3, 1.0]).unwrap();
    let input = masked_input(&state_in, &p).unwrap();
    let t = [0.5];
    let base = state.ema.raw_forward(&input, &t, &p.code()).unwrap();
    let swapped = ModalityPartition::new(2, &[1], false).unwrap();
    let other_code = state.ema.raw_forward(&input, &t, &swapped.code()).unwrap();
    assert!((base.data()[0] - other_code.data()[0]).abs() > 0.0);
    let mut moved = state_in.clone();
    moved.data_mut()[1] = -1.0;
    let moved_out = state.ema.raw_forward(&masked_input(&moved, &p).unwrap(), &t, &p.code()).unwrap();
    assert!((base.data()[0] - moved_out.data()[0]).abs() > 0.0);
}
