use std::path::Path;

use proptest::prelude::*;

use mmscore::config::{Config, PartitionSchedule};
use mmscore::io::{tensor_from_bytes, tensor_to_bytes};
use mmscore::metrics::{mae, psnr, ssim};
use mmscore::modality::{apply_mask, enumerate_partitions, ModalityPartition, PairedSample};
use mmscore::net::{residual_output, score_from_eps, MmCsnParams, NetConfig};
use mmscore::sde::SdeSchedule;
use mmscore::train::{dsm_loss, Weighting};
use mmscore::Tensor;

fn tensor(shape: &'static [usize]) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-1.0f64..1.0, n).prop_map(move |d| Tensor::new(shape, d).unwrap())
}

fn partition(count: usize) -> impl Strategy<Value = ModalityPartition> {
    (1u64..(1 << count) - 1).prop_map(move |bits| ModalityPartition::from_bitmask(count, bits, false).unwrap())
}

fn small_net(seed: u64) -> MmCsnParams {
    // Shift every tensor so the output layer is not identically zero.
    let cfg = NetConfig {
        widths: vec![4, 8],
        embed_dim: 8,
    };
    let base = MmCsnParams::init(cfg.clone(), 3, seed).unwrap();
    let tensors = base
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let noise = Tensor::randn(t.shape(), seed * 1000 + i as u64).unwrap();
            let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + 0.2 * b).collect();
            Tensor::new(t.shape(), data).unwrap()
        })
        .collect();
    MmCsnParams::from_parts(cfg, 3, base.names().to_vec(), tensors).unwrap()
}

#[test]
fn partition_enumeration_covers_channels() {
    for c in 2..=6 {
        let parts = enumerate_partitions(c).unwrap();
        assert_eq!(parts.len(), (1 << c) - 2);
        let mut masks: Vec<u64> = parts.iter().map(|p| p.bitmask()).collect();
        masks.dedup();
        assert_eq!(masks.len(), parts.len());
        for p in &parts {
            let mut all: Vec<usize> = p.synth().iter().chain(p.cond()).copied().collect();
            all.sort();
            assert_eq!(all, (0..c).collect::<Vec<_>>());
            assert!(!p.synth().is_empty() && !p.cond().is_empty());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn apply_mask_keeps_conditional_bits(
        sample in tensor(&[3, 4, 5]),
        p in partition(3),
        seed in 0u64..1000,
    ) {
        let a_t = Tensor::randn(&[p.synth().len(), 4, 5], seed).unwrap();
        let out = apply_mask(&PairedSample::new(0, sample.clone()).unwrap(), &p, &a_t).unwrap();
        prop_assert_eq!(out.shape(), &[6, 4, 5]);
        for &i in p.cond() {
            for k in 0..20 {
                prop_assert_eq!(out.data()[i * 20 + k].to_bits(), sample.data()[i * 20 + k].to_bits());
            }
        }
        for (k, &i) in p.synth().iter().enumerate() {
            prop_assert_eq!(&out.data()[i * 20..(i + 1) * 20], &a_t.data()[k * 20..(k + 1) * 20]);
        }
        let mask = p.mask();
        for ch in 0..3 {
            let plane = &out.data()[(3 + ch) * 20..(4 + ch) * 20];
            prop_assert!(mask[ch] == 0.0 || mask[ch] == 1.0);
            prop_assert!(plane.iter().all(|&v| v == mask[ch]));
        }
    }

    #[test]
    fn variance_is_preserved(t in 0.0f64..=1.0) {
        let (a, s) = SdeSchedule::default().marginal_params(t).unwrap();
        prop_assert!((a * a + s * s - 1.0).abs() < 1e-14);
    }

    #[test]
    fn tensor_bytes_round_trip(
        shape in prop::collection::vec(1usize..5, 1..5),
        seed in any::<u64>(),
    ) {
        let t = Tensor::randn(&shape, seed).unwrap();
        let bytes = tensor_to_bytes(&t).unwrap();
        let back = tensor_from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert!(tensor_from_bytes(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }

    #[test]
    fn psnr_decreases_with_error(base in tensor(&[8, 8]), e1 in 1e-3f64..0.5, extra in 1e-3f64..0.5) {
        let shifted = |e: f64| Tensor::new(base.shape(), base.data().iter().map(|v| v + e).collect()).unwrap();
        let near = psnr(&base, &shifted(e1), 1.0).unwrap();
        let far = psnr(&base, &shifted(e1 + extra), 1.0).unwrap();
        prop_assert!(far < near);
    }

    #[test]
    fn ssim_is_symmetric(x in tensor(&[12, 13]), y in tensor(&[12, 13])) {
        let (a, b) = (ssim(&x, &y, 2.0).unwrap(), ssim(&y, &x, 2.0).unwrap());
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!(a <= 1.0 + 1e-12);
    }

    #[test]
    fn mae_triangle_inequality(x in tensor(&[30]), y in tensor(&[30]), z in tensor(&[30])) {
        let lhs = mae(&x, &z).unwrap();
        let rhs = mae(&x, &y).unwrap() + mae(&y, &z).unwrap();
        prop_assert!(lhs <= rhs + 1e-15);
    }

    #[test]
    fn config_text_round_trip(
        beta_max in 1.0f64..40.0,
        widths in prop::collection::vec(1usize..64, 1..4),
        half_embed in 1usize..32,
        lr in 1e-6f64..1e-1,
        seed in any::<u64>(),
        cycle in any::<bool>(),
        literal in any::<bool>(),
        steps in 1usize..5000,
        final_noise in any::<bool>(),
        allow in any::<bool>(),
    ) {
        let mut cfg = Config::default();
        cfg.sde = SdeSchedule::new(0.1, beta_max, 1e-3).unwrap();
        cfg.net = NetConfig { widths, embed_dim: 2 * half_embed };
        cfg.train.lr = lr;
        cfg.train.seed = seed;
        cfg.train.partition_schedule = if cycle { PartitionSchedule::Cycle } else { PartitionSchedule::Uniform };
        cfg.train.literal_objective = literal;
        cfg.sample.steps = steps;
        cfg.sample.final_noise = final_noise;
        cfg.allow_unconditional = allow;
        let text = cfg.to_text();
        let back = Config::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn residual_form_identity(p in partition(3), seed in 0u64..50, t in 1e-3f64..=1.0) {
        let params = small_net(seed % 4);
        let schedule = SdeSchedule::default();
        let state = Tensor::rand_uniform(&[2, 3, 4, 4], -1.0, 1.0, seed).unwrap();
        let ts = [t, t];
        let out = residual_output(&params, &state, &ts, &p, &schedule).unwrap();
        prop_assert_eq!(out.shape(), state.shape());
        let input = mmscore::modality::masked_input(&state, &p).unwrap();
        let eps_hat = params.raw_forward(&input, &ts, &p.code()).unwrap();
        let score = score_from_eps(&eps_hat, &ts, &p, &schedule).unwrap();
        for s in 0..2 {
            for ch in 0..3 {
                for k in 0..16 {
                    let i = (s * 3 + ch) * 16 + k;
                    if p.is_synth(ch) {
                        prop_assert_eq!(out.data()[i].to_bits(), (state.data()[i] + score.data()[i]).to_bits());
                    } else {
                        prop_assert_eq!(out.data()[i].to_bits(), state.data()[i].to_bits());
                        prop_assert_eq!(score.data()[i], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn loss_is_nonnegative_and_ignores_conditionals(p in partition(3), seed in 0u64..50, literal in any::<bool>()) {
        let params = small_net(seed % 4);
        let schedule = SdeSchedule::default();
        let clean = Tensor::rand_uniform(&[3, 3, 4, 4], 0.0, 1.0, seed).unwrap();
        let eps = Tensor::randn(&[3, 3, 4, 4], seed + 1).unwrap();
        let w = if literal { Weighting::Literal } else { Weighting::SigmaSquared };
        let t = [0.01, 0.5, 1.0];
        let loss = dsm_loss(&params, &clean, &p, &t, &eps, &schedule, w).unwrap();
        prop_assert!(loss.value >= 0.0);
        prop_assert!(loss.per_sample.iter().all(|v| *v >= 0.0));
        prop_assert_eq!(loss.cond_term, 0.0);
        // Replacing the noise on conditional channels changes nothing.
        let mut eps2 = eps.clone();
        for s in 0..3 {
            for &i in p.cond() {
                for k in 0..16 {
                    eps2.data_mut()[(s * 3 + i) * 16 + k] = 9.0;
                }
            }
        }
        let loss2 = dsm_loss(&params, &clean, &p, &t, &eps2, &schedule, w).unwrap();
        prop_assert_eq!(loss.value, loss2.value);
    }
}

#[test]
fn fresh_network_is_identity_on_images() {
    let params = MmCsnParams::init(NetConfig { widths: vec![4, 8], embed_dim: 8 }, 3, 0).unwrap();
    let state = Tensor::rand_uniform(&[2, 3, 8, 8], 0.0, 1.0, 1).unwrap();
    for p in enumerate_partitions(3).unwrap() {
        let out = residual_output(&params, &state, &[0.3, 0.9], &p, &SdeSchedule::default()).unwrap();
        assert_eq!(out, state);
    }
}
