//! Multi-in multi-out conditional score network.
//!
//! A small U-Net. The encoder sees every modality image (noisy `A`
//! channels, clean `B` channels) plus one mask plane per modality. The
//! time embedding and the configuration code are combined into one vector
//! that is projected and added, per channel, at the bottleneck and after the
//! first convolution of every decoder stage. The final 1×1 convolution is
//! zero-initialized, so a fresh network predicts zero noise everywhere.
//!
//! The network predicts noise `ε̂`; the conditional score on `A` channels is
//! `−ε̂/σ(t)` and `B` channels carry a zero score.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::modality::ModalityPartition;
use crate::rng::SeededRng;
use crate::sde::SdeSchedule;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    /// Channel width of each resolution stage; stage `s` runs at `H/2^s`.
    pub widths: Vec<usize>,
    /// Dimension of the time/code embedding.
    pub embed_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 128],
            embed_dim: 64,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("net.widths must be nonempty and positive, got {:?}", self.widths)));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!("net.embed_dim must be even and >= 2, got {}", self.embed_dim)));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

/// Sinusoidal features of `t` (rows) at geometrically spaced frequencies.
pub fn time_features(t: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        let x = 1000.0 * tv;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((x * f).sin(), (x * f).cos())).unzip();
        data.extend(s);
        data.extend(c);
    }
    Tensor::new(&[t.len(), dim], data).expect("time feature shape")
}

enum Init {
    Normal { fan_in: usize },
    Zeros,
    Ones,
}

/// All learnable tensors of the network, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct MmCsnParams {
    config: NetConfig,
    channels: usize,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

fn layout(cfg: &NetConfig, channels: usize) -> Vec<(String, Vec<usize>, Init)> {
    let e = cfg.embed_dim;
    let w = &cfg.widths;
    let last = w.len() - 1;
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let linear = |v: &mut Vec<_>, name: &str, din: usize, dout: usize| {
        v.push((format!("{name}.w"), vec![din, dout], Init::Normal { fan_in: din }));
        v.push((format!("{name}.b"), vec![dout], Init::Zeros));
    };
    linear(&mut v, "time.l1", e, e);
    linear(&mut v, "time.l2", e, e);
    linear(&mut v, "code", channels, e);
    let conv = |v: &mut Vec<(String, Vec<usize>, Init)>, name: &str, cin: usize, cout: usize| {
        v.push((format!("{name}.w"), vec![cout, cin, 3, 3], Init::Normal { fan_in: cin * 9 }));
        v.push((format!("{name}.b"), vec![cout], Init::Zeros));
    };
    let norm = |v: &mut Vec<(String, Vec<usize>, Init)>, name: &str, c: usize| {
        v.push((format!("{name}.g"), vec![c], Init::Ones));
        v.push((format!("{name}.b"), vec![c], Init::Zeros));
    };
    conv(&mut v, "in_conv", 2 * channels, w[0]);
    for s in 0..w.len() {
        let cin = if s == 0 { w[0] } else { w[s - 1] };
        conv(&mut v, &format!("enc{s}.conv"), cin, w[s]);
        norm(&mut v, &format!("enc{s}.norm"), w[s]);
    }
    conv(&mut v, "mid.conv", w[last], w[last]);
    linear(&mut v, "mid.emb", e, w[last]);
    norm(&mut v, "mid.norm", w[last]);
    for s in (0..w.len()).rev() {
        let below = if s == last { w[last] } else { w[s + 1] };
        conv(&mut v, &format!("dec{s}.conv"), below + w[s], w[s]);
        linear(&mut v, &format!("dec{s}.emb"), e, w[s]);
        norm(&mut v, &format!("dec{s}.norm"), w[s]);
    }
    v.push(("out.w".into(), vec![channels, w[0], 1, 1], Init::Zeros));
    v.push(("out.b".into(), vec![channels], Init::Zeros));
    v
}

impl MmCsnParams {
    /// Fresh parameters for `channels` modalities.
    pub fn init(config: NetConfig, channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if channels < 2 {
            return Err(Error::Config("network needs at least 2 modalities".into()));
        }
        let mut rng = SeededRng::new(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(&config, channels) {
            let t = match init {
                Init::Zeros => Tensor::zeros(&shape)?,
                Init::Ones => Tensor::full(&shape, 1.0)?,
                Init::Normal { fan_in } => {
                    let std = (1.0 / fan_in as f64).sqrt();
                    let mut t = Tensor::zeros(&shape)?;
                    for v in t.data_mut() {
                        *v = std * rng.normal();
                    }
                    t
                }
            };
            names.push(name);
            tensors.push(t);
        }
        Self::from_parts(config, channels, names, tensors)
    }

    /// Rebuilds parameters from named tensors, checking them against the
    /// layout implied by `config`.
    pub fn from_parts(config: NetConfig, channels: usize, names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config, channels);
        if expected.len() != names.len() || names.len() != tensors.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                names.len()
            )));
        }
        for ((en, es, _), (n, t)) in expected.iter().zip(names.iter().zip(&tensors)) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::Contract(format!(
                    "parameter {n} {:?} does not match layout entry {en} {es:?}",
                    t.shape()
                )));
            }
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self {
            config,
            channels,
            names,
            tensors,
            index,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor on `tape` (as trainable leaves when
    /// `trainable`), returning handles in parameter order.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let m = self.config.spatial_multiple();
        match *input.shape() {
            [_, c, h, w] if c == 2 * self.channels => {
                if h % m != 0 || w % m != 0 {
                    return Err(Error::shape(
                        input.shape(),
                        format!("spatial extents must be divisible by {m}"),
                    ));
                }
                Ok(())
            }
            _ => Err(Error::shape(
                input.shape(),
                format!("expected [N, {}, H, W]", 2 * self.channels),
            )),
        }
    }

    /// Records the forward pass on `tape` and returns the predicted noise
    /// `[N, |C|, H, W]`. `vars` come from [`Self::register`] on the same tape.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        input: Var,
        t: &[f64],
        code: &[f64],
    ) -> Result<Var> {
        self.check_input(tape.value(input))?;
        let n = tape.value(input).dim(0);
        if t.len() != n {
            return Err(Error::Contract(format!("{} time values for batch of {n}", t.len())));
        }
        if code.len() != self.channels {
            return Err(Error::Contract(format!(
                "configuration code has {} entries, expected {}",
                code.len(),
                self.channels
            )));
        }
        let p = |name: &str| vars[self.index[name]];
        let e = self.config.embed_dim;

        let linear = |tape: &mut Tape, x: Var, name: &str| -> Result<Var> {
            let y = tape.matmul(x, p(&format!("{name}.w")))?;
            tape.add_channel_bias(y, p(&format!("{name}.b")))
        };
        let conv = |tape: &mut Tape, x: Var, name: &str| -> Result<Var> {
            let y = tape.conv2d(x, p(&format!("{name}.w")), 1)?;
            tape.add_channel_bias(y, p(&format!("{name}.b")))
        };
        let norm_act = |tape: &mut Tape, x: Var, name: &str| -> Result<Var> {
            let y = tape.group_norm(x, p(&format!("{name}.g")), p(&format!("{name}.b")))?;
            Ok(tape.silu(y))
        };

        let tf = tape.constant(time_features(t, e));
        let h = linear(tape, tf, "time.l1")?;
        let h = tape.silu(h);
        let temb = linear(tape, h, "time.l2")?;
        let codes: Vec<f64> = (0..n).flat_map(|_| code.iter().copied()).collect();
        let cv = tape.constant(Tensor::new(&[n, self.channels], codes)?);
        let cemb = linear(tape, cv, "code")?;
        let emb = tape.add(temb, cemb)?;
        let emb = tape.silu(emb);

        let stages = self.config.widths.len();
        let mut h = conv(tape, input, "in_conv")?;
        let mut skips = Vec::with_capacity(stages);
        for s in 0..stages {
            h = conv(tape, h, &format!("enc{s}.conv"))?;
            h = norm_act(tape, h, &format!("enc{s}.norm"))?;
            skips.push(h);
            if s + 1 < stages {
                h = tape.avgpool2x(h)?;
            }
        }

        h = conv(tape, h, "mid.conv")?;
        let inj = linear(tape, emb, "mid.emb")?;
        h = tape.add_channel_bias(h, inj)?;
        h = norm_act(tape, h, "mid.norm")?;

        for s in (0..stages).rev() {
            if s + 1 < stages {
                h = tape.upsample2x(h)?;
            }
            h = tape.concat_channels(h, skips[s])?;
            h = conv(tape, h, &format!("dec{s}.conv"))?;
            let inj = linear(tape, emb, &format!("dec{s}.emb"))?;
            h = tape.add_channel_bias(h, inj)?;
            h = norm_act(tape, h, &format!("dec{s}.norm"))?;
        }
        let y = tape.conv2d(h, p("out.w"), 0)?;
        tape.add_channel_bias(y, p("out.b"))
    }

    /// Predicted noise for a batch `[N, 2|C|, H, W]` (or one `[2|C|, H, W]`
    /// sample) at per-sample times `t`.
    pub fn raw_forward(&self, masked_input: &Tensor, t: &[f64], code: &[f64]) -> Result<Tensor> {
        let single = masked_input.ndim() == 3;
        let input = if single {
            let mut shape = vec![1];
            shape.extend_from_slice(masked_input.shape());
            masked_input.clone().reshape(&shape)?
        } else {
            masked_input.clone()
        };
        let mut tape = Tape::no_grad();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(input);
        let y = self.forward_on_tape(&mut tape, &vars, x, t, code)?;
        let out = tape.value(y).clone();
        if single {
            let shape = out.shape()[1..].to_vec();
            out.reshape(&shape)
        } else {
            Ok(out)
        }
    }
}

/// Conditional score from predicted noise: `−ε̂/σ(t)` on `A` channels and
/// exactly zero on `B` channels. `eps_hat` is `[N, |C|, H, W]` with one time
/// per sample.
pub fn score_from_eps(
    eps_hat: &Tensor,
    t: &[f64],
    partition: &ModalityPartition,
    schedule: &SdeSchedule,
) -> Result<Tensor> {
    let (n, c, plane) = batch_dims(eps_hat, partition)?;
    if t.len() != n {
        return Err(Error::Contract(format!("{} time values for batch of {n}", t.len())));
    }
    let mut out = vec![0.0; eps_hat.len()];
    for (s, &ts) in t.iter().enumerate() {
        schedule.check_score_time(ts)?;
        let (_, sigma) = schedule.marginal_params(ts)?;
        for &i in partition.synth() {
            let base = (s * c + i) * plane;
            for k in base..base + plane {
                out[k] = -eps_hat.data()[k] / sigma;
            }
        }
    }
    Tensor::new(eps_hat.shape(), out)
}

fn batch_dims(x: &Tensor, partition: &ModalityPartition) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] if c == partition.count() => Ok((n, c, h * w)),
        _ => Err(Error::shape(
            x.shape(),
            format!("expected [N, {}, H, W]", partition.count()),
        )),
    }
}

/// The residual form `(a_t, b) + (score, 0)`: `state` holds `a_t` on the `A`
/// channels and `b` on the `B` channels. `B` channels are copied through
/// unchanged.
pub fn residual_output(
    params: &MmCsnParams,
    state: &Tensor,
    t: &[f64],
    partition: &ModalityPartition,
    schedule: &SdeSchedule,
) -> Result<Tensor> {
    let (_, c, plane) = batch_dims(state, partition)?;
    for &ts in t {
        schedule.check_score_time(ts)?;
    }
    let input = crate::modality::masked_input(state, partition)?;
    let eps_hat = params.raw_forward(&input, t, &partition.code())?;
    let score = score_from_eps(&eps_hat, t, partition, schedule)?;
    let mut out = state.clone();
    let n = t.len();
    for s in 0..n {
        for &i in partition.synth() {
            let base = (s * c + i) * plane;
            for k in base..base + plane {
                out.data_mut()[k] = state.data()[k] + score.data()[k];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::{enumerate_partitions, masked_input};

    fn small() -> NetConfig {
        NetConfig {
            widths: vec![4, 8],
            embed_dim: 8,
        }
    }

    #[test]
    fn fresh_network_predicts_zero() {
        let p = MmCsnParams::init(small(), 3, 1).unwrap();
        let x = Tensor::randn(&[2, 6, 8, 8], 2).unwrap();
        let y = p.raw_forward(&x, &[0.3, 0.9], &[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(y.shape(), &[2, 3, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_spatial_dims_rejected() {
        let p = MmCsnParams::init(small(), 3, 1).unwrap();
        let x = Tensor::randn(&[1, 6, 7, 8], 2).unwrap();
        assert!(matches!(
            p.raw_forward(&x, &[0.5], &[1.0, 0.0, 1.0]),
            Err(Error::InvalidShape { .. })
        ));
    }

    #[test]
    fn default_network_size() {
        let p = MmCsnParams::init(NetConfig::default(), 4, 0).unwrap();
        let n = p.num_scalars();
        assert!((300_000..1_000_000).contains(&n), "{n} parameters");
    }

    #[test]
    fn single_sample_input_accepted() {
        let p = MmCsnParams::init(small(), 2, 1).unwrap();
        let x = Tensor::randn(&[4, 4, 4], 2).unwrap();
        let y = p.raw_forward(&x, &[0.5], &[1.0, 0.0]).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4]);
    }

    fn perturbed(seed: u64) -> MmCsnParams {
        let mut p = MmCsnParams::init(small(), 3, seed).unwrap();
        let mut rng = SeededRng::new(seed + 100);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v += 0.1 * rng.normal();
            }
        }
        p
    }

    #[test]
    fn residual_form_identities() {
        let p = perturbed(3);
        let s = SdeSchedule::default();
        let state = Tensor::randn(&[2, 3, 4, 4], 4).unwrap();
        let t = [0.25, 0.8];
        for part in enumerate_partitions(3).unwrap() {
            let out = residual_output(&p, &state, &t, &part, &s).unwrap();
            let input = masked_input(&state, &part).unwrap();
            let eps = p.raw_forward(&input, &t, &part.code()).unwrap();
            let score = score_from_eps(&eps, &t, &part, &s).unwrap();
            for n in 0..2 {
                for c in 0..3 {
                    for k in 0..16 {
                        let i = (n * 3 + c) * 16 + k;
                        if part.is_synth(c) {
                            assert_eq!(out.data()[i], state.data()[i] + score.data()[i]);
                        } else {
                            assert_eq!(out.data()[i].to_bits(), state.data()[i].to_bits());
                            assert_eq!(score.data()[i].to_bits(), 0f64.to_bits());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn fresh_network_residual_is_identity() {
        let p = MmCsnParams::init(small(), 3, 5).unwrap();
        let s = SdeSchedule::default();
        let state = Tensor::randn(&[1, 3, 4, 4], 4).unwrap();
        let part = ModalityPartition::new(3, &[1], false).unwrap();
        let out = residual_output(&p, &state, &[0.5], &part, &s).unwrap();
        assert_eq!(out, state);
    }

    #[test]
    fn score_from_eps_values() {
        let s = SdeSchedule::default();
        let part = ModalityPartition::new(2, &[0], false).unwrap();
        let eps = Tensor::full(&[1, 2, 1, 1], 0.5).unwrap();
        let sc = score_from_eps(&eps, &[1.0], &part, &s).unwrap();
        let (_, sigma) = s.marginal_params(1.0).unwrap();
        assert_eq!(sc.data(), &[-0.5 / sigma, 0.0]);
        assert!(matches!(
            score_from_eps(&eps, &[1e-5], &part, &s),
            Err(Error::Domain { .. })
        ));
        let zero = Tensor::zeros(&[1, 2, 1, 1]).unwrap();
        assert!(score_from_eps(&zero, &[0.3], &part, &s)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn parts_validation() {
        let p = MmCsnParams::init(small(), 3, 1).unwrap();
        let mut names = p.names().to_vec();
        names.swap(0, 1);
        assert!(MmCsnParams::from_parts(small(), 3, names, p.tensors().to_vec()).is_err());
        assert!(MmCsnParams::from_parts(small(), 3, p.names().to_vec(), p.tensors().to_vec()).is_ok());
    }
}
