//! The complete modality set, its `{A|B}` partitions and paired samples.
//!
//! Channel order is the order of [`ModalitySet::names`] and never changes
//! for the lifetime of a model. In a partition, `A` (synthesized) channels
//! carry mask value 0 and `B` (conditional) channels carry 1.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalitySet {
    names: Vec<String>,
}

impl ModalitySet {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let names: Vec<String> = names.iter().map(|s| s.as_ref().trim().to_string()).collect();
        if names.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 modalities, got {}",
                names.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains(|c: char| c == ',' || c == '|' || c == '+' || c.is_whitespace()) {
                return Err(Error::Config(format!("invalid modality name {n:?}")));
            }
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate modality name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    /// `m0, m1, ...`
    pub fn numbered(count: usize) -> Result<Self> {
        let names: Vec<String> = (0..count).map(|i| format!("m{i}")).collect();
        Self::new(&names)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("unknown modality {name:?}; known: {}", self.names.join(","))))
    }

    /// Partition whose `A` set is the comma-separated `missing` list.
    pub fn partition_from_missing(&self, missing: &str, allow_unconditional: bool) -> Result<ModalityPartition> {
        let mut synth = Vec::new();
        for name in missing.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let i = self.index_of(name)?;
            if !synth.contains(&i) {
                synth.push(i);
            }
        }
        ModalityPartition::new(self.len(), &synth, allow_unconditional)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModalityPartition {
    count: usize,
    synth: Vec<usize>,
    cond: Vec<usize>,
}

impl ModalityPartition {
    /// Partition of `count` modalities with `synth` as the `A` set.
    pub fn new(count: usize, synth: &[usize], allow_unconditional: bool) -> Result<Self> {
        if count < 2 || count > 63 {
            return Err(Error::Config(format!("modality count {count} out of range 2..=63")));
        }
        let mut a: Vec<usize> = synth.to_vec();
        a.sort_unstable();
        a.dedup();
        if a.iter().any(|&i| i >= count) {
            return Err(Error::Contract(format!("synth set {a:?} out of range for {count} modalities")));
        }
        if a.is_empty() {
            return Err(Error::Contract("partition must synthesize at least one modality".into()));
        }
        if a.len() == count && !allow_unconditional {
            return Err(Error::Contract(
                "partition leaves no conditional modality (set partitions.allow_unconditional)".into(),
            ));
        }
        let cond = (0..count).filter(|i| !a.contains(i)).collect();
        Ok(Self {
            count,
            synth: a,
            cond,
        })
    }

    pub fn from_bitmask(count: usize, bits: u64, allow_unconditional: bool) -> Result<Self> {
        let synth: Vec<usize> = (0..count).filter(|i| bits >> i & 1 == 1).collect();
        Self::new(count, &synth, allow_unconditional)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Indices of the modalities to synthesize (`A`), ascending.
    pub fn synth(&self) -> &[usize] {
        &self.synth
    }

    /// Indices of the conditional modalities (`B`), ascending.
    pub fn cond(&self) -> &[usize] {
        &self.cond
    }

    pub fn is_synth(&self, i: usize) -> bool {
        self.synth.binary_search(&i).is_ok()
    }

    /// Bitmask of the `A` set.
    pub fn bitmask(&self) -> u64 {
        self.synth.iter().fold(0, |m, &i| m | 1 << i)
    }

    /// Availability mask: 1 for conditional modalities, 0 for synthesized.
    /// Doubles as the configuration code fed to the network.
    pub fn mask(&self) -> Vec<f64> {
        (0..self.count)
            .map(|i| if self.is_synth(i) { 0.0 } else { 1.0 })
            .collect()
    }

    pub fn code(&self) -> Vec<f64> {
        self.mask()
    }

    /// `"a1+a2|b1+b2"` using modality names.
    pub fn label(&self, set: &ModalitySet) -> String {
        let join = |idx: &[usize]| {
            idx.iter()
                .map(|&i| set.names()[i].as_str())
                .collect::<Vec<_>>()
                .join("+")
        };
        format!("{}|{}", join(&self.synth), join(&self.cond))
    }
}

impl fmt::Display for ModalityPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "A={:?}|B={:?}", self.synth, self.cond)
    }
}

/// Every partition with nonempty `A` and (unless `allow_unconditional`)
/// nonempty `B`, ordered by increasing `A` bitmask.
pub fn enumerate_partitions_with(count: usize, allow_unconditional: bool) -> Result<Vec<ModalityPartition>> {
    if !(2..=20).contains(&count) {
        return Err(Error::Config(format!(
            "cannot enumerate partitions of {count} modalities (need 2..=20)"
        )));
    }
    let full = (1u64 << count) - 1;
    let last = if allow_unconditional { full } else { full - 1 };
    (1..=last)
        .map(|bits| ModalityPartition::from_bitmask(count, bits, allow_unconditional))
        .collect()
}

/// The `2^|C| − 2` conditional partitions.
pub fn enumerate_partitions(count: usize) -> Result<Vec<ModalityPartition>> {
    enumerate_partitions_with(count, false)
}

/// Uniform draw over [`enumerate_partitions_with`].
pub fn sample_partition(count: usize, allow_unconditional: bool, rng: &mut SeededRng) -> Result<ModalityPartition> {
    if !(2..=20).contains(&count) {
        return Err(Error::Config(format!("cannot sample partitions of {count} modalities")));
    }
    let n = (1u64 << count) - if allow_unconditional { 1 } else { 2 };
    let bits = 1 + rng.below(n as usize) as u64;
    ModalityPartition::from_bitmask(count, bits, allow_unconditional)
}

/// One subject: all modality channels stacked as `[|C|, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub subject: usize,
    pub channels: Tensor,
}

impl PairedSample {
    pub fn new(subject: usize, channels: Tensor) -> Result<Self> {
        if channels.ndim() != 3 {
            return Err(Error::shape(channels.shape(), "paired sample must be [|C|, H, W]"));
        }
        Ok(Self { subject, channels })
    }

    pub fn is_normalized(&self) -> bool {
        self.channels.data().iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Network input `[2|C|, H, W]` for one sample: `B` channels copied from
/// `sample`, `A` channels from `a_t` (in ascending `A` order), followed by
/// one constant mask plane per modality.
pub fn apply_mask(sample: &PairedSample, partition: &ModalityPartition, a_t: &Tensor) -> Result<Tensor> {
    let ch = &sample.channels;
    let (c, h, w) = (ch.dim(0), ch.dim(1), ch.dim(2));
    if c != partition.count() {
        return Err(Error::Contract(format!(
            "sample has {c} channels, partition covers {}",
            partition.count()
        )));
    }
    if a_t.shape() != [partition.synth().len(), h, w] {
        return Err(Error::Contract(format!(
            "a_t shape {:?} does not cover the synthesized channels {:?} at {h}x{w}",
            a_t.shape(),
            partition.synth()
        )));
    }
    let mut state = ch.clone();
    let plane = h * w;
    for (k, &i) in partition.synth().iter().enumerate() {
        state.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(&a_t.data()[k * plane..(k + 1) * plane]);
    }
    let state = state.reshape(&[1, c, h, w])?;
    let out = masked_input(&state, partition)?;
    out.reshape(&[2 * c, h, w])
}

/// Batched form of [`apply_mask`]: `state` already holds `a_t` on the `A`
/// channels and `b` on the `B` channels; mask planes are appended.
pub fn masked_input(state: &Tensor, partition: &ModalityPartition) -> Result<Tensor> {
    let (n, c, h, w) = match *state.shape() {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::shape(state.shape(), "state must be [N, |C|, H, W]")),
    };
    if c != partition.count() {
        return Err(Error::Contract(format!(
            "state has {c} channels, partition covers {}",
            partition.count()
        )));
    }
    let plane = h * w;
    let mask = partition.mask();
    let mut out = Vec::with_capacity(2 * state.len());
    for s in 0..n {
        out.extend_from_slice(&state.data()[s * c * plane..(s + 1) * c * plane]);
        for &m in &mask {
            out.extend(std::iter::repeat(m).take(plane));
        }
    }
    Tensor::new(&[n, 2 * c, h, w], out)
}

/// Per-volume min–max normalization to `[0, 1]`. A constant volume maps to 0.
pub fn normalize_min_max(volume: &Tensor) -> Tensor {
    let lo = volume.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = volume.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = volume
        .data()
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    Tensor::new(volume.shape(), data).expect("shape unchanged")
}

/// A set of subjects `[N, |C|, H, W]` with named channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub modalities: ModalitySet,
    pub images: Tensor,
}

impl Dataset {
    pub fn new(modalities: ModalitySet, images: Tensor) -> Result<Self> {
        match *images.shape() {
            [_, c, _, _] if c == modalities.len() => Ok(Self { modalities, images }),
            _ => Err(Error::Contract(format!(
                "dataset shape {:?} does not match {} modalities",
                images.shape(),
                modalities.len()
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.images.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(H, W)` of every channel.
    pub fn spatial(&self) -> (usize, usize) {
        (self.images.dim(2), self.images.dim(3))
    }

    pub fn sample(&self, i: usize) -> Result<PairedSample> {
        PairedSample::new(i, self.images.index_first(i)?)
    }

    /// Subjects `indices` stacked as `[len, |C|, H, W]`.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let per: usize = self.images.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(format!("subject {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Tensor::new(&shape, data)
    }
}
