//! Line-based `section.key = value` configuration.
//!
//! Later assignments override earlier ones and unknown keys are errors. The
//! effective configuration can be printed back with [`Config::to_text`] and
//! parsed again to the same value.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::sde::SdeSchedule;

/// Splits `text` into `(key, value, line number)` triples, skipping blank
/// lines and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `section.key = value`, got {raw:?}", i + 1)))?;
        let key = key.trim();
        if key.is_empty() || !key.contains('.') {
            return Err(Error::Config(format!("line {}: key {key:?} lacks a section", i + 1)));
        }
        out.push((key.to_string(), value.trim().to_string(), i + 1));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionSchedule {
    /// A fresh uniform draw every step.
    Uniform,
    /// Round-robin over the enumerated partitions.
    Cycle,
}

impl FromStr for PartitionSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "cycle" => Ok(Self::Cycle),
            _ => Err(Error::Config(format!("train.partition_schedule must be uniform or cycle, got {s:?}"))),
        }
    }
}

impl PartitionSchedule {
    fn as_str(self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Cycle => "cycle",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub partition_schedule: PartitionSchedule,
    /// Weight each sample by `1/σ²`, i.e. the unweighted residual objective.
    pub literal_objective: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 2000,
            lr: 1e-3,
            ema_decay: 0.999,
            seed: 0,
            partition_schedule: PartitionSchedule::Uniform,
            literal_objective: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    pub seed: u64,
    pub final_noise: bool,
    pub draws: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            seed: 0,
            final_noise: true,
            draws: 1,
        }
    }
}

/// Every tunable of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub sde: SdeSchedule,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub allow_unconditional: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            sde: SdeSchedule::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            allow_unconditional: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl Config {
    /// Parses `text` on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (key, value, line) in parse_pairs(text)? {
            self.set(&key, &value)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        self.validate()
    }

    /// Applies one `section.key=value` override. Call [`Config::validate`]
    /// once all overrides are in.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "sde.beta_min" => self.sde.beta_min = parse(key, value)?,
            "sde.beta_max" => self.sde.beta_max = parse(key, value)?,
            "sde.t_min" => self.sde.t_min = parse(key, value)?,
            "net.widths" => self.net.widths = parse_list(key, value)?,
            "net.embed_dim" => self.net.embed_dim = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.steps" => self.train.steps = parse(key, value)?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.ema_decay" => self.train.ema_decay = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.partition_schedule" => self.train.partition_schedule = value.parse()?,
            "train.literal_objective" => self.train.literal_objective = parse(key, value)?,
            "sample.steps" => self.sample.steps = parse(key, value)?,
            "sample.seed" => self.sample.seed = parse(key, value)?,
            "sample.final_noise" => self.sample.final_noise = parse(key, value)?,
            "sample.draws" => self.sample.draws = parse(key, value)?,
            "partitions.allow_unconditional" => self.allow_unconditional = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        SdeSchedule::new(self.sde.beta_min, self.sde.beta_max, self.sde.t_min)?;
        self.net.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.train.lr > 0.0) {
            return Err(Error::Config("train.lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.train.ema_decay) {
            return Err(Error::Config("train.ema_decay must lie in [0, 1)".into()));
        }
        if self.sample.steps == 0 {
            return Err(Error::Config("sample.steps must be >= 1".into()));
        }
        if self.sample.draws == 0 {
            return Err(Error::Config("sample.draws must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let widths: Vec<String> = self.net.widths.iter().map(ToString::to_string).collect();
        let lines = [
            format!("sde.beta_min = {:?}", self.sde.beta_min),
            format!("sde.beta_max = {:?}", self.sde.beta_max),
            format!("sde.t_min = {:?}", self.sde.t_min),
            format!("net.widths = {}", widths.join(",")),
            format!("net.embed_dim = {}", self.net.embed_dim),
            format!("train.batch_size = {}", self.train.batch_size),
            format!("train.steps = {}", self.train.steps),
            format!("train.lr = {:?}", self.train.lr),
            format!("train.ema_decay = {:?}", self.train.ema_decay),
            format!("train.seed = {}", self.train.seed),
            format!("train.partition_schedule = {}", self.train.partition_schedule.as_str()),
            format!("train.literal_objective = {}", self.train.literal_objective),
            format!("sample.steps = {}", self.sample.steps),
            format!("sample.seed = {}", self.sample.seed),
            format!("sample.final_noise = {}", self.sample.final_noise),
            format!("sample.draws = {}", self.sample.draws),
            format!("partitions.allow_unconditional = {}", self.allow_unconditional),
        ];
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}
