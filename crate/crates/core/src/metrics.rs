//! Image-quality metrics and per-partition evaluation reports.

use std::fmt::Write as _;

use crate::config::SampleConfig;
use crate::error::{Error, Result};
use crate::modality::{Dataset, ModalityPartition, ModalitySet};
use crate::sampler::{generate, ScoreSource};
use crate::tensor::Tensor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn check_pair(x: &Tensor, y: &Tensor, what: &str) -> Result<()> {
    x.ensure_same_shape(y, what)
}

/// Peak signal-to-noise ratio `20·log₁₀(max_i/√MSE)` in dB; `+∞` when the
/// images are identical.
pub fn psnr(x: &Tensor, y: &Tensor, max_i: f64) -> Result<f64> {
    check_pair(x, y, "psnr")?;
    if !(max_i > 0.0) {
        return Err(Error::Contract(format!("psnr needs max_i > 0, got {max_i}")));
    }
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (max_i / mse.sqrt()).log10())
}

/// Mean absolute error.
pub fn mae(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair(x, y, "mae")?;
    Ok(x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filtering over the valid region.
fn filter_valid(img: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| win[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| win[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of two 2-D images (`[H, W]`, or any shape whose
/// last two axes are spatial and leading axes are 1) with an 11×11 Gaussian
/// window of std 1.5 and constants `(0.01L)²`, `(0.03L)²`.
pub fn ssim(x: &Tensor, y: &Tensor, l: f64) -> Result<f64> {
    check_pair(x, y, "ssim")?;
    if !(l > 0.0) {
        return Err(Error::Contract(format!("ssim needs L > 0, got {l}")));
    }
    let nd = x.ndim();
    if nd < 2 || x.shape()[..nd - 2].iter().any(|&d| d != 1) {
        return Err(Error::shape(x.shape(), "ssim expects a single 2-D image"));
    }
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let (a, b) = (x.data(), y.data());
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_x = filter_valid(a, h, w, &win);
    let mu_y = filter_valid(b, h, w, &win);
    let exx = filter_valid(&prod(a, a), h, w, &win);
    let eyy = filter_valid(&prod(b, b), h, w, &win);
    let exy = filter_valid(&prod(a, b), h, w, &win);
    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = exx[i] - mx * mx;
        let vy = eyy[i] - my * my;
        let cxy = exy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

/// Mean and standard deviation (`n − 1` denominator; 0 for one value).
/// Any infinite value makes the mean infinite; the std is then 0 if every
/// value is the same infinity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        if values.iter().any(|v| v.is_infinite()) {
            let all_same = values.iter().all(|&v| v == values[0]);
            return Self {
                mean: values.iter().sum(),
                std: if all_same { 0.0 } else { f64::INFINITY },
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

/// One `(partition, synthesized modality)` row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub partition: String,
    pub modality: String,
    pub psnr: Summary,
    pub ssim: Summary,
    pub mae: Summary,
    pub n: usize,
    /// Set when generation or scoring failed for this row.
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

pub const CSV_HEADER: &str = "partition,modality,psnr_mean,psnr_std,ssim_mean,ssim_std,mae_mean,mae_std,n";

impl MetricsReport {
    /// CSV text: `#` comment lines (each of `comments`, then one per failed
    /// row), the header, then one line per row.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            for line in c.lines() {
                let _ = writeln!(out, "# {line}");
            }
        }
        for r in &self.rows {
            if let Some(f) = &r.failure {
                let _ = writeln!(out, "# FAILED {} {}: {f}", r.partition, r.modality);
            }
        }
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.partition, r.modality, r.psnr.mean, r.psnr.std, r.ssim.mean, r.ssim.std, r.mae.mean, r.mae.std, r.n
            );
        }
        out
    }
}

/// Fills in the `A` channels of a batch of subjects.
pub trait Synthesizer {
    fn modalities(&self) -> &ModalitySet;

    /// `subjects` is `[N, |C|, H, W]`; the result has the same shape.
    fn synthesize(&self, subjects: &Tensor, partition: &ModalityPartition, seed: u64) -> Result<Tensor>;
}

/// Reverse-SDE synthesis from any score source.
pub struct SamplerSynthesizer<'a> {
    pub source: &'a dyn ScoreSource,
    pub config: SampleConfig,
}

impl Synthesizer for SamplerSynthesizer<'_> {
    fn modalities(&self) -> &ModalitySet {
        self.source.modalities()
    }

    fn synthesize(&self, subjects: &Tensor, partition: &ModalityPartition, seed: u64) -> Result<Tensor> {
        generate(self.source, subjects, partition, &self.config, seed)
    }
}

/// Returns the ground truth unchanged: the upper bound of every metric.
pub struct Passthrough(pub ModalitySet);

impl Synthesizer for Passthrough {
    fn modalities(&self) -> &ModalitySet {
        &self.0
    }

    fn synthesize(&self, subjects: &Tensor, _: &ModalityPartition, _: u64) -> Result<Tensor> {
        Ok(subjects.clone())
    }
}

/// Seed for one partition's single draw per subject.
fn partition_seed(seed: u64, partition: &ModalityPartition) -> u64 {
    seed.wrapping_add(partition.bitmask() << 32)
}

/// Synthesizes every `A` modality of every subject for each partition and
/// aggregates PSNR, SSIM and MAE (intensity scale `[0, 1]`) per row.
/// A failure marks the affected rows instead of dropping them.
pub fn eval_report(
    synth: &dyn Synthesizer,
    data: &Dataset,
    partitions: &[ModalityPartition],
    seed: u64,
) -> Result<MetricsReport> {
    if synth.modalities() != &data.modalities {
        return Err(Error::Contract(format!(
            "dataset modalities {:?} differ from the model's {:?}",
            data.modalities.names(),
            synth.modalities().names()
        )));
    }
    let n = data.len();
    let (h, w) = data.spatial();
    let c = data.modalities.len();
    let plane = h * w;
    let mut rows = Vec::new();
    for p in partitions {
        let label = p.label(&data.modalities);
        let result = synth.synthesize(&data.images, p, partition_seed(seed, p));
        for &m in p.synth() {
            let name = data.modalities.names()[m].clone();
            let scored = result.as_ref().map_err(|e| e.to_string()).and_then(|out| {
                let (mut ps, mut ss, mut ms) = (Vec::new(), Vec::new(), Vec::new());
                for s in 0..n {
                    let base = (s * c + m) * plane;
                    let x = Tensor::new(&[h, w], out.data()[base..base + plane].to_vec()).map_err(|e| e.to_string())?;
                    let y = Tensor::new(&[h, w], data.images.data()[base..base + plane].to_vec())
                        .map_err(|e| e.to_string())?;
                    ps.push(psnr(&x, &y, 1.0).map_err(|e| e.to_string())?);
                    ss.push(ssim(&x, &y, 1.0).map_err(|e| e.to_string())?);
                    ms.push(mae(&x, &y).map_err(|e| e.to_string())?);
                }
                Ok((ps, ss, ms))
            });
            rows.push(match scored {
                Ok((ps, ss, ms)) => MetricRow {
                    partition: label.clone(),
                    modality: name,
                    psnr: Summary::of(&ps),
                    ssim: Summary::of(&ss),
                    mae: Summary::of(&ms),
                    n,
                    failure: None,
                },
                Err(e) => {
                    let nan = Summary {
                        mean: f64::NAN,
                        std: f64::NAN,
                    };
                    MetricRow {
                        partition: label.clone(),
                        modality: name,
                        psnr: nan,
                        ssim: nan,
                        mae: nan,
                        n: 0,
                        failure: Some(e),
                    }
                }
            });
        }
    }
    Ok(MetricsReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_constant_error() {
        let x = Tensor::full(&[8, 8], 0.3).unwrap();
        let y = Tensor::full(&[8, 8], 0.4).unwrap();
        assert!((psnr(&x, &y, 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&x, &y, 0.0).is_err());
    }

    #[test]
    fn ssim_identity_and_small_image() {
        let x = Tensor::rand_uniform(&[16, 16], 0.0, 1.0, 1).unwrap();
        assert!((ssim(&x, &x, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let small = Tensor::zeros(&[10, 10]).unwrap();
        assert!(matches!(ssim(&small, &small, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn window_is_normalized() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(w[0], w[10]);
    }

    #[test]
    fn summaries() {
        let s = Summary::of(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        let s = Summary::of(&[f64::INFINITY; 3]);
        assert_eq!((s.mean, s.std), (f64::INFINITY, 0.0));
        assert_eq!(Summary::of(&[4.0]).std, 0.0);
    }

    #[test]
    fn csv_layout() {
        let report = MetricsReport {
            rows: vec![MetricRow {
                partition: "m0|m1".into(),
                modality: "m0".into(),
                psnr: Summary { mean: 20.0, std: 1.0 },
                ssim: Summary { mean: 0.9, std: 0.1 },
                mae: Summary { mean: 0.05, std: 0.01 },
                n: 4,
                failure: None,
            }],
        };
        let csv = report.to_csv(&["note".into()]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# note");
        assert_eq!(lines[1], CSV_HEADER);
        assert_eq!(lines[2], "m0|m1,m0,20,1,0.9,0.1,0.05,0.01,4");
    }
}
