//! Verification worlds with known ground truth.
//!
//! [`GaussianWorld`] is a jointly Gaussian population over the concatenated
//! modality vector; all of its conditionals and noisy conditional scores are
//! available in closed form. [`ShapeWorld`] renders small multi-modal
//! phantoms sharing one elliptical anatomy, with an optional lesion whose
//! contrast in modality 0 is a coin flip that no other modality reveals.

use nalgebra::{DMatrix, DVector};

use crate::config::parse_pairs;
use crate::error::{Error, Result};
use crate::modality::{Dataset, ModalityPartition, ModalitySet};
use crate::rng::SeededRng;
use crate::sde::SdeSchedule;
use crate::tensor::Tensor;

const MIN_EIGENVALUE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianWorld {
    modalities: ModalitySet,
    dim: usize,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
}

/// `p(a | b)` for one partition: `μ_{a|b} = μ_A + gain·(b − μ_B)` and a
/// fixed covariance `Σ_{a|b}`.
#[derive(Clone, Debug)]
pub struct ConditionalGaussian {
    a_idx: Vec<usize>,
    b_idx: Vec<usize>,
    mu_a: DVector<f64>,
    mu_b: DVector<f64>,
    gain: DMatrix<f64>,
    cov: DMatrix<f64>,
}

impl ConditionalGaussian {
    pub fn mean(&self, b: &DVector<f64>) -> DVector<f64> {
        if self.b_idx.is_empty() {
            return self.mu_a.clone();
        }
        &self.mu_a + &self.gain * (b - &self.mu_b)
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Inverse of `α²Σ_{a|b} + σ²I`, the precision of `a_t | b`.
    fn noisy_precision(&self, alpha: f64, sigma: f64) -> Result<DMatrix<f64>> {
        let n = self.cov.nrows();
        let m = &self.cov * (alpha * alpha) + DMatrix::identity(n, n) * (sigma * sigma);
        m.cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Numerical("noisy conditional covariance is not positive definite".into()))
    }
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let ev = m.clone().symmetric_eigen().eigenvalues;
    let max = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = ev.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

impl GaussianWorld {
    /// `mean` and row-major `cov` over the concatenated vector of `dim`
    /// values per modality.
    pub fn new(modalities: ModalitySet, dim: usize, mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let n = modalities.len() * dim;
        if dim == 0 || mean.len() != n || cov.len() != n * n {
            return Err(Error::Config(format!(
                "gaussian world with {} modalities x {dim} needs {n} means and {} covariance entries, got {} and {}",
                modalities.len(),
                n * n,
                mean.len(),
                cov.len()
            )));
        }
        let cov = DMatrix::from_row_slice(n, n, &cov);
        for i in 0..n {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 {
                    return Err(Error::Numerical(format!("covariance is not symmetric at ({i}, {j})")));
                }
            }
        }
        let min_ev = cov
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if !(min_ev > MIN_EIGENVALUE) {
            return Err(Error::Numerical(format!(
                "covariance smallest eigenvalue {min_ev:e} is not above {MIN_EIGENVALUE:e}"
            )));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("covariance has no Cholesky factor".into()))?
            .l();
        Ok(Self {
            modalities,
            dim,
            mean: DVector::from_vec(mean),
            cov,
            chol,
        })
    }

    /// Three scalar modalities, zero mean, unit variances and pairwise
    /// correlations 0.8 (m0,m1), 0.5 (m0,m2), 0.3 (m1,m2).
    pub fn correlated3() -> Self {
        Self::new(
            ModalitySet::numbered(3).expect("names"),
            1,
            vec![0.0; 3],
            vec![1.0, 0.8, 0.5, 0.8, 1.0, 0.3, 0.5, 0.3, 1.0],
        )
        .expect("default world is valid")
    }

    /// Two scalar modalities with unit variances and correlation `rho`.
    pub fn bivariate(rho: f64) -> Result<Self> {
        Self::new(
            ModalitySet::numbered(2)?,
            1,
            vec![0.0; 2],
            vec![1.0, rho, rho, 1.0],
        )
    }

    pub fn modalities(&self) -> &ModalitySet {
        &self.modalities
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    fn indices(&self, modalities: &[usize]) -> Vec<usize> {
        modalities
            .iter()
            .flat_map(|&m| (m * self.dim)..((m + 1) * self.dim))
            .collect()
    }

    fn check_partition(&self, partition: &ModalityPartition) -> Result<()> {
        if partition.count() != self.modalities.len() {
            return Err(Error::Contract(format!(
                "partition over {} modalities used with a {}-modality world",
                partition.count(),
                self.modalities.len()
            )));
        }
        Ok(())
    }

    /// Closed-form conditional of the `A` block given the `B` block.
    pub fn conditional(&self, partition: &ModalityPartition) -> Result<ConditionalGaussian> {
        self.check_partition(partition)?;
        let a_idx = self.indices(partition.synth());
        let b_idx = self.indices(partition.cond());
        let sub = |r: &[usize], c: &[usize]| DMatrix::from_fn(r.len(), c.len(), |i, j| self.cov[(r[i], c[j])]);
        let pick = |idx: &[usize]| DVector::from_fn(idx.len(), |i, _| self.mean[idx[i]]);
        let s_aa = sub(&a_idx, &a_idx);
        let (gain, cov) = if b_idx.is_empty() {
            (DMatrix::zeros(a_idx.len(), 0), s_aa)
        } else {
            let s_ab = sub(&a_idx, &b_idx);
            let s_bb = sub(&b_idx, &b_idx);
            let cond = condition_number(&s_bb);
            if !(cond < 1e12) {
                return Err(Error::Numerical(format!(
                    "conditioning block is singular (condition number {cond:e})"
                )));
            }
            let chol = s_bb.cholesky().ok_or_else(|| {
                Error::Numerical(format!("conditioning block not positive definite (condition number {cond:e})"))
            })?;
            // gain = Σ_AB Σ_BB⁻¹, solved as Σ_BB gainᵀ = Σ_BA.
            let gain = chol.solve(&s_ab.transpose()).transpose();
            let cov = &s_aa - &gain * s_ab.transpose();
            (gain, cov)
        };
        Ok(ConditionalGaussian {
            mu_a: pick(&a_idx),
            mu_b: pick(&b_idx),
            a_idx,
            b_idx,
            gain,
            cov,
        })
    }

    /// `(μ_{a|b}, Σ_{a|b})` for conditional values `b_values` (concatenated
    /// over the `B` modalities in ascending order).
    pub fn conditional_moments(
        &self,
        b_values: &[f64],
        partition: &ModalityPartition,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let c = self.conditional(partition)?;
        if b_values.len() != c.b_idx.len() {
            return Err(Error::Contract(format!(
                "{} conditional values for {} conditional entries",
                b_values.len(),
                c.b_idx.len()
            )));
        }
        let b = DVector::from_column_slice(b_values);
        Ok((c.mean(&b), c.cov.clone()))
    }

    /// `∇ log p_t(a_t | b) = −(α²Σ_{a|b} + σ²I)⁻¹ (a_t − α μ_{a|b})`.
    pub fn analytic_conditional_score(
        &self,
        a_t: &[f64],
        b_values: &[f64],
        t: f64,
        partition: &ModalityPartition,
        schedule: &SdeSchedule,
    ) -> Result<Vec<f64>> {
        schedule.check_score_time(t)?;
        let c = self.conditional(partition)?;
        if a_t.len() != c.a_idx.len() || b_values.len() != c.b_idx.len() {
            return Err(Error::Contract("a_t / b lengths do not match the partition".into()));
        }
        let (alpha, sigma) = schedule.marginal_params(t)?;
        let prec = c.noisy_precision(alpha, sigma)?;
        let mu = c.mean(&DVector::from_column_slice(b_values));
        let r = DVector::from_column_slice(a_t) - mu * alpha;
        Ok((-(prec * r)).iter().copied().collect())
    }

    /// Score for a whole state batch `[N, |C|, H, W]` (`H·W = dim`), zero on
    /// the `B` channels.
    pub fn score_state(
        &self,
        state: &Tensor,
        t: f64,
        partition: &ModalityPartition,
        schedule: &SdeSchedule,
    ) -> Result<Tensor> {
        schedule.check_score_time(t)?;
        let (n, per) = self.check_state(state)?;
        let c = self.conditional(partition)?;
        let (alpha, sigma) = schedule.marginal_params(t)?;
        let prec = c.noisy_precision(alpha, sigma)?;
        let mut out = vec![0.0; state.len()];
        let mut a = DVector::zeros(c.a_idx.len());
        let mut b = DVector::zeros(c.b_idx.len());
        for s in 0..n {
            let row = &state.data()[s * per..(s + 1) * per];
            for (k, &i) in c.a_idx.iter().enumerate() {
                a[k] = row[i];
            }
            for (k, &i) in c.b_idx.iter().enumerate() {
                b[k] = row[i];
            }
            let r = &a - c.mean(&b) * alpha;
            let sc = -(&prec * r);
            for (k, &i) in c.a_idx.iter().enumerate() {
                out[s * per + i] = sc[k];
            }
        }
        Tensor::new(state.shape(), out)
    }

    fn check_state(&self, state: &Tensor) -> Result<(usize, usize)> {
        match *state.shape() {
            [n, c, h, w] if c == self.modalities.len() && h * w == self.dim => Ok((n, c * h * w)),
            _ => Err(Error::shape(
                state.shape(),
                format!("expected [N, {}, H, W] with H*W = {}", self.modalities.len(), self.dim),
            )),
        }
    }

    /// `n` i.i.d. draws `μ + L z` as a dataset `[n, |C|, 1, dim]`.
    pub fn sample_joint(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::Contract("sample_joint needs n >= 1".into()));
        }
        let d = self.mean.len();
        let mut rng = SeededRng::new(seed);
        let mut data = Vec::with_capacity(n * d);
        let mut z = DVector::zeros(d);
        for _ in 0..n {
            for v in z.iter_mut() {
                *v = rng.normal();
            }
            let x = &self.mean + &self.chol * &z;
            data.extend(x.iter());
        }
        let images = Tensor::new(&[n, self.modalities.len(), 1, self.dim], data)?;
        Dataset::new(self.modalities.clone(), images)
    }

    /// Text form readable by [`GaussianWorld::from_text`].
    pub fn to_text(&self) -> String {
        let join = |v: &mut dyn Iterator<Item = f64>| v.map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let n = self.mean.len();
        format!(
            "# jointly gaussian world\nworld.names = {}\nworld.dim = {}\nworld.mean = {}\nworld.cov = {}\n",
            self.modalities.names().join(","),
            self.dim,
            join(&mut self.mean.iter().copied()),
            join(&mut (0..n * n).map(|k| self.cov[(k / n, k % n)])),
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut names = None;
        let mut dim = 1usize;
        let mut mean = None;
        let mut cov = None;
        let floats = |v: &str| -> Result<Vec<f64>> {
            v.split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad number {s:?} in world file")))
                })
                .collect()
        };
        for (key, value, line) in parse_pairs(text)? {
            match key.as_str() {
                "world.names" => names = Some(value.split(',').map(|s| s.trim().to_string()).collect::<Vec<_>>()),
                "world.dim" => {
                    dim = value
                        .parse()
                        .map_err(|_| Error::Config(format!("line {line}: bad world.dim {value:?}")))?
                }
                "world.mean" => mean = Some(floats(&value)?),
                "world.cov" => cov = Some(floats(&value)?),
                other => return Err(Error::Config(format!("line {line}: unknown world key {other:?}"))),
            }
        }
        let names = names.ok_or_else(|| Error::Config("world file lacks world.names".into()))?;
        let modalities = ModalitySet::new(&names)?;
        let mean = mean.unwrap_or_else(|| vec![0.0; names.len() * dim]);
        let cov = cov.ok_or_else(|| Error::Config("world file lacks world.cov".into()))?;
        Self::new(modalities, dim, mean, cov)
    }
}

/// Lesion disc of one phantom subject.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lesion {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    /// Sign of the lesion contrast in modality 0.
    pub sign: f64,
}

/// Latent anatomy of one phantom subject.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeSubject {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub theta: f64,
    pub lesion: Option<Lesion>,
}

impl ShapeSubject {
    /// Normalized elliptical radius `q` (`q < 1` inside the anatomy).
    fn radius_at(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }

    pub fn inside(&self, x: usize, y: usize) -> bool {
        self.radius_at(x as f64 + 0.5, y as f64 + 0.5) < 1.0
    }

    pub fn in_lesion(&self, x: usize, y: usize) -> bool {
        match self.lesion {
            Some(l) if self.inside(x, y) => {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                (px - l.cx).powi(2) + (py - l.cy).powi(2) < l.radius * l.radius
            }
            _ => false,
        }
    }
}

/// Synthetic multi-modal phantoms at a fixed image size.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeWorld {
    pub size: usize,
    pub modalities: ModalitySet,
    pub noise: f64,
    pub lesion_prob: f64,
}

impl Default for ShapeWorld {
    fn default() -> Self {
        Self {
            size: 32,
            modalities: ModalitySet::numbered(3).expect("names"),
            noise: 0.01,
            lesion_prob: 0.5,
        }
    }
}

/// Lesion offsets per modality; modality 0 is multiplied by the subject's sign.
const LESION_SHIFT: [f64; 3] = [0.25, 0.2, -0.2];

impl ShapeWorld {
    pub fn new(size: usize, count: usize) -> Result<Self> {
        if size < 8 {
            return Err(Error::Config(format!("shape world size {size} is below 8")));
        }
        Ok(Self {
            size,
            modalities: ModalitySet::numbered(count)?,
            ..Self::default()
        })
    }

    /// Monotone contrast map of modality `k` applied to the interior latent
    /// `u ∈ (0, 1]` (1 at the centre of the anatomy).
    fn contrast(k: usize, u: f64) -> f64 {
        match k % 3 {
            0 => 0.35 + 0.35 * u,
            1 => 0.75 - 0.35 * u,
            _ => 0.4 + 0.45 * u * u,
        }
    }

    fn lesion_shift(k: usize, sign: f64) -> f64 {
        match k {
            0 => sign * LESION_SHIFT[0],
            k => LESION_SHIFT[1 + (k - 1) % 2],
        }
    }

    pub fn draw_subject(&self, rng: &mut SeededRng) -> ShapeSubject {
        let s = self.size as f64;
        let mut subj = ShapeSubject {
            cx: rng.uniform_range(0.375 * s, 0.625 * s),
            cy: rng.uniform_range(0.375 * s, 0.625 * s),
            rx: rng.uniform_range(0.25 * s, 0.375 * s),
            ry: rng.uniform_range(0.25 * s, 0.375 * s),
            theta: rng.uniform_range(0.0, std::f64::consts::PI),
            lesion: None,
        };
        if rng.uniform() < self.lesion_prob {
            let q = 0.5 * rng.uniform().sqrt();
            let phi = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
            let (u, v) = (q * subj.rx * phi.cos(), q * subj.ry * phi.sin());
            let (sn, cs) = subj.theta.sin_cos();
            let radius = rng.uniform_range(0.08 * s, 0.125 * s);
            let sign = if rng.coin() { 1.0 } else { -1.0 };
            subj.lesion = Some(Lesion {
                cx: subj.cx + cs * u - sn * v,
                cy: subj.cy + sn * u + cs * v,
                radius,
                sign,
            });
        }
        subj
    }

    /// Noise-free channels `[|C|, size, size]`; the lesion is drawn only if
    /// `with_lesion`.
    pub fn render(&self, subj: &ShapeSubject, with_lesion: bool) -> Tensor {
        let n = self.size;
        let c = self.modalities.len();
        let mut data = vec![0.0; c * n * n];
        for y in 0..n {
            for x in 0..n {
                if !subj.inside(x, y) {
                    continue;
                }
                let q = subj.radius_at(x as f64 + 0.5, y as f64 + 0.5);
                let u = 1.0 - q * q;
                let lesion = with_lesion && subj.in_lesion(x, y);
                for k in 0..c {
                    let mut v = Self::contrast(k, u);
                    if lesion {
                        v += Self::lesion_shift(k, subj.lesion.map_or(1.0, |l| l.sign));
                    }
                    data[(k * n + y) * n + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        Tensor::new(&[c, n, n], data).expect("render shape")
    }

    /// `n` subjects with per-subject seeds derived from `seed`; acquisition
    /// noise is added and intensities clamped to `[0, 1]`.
    pub fn make_dataset(&self, n: usize, seed: u64) -> Result<(Dataset, Vec<ShapeSubject>)> {
        if n == 0 {
            return Err(Error::Contract("make_shape_dataset needs n >= 1".into()));
        }
        let mut items = Vec::with_capacity(n);
        let mut subjects = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = SeededRng::with_stream(seed, i as u64);
            let subj = self.draw_subject(&mut rng);
            let mut img = self.render(&subj, true);
            for v in img.data_mut() {
                *v = (*v + self.noise * rng.normal()).clamp(0.0, 1.0);
            }
            items.push(img);
            subjects.push(subj);
        }
        Ok((Dataset::new(self.modalities.clone(), Tensor::stack(&items)?)?, subjects))
    }

    /// Local contrast of the lesion in `channel` (one `[size, size]` image
    /// of modality 0): mean over the disc minus mean over the surrounding
    /// ring of anatomy out to twice the lesion radius, less the same
    /// difference on the lesion-free rendering. Positive means a bright
    /// lesion. Measuring against the ring makes the value insensitive to a
    /// global intensity offset. `None` if the subject has no lesion.
    pub fn lesion_contrast(&self, subj: &ShapeSubject, channel: &[f64]) -> Option<f64> {
        let lesion = subj.lesion?;
        let n = self.size;
        let clean = self.render(subj, false);
        let (mut disc, mut ring) = ((0.0, 0usize), (0.0, 0usize));
        for y in 0..n {
            for x in 0..n {
                let i = y * n + x;
                let diff = channel[i] - clean.data()[i];
                if subj.in_lesion(x, y) {
                    disc = (disc.0 + diff, disc.1 + 1);
                } else if subj.inside(x, y) {
                    let (px, py) = (x as f64 + 0.5 - lesion.cx, y as f64 + 0.5 - lesion.cy);
                    if px * px + py * py < 4.0 * lesion.radius * lesion.radius {
                        ring = (ring.0 + diff, ring.1 + 1);
                    }
                }
            }
        }
        (disc.1 > 0 && ring.1 > 0).then(|| disc.0 / disc.1 as f64 - ring.0 / ring.1 as f64)
    }
}
