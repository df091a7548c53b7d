//! Variance-preserving forward diffusion with a linear noise rate.
//!
//! `dx = f(t) x dt + g(t) dw` with `β(t) = β_min + t (β_max − β_min)`,
//! `f = −β/2`, `g = √β`. The transition kernel from time 0 is
//! `N(α(t) x₀, σ(t)² I)` with `α = exp(−½∫₀ᵗβ)` and `σ² = 1 − α²`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdeSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Smallest time used for training and score evaluation.
    pub t_min: f64,
}

impl Default for SdeSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            t_min: 1e-3,
        }
    }
}

impl SdeSchedule {
    pub fn new(beta_min: f64, beta_max: f64, t_min: f64) -> Result<Self> {
        if !(beta_min > 0.0) {
            return Err(Error::Config(format!("sde.beta_min must be > 0, got {beta_min}")));
        }
        if !(beta_max > beta_min) {
            return Err(Error::Config(format!(
                "sde.beta_max ({beta_max}) must exceed sde.beta_min ({beta_min})"
            )));
        }
        if !(t_min > 0.0 && t_min < 1.0) {
            return Err(Error::Config(format!("sde.t_min must lie in (0, 1), got {t_min}")));
        }
        Ok(Self {
            beta_min,
            beta_max,
            t_min,
        })
    }

    fn check_unit(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain { t, lo: 0.0, hi: 1.0 })
        }
    }

    pub(crate) fn check_score_time(&self, t: f64) -> Result<()> {
        if t >= self.t_min && t <= 1.0 {
            Ok(())
        } else {
            Err(Error::Domain {
                t,
                lo: self.t_min,
                hi: 1.0,
            })
        }
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        Self::check_unit(t)?;
        Ok(self.beta_min + t * (self.beta_max - self.beta_min))
    }

    /// `f(t) = −β(t)/2`.
    pub fn drift_coeff(&self, t: f64) -> Result<f64> {
        Ok(-0.5 * self.beta(t)?)
    }

    /// `g(t) = √β(t)`.
    pub fn diffusion_coeff(&self, t: f64) -> Result<f64> {
        Ok(self.beta(t)?.sqrt())
    }

    fn log_alpha(&self, t: f64) -> f64 {
        -0.25 * t * t * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min
    }

    /// `(α(t), σ(t))` of the perturbation kernel.
    pub fn marginal_params(&self, t: f64) -> Result<(f64, f64)> {
        Self::check_unit(t)?;
        let la = self.log_alpha(t);
        // σ² = 1 − α² evaluated without cancellation near t = 0.
        let sigma2 = -(2.0 * la).exp_m1();
        Ok((la.exp(), sigma2.sqrt()))
    }

    /// `a_t = α(t)·a₀ + σ(t)·ε`.
    pub fn perturb(&self, a0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
        a0.ensure_same_shape(eps, "perturb")?;
        let (alpha, sigma) = self.marginal_params(t)?;
        let data = a0
            .data()
            .iter()
            .zip(eps.data())
            .map(|(a, e)| alpha * a + sigma * e)
            .collect();
        Tensor::new(a0.shape(), data)
    }

    /// Score of the perturbation kernel, `−(a_t − α a₀)/σ²`.
    pub fn analytic_score_target(&self, a_t: &Tensor, a0: &Tensor, t: f64) -> Result<Tensor> {
        self.check_score_time(t)?;
        a_t.ensure_same_shape(a0, "analytic_score_target")?;
        let (alpha, sigma) = self.marginal_params(t)?;
        let s2 = sigma * sigma;
        let data = a_t
            .data()
            .iter()
            .zip(a0.data())
            .map(|(x, a)| -(x - alpha * a) / s2)
            .collect();
        Tensor::new(a_t.shape(), data)
    }

    /// A draw from the prior `N(0, I)`.
    pub fn prior_sample(&self, shape: &[usize], seed: u64) -> Result<Tensor> {
        Tensor::randn(shape, seed)
    }
}
