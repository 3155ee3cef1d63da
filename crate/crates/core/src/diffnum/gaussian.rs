use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffnum::tape::LN_2PI;
use crate::error::{Error, Result};

/// Diagonal-Gaussian parameters: a mean vector and a log-variance vector of
/// equal length. The currency of all stochastic heads.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDiag {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianDiag {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::dimension(
                "GaussianDiag::new",
                format!("mean length {} vs log_var length {}", mean.len(), log_var.len()),
            ));
        }
        if log_var.iter().any(|v| !v.is_finite() || v.exp() <= 0.0 || !v.exp().is_finite()) {
            return Err(Error::Numeric { step: 0, detail: "log_var implies invalid variance".into() });
        }
        Ok(GaussianDiag { mean, log_var })
    }

    /// N(0, I) of dimension `d`.
    pub fn standard(d: usize) -> Self {
        GaussianDiag { mean: vec![0.0; d], log_var: vec![0.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// mean + exp(0.5·log_var) ⊙ noise.
    pub fn sample_with_noise(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.mean.len() {
            return Err(Error::dimension(
                "gaussian_sample_reparam",
                format!("noise length {} vs mean length {}", noise.len(), self.mean.len()),
            ));
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.log_var)
            .zip(noise)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let noise: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_with_noise(&noise).expect("noise length matches by construction")
    }

    /// Σ_i log N(x_i; mean_i, exp(log_var_i)).
    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.mean.len() {
            return Err(Error::dimension(
                "gaussian_log_prob",
                format!("x length {} vs mean length {}", x.len(), self.mean.len()),
            ));
        }
        if self.log_var.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { step: 0, detail: "non-finite log_var".into() });
        }
        let mut acc = 0.0;
        for ((xv, m), lv) in x.iter().zip(&self.mean).zip(&self.log_var) {
            let d = xv - m;
            acc += -0.5 * LN_2PI - 0.5 * lv - 0.5 * d * d * (-lv).exp();
        }
        Ok(acc)
    }
}

/// Closed-form KL(q ‖ p) = Σ_i ½[ e^(lq−lp) + (μq−μp)²·e^(−lp) − 1 + lp − lq ].
pub fn gaussian_kl(q: &GaussianDiag, p: &GaussianDiag) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::dimension(
            "gaussian_kl",
            format!("q dim {} vs p dim {}", q.dim(), p.dim()),
        ));
    }
    let mut acc = 0.0;
    for i in 0..q.dim() {
        let dm = q.mean[i] - p.mean[i];
        acc += 0.5
            * ((q.log_var[i] - p.log_var[i]).exp() + dm * dm * (-p.log_var[i]).exp() - 1.0
                + p.log_var[i]
                - q.log_var[i]);
    }
    Ok(acc)
}
