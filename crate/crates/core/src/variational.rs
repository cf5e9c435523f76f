//! Diagonal Gaussian posteriors, the isotropic prior and their KL divergence.

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// `N(mu, diag(sigma²))`. `sigma` is stored directly and is strictly positive
/// whenever a positive floor was applied on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::shape("DiagonalGaussian::new", (mu.len(), 1), (sigma.len(), 1)));
        }
        if let Some(index) = sigma.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::NonFinite {
                index,
                value: sigma[index],
            });
        }
        Ok(DiagonalGaussian { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Log density at `z`.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
        self.mu
            .iter()
            .zip(&self.sigma)
            .zip(z)
            .map(|((m, s), x)| {
                let t = (x - m) / s;
                -0.5 * t * t - s.ln() - HALF_LN_2PI
            })
            .sum()
    }

    pub fn sigma_norm(&self) -> f64 {
        crate::numerics::l2_norm(&self.sigma)
    }
}

/// `N(0, beta² I)` over `n` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsotropicPrior {
    pub beta: f64,
    pub n: usize,
}

impl IsotropicPrior {
    pub fn new(beta: f64, n: usize) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Config(format!("prior scale must be positive, got {beta}")));
        }
        Ok(IsotropicPrior { beta, n })
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
        let b2 = self.beta * self.beta;
        z.iter().map(|x| -0.5 * x * x / b2 - self.beta.ln() - HALF_LN_2PI).sum()
    }
}

/// Closed-form `KL(q ‖ N(0, β² I))`.
pub fn kl_to_isotropic_prior(q: &DiagonalGaussian, prior: &IsotropicPrior) -> Result<f64> {
    if q.dim() != prior.n {
        return Err(Error::shape("kl_to_isotropic_prior", (q.dim(), 1), (prior.n, 1)));
    }
    Ok(kl_terms(&q.mu, &q.sigma, prior.beta))
}

pub(crate) fn kl_terms(mu: &[f64], sigma: &[f64], beta: f64) -> f64 {
    let b2 = beta * beta;
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| (beta / s).ln() + (s * s + m * m) / (2.0 * b2) - 0.5)
        .sum()
}

/// Accumulates `scale · ∂KL/∂mu` and `scale · ∂KL/∂sigma` into the given buffers.
pub(crate) fn kl_grad_accumulate(
    mu: &[f64],
    sigma: &[f64],
    beta: f64,
    scale: f64,
    g_mu: &mut [f64],
    g_sigma: &mut [f64],
) {
    let b2 = beta * beta;
    for j in 0..mu.len() {
        g_mu[j] += scale * mu[j] / b2;
        g_sigma[j] += scale * (sigma[j] / b2 - 1.0 / sigma[j]);
    }
}

/// Monte-Carlo estimate of `KL(q ‖ prior)` from `n_samples` reparameterized draws.
pub fn mc_kl_estimate(
    q: &DiagonalGaussian,
    prior: &IsotropicPrior,
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    if q.dim() != prior.n {
        return Err(Error::shape("mc_kl_estimate", (q.dim(), 1), (prior.n, 1)));
    }
    let n_samples = n_samples.max(1);
    let mut total = 0.0;
    for _ in 0..n_samples {
        let xi = rng.standard_normal(q.dim());
        let z = reparameterize(q, &xi)?;
        total += q.log_density(&z) - prior.log_density(&z);
    }
    Ok(total / n_samples as f64)
}

/// `mu + sigma ⊙ xi`.
pub fn reparameterize(q: &DiagonalGaussian, xi: &[f64]) -> Result<Vec<f64>> {
    if xi.len() != q.dim() {
        return Err(Error::shape("reparameterize", (q.dim(), 1), (xi.len(), 1)));
    }
    Ok(q.mu.iter().zip(&q.sigma).zip(xi).map(|((m, s), e)| m + s * e).collect())
}
