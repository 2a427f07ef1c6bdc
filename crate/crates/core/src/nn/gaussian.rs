//! Diagonal Gaussians: densities, KL to the standard normal, sampling.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tape::Var;
use super::{NnError, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDist {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl GaussianDist {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(NnError::ShapeMismatch {
                op: "gaussian",
                left: (1, mean.len()),
                right: (1, log_std.len()),
            });
        }
        if mean.iter().chain(&log_std).any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("gaussian parameters"));
        }
        Ok(Self { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(NnError::ShapeMismatch {
                op: "gaussian_log_density",
                left: (1, x.len()),
                right: (1, self.dim()),
            });
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(x)
            .map(|((m, ls), xi)| {
                let z = (xi - m) * (-ls).exp();
                -0.5 * z * z - ls - 0.5 * LN_2PI
            })
            .sum())
    }

    /// `KL(q || N(0, I)) = 1/2 Σ (σ² + μ² − 1 − ln σ²)`.
    pub fn kl_to_standard_normal(&self) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| 0.5 * ((2.0 * ls).exp() + m * m - 1.0 - 2.0 * ls))
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| {
                let eta: f64 = rng.sample(StandardNormal);
                m + ls.exp() * eta
            })
            .collect()
    }
}

/// Per-row diagonal Gaussian log density, `N x d -> N x 1`.
pub fn traced_log_density<'t>(mean: Var<'t>, log_std: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
    let d = mean.shape().1 as f64;
    let z = x.sub(mean)?.mul(log_std.neg().exp())?;
    Ok(z.square()
        .scale(-0.5)
        .sub(log_std)?
        .sum_cols()
        .add_scalar(-0.5 * LN_2PI * d))
}

/// Per-row `KL(N(mean, exp(log_std)²) || N(0, I))`, `N x d -> N x 1`.
pub fn traced_kl_standard_normal<'t>(mean: Var<'t>, log_std: Var<'t>) -> Result<Var<'t>> {
    let var = log_std.scale(2.0).exp();
    Ok(var
        .add(mean.square())?
        .sub(log_std.scale(2.0))?
        .add_scalar(-1.0)
        .sum_cols()
        .scale(0.5))
}

/// Per-row entropy of a diagonal Gaussian, `N x d -> N x 1`.
pub fn traced_entropy(log_std: Var<'_>) -> Var<'_> {
    let d = log_std.shape().1 as f64;
    log_std.sum_cols().add_scalar(0.5 * d * (1.0 + LN_2PI))
}
