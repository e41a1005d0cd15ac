//! Laplace-mechanism perturbation of shared parameter vectors.
//!
//! A vector is first clipped to L1 norm `s`, the sensitivity, and each
//! coordinate then receives independent `Laplace(0, s / ε)` noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{self, SimRng};

/// Slack allowed on the clip bound when checking perturbation inputs.
pub const CLIP_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub epsilon: f64,
    pub sensitivity_s: f64,
    pub seed: u64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.3,
            sensitivity_s: 1.0,
            seed: 0,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            invalid!("privacy budget must be positive, got {}", self.epsilon);
        }
        if !(self.sensitivity_s > 0.0) {
            invalid!("sensitivity must be positive, got {}", self.sensitivity_s);
        }
        Ok(())
    }

    /// Laplace scale `b = s / ε`.
    pub fn scale(&self) -> f64 {
        self.sensitivity_s / self.epsilon
    }
}

pub fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Scale `params` down to L1 norm `s` if it exceeds it.
pub fn clip_l1(params: &[f64], s: f64) -> Vec<f64> {
    let norm = l1_norm(params);
    if norm <= s {
        return params.to_vec();
    }
    let k = s / norm;
    params.iter().map(|x| x * k).collect()
}

/// Inverse CDF of the zero-mean Laplace distribution with scale `b`.
pub fn inverse_cdf_laplace(u: f64, b: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        invalid!("Laplace inverse CDF needs u in (0, 1), got {u}");
    }
    let c = u - 0.5;
    if c == 0.0 {
        return Ok(0.0);
    }
    Ok(-b * c.signum() * (1.0 - 2.0 * c.abs()).ln())
}

/// Analytic CDF, for tests and diagnostics.
pub fn laplace_cdf(x: f64, b: f64) -> f64 {
    if x < 0.0 {
        0.5 * (x / b).exp()
    } else {
        1.0 - 0.5 * (-x / b).exp()
    }
}

pub fn sample_laplace(rng: &mut SimRng, b: f64) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            // u in (0, 1); the inverse CDF cannot fail here.
            return inverse_cdf_laplace(u, b).unwrap_or(0.0);
        }
    }
}

/// Add independent `Laplace(0, s/ε)` noise to every coordinate of an
/// already-clipped vector.
pub fn laplace_perturb(params: &[f64], cfg: &DpConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let norm = l1_norm(params);
    if norm > cfg.sensitivity_s + CLIP_SLACK {
        invalid!(
            "vector with L1 norm {norm} exceeds sensitivity {}; clip before perturbing",
            cfg.sensitivity_s
        );
    }
    let b = cfg.scale();
    let mut rng = rng::substream(cfg.seed, "laplace", &[]);
    Ok(params.iter().map(|x| x + sample_laplace(&mut rng, b)).collect())
}

/// Clip then perturb; the usual outbound path.
pub fn privatize(params: &[f64], cfg: &DpConfig) -> Result<Vec<f64>> {
    laplace_perturb(&clip_l1(params, cfg.sensitivity_s), cfg)
}
