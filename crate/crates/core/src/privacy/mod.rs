//! Client-side update transforms (Gaussian local noise, random pruning) and
//! the gradient-leakage attack used to evaluate them.

pub mod dlg;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, ParamVector};

pub use dlg::{dlg_reconstruct, DlgConfig, Reconstruction};

/// Reconstruction error above which an instance counts as defended.
pub const DEFENDED_MSE: f64 = 1.49;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// Zero a random `round(gamma * d)` subset of coordinates.
    #[default]
    Mask,
    /// Multiply every coordinate by `1 - gamma` (ablation only).
    Scale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    #[serde(default = "PrivacyConfig::default_noise_variance")]
    pub noise_variance: f64,
    #[serde(default = "PrivacyConfig::default_prune_rate")]
    pub prune_rate: f64,
    #[serde(default)]
    pub prune_mode: PruneMode,
}

impl PrivacyConfig {
    fn default_noise_variance() -> f64 {
        1e-2
    }

    fn default_prune_rate() -> f64 {
        0.9
    }

    pub fn disabled() -> Self {
        Self {
            noise_variance: 0.0,
            prune_rate: 0.0,
            prune_mode: PruneMode::Mask,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::Config("noise_variance must be a non-negative number".into()));
        }
        if !(0.0..1.0).contains(&self.prune_rate) {
            return Err(Error::Config("prune_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn is_disabled(&self) -> bool {
        self.noise_variance == 0.0 && self.prune_rate == 0.0
    }
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            noise_variance: Self::default_noise_variance(),
            prune_rate: Self::default_prune_rate(),
            prune_mode: PruneMode::Mask,
        }
    }
}

/// Add i.i.d. `N(0, noise_variance)` noise to every coordinate.
pub fn add_gaussian_ldp<R: Rng + ?Sized>(
    update: &ParamVector,
    noise_variance: f64,
    rng: &mut R,
) -> Result<ParamVector> {
    if !(noise_variance >= 0.0) || !noise_variance.is_finite() {
        return Err(Error::Domain(format!("noise variance {noise_variance} is invalid")));
    }
    if noise_variance == 0.0 {
        return Ok(update.clone());
    }
    let normal = Normal::new(0.0, noise_variance.sqrt()).expect("finite positive std");
    Ok(ParamVector::new(
        update.iter().map(|v| v + normal.sample(rng)).collect(),
    ))
}

/// Number of coordinates zeroed by [`prune`] at rate `gamma`.
pub fn pruned_count(dim: usize, gamma: f64) -> usize {
    ((gamma * dim as f64).round() as usize).min(dim)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Domain(format!("prune rate {gamma} outside [0, 1)")));
    }
    Ok(())
}

/// Zero exactly `round(gamma * d)` coordinates chosen uniformly without
/// replacement.
pub fn prune<R: Rng + ?Sized>(update: &ParamVector, gamma: f64, rng: &mut R) -> Result<ParamVector> {
    check_gamma(gamma)?;
    let mut out = update.clone();
    let k = pruned_count(update.dim(), gamma);
    for i in rand::seq::index::sample(rng, update.dim(), k) {
        out[i] = 0.0;
    }
    Ok(out)
}

/// `(1 - gamma) * update`, the scalar-shrink reading of pruning.
pub fn prune_scaled(update: &ParamVector, gamma: f64) -> Result<ParamVector> {
    check_gamma(gamma)?;
    Ok(update.scale(1.0 - gamma))
}

/// Noise first, then prune, as a client does before uploading.
pub fn privatize<R: Rng + ?Sized>(
    update: &ParamVector,
    config: &PrivacyConfig,
    rng: &mut R,
) -> Result<ParamVector> {
    let noisy = add_gaussian_ldp(update, config.noise_variance, rng)?;
    match config.prune_mode {
        PruneMode::Mask => prune(&noisy, config.prune_rate, rng),
        PruneMode::Scale => prune_scaled(&noisy, config.prune_rate),
    }
}

/// Gradient recovered from two consecutive SGD iterates:
/// `(theta_prev - theta_next) / eta`.
pub fn leak_gradient(theta_prev: &ParamVector, theta_next: &ParamVector, eta: f64) -> Result<ParamVector> {
    if eta == 0.0 || !eta.is_finite() {
        return Err(Error::Domain("learning rate must be non-zero".into()));
    }
    theta_next.check_dim(theta_prev.dim())?;
    Ok(theta_prev.sub(theta_next).scale(1.0 / eta))
}

/// Mean squared difference over all feature entries.
pub fn reconstruction_mse(raw: &Batch, reconstructed: &Batch) -> Result<f64> {
    if raw.len() != reconstructed.len() || raw.input_dim() != reconstructed.input_dim() {
        return Err(Error::Domain(format!(
            "shape mismatch: {}x{} vs {}x{}",
            raw.len(),
            raw.input_dim(),
            reconstructed.len(),
            reconstructed.input_dim()
        )));
    }
    if raw.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = raw
        .features()
        .iter()
        .zip(reconstructed.features())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(sum / raw.features().len() as f64)
}
