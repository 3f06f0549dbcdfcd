//! Knobs shared by every ensemble Kalman run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Settings for ensemble Kalman runs.
///
/// `process_noise` and `obs_noise` are variances, not standard deviations.
/// `lambda_tik` only affects transfer runs, where anchor rows enter the
/// observation with variance `1 / lambda_tik`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EkiConfig {
    /// Number of parameter particles.
    pub ensemble_size: usize,
    /// Number of Kalman iterations to run.
    pub iterations: usize,
    /// Variance of the additive parameter jitter applied before each forward sweep.
    pub process_noise: f64,
    /// Variance of the observation noise on data rows.
    pub obs_noise: f64,
    /// Strength of the per-particle anchor during transfer; zero disables anchoring.
    pub lambda_tik: f64,
    /// Standard deviation of the zero-mean Gaussian prior used to draw the initial ensemble.
    pub prior_std: f64,
    /// Seed for the run's random stream (initial draw, jitter, observation perturbations).
    pub seed: u64,
}

impl Default for EkiConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 2000,
            iterations: 1000,
            process_noise: 0.002,
            obs_noise: 0.01,
            lambda_tik: 0.1,
            prior_std: 1.0,
            seed: 0,
        }
    }
}

impl EkiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 {
            return Err(Error::config(format!(
                "ensemble_size must be at least 2, got {}",
                self.ensemble_size
            )));
        }
        if !self.process_noise.is_finite() || self.process_noise < 0.0 {
            return Err(Error::config(format!(
                "process_noise must be finite and non-negative, got {}",
                self.process_noise
            )));
        }
        if !self.obs_noise.is_finite() || self.obs_noise <= 0.0 {
            return Err(Error::config(format!(
                "obs_noise must be finite and positive, got {}",
                self.obs_noise
            )));
        }
        if !self.lambda_tik.is_finite() || self.lambda_tik < 0.0 {
            return Err(Error::config(format!(
                "lambda_tik must be finite and non-negative, got {}",
                self.lambda_tik
            )));
        }
        if !self.prior_std.is_finite() || self.prior_std < 0.0 {
            return Err(Error::config(format!(
                "prior_std must be finite and non-negative, got {}",
                self.prior_std
            )));
        }
        Ok(())
    }
}
