//! Observation vectors with per-component noise variances.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A flat observation vector together with the noise variance of each component.
///
/// Carrying the variance per component lets one update handle heterogeneous
/// rows, for example several datasets with different noise levels in one
/// inversion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Observation {
    pub values: Array1<f64>,
    pub variance: Array1<f64>,
}

impl Observation {
    /// Builds an observation whose components all share the variance `r`.
    pub fn uniform(values: Array1<f64>, r: f64) -> Result<Self> {
        let n = values.len();
        let obs = Self {
            values,
            variance: Array1::from_elem(n, r),
        };
        obs.validate()?;
        Ok(obs)
    }

    /// Builds an observation with explicit per-component variances.
    pub fn with_variance(values: Array1<f64>, variance: Array1<f64>) -> Result<Self> {
        let obs = Self { values, variance };
        obs.validate()?;
        Ok(obs)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Per-component noise standard deviations.
    pub fn std(&self) -> Array1<f64> {
        self.variance.mapv(f64::sqrt)
    }

    /// Concatenates two observations, keeping each component's variance.
    pub fn concat(&self, other: &Observation) -> Observation {
        let mut values = Vec::with_capacity(self.len() + other.len());
        values.extend(self.values.iter().copied());
        values.extend(other.values.iter().copied());
        let mut variance = Vec::with_capacity(self.len() + other.len());
        variance.extend(self.variance.iter().copied());
        variance.extend(other.variance.iter().copied());
        Observation {
            values: Array1::from_vec(values),
            variance: Array1::from_vec(variance),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::config("observation must not be empty".to_string()));
        }
        if self.values.len() != self.variance.len() {
            return Err(Error::config(format!(
                "observation has {} values but {} variances",
                self.values.len(),
                self.variance.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "observation value at index {i} is not finite"
            )));
        }
        if let Some(i) = self
            .variance
            .iter()
            .position(|v| !v.is_finite() || *v <= 0.0)
        {
            return Err(Error::config(format!(
                "observation variance at index {i} must be finite and positive"
            )));
        }
        Ok(())
    }
}
