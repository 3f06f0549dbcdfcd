//! Feature-wise linear modulation of hidden activations.
//!
//! A FiLM layer maps a conditioning vector `c` to per-feature scale and shift,
//! `h -> gamma(c) * h + beta(c)`, where `gamma` and `beta` are affine in `c`.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine conditioning maps: `gamma = Gw c + gb`, `beta = Bw c + bb`, each of
/// width `features` for a conditioning vector of width `cond`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Film {
    pub gamma_w: Array2<f64>,
    pub gamma_b: Array1<f64>,
    pub beta_w: Array2<f64>,
    pub beta_b: Array1<f64>,
}

/// Intermediates retained by [`Film::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct FilmCache {
    pub cond: Array2<f64>,
    pub h: Array2<f64>,
    pub gamma: Array2<f64>,
}

/// Gradients for a FiLM layer, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct FilmGrad {
    pub gamma_w: Array2<f64>,
    pub gamma_b: Array1<f64>,
    pub beta_w: Array2<f64>,
    pub beta_b: Array1<f64>,
}

impl Film {
    /// Glorot-uniform weights; `gamma` biases start at one and `beta` biases
    /// at zero so the initial layer is the identity for centered weights.
    pub fn identity_init<R: Rng + ?Sized>(features: usize, cond: usize, rng: &mut R) -> Self {
        let s = (6.0 / (features + cond) as f64).sqrt();
        let mut sample = |_: (usize, usize)| rng.random_range(-s..s);
        let gamma_w = Array2::from_shape_fn((features, cond), &mut sample);
        let beta_w = Array2::from_shape_fn((features, cond), &mut sample);
        Film {
            gamma_w,
            gamma_b: Array1::ones(features),
            beta_w,
            beta_b: Array1::zeros(features),
        }
    }

    pub fn features(&self) -> usize {
        self.gamma_w.nrows()
    }

    pub fn cond_width(&self) -> usize {
        self.gamma_w.ncols()
    }

    pub fn param_count(&self) -> usize {
        2 * (self.gamma_w.len() + self.gamma_b.len())
    }

    fn check(&self, h: &Array2<f64>, cond: &Array2<f64>) -> Result<()> {
        if h.ncols() != self.features() {
            return Err(Error::data(format!(
                "modulation expects {} features, got {}",
                self.features(),
                h.ncols()
            )));
        }
        if cond.ncols() != self.cond_width() {
            return Err(Error::data(format!(
                "modulation expects conditioning width {}, got {}",
                self.cond_width(),
                cond.ncols()
            )));
        }
        if h.nrows() != cond.nrows() {
            return Err(Error::data(format!(
                "batch mismatch: {} activations vs {} conditioning rows",
                h.nrows(),
                cond.nrows()
            )));
        }
        Ok(())
    }

    /// Applies the modulation to a `(batch, features)` activation block with a
    /// `(batch, cond)` conditioning block.
    pub fn forward(&self, h: &Array2<f64>, cond: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(h, cond)?.1)
    }

    /// Forward pass that also returns the cache for [`Film::backward`].
    pub fn forward_cached(
        &self,
        h: &Array2<f64>,
        cond: &Array2<f64>,
    ) -> Result<(FilmCache, Array2<f64>)> {
        self.check(h, cond)?;
        let gamma = cond.dot(&self.gamma_w.t()) + &self.gamma_b;
        let beta = cond.dot(&self.beta_w.t()) + &self.beta_b;
        let out = &gamma * h + &beta;
        Ok((
            FilmCache {
                cond: cond.clone(),
                h: h.clone(),
                gamma,
            },
            out,
        ))
    }

    /// Backpropagates `grad_out` through the modulation; returns parameter
    /// gradients, the gradient with respect to `h`, and the gradient with
    /// respect to the conditioning block.
    pub fn backward(
        &self,
        cache: &FilmCache,
        grad_out: &Array2<f64>,
    ) -> Result<(FilmGrad, Array2<f64>, Array2<f64>)> {
        if grad_out.dim() != cache.h.dim() {
            return Err(Error::data(format!(
                "output gradient shape {:?} does not match cached activations {:?}",
                grad_out.dim(),
                cache.h.dim()
            )));
        }
        let grad_gamma = grad_out * &cache.h;
        let grad = FilmGrad {
            gamma_w: grad_gamma.t().dot(&cache.cond),
            gamma_b: grad_gamma.sum_axis(ndarray::Axis(0)),
            beta_w: grad_out.t().dot(&cache.cond),
            beta_b: grad_out.sum_axis(ndarray::Axis(0)),
        };
        let grad_h = grad_out * &cache.gamma;
        let grad_cond = grad_gamma.dot(&self.gamma_w) + grad_out.dot(&self.beta_w);
        Ok((grad, grad_h, grad_cond))
    }
}
