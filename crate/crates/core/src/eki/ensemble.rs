//! Particle storage and the initial prior draw.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::operator::FilmDeepOnet;

/// A population of parameter particles, stored one particle per column.
#[derive(Debug, Clone)]
pub struct EkiEnsemble {
    /// Parameter matrix of shape `(n_params, n_particles)`.
    pub params: Array2<f64>,
    /// Forward evaluations of the jittered particles from the most recent
    /// update, shape `(n_obs, n_particles)`. `None` before the first step.
    pub forwards: Option<Array2<f64>>,
    /// Number of updates applied so far.
    pub iteration: usize,
}

impl EkiEnsemble {
    pub fn n_params(&self) -> usize {
        self.params.nrows()
    }

    pub fn n_particles(&self) -> usize {
        self.params.ncols()
    }

    /// View of one particle's parameter vector.
    pub fn particle(&self, j: usize) -> ArrayView1<'_, f64> {
        self.params.column(j)
    }

    /// Ensemble mean parameter vector.
    pub fn mean(&self) -> Array1<f64> {
        self.params.mean_axis(Axis(1)).expect("ensemble is non-empty")
    }

    /// Per-coordinate population standard deviation across particles.
    pub fn coordinate_std(&self) -> Array1<f64> {
        let mean = self.mean();
        let n = self.n_particles() as f64;
        let mut out = Array1::zeros(self.n_params());
        for (i, row) in self.params.rows().into_iter().enumerate() {
            let m = mean[i];
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            out[i] = var.sqrt();
        }
        out
    }

    /// Mean over coordinates of the per-coordinate standard deviation.
    pub fn spread(&self) -> f64 {
        let stds = self.coordinate_std();
        stds.sum() / stds.len() as f64
    }
}

/// Draws an initial ensemble from a zero-mean isotropic Gaussian prior.
///
/// Particles are filled in order (particle-major, then coordinate), so runs
/// that share an RNG state reproduce the same draw exactly.
pub fn init_ensemble<R: Rng + ?Sized>(
    rng: &mut R,
    n_particles: usize,
    prior_std: f64,
    n_params: usize,
) -> Result<EkiEnsemble> {
    if n_particles < 2 {
        return Err(Error::config(format!(
            "ensemble needs at least 2 particles, got {n_particles}"
        )));
    }
    if n_params == 0 {
        return Err(Error::config("ensemble needs at least 1 parameter".to_string()));
    }
    if !prior_std.is_finite() || prior_std < 0.0 {
        return Err(Error::config(format!(
            "prior_std must be finite and non-negative, got {prior_std}"
        )));
    }
    let mut params = Array2::zeros((n_params, n_particles));
    for j in 0..n_particles {
        for i in 0..n_params {
            let z: f64 = rng.sample(StandardNormal);
            params[[i, j]] = prior_std * z;
        }
    }
    Ok(EkiEnsemble {
        params,
        forwards: None,
        iteration: 0,
    })
}

/// Materializes one particle as a full surrogate model based on `template`.
///
/// The template supplies architecture and normalization; only the parameter
/// vector is replaced.
pub fn particle_model(template: &FilmDeepOnet, ens: &EkiEnsemble, j: usize) -> Result<FilmDeepOnet> {
    if j >= ens.n_particles() {
        return Err(Error::config(format!(
            "particle index {j} out of range for ensemble of {}",
            ens.n_particles()
        )));
    }
    let mut model = template.clone();
    model.set_params(&ens.particle(j).to_vec())?;
    Ok(model)
}
