//! Ensemble prediction bands and per-particle trajectories.

use crate::error::{Error, Result};
use crate::operator::{FilmDeepOnet, CHANNELS};

use super::ensemble::{particle_model, EkiEnsemble};

pub const BANDS_CSV_HEADER: &str = crate::train::STATS_CSV_HEADER;
pub const PARTICLES_CSV_HEADER: &str = "particle,time_min,doc,log_visc_lnPaS,deformation_mm";

/// Pointwise ensemble mean and spread per channel, with optional per-particle
/// trajectories for spaghetti plots.
#[derive(Debug, Clone)]
pub struct EkiBands {
    pub times: Vec<f64>,
    pub n_particles: usize,
    /// Per-channel pointwise ensemble means (doc, log-viscosity, deformation).
    pub mean: [Vec<f64>; CHANNELS],
    /// Per-channel pointwise population standard deviations.
    pub std: [Vec<f64>; CHANNELS],
    /// One entry per particle when requested, channels in the same order.
    pub particles: Option<Vec<[Vec<f64>; CHANNELS]>>,
}

impl EkiBands {
    /// Renders the band summary as CSV, one row per time.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(BANDS_CSV_HEADER);
        out.push('\n');
        for (i, t) in self.times.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                t,
                self.mean[0][i],
                self.std[0][i],
                self.mean[1][i],
                self.std[1][i],
                self.mean[2][i],
                self.std[2][i]
            ));
        }
        out
    }

    /// Renders the per-particle trajectories as long-format CSV, if stored.
    pub fn particles_to_csv(&self) -> Option<String> {
        let particles = self.particles.as_ref()?;
        let mut out = String::new();
        out.push_str(PARTICLES_CSV_HEADER);
        out.push('\n');
        for (j, traj) in particles.iter().enumerate() {
            for (i, t) in self.times.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    j, t, traj[0][i], traj[1][i], traj[2][i]
                ));
            }
        }
        Some(out)
    }

    /// Fraction of reference points falling inside mean +/- `n_sigma` std,
    /// pooled over all channels and times.
    pub fn coverage(
        &self,
        truth: [&[f64]; CHANNELS],
        n_sigma: f64,
    ) -> Result<f64> {
        for series in &truth {
            if series.len() != self.times.len() {
                return Err(Error::config(format!(
                    "reference series has {} points but the bands have {}",
                    series.len(),
                    self.times.len()
                )));
            }
        }
        let mut inside = 0usize;
        let total = CHANNELS * self.times.len();
        for c in 0..CHANNELS {
            for i in 0..self.times.len() {
                if (truth[c][i] - self.mean[c][i]).abs() <= n_sigma * self.std[c][i] {
                    inside += 1;
                }
            }
        }
        Ok(inside as f64 / total as f64)
    }
}

/// Evaluates every particle on one profile and reduces to pointwise bands.
///
/// Means and standard deviations are population statistics over particles,
/// computed per channel and time.
pub fn predict_bands(
    template: &FilmDeepOnet,
    ens: &EkiEnsemble,
    sensor_temps_c: &[f64],
    doc0: f64,
    times_min: &[f64],
    include_particles: bool,
) -> Result<EkiBands> {
    if ens.n_particles() < 2 {
        return Err(Error::config(format!(
            "bands need at least 2 particles, got {}",
            ens.n_particles()
        )));
    }
    if times_min.is_empty() {
        return Err(Error::config("bands need at least one time".to_string()));
    }
    let n_times = times_min.len();
    let n_particles = ens.n_particles();

    let mut mean: [Vec<f64>; CHANNELS] = std::array::from_fn(|_| vec![0.0; n_times]);
    let mut m2: [Vec<f64>; CHANNELS] = std::array::from_fn(|_| vec![0.0; n_times]);
    let mut stored: Vec<[Vec<f64>; CHANNELS]> = Vec::new();

    for j in 0..n_particles {
        let model = particle_model(template, ens, j)?;
        let pred = model.predict_trajectory(sensor_temps_c, doc0, times_min)?;
        let channels: [&[f64]; CHANNELS] =
            [&pred.doc_hat, &pred.log_visc_hat, &pred.deformation_hat];
        let count = (j + 1) as f64;
        for c in 0..CHANNELS {
            for i in 0..n_times {
                let v = channels[c][i];
                let delta = v - mean[c][i];
                mean[c][i] += delta / count;
                m2[c][i] += delta * (v - mean[c][i]);
            }
        }
        if include_particles {
            stored.push([
                pred.doc_hat.clone(),
                pred.log_visc_hat.clone(),
                pred.deformation_hat.clone(),
            ]);
        }
    }

    let std: [Vec<f64>; CHANNELS] = std::array::from_fn(|c| {
        m2[c]
            .iter()
            .map(|v| (v / n_particles as f64).max(0.0).sqrt())
            .collect()
    });

    Ok(EkiBands {
        times: times_min.to_vec(),
        n_particles,
        mean,
        std,
        particles: if include_particles { Some(stored) } else { None },
    })
}
