//! Derivative-free surrogate training over a fixed synthetic dataset.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::{Architecture, FilmDeepOnet, CHANNELS};
use crate::train::TrainingSet;

use super::config::EkiConfig;
use super::ensemble::{init_ensemble, EkiEnsemble};
use super::observation::Observation;
use super::step::{eki_step, EkiForward};

pub const MISFIT_CSV_HEADER: &str = "iter,mean_misfit,min_misfit,ensemble_spread";

/// A fixed inverse problem: recover surrogate parameters from noisy
/// normalized training data.
///
/// Input and target noise is drawn once at assembly and frozen, so every
/// iteration inverts the same observation. Targets are flattened record-major,
/// then channel (doc, log-viscosity, deformation), then time:
/// `index = (record * 3 + channel) * times + time`.
#[derive(Debug, Clone)]
pub struct EkiProblem {
    pub template: FilmDeepOnet,
    /// Noisy branch inputs, `(records, sensors + 1)`.
    inputs: Array2<f64>,
    /// Conditioning column matching the noisy initial cure values.
    cond: Array2<f64>,
    /// Normalized observation times, a strided subset of the set's grid.
    times_norm: Array1<f64>,
    /// Indices into the observation time grid relative to the set's grid.
    time_idx: Vec<usize>,
    /// Rows of the training set that entered the observation.
    pub record_idx: Vec<usize>,
    pub observation: Observation,
}

impl EkiProblem {
    /// Assembles the inverse problem from the training split of `set`.
    ///
    /// `noise_rel` is the relative noise applied once to every normalized
    /// input and target value; `time_stride` keeps every n-th trajectory time
    /// (the final time is always kept); `obs_noise` is the observation
    /// variance attached to every data component.
    pub fn from_training_set(
        set: &TrainingSet,
        arch: &Architecture,
        noise_rel: f64,
        time_stride: usize,
        obs_noise: f64,
        noise_seed: u64,
    ) -> Result<Self> {
        if !noise_rel.is_finite() || noise_rel < 0.0 {
            return Err(Error::config(format!(
                "relative noise must be finite and non-negative, got {noise_rel}"
            )));
        }
        if time_stride == 0 {
            return Err(Error::config("time_stride must be at least 1".to_string()));
        }
        if !obs_noise.is_finite() || obs_noise <= 0.0 {
            return Err(Error::config(format!(
                "obs_noise must be finite and positive, got {obs_noise}"
            )));
        }
        if set.train_idx.is_empty() {
            return Err(Error::data("training split is empty".to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let template = FilmDeepOnet::new(arch, set.norm.clone(), &mut rng)?;
        if template.sensor_count + 1 != set.inputs.ncols() {
            return Err(Error::config(format!(
                "architecture expects {} sensors but the set provides {}",
                template.sensor_count,
                set.inputs.ncols() - 1
            )));
        }

        let record_idx = set.train_idx.clone();
        let n_records = record_idx.len();
        let n_cols = set.inputs.ncols();
        let grid_len = set.times_norm.len();
        let mut time_idx: Vec<usize> = (0..grid_len).step_by(time_stride).collect();
        if *time_idx.last().expect("grid is non-empty") != grid_len - 1 {
            time_idx.push(grid_len - 1);
        }
        let n_times = time_idx.len();

        let mut inputs = Array2::zeros((n_records, n_cols));
        for (row, &r) in record_idx.iter().enumerate() {
            for col in 0..n_cols {
                let z: f64 = rng.sample(StandardNormal);
                inputs[[row, col]] = set.inputs[[r, col]] * (1.0 + noise_rel * z);
            }
        }
        let cond = inputs.slice(s![.., n_cols - 1..n_cols]).to_owned();

        let mut values = Array1::zeros(n_records * CHANNELS * n_times);
        for (row, &r) in record_idx.iter().enumerate() {
            for c in 0..CHANNELS {
                for (k, &ti) in time_idx.iter().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    let clean = set.targets[c][[r, ti]];
                    values[(row * CHANNELS + c) * n_times + k] = clean * (1.0 + noise_rel * z);
                }
            }
        }
        let observation = Observation::uniform(values, obs_noise)?;
        let times_norm = Array1::from_iter(time_idx.iter().map(|&i| set.times_norm[i]));

        Ok(Self {
            template,
            inputs,
            cond,
            times_norm,
            time_idx,
            record_idx,
            observation,
        })
    }

    pub fn n_records(&self) -> usize {
        self.record_idx.len()
    }

    pub fn n_times(&self) -> usize {
        self.times_norm.len()
    }

    /// Indices of the observation times within the full trajectory grid.
    pub fn time_indices(&self) -> &[usize] {
        &self.time_idx
    }

    /// Evaluates the surrogate with the given parameters on every stored
    /// input and flattens the normalized predictions in observation order.
    pub fn flatten_forward(&self, params: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let mut model = self.template.clone();
        model.set_params(&params.to_vec())?;
        let h = model.branch.forward(&self.inputs, &self.cond)?;
        let times = self.times_norm.clone().insert_axis(Axis(1));
        let phi = model.trunk.forward(&times)?;
        let g = model.latent_width;
        let n_times = self.n_times();
        let mut out = Array1::zeros(self.observation.len());
        for c in 0..CHANNELS {
            let h_c = h.slice(s![.., c * g..(c + 1) * g]);
            let pred = h_c.dot(&phi.t());
            for row in 0..self.n_records() {
                for k in 0..n_times {
                    out[(row * CHANNELS + c) * n_times + k] = pred[[row, k]];
                }
            }
        }
        Ok(out)
    }

    /// Splits a flat observation-order vector back into per-record,
    /// per-channel time series.
    pub fn unflatten(&self, flat: &Array1<f64>) -> Result<Vec<[Vec<f64>; CHANNELS]>> {
        if flat.len() != self.observation.len() {
            return Err(Error::config(format!(
                "flat vector has {} components, expected {}",
                flat.len(),
                self.observation.len()
            )));
        }
        let n_times = self.n_times();
        let mut out = Vec::with_capacity(self.n_records());
        for row in 0..self.n_records() {
            let mut record: [Vec<f64>; CHANNELS] = Default::default();
            for (c, series) in record.iter_mut().enumerate() {
                let start = (row * CHANNELS + c) * n_times;
                series.extend_from_slice(
                    flat.slice(s![start..start + n_times])
                        .as_slice()
                        .expect("flat vector is contiguous"),
                );
            }
            out.push(record);
        }
        Ok(out)
    }
}

impl EkiForward for EkiProblem {
    fn n_params(&self) -> usize {
        self.template.param_count()
    }

    fn n_obs(&self) -> usize {
        self.observation.len()
    }

    fn evaluate(&self, _particle: usize, params: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.flatten_forward(params)
    }
}

/// One row of the misfit history.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MisfitRow {
    pub iter: usize,
    pub mean_misfit: f64,
    pub min_misfit: f64,
    pub ensemble_spread: f64,
}

/// Runs the configured number of Kalman iterations from a fresh prior draw.
///
/// One seeded stream drives the prior draw and every iteration's noise, so
/// the whole run is reproducible from the config alone.
pub fn eki_train(problem: &EkiProblem, config: &EkiConfig) -> Result<(EkiEnsemble, Vec<MisfitRow>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ens = init_ensemble(
        &mut rng,
        config.ensemble_size,
        config.prior_std,
        problem.n_params(),
    )?;
    let mut rows = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let stats = eki_step(&mut ens, problem, &problem.observation, None, config, &mut rng)?;
        rows.push(MisfitRow {
            iter,
            mean_misfit: stats.mean_misfit,
            min_misfit: stats.min_misfit,
            ensemble_spread: stats.spread,
        });
    }
    Ok((ens, rows))
}

/// Writes the misfit history as CSV.
pub fn save_misfit(path: &Path, rows: &[MisfitRow]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{MISFIT_CSV_HEADER}")?;
    for row in rows {
        writeln!(
            w,
            "{},{},{},{}",
            row.iter, row.mean_misfit, row.min_misfit, row.ensemble_spread
        )?;
    }
    w.flush()?;
    Ok(())
}
