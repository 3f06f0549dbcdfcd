//! Last-layer transfer learning against measured terminal deformations.
//!
//! A pretrained operator is adapted to one experimental cycle by optimizing
//! only the final branch dense layer. The loss couples a single terminal
//! deformation residual with an anchor penalty on the layer's departure from
//! its pretrained values, so the simulation-learned history shape survives a
//! one-scalar supervision signal.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{AdamConfig, AdamState};
use crate::operator::{contract, FilmDeepOnet, Prediction};
use crate::sim::uniform_grid;

/// Header of the experiment temperature-history CSV.
pub const EXPERIMENT_CSV_HEADER: &str = "time_min,temp_C";

/// One measured cure cycle: temperature history plus its terminal outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    /// Measurement times, minutes, strictly increasing.
    pub times_min: Vec<f64>,
    /// Measured temperatures, Celsius.
    pub temps_c: Vec<f64>,
    /// Cycle duration, minutes; the time axis is rescaled by this horizon.
    pub duration_min: f64,
    pub terminal_deformation_mm: f64,
    pub doc0: f64,
    pub label: String,
}

/// Sidecar metadata stored next to an experiment CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentMeta {
    terminal_deformation_mm: f64,
    doc0: f64,
    label: String,
    #[serde(default)]
    duration_min: Option<f64>,
}

impl ExperimentRecord {
    pub fn validate(&self) -> Result<()> {
        if self.times_min.len() < 2 {
            return Err(Error::data(format!(
                "experiment {} needs at least two measurement points",
                self.label
            )));
        }
        if self.times_min.len() != self.temps_c.len() {
            return Err(Error::data(format!(
                "experiment {} has mismatched time and temperature lengths",
                self.label
            )));
        }
        if self.times_min.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::data(format!(
                "experiment {} times must be strictly increasing",
                self.label
            )));
        }
        if self
            .times_min
            .iter()
            .chain(&self.temps_c)
            .any(|v| !v.is_finite())
        {
            return Err(Error::data(format!(
                "experiment {} contains non-finite measurements",
                self.label
            )));
        }
        if !(self.duration_min > 0.0) {
            return Err(Error::data(format!(
                "experiment {} duration must be positive",
                self.label
            )));
        }
        if !self.terminal_deformation_mm.is_finite() {
            return Err(Error::data(format!(
                "experiment {} terminal deformation must be finite",
                self.label
            )));
        }
        if !(0.0..1.0).contains(&self.doc0) {
            return Err(Error::data(format!(
                "experiment {} doc0 = {} outside [0, 1)",
                self.label, self.doc0
            )));
        }
        Ok(())
    }

    /// Reads a record from its temperature CSV and JSON sidecar. The duration
    /// defaults to the last measurement time.
    pub fn from_files(csv_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(csv_path).map_err(csv_error)?;
        let header = reader.headers().map_err(csv_error)?.clone();
        let expected: Vec<&str> = EXPERIMENT_CSV_HEADER.split(',').collect();
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(Error::data(format!(
                "unexpected experiment header {:?} in {}",
                header,
                csv_path.display()
            )));
        }
        let mut times = Vec::new();
        let mut temps = Vec::new();
        for row in reader.records() {
            let row = row.map_err(csv_error)?;
            if row.len() != 2 {
                return Err(Error::data(format!(
                    "experiment row has {} fields, expected 2",
                    row.len()
                )));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::data(format!("bad number {s:?}: {e}")))
            };
            times.push(parse(&row[0])?);
            temps.push(parse(&row[1])?);
        }
        let json = std::fs::read_to_string(sidecar_path)?;
        let meta: ExperimentMeta = serde_json::from_str(&json).map_err(|e| {
            Error::data(format!(
                "cannot parse experiment sidecar {}: {e}",
                sidecar_path.display()
            ))
        })?;
        let duration = meta
            .duration_min
            .or_else(|| times.last().copied())
            .unwrap_or(0.0);
        let rec = ExperimentRecord {
            times_min: times,
            temps_c: temps,
            duration_min: duration,
            terminal_deformation_mm: meta.terminal_deformation_mm,
            doc0: meta.doc0,
            label: meta.label,
        };
        rec.validate()?;
        Ok(rec)
    }

    /// Writes the record as a temperature CSV plus JSON sidecar.
    pub fn to_files(&self, csv_path: &Path, sidecar_path: &Path) -> Result<()> {
        self.validate()?;
        let mut w = csv::Writer::from_path(csv_path).map_err(csv_error)?;
        w.write_record(EXPERIMENT_CSV_HEADER.split(',')).map_err(csv_error)?;
        for (t, temp) in self.times_min.iter().zip(&self.temps_c) {
            w.write_record(&[t.to_string(), temp.to_string()])
                .map_err(csv_error)?;
        }
        w.flush()?;
        let meta = ExperimentMeta {
            terminal_deformation_mm: self.terminal_deformation_mm,
            doc0: self.doc0,
            label: self.label.clone(),
            duration_min: Some(self.duration_min),
        };
        let json = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::data(format!("sidecar serialization failed: {e}")))?;
        std::fs::write(sidecar_path, json)?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::data(format!("csv error: {e}"))
}

/// Linearly interpolates the measured history onto `k` uniform samples of its
/// own time span and returns the raw temperatures.
pub fn resample_experiment(rec: &ExperimentRecord, k: usize) -> Result<Vec<f64>> {
    rec.validate()?;
    if k < 2 {
        return Err(Error::config(format!(
            "resampling needs at least two samples, got {k}"
        )));
    }
    let first = rec.times_min[0];
    let last = *rec.times_min.last().unwrap();
    let grid = uniform_grid(first, last, k);
    let mut out = Vec::with_capacity(k);
    for &t in &grid {
        let j = match rec
            .times_min
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(exact) => {
                out.push(rec.temps_c[exact]);
                continue;
            }
            Err(insert) => insert.clamp(1, rec.times_min.len() - 1),
        };
        let (t0, t1) = (rec.times_min[j - 1], rec.times_min[j]);
        let lambda = (t - t0) / (t1 - t0);
        out.push(rec.temps_c[j - 1] + lambda * (rec.temps_c[j] - rec.temps_c[j - 1]));
    }
    Ok(out)
}

/// Settings of the last-layer adaptation loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    /// Weight of the anchor penalty on the last-layer parameter change.
    pub lambda_anchor: f64,
    pub max_iters: usize,
    /// History cadence in iterations.
    pub eval_every: usize,
    /// Relative terminal residual below which the loop stops early.
    pub tol_rel: f64,
    pub adam: AdamConfig,
    /// Number of uniform points in the returned prediction histories.
    pub history_points: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            lambda_anchor: 1e-3,
            max_iters: 5000,
            eval_every: 50,
            tol_rel: 1e-4,
            adam: AdamConfig::default(),
            history_points: 128,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_anchor < 0.0 || !self.lambda_anchor.is_finite() {
            return Err(Error::config(format!(
                "lambda_anchor must be non-negative, got {}",
                self.lambda_anchor
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be positive".to_string()));
        }
        if !(self.tol_rel > 0.0) {
            return Err(Error::config(format!(
                "tol_rel must be positive, got {}",
                self.tol_rel
            )));
        }
        if self.history_points < 2 {
            return Err(Error::config(
                "history_points must be at least two".to_string(),
            ));
        }
        self.adam.validate()
    }
}

/// One logged step of the adaptation loop.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TransferHistoryRow {
    pub iter: usize,
    pub loss: f64,
    pub terminal_residual_mm: f64,
}

/// Result of adapting one model to one experiment.
#[derive(Debug, Clone)]
pub struct TransferOutcome {
    /// Adapted model; its time horizon equals the record's duration so
    /// queries in the record's time frame normalize onto [0, 1].
    pub model: FilmDeepOnet,
    pub history: Vec<TransferHistoryRow>,
    /// Prediction of the pretrained model on the record's time grid.
    pub baseline: Prediction,
    /// Prediction of the adapted model on the same grid.
    pub prediction: Prediction,
    pub predicted_terminal_mm: f64,
    pub terminal_residual_mm: f64,
    /// False when the loop hit `max_iters` above the residual tolerance.
    pub converged: bool,
}

fn terminal_and_grad(
    model: &FilmDeepOnet,
    x: &Array2<f64>,
    cond: &Array2<f64>,
    phi1: &Array1<f64>,
) -> Result<(f64, Vec<f64>)> {
    let g = model.latent_width;
    let (cache, out) = model.branch.forward_cached(x, cond)?;
    let h_e = out.slice(ndarray::s![0, 2 * g..3 * g]).to_owned();
    let u_norm = contract(&h_e, phi1)?;
    let u = model.norm.denormalize_channel(2, u_norm);
    let std2 = model.norm.channel_std[2];
    let mut grad_out = Array2::zeros((1, 3 * g));
    for l in 0..g {
        grad_out[[0, 2 * g + l]] = std2 * phi1[l];
    }
    let (grads, _, _) = model.branch.backward(&cache, &grad_out)?;
    let last = grads.layers.last().unwrap();
    let mut flat = Vec::with_capacity(last.w.len() + last.b.len());
    flat.extend(last.w.iter());
    flat.extend(last.b.iter());
    Ok((u, flat))
}

/// Adapts the final branch dense layer to one measured terminal deformation.
/// Every other parameter is bit-identical afterwards.
pub fn fine_tune(
    model: &FilmDeepOnet,
    rec: &ExperimentRecord,
    config: &TransferConfig,
) -> Result<TransferOutcome> {
    config.validate()?;
    model.validate()?;
    rec.validate()?;

    let temps = resample_experiment(rec, model.sensor_count)?;
    let mut adapted = model.clone();
    adapted.norm.time_scale = rec.duration_min;

    let first = rec.times_min[0];
    let last = *rec.times_min.last().unwrap();
    let pred_times = uniform_grid(first, last, config.history_points);
    let baseline = adapted.predict_trajectory(&temps, rec.doc0, &pred_times)?;

    let x = adapted
        .branch_input(&temps, rec.doc0)?
        .insert_axis(Axis(0));
    let cond = Array2::from_elem((1, 1), rec.doc0);
    let (phi1, _) = adapted.trunk_basis(1.0)?;

    let range = adapted.last_branch_layer_range();
    let mut flat = adapted.flatten_params();
    let anchor: Vec<f64> = flat[range.clone()].to_vec();
    let mut adam = AdamState::new(config.adam.clone(), range.len())?;
    let target = rec.terminal_deformation_mm;
    let scale = target.abs().max(1e-6);

    let mut history = Vec::new();
    let mut converged = false;
    for iter in 0..config.max_iters {
        let (u, du) = terminal_and_grad(&adapted, &x, &cond, &phi1)?;
        let resid = u - target;
        let theta = &flat[range.clone()];
        let anchor_sq: f64 = theta
            .iter()
            .zip(&anchor)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let loss = resid * resid + config.lambda_anchor * anchor_sq;
        if !loss.is_finite() {
            return Err(Error::numerical(format!(
                "transfer loss diverged at iteration {iter}"
            )));
        }
        if iter % config.eval_every == 0 {
            history.push(TransferHistoryRow {
                iter,
                loss,
                terminal_residual_mm: resid,
            });
        }
        if resid.abs() / scale < config.tol_rel {
            converged = true;
            break;
        }
        let grad: Vec<f64> = du
            .iter()
            .zip(theta.iter().zip(&anchor))
            .map(|(&d, (&t, &a))| 2.0 * resid * d + 2.0 * config.lambda_anchor * (t - a))
            .collect();
        adam.update(&mut flat[range.clone()], &grad)?;
        adapted.set_params(&flat)?;
    }

    let (terminal, _) = terminal_and_grad(&adapted, &x, &cond, &phi1)?;
    let final_resid = terminal - target;
    if final_resid.abs() / scale < config.tol_rel {
        converged = true;
    }
    history.push(TransferHistoryRow {
        iter: config.max_iters,
        loss: final_resid * final_resid,
        terminal_residual_mm: final_resid,
    });

    let prediction = adapted.predict_trajectory(&temps, rec.doc0, &pred_times)?;
    Ok(TransferOutcome {
        model: adapted,
        history,
        baseline,
        prediction,
        predicted_terminal_mm: terminal,
        terminal_residual_mm: final_resid,
        converged,
    })
}

/// Per-member adaptation results for an ensemble.
#[derive(Debug)]
pub struct TransferReport {
    /// Successful outcomes with their member index.
    pub outcomes: Vec<(usize, TransferOutcome)>,
    pub failures: Vec<(usize, String)>,
}

/// Fine-tunes each member independently against the same record.
pub fn fine_tune_ensemble(
    models: &[FilmDeepOnet],
    rec: &ExperimentRecord,
    config: &TransferConfig,
) -> Result<TransferReport> {
    if models.is_empty() {
        return Err(Error::config("transfer needs at least one model".to_string()));
    }
    let results: Vec<(usize, Result<TransferOutcome>)> = models
        .par_iter()
        .enumerate()
        .map(|(i, m)| (i, fine_tune(m, rec, config)))
        .collect();
    let mut report = TransferReport {
        outcomes: Vec::new(),
        failures: Vec::new(),
    };
    for (i, result) in results {
        match result {
            Ok(outcome) => report.outcomes.push((i, outcome)),
            Err(e) => report.failures.push((i, e.to_string())),
        }
    }
    Ok(report)
}
