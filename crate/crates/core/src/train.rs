//! Supervised training of the operator network, seed ensembles, and
//! ensemble prediction statistics.
//!
//! Training is full batch: every iteration evaluates the loss and exact
//! gradient over the whole training split, removing batching nondeterminism.
//! The weighted mean-squared-error loss acts in normalized space, with target
//! statistics computed from the training split only.

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{AdamConfig, AdamState};
use crate::operator::{Architecture, FilmDeepOnet, Normalization, CHANNELS};
use crate::sim::Dataset;

/// Floor applied to per-channel target standard deviations.
pub const STD_FLOOR: f64 = 1e-10;

/// Header of the training-history CSV.
pub const HISTORY_CSV_HEADER: &str = "iter,train_loss,val_loss,lr";

const ENSEMBLE_FORMAT: &str = "cure-ensemble";
const ENSEMBLE_VERSION: u32 = 1;

/// Normalized tensors ready for training, plus the split that produced them.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    /// Branch inputs, one row per record: normalized sensor temperatures with
    /// the raw initial degree of cure appended.
    pub inputs: Array2<f64>,
    /// Conditioning column, the initial degree of cure per record.
    pub cond: Array2<f64>,
    /// Normalized targets per channel (doc, log-viscosity, deformation),
    /// each `(records, times)`.
    pub targets: [Array2<f64>; CHANNELS],
    /// Shared normalized trajectory times.
    pub times_norm: Array1<f64>,
    /// Normalization constants, channel statistics from the training split.
    pub norm: Normalization,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub record_ids: Vec<String>,
}

impl TrainingSet {
    /// Assembles tensors from a dataset with a seeded shuffle split.
    ///
    /// The validation fraction is rounded to a record count and capped so at
    /// least one record always remains in the training split.
    pub fn from_dataset(ds: &Dataset, val_fraction: f64, split_seed: u64) -> Result<Self> {
        if ds.records.is_empty() {
            return Err(Error::data("dataset has no records".to_string()));
        }
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::config(format!(
                "validation fraction {val_fraction} outside [0, 1)"
            )));
        }
        let n = ds.records.len();
        let k = ds.records[0].sensor_temps.len();
        let m = ds.records[0].trajectory.len();
        let mut norm = Normalization::from_anchors(&ds.anchors);

        let times = &ds.records[0].trajectory.times;
        for rec in &ds.records {
            if rec.sensor_temps.len() != k || rec.trajectory.len() != m {
                return Err(Error::data(format!(
                    "record {} has inconsistent shapes",
                    rec.id
                )));
            }
            if rec
                .trajectory
                .times
                .iter()
                .zip(times)
                .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Err(Error::data(format!(
                    "record {} is not on the shared trajectory grid",
                    rec.id
                )));
            }
        }

        let mut inputs = Array2::zeros((n, k + 1));
        let mut cond = Array2::zeros((n, 1));
        let mut targets: [Array2<f64>; CHANNELS] = [
            Array2::zeros((n, m)),
            Array2::zeros((n, m)),
            Array2::zeros((n, m)),
        ];
        for (i, rec) in ds.records.iter().enumerate() {
            for (j, &t) in rec.sensor_temps.iter().enumerate() {
                inputs[[i, j]] = norm.normalize_temp(t);
            }
            inputs[[i, k]] = rec.doc0;
            cond[[i, 0]] = rec.doc0;
            let channels = [
                &rec.trajectory.doc,
                &rec.trajectory.log_visc,
                &rec.trajectory.deformation_mm,
            ];
            for (c, values) in channels.iter().enumerate() {
                for (j, &v) in values.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::data(format!(
                            "non-finite target in record {}",
                            rec.id
                        )));
                    }
                    targets[c][[i, j]] = v;
                }
            }
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
        let n_val = ((val_fraction * n as f64).round() as usize).min(n - 1);
        let mut val_idx: Vec<usize> = order[..n_val].to_vec();
        let mut train_idx: Vec<usize> = order[n_val..].to_vec();
        val_idx.sort_unstable();
        train_idx.sort_unstable();

        for c in 0..CHANNELS {
            let train_rows = targets[c].select(Axis(0), &train_idx);
            let count = train_rows.len() as f64;
            let mean = train_rows.sum() / count;
            let var = train_rows.mapv(|v| (v - mean) * (v - mean)).sum() / count;
            norm.channel_mean[c] = mean;
            norm.channel_std[c] = var.sqrt().max(STD_FLOOR);
            targets[c].mapv_inplace(|v| (v - norm.channel_mean[c]) / norm.channel_std[c]);
        }

        let times_norm = Array1::from_iter(times.iter().map(|&t| norm.normalize_time(t)));
        Ok(TrainingSet {
            inputs,
            cond,
            targets,
            times_norm,
            norm,
            train_idx,
            val_idx,
            record_ids: ds.records.iter().map(|r| r.id.clone()).collect(),
        })
    }

    pub fn n_records(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn sensor_count(&self) -> usize {
        self.inputs.ncols() - 1
    }

    fn subset(&self, idx: &[usize]) -> Subset {
        Subset {
            inputs: self.inputs.select(Axis(0), idx),
            cond: self.cond.select(Axis(0), idx),
            targets: [
                self.targets[0].select(Axis(0), idx),
                self.targets[1].select(Axis(0), idx),
                self.targets[2].select(Axis(0), idx),
            ],
        }
    }
}

struct Subset {
    inputs: Array2<f64>,
    cond: Array2<f64>,
    targets: [Array2<f64>; CHANNELS],
}

/// Weighted mean-squared error summed over channels: each channel contributes
/// `weight * mean((pred - target)^2)` over every entry.
pub fn weighted_mse(
    preds: &[Array2<f64>; CHANNELS],
    targets: &[Array2<f64>; CHANNELS],
    weights: &[f64; CHANNELS],
) -> Result<f64> {
    let mut total = 0.0;
    for c in 0..CHANNELS {
        if preds[c].dim() != targets[c].dim() {
            return Err(Error::data(format!(
                "channel {c} shape mismatch: {:?} vs {:?}",
                preds[c].dim(),
                targets[c].dim()
            )));
        }
        let count = preds[c].len() as f64;
        let sq = (&preds[c] - &targets[c]).mapv(|d| d * d).sum();
        total += weights[c] * sq / count;
    }
    Ok(total)
}

/// Training-loop settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_iters: usize,
    /// Validation cadence in iterations.
    pub eval_every: usize,
    /// Stop once this many iterations pass without a validation improvement.
    pub patience: usize,
    pub adam: AdamConfig,
    pub channel_weights: [f64; CHANNELS],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iters: 100_000,
            eval_every: 100,
            patience: 2000,
            adam: AdamConfig::default(),
            channel_weights: [1.0; CHANNELS],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be positive".to_string()));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be positive".to_string()));
        }
        if self.channel_weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::config(format!(
                "channel weights must be non-negative, got {:?}",
                self.channel_weights
            )));
        }
        if self.channel_weights.iter().all(|&w| w == 0.0) {
            return Err(Error::config(
                "at least one channel weight must be positive".to_string(),
            ));
        }
        self.adam.validate()
    }
}

/// One evaluation row of the training history.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

fn forward_batch(
    model: &FilmDeepOnet,
    sub: &Subset,
    times_norm: &Array1<f64>,
) -> Result<[Array2<f64>; CHANNELS]> {
    let h = model.branch.forward(&sub.inputs, &sub.cond)?;
    let t_in = times_norm.clone().insert_axis(Axis(1));
    let phi = model.trunk.forward(&t_in)?;
    let g = model.latent_width;
    let mut preds: Vec<Array2<f64>> = Vec::with_capacity(CHANNELS);
    for c in 0..CHANNELS {
        let h_c = h.slice(s![.., c * g..(c + 1) * g]);
        preds.push(h_c.dot(&phi.t()));
    }
    Ok(preds.try_into().unwrap())
}

/// Loss over a subset without gradients.
fn eval_loss(
    model: &FilmDeepOnet,
    sub: &Subset,
    times_norm: &Array1<f64>,
    weights: &[f64; CHANNELS],
) -> Result<f64> {
    let preds = forward_batch(model, sub, times_norm)?;
    weighted_mse(&preds, &sub.targets, weights)
}

/// Full-batch loss and flattened gradient over a subset.
fn loss_and_grad(
    model: &FilmDeepOnet,
    sub: &Subset,
    times_norm: &Array1<f64>,
    weights: &[f64; CHANNELS],
) -> Result<(f64, Vec<f64>)> {
    let (branch_cache, h) = model.branch.forward_cached(&sub.inputs, &sub.cond)?;
    let t_in = times_norm.clone().insert_axis(Axis(1));
    let (trunk_cache, phi) = model.trunk.forward_cached(&t_in)?;
    let g = model.latent_width;
    let b = sub.inputs.nrows();
    let m = times_norm.len();

    let mut loss = 0.0;
    let mut grad_h = Array2::zeros((b, CHANNELS * g));
    let mut grad_phi = Array2::zeros((m, g));
    for c in 0..CHANNELS {
        let h_c = h.slice(s![.., c * g..(c + 1) * g]);
        let pred = h_c.dot(&phi.t());
        let resid = &pred - &sub.targets[c];
        let count = (b * m) as f64;
        loss += weights[c] * resid.mapv(|d| d * d).sum() / count;
        let d_pred = resid.mapv(|d| 2.0 * weights[c] * d / count);
        grad_h
            .slice_mut(s![.., c * g..(c + 1) * g])
            .assign(&d_pred.dot(&phi));
        grad_phi = grad_phi + d_pred.t().dot(&h_c);
    }

    let (branch_grads, _, _) = model.branch.backward(&branch_cache, &grad_h)?;
    let (trunk_grads, _) = model.trunk.backward(&trunk_cache, &grad_phi)?;
    let flat = model.flatten_grads(&branch_grads, &trunk_grads)?;
    Ok((loss, flat))
}

/// Full-batch loss and flattened gradient over the training split, for
/// gradient checks and external optimizers. The gradient layout matches
/// [`FilmDeepOnet::flatten_params`].
pub fn training_loss_and_grad(
    model: &FilmDeepOnet,
    set: &TrainingSet,
    weights: &[f64; CHANNELS],
) -> Result<(f64, Vec<f64>)> {
    let sub = set.subset(&set.train_idx);
    loss_and_grad(model, &sub, &set.times_norm, weights)
}

/// Trains the model in place and returns the evaluation history.
///
/// The model's normalization is replaced by the training set's before the
/// first iteration so channel statistics always match the targets. The
/// parameters returned are those of the best validation checkpoint; with an
/// empty validation split the training loss takes its place.
pub fn fit(
    model: &mut FilmDeepOnet,
    set: &TrainingSet,
    config: &TrainConfig,
) -> Result<Vec<HistoryRow>> {
    config.validate()?;
    model.validate()?;
    if model.sensor_count != set.sensor_count() {
        return Err(Error::config(format!(
            "model expects {} sensors, training set has {}",
            model.sensor_count,
            set.sensor_count()
        )));
    }
    if set.train_idx.is_empty() {
        return Err(Error::data("training split is empty".to_string()));
    }
    model.norm = set.norm.clone();

    let train = set.subset(&set.train_idx);
    let val = if set.val_idx.is_empty() {
        None
    } else {
        Some(set.subset(&set.val_idx))
    };

    let mut flat = model.flatten_params();
    let mut adam = AdamState::new(config.adam.clone(), flat.len())?;
    let mut best = flat.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_iter = 0usize;
    let mut history = Vec::new();

    for iter in 0..config.max_iters {
        let (train_loss, grads) =
            loss_and_grad(model, &train, &set.times_norm, &config.channel_weights)?;
        if !train_loss.is_finite() {
            return Err(Error::numerical(format!(
                "training loss diverged at iteration {iter}"
            )));
        }
        if iter % config.eval_every == 0 {
            let val_loss = match &val {
                Some(v) => eval_loss(model, v, &set.times_norm, &config.channel_weights)?,
                None => train_loss,
            };
            history.push(HistoryRow {
                iter,
                train_loss,
                val_loss,
                lr: adam.current_lr(),
            });
            if val_loss < best_loss {
                best_loss = val_loss;
                best.copy_from_slice(&flat);
                best_iter = iter;
            }
            if iter - best_iter >= config.patience {
                break;
            }
        }
        adam.update(&mut flat, &grads)?;
        model.set_params(&flat)?;
    }

    if best_loss.is_finite() {
        model.set_params(&best)?;
    }
    Ok(history)
}

/// One trained ensemble member.
#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub seed: u64,
    pub model: FilmDeepOnet,
    pub history: Vec<HistoryRow>,
}

/// Outcome of an ensemble run: trained members plus per-seed failures.
#[derive(Debug, Clone)]
pub struct EnsembleReport {
    pub members: Vec<EnsembleMember>,
    pub failures: Vec<(u64, String)>,
}

/// Trains one model per seed, sharing the training set and split. Members
/// differ only in their initialization seed; failures are reported per seed
/// without aborting the others.
pub fn fit_ensemble(
    arch: &Architecture,
    set: &TrainingSet,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<EnsembleReport> {
    if seeds.len() < 2 {
        return Err(Error::config(format!(
            "an ensemble needs at least two seeds, got {}",
            seeds.len()
        )));
    }
    let mut unique = seeds.to_vec();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() != seeds.len() {
        return Err(Error::config("ensemble seeds must be distinct".to_string()));
    }
    arch.validate()?;
    config.validate()?;

    let results: Vec<(u64, Result<EnsembleMember>)> = seeds
        .par_iter()
        .map(|&seed| {
            let run = || -> Result<EnsembleMember> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut model = FilmDeepOnet::new(arch, set.norm.clone(), &mut rng)?;
                let history = fit(&mut model, set, config)?;
                Ok(EnsembleMember {
                    seed,
                    model,
                    history,
                })
            };
            (seed, run())
        })
        .collect();

    let mut report = EnsembleReport {
        members: Vec::new(),
        failures: Vec::new(),
    };
    for (seed, result) in results {
        match result {
            Ok(member) => report.members.push(member),
            Err(e) => report.failures.push((seed, e.to_string())),
        }
    }
    Ok(report)
}

/// Pointwise ensemble statistics of the predicted channels, physical units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub times: Vec<f64>,
    pub n_members: usize,
    /// Per-channel means in the order doc, log-viscosity, deformation.
    pub mean: [Vec<f64>; CHANNELS],
    /// Per-channel population standard deviations, same order.
    pub std: [Vec<f64>; CHANNELS],
}

/// Header of the ensemble-statistics CSV.
pub const STATS_CSV_HEADER: &str =
    "time_min,mean_doc,std_doc,mean_log_visc,std_log_visc,mean_deformation_mm,std_deformation_mm";

impl EnsembleStats {
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        w.write_record(STATS_CSV_HEADER.split(',')).map_err(csv_error)?;
        for i in 0..self.times.len() {
            w.write_record(&[
                self.times[i].to_string(),
                self.mean[0][i].to_string(),
                self.std[0][i].to_string(),
                self.mean[1][i].to_string(),
                self.std[1][i].to_string(),
                self.mean[2][i].to_string(),
                self.std[2][i].to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::data(format!("csv error: {e}"))
}

/// Streaming mean and population standard deviation of member predictions at
/// shared query points.
pub fn ensemble_stats(
    models: &[FilmDeepOnet],
    sensor_temps_c: &[f64],
    doc0: f64,
    times_min: &[f64],
) -> Result<EnsembleStats> {
    if models.is_empty() {
        return Err(Error::config("ensemble statistics need at least one model".to_string()));
    }
    let first = &models[0];
    for m in models {
        if m.sensor_count != first.sensor_count
            || m.latent_width != first.latent_width
            || m.param_count() != first.param_count()
        {
            return Err(Error::config(
                "ensemble members have mismatched architectures".to_string(),
            ));
        }
    }
    let m = times_min.len();
    let mut mean = [vec![0.0; m], vec![0.0; m], vec![0.0; m]];
    let mut m2 = [vec![0.0; m], vec![0.0; m], vec![0.0; m]];
    for (j, model) in models.iter().enumerate() {
        let pred = model.predict_trajectory(sensor_temps_c, doc0, times_min)?;
        let channels = [&pred.doc_hat, &pred.log_visc_hat, &pred.deformation_hat];
        let count = (j + 1) as f64;
        for c in 0..CHANNELS {
            for i in 0..m {
                let x = channels[c][i];
                let delta = x - mean[c][i];
                mean[c][i] += delta / count;
                m2[c][i] += delta * (x - mean[c][i]);
            }
        }
    }
    let n = models.len() as f64;
    let std = [
        m2[0].iter().map(|v| (v / n).sqrt()).collect(),
        m2[1].iter().map(|v| (v / n).sqrt()).collect(),
        m2[2].iter().map(|v| (v / n).sqrt()).collect(),
    ];
    Ok(EnsembleStats {
        times: times_min.to_vec(),
        n_members: models.len(),
        mean,
        std,
    })
}

/// Writes the evaluation history as CSV.
pub fn save_history(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(HISTORY_CSV_HEADER.split(',')).map_err(csv_error)?;
    for row in history {
        w.write_record(&[
            row.iter.to_string(),
            row.train_loss.to_string(),
            row.val_loss.to_string(),
            row.lr.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EnsembleManifest {
    format: String,
    version: u32,
    members: Vec<EnsembleEntry>,
}

#[derive(Serialize, Deserialize)]
struct EnsembleEntry {
    seed: u64,
    model: String,
    history: String,
}

/// Saves an ensemble as one model file per seed plus a manifest.
pub fn save_ensemble(dir: &Path, members: &[EnsembleMember]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(members.len());
    for member in members {
        let model_name = format!("seed_{}.json", member.seed);
        let history_name = format!("history_seed_{}.csv", member.seed);
        member.model.save(&dir.join(&model_name))?;
        save_history(&dir.join(&history_name), &member.history)?;
        entries.push(EnsembleEntry {
            seed: member.seed,
            model: model_name,
            history: history_name,
        });
    }
    let manifest = EnsembleManifest {
        format: ENSEMBLE_FORMAT.to_string(),
        version: ENSEMBLE_VERSION,
        members: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::data(format!("manifest serialization failed: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Loads every member of a saved ensemble.
pub fn load_ensemble(dir: &Path) -> Result<Vec<(u64, FilmDeepOnet)>> {
    let json = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: EnsembleManifest = serde_json::from_str(&json)
        .map_err(|e| Error::data(format!("cannot parse ensemble manifest: {e}")))?;
    if manifest.format != ENSEMBLE_FORMAT || manifest.version != ENSEMBLE_VERSION {
        return Err(Error::data(format!(
            "unexpected ensemble manifest {}/{}",
            manifest.format, manifest.version
        )));
    }
    manifest
        .members
        .iter()
        .map(|e| Ok((e.seed, FilmDeepOnet::load(&dir.join(&e.model))?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_dataset, DeformationParams, GridSpec, KineticsParams, ProfileAnchors};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn tiny_dataset() -> Dataset {
        let grid = GridSpec {
            n_t1: 3,
            n_temp1: 2,
            doc0_values: vec![0.001, 0.3],
            trajectory_points: 16,
            sensor_count: 8,
            dt: 2.0,
            ..GridSpec::default()
        };
        generate_dataset(
            &ProfileAnchors::default(),
            &KineticsParams::default(),
            &DeformationParams::default(),
            &grid,
        )
        .unwrap()
    }

    fn tiny_arch() -> Architecture {
        Architecture {
            sensor_count: 8,
            hidden_width: 6,
            hidden_layers: 2,
            latent_width: 4,
            doc0_range: (0.001, 0.3),
        }
    }

    #[test]
    fn weighted_mse_hand_cases() {
        let zeros = Array2::zeros((1, 1));
        let twos = Array2::from_elem((1, 1), 2.0);
        let preds = [twos.clone(), zeros.clone(), zeros.clone()];
        let targets = [zeros.clone(), zeros.clone(), zeros.clone()];
        let loss = weighted_mse(&preds, &targets, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(loss, 4.0);
        let same = weighted_mse(&targets, &targets, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(same, 0.0);
        let single = weighted_mse(&preds, &targets, &[1.0, 1.0, 1.0]).unwrap();
        let double = weighted_mse(&preds, &targets, &[2.0, 2.0, 2.0]).unwrap();
        assert_abs_diff_eq!(double, 2.0 * single, epsilon = 1e-12);
    }

    #[test]
    fn split_is_disjoint_and_covers_all_records() {
        let ds = tiny_dataset();
        let set = TrainingSet::from_dataset(&ds, 0.25, 9).unwrap();
        let mut all: Vec<usize> = set
            .train_idx
            .iter()
            .chain(&set.val_idx)
            .copied()
            .collect();
        all.sort_unstable();
        let expected: Vec<usize> = (0..ds.records.len()).collect();
        assert_eq!(all, expected);
        assert!(set.val_idx.iter().all(|i| !set.train_idx.contains(i)));
        assert!(!set.val_idx.is_empty());
    }

    #[test]
    fn split_is_seed_deterministic() {
        let ds = tiny_dataset();
        let a = TrainingSet::from_dataset(&ds, 0.25, 9).unwrap();
        let b = TrainingSet::from_dataset(&ds, 0.25, 9).unwrap();
        assert_eq!(a.train_idx, b.train_idx);
        assert_eq!(a.val_idx, b.val_idx);
    }

    #[test]
    fn channel_statistics_come_from_the_training_split_only() {
        let ds = tiny_dataset();
        let set = TrainingSet::from_dataset(&ds, 0.25, 9).unwrap();
        for c in 0..CHANNELS {
            let raw: Vec<f64> = set
                .train_idx
                .iter()
                .flat_map(|&i| {
                    let rec = &ds.records[i];
                    let values = match c {
                        0 => &rec.trajectory.doc,
                        1 => &rec.trajectory.log_visc,
                        _ => &rec.trajectory.deformation_mm,
                    };
                    values.iter().copied().collect::<Vec<f64>>()
                })
                .collect();
            let mean = raw.iter().sum::<f64>() / raw.len() as f64;
            let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / raw.len() as f64;
            assert_abs_diff_eq!(set.norm.channel_mean[c], mean, epsilon = 1e-10);
            assert_abs_diff_eq!(set.norm.channel_std[c], var.sqrt().max(STD_FLOOR), epsilon = 1e-10);
        }
    }

    #[test]
    fn training_loss_ignores_record_order() {
        let ds = tiny_dataset();
        let set = TrainingSet::from_dataset(&ds, 0.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = FilmDeepOnet::new(&tiny_arch(), set.norm.clone(), &mut rng).unwrap();
        let forward = set.subset(&set.train_idx);
        let mut shuffled_idx = set.train_idx.clone();
        shuffled_idx.reverse();
        let shuffled = set.subset(&shuffled_idx);
        let a = eval_loss(&model, &forward, &set.times_norm, &[1.0; 3]).unwrap();
        let b = eval_loss(&model, &shuffled, &set.times_norm, &[1.0; 3]).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ds = tiny_dataset();
        let set = TrainingSet::from_dataset(&ds, 0.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = FilmDeepOnet::new(&tiny_arch(), set.norm.clone(), &mut rng).unwrap();
        let sub = set.subset(&set.train_idx);
        let weights = [1.0, 0.7, 1.3];
        let (_, grads) = loss_and_grad(&model, &sub, &set.times_norm, &weights).unwrap();
        let base = model.flatten_params();
        let h = 1e-6;
        for _ in 0..25 {
            let idx = rng.random_range(0..base.len());
            let mut plus = base.clone();
            plus[idx] += h;
            model.set_params(&plus).unwrap();
            let lp = eval_loss(&model, &sub, &set.times_norm, &weights).unwrap();
            let mut minus = base.clone();
            minus[idx] -= h;
            model.set_params(&minus).unwrap();
            let lm = eval_loss(&model, &sub, &set.times_norm, &weights).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = grads[idx].abs().max(fd.abs()).max(1e-3);
            assert!(
                ((grads[idx] - fd) / denom).abs() < 1e-5,
                "param {idx}: analytic {} vs fd {fd}",
                grads[idx]
            );
        }
    }

    #[test]
    fn zero_iterations_leave_parameters_unchanged() {
        let ds = tiny_dataset();
        let set = TrainingSet::from_dataset(&ds, 0.25, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = FilmDeepOnet::new(&tiny_arch(), set.norm.clone(), &mut rng).unwrap();
        let before = model.flatten_params();
        let config = TrainConfig {
            max_iters: 0,
            ..TrainConfig::default()
        };
        let history = fit(&mut model, &set, &config).unwrap();
        assert!(history.is_empty());
        let after = model.flatten_params();
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn short_training_reduces_the_loss() {
        let ds = tiny_dataset();
        let set = TrainingSet::from_dataset(&ds, 0.25, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = FilmDeepOnet::new(&tiny_arch(), set.norm.clone(), &mut rng).unwrap();
        let config = TrainConfig {
            max_iters: 400,
            eval_every: 50,
            patience: 400,
            ..TrainConfig::default()
        };
        let history = fit(&mut model, &set, &config).unwrap();
        assert!(history.len() >= 2);
        let first = history.first().unwrap().train_loss;
        let last = history.last().unwrap().train_loss;
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn best_checkpoint_is_restored() {
        let ds = tiny_dataset();
        let set = TrainingSet::from_dataset(&ds, 0.25, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = FilmDeepOnet::new(&tiny_arch(), set.norm.clone(), &mut rng).unwrap();
        let config = TrainConfig {
            max_iters: 300,
            eval_every: 25,
            patience: 300,
            ..TrainConfig::default()
        };
        let history = fit(&mut model, &set, &config).unwrap();
        let best = history
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        let val = set.subset(&set.val_idx);
        let final_val = eval_loss(&model, &val, &set.times_norm, &config.channel_weights).unwrap();
        assert_abs_diff_eq!(final_val, best, epsilon = 1e-12);
    }

    #[test]
    fn ensemble_is_seed_deterministic_and_rejects_duplicates() {
        let ds = tiny_dataset();
        let set = TrainingSet::from_dataset(&ds, 0.25, 1).unwrap();
        let config = TrainConfig {
            max_iters: 60,
            eval_every: 20,
            patience: 60,
            ..TrainConfig::default()
        };
        let a = fit_ensemble(&tiny_arch(), &set, &config, &[1, 2]).unwrap();
        let b = fit_ensemble(&tiny_arch(), &set, &config, &[1, 2]).unwrap();
        assert_eq!(a.members.len(), 2);
        assert!(a.failures.is_empty());
        for (x, y) in a.members.iter().zip(&b.members) {
            assert_eq!(x.seed, y.seed);
            let fx = x.model.flatten_params();
            let fy = y.model.flatten_params();
            assert!(fx.iter().zip(&fy).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert!(fit_ensemble(&tiny_arch(), &set, &config, &[3, 3]).is_err());
        assert!(fit_ensemble(&tiny_arch(), &set, &config, &[3]).is_err());
    }

    #[test]
    fn stats_of_identical_models_have_zero_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let norm = Normalization::from_anchors(&ProfileAnchors::default());
        let model = FilmDeepOnet::new(&tiny_arch(), norm, &mut rng).unwrap();
        let temps = vec![40.0; 8];
        let stats =
            ensemble_stats(&[model.clone(), model.clone()], &temps, 0.1, &[10.0, 50.0]).unwrap();
        for c in 0..CHANNELS {
            assert!(stats.std[c].iter().all(|&s| s == 0.0));
        }
    }

    #[test]
    fn two_point_stats_match_hand_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let norm = Normalization::from_anchors(&ProfileAnchors::default());
        let base = FilmDeepOnet::new(&tiny_arch(), norm, &mut rng).unwrap();
        let mut shifted = base.clone();
        for c in 0..CHANNELS {
            shifted.norm.channel_mean[c] += 2.0;
        }
        let temps = vec![40.0; 8];
        let times = [10.0, 50.0, 120.0];
        let stats = ensemble_stats(&[base.clone(), shifted], &temps, 0.1, &times).unwrap();
        let p = base.predict_trajectory(&temps, 0.1, &times).unwrap();
        let channels = [&p.doc_hat, &p.log_visc_hat, &p.deformation_hat];
        for c in 0..CHANNELS {
            for i in 0..times.len() {
                assert_abs_diff_eq!(stats.mean[c][i], channels[c][i] + 1.0, epsilon = 1e-10);
                assert_abs_diff_eq!(stats.std[c][i], 1.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn singleton_stats_equal_the_member_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let norm = Normalization::from_anchors(&ProfileAnchors::default());
        let model = FilmDeepOnet::new(&tiny_arch(), norm, &mut rng).unwrap();
        let temps = vec![40.0; 8];
        let stats = ensemble_stats(&[model.clone()], &temps, 0.1, &[10.0]).unwrap();
        let p = model.predict_trajectory(&temps, 0.1, &[10.0]).unwrap();
        assert_eq!(stats.mean[0][0].to_bits(), p.doc_hat[0].to_bits());
        assert_eq!(stats.std[0][0], 0.0);
    }

    #[test]
    fn streaming_stats_match_a_two_pass_recomputation() {
        let norm = Normalization::from_anchors(&ProfileAnchors::default());
        let mut models = Vec::new();
        for seed in 0..6 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            models.push(FilmDeepOnet::new(&tiny_arch(), norm.clone(), &mut rng).unwrap());
        }
        let temps = vec![60.0; 8];
        let times = [5.0, 100.0, 200.0];
        let stats = ensemble_stats(&models, &temps, 0.2, &times).unwrap();
        for (c, pick) in [
            |p: &crate::operator::Prediction| p.doc_hat.clone(),
            |p: &crate::operator::Prediction| p.log_visc_hat.clone(),
            |p: &crate::operator::Prediction| p.deformation_hat.clone(),
        ]
        .iter()
        .enumerate()
        {
            for i in 0..times.len() {
                let values: Vec<f64> = models
                    .iter()
                    .map(|m| pick(&m.predict_trajectory(&temps, 0.2, &times).unwrap())[i])
                    .collect();
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / values.len() as f64;
                assert_abs_diff_eq!(stats.mean[c][i], mean, epsilon = 1e-10);
                assert_abs_diff_eq!(stats.std[c][i], var.sqrt(), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn ensemble_save_load_round_trip() {
        let ds = tiny_dataset();
        let set = TrainingSet::from_dataset(&ds, 0.25, 1).unwrap();
        let config = TrainConfig {
            max_iters: 40,
            eval_every: 20,
            patience: 40,
            ..TrainConfig::default()
        };
        let report = fit_ensemble(&tiny_arch(), &set, &config, &[10, 11]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_ensemble(dir.path(), &report.members).unwrap();
        let loaded = load_ensemble(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        for (member, (seed, model)) in report.members.iter().zip(&loaded) {
            assert_eq!(member.seed, *seed);
            assert_eq!(&member.model, model);
        }
    }
}
