//! Subcommand implementations: each one reads the resolved run config,
//! executes one pipeline stage, and writes its artifacts plus a copy of the
//! config into a stage directory under `out_dir`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use cureonet::eki::{
    eki_train, eki_transfer, load_checkpoint, predict_bands, save_checkpoint, save_misfit,
    EkiProblem,
};
use cureonet::operator::{FilmDeepOnet, Prediction};
use cureonet::opt::{map_to_csv, optimize, optimize_verified, SimModel};
use cureonet::sim::{build_profile, generate_dataset, load_dataset, save_dataset};
use cureonet::train::{
    ensemble_stats, fit, fit_ensemble, load_ensemble, save_ensemble, save_history, TrainingSet,
};
use cureonet::transfer::{fine_tune, ExperimentRecord};
use cureonet::{Error, Result};

use crate::config::RunConfig;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::config(format!("cannot serialize {}: {e}", path.display())))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

fn prediction_to_csv(path: &Path, pred: &Prediction) -> Result<()> {
    let mut out = String::from("time_min,doc,log_visc_lnPaS,deformation_mm\n");
    for i in 0..pred.times.len() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            pred.times[i], pred.doc_hat[i], pred.log_visc_hat[i], pred.deformation_hat[i]
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn load_experiment(
    cfg: &RunConfig,
    csv: &Option<PathBuf>,
    meta: &Option<PathBuf>,
) -> Result<ExperimentRecord> {
    let csv_path = cfg.path(csv, "experiment.csv");
    let meta_path = cfg.path(meta, "experiment.json");
    ExperimentRecord::from_files(&csv_path, &meta_path)
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let b = &cfg.generate;
    let out = cfg.path(&b.out, "dataset");
    let ds = generate_dataset(&b.anchors, &b.kinetics, &b.deformation, &b.grid)?;
    save_dataset(&ds, &out)?;
    cfg.save_resolved(&out)?;
    println!(
        "generate: {} records, {} grid points skipped -> {}",
        ds.records.len(),
        ds.skipped.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let mut resolved = cfg.clone();
    let b = &mut resolved.train;
    let split_seed = b.split_seed.unwrap_or(cfg.seed());
    b.split_seed = Some(split_seed);

    let ds = load_dataset(&cfg.path(&b.dataset, "dataset"))?;
    let set = TrainingSet::from_dataset(&ds, b.val_fraction, split_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    let mut model = FilmDeepOnet::new(&b.arch, set.norm.clone(), &mut rng)?;
    let history = fit(&mut model, &set, &b.train)?;

    let out = cfg.path(&b.out, "model");
    fs::create_dir_all(&out)?;
    model.save(&out.join("model.json"))?;
    save_history(&out.join("history.csv"), &history)?;
    resolved.save_resolved(&out)?;
    let last = history.last().map(|r| r.val_loss).unwrap_or(f64::NAN);
    println!(
        "train: {} evaluations, final validation loss {last:.6} -> {}",
        history.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EnsembleSummary {
    members: Vec<u64>,
    failures: Vec<(u64, String)>,
}

pub fn cmd_ensemble(cfg: &RunConfig) -> Result<()> {
    let mut resolved = cfg.clone();
    let b = &mut resolved.ensemble;
    let split_seed = b.split_seed.unwrap_or(cfg.seed());
    b.split_seed = Some(split_seed);
    let seeds = b.seeds.clone().unwrap_or_else(|| {
        (0..b.n_members as u64)
            .map(|i| cfg.seed().wrapping_add(i))
            .collect()
    });
    b.seeds = Some(seeds.clone());

    let ds = load_dataset(&cfg.path(&b.dataset, "dataset"))?;
    let set = TrainingSet::from_dataset(&ds, b.val_fraction, split_seed)?;
    let report = fit_ensemble(&b.arch, &set, &b.train, &seeds)?;

    let out = cfg.path(&b.out, "ensemble");
    save_ensemble(&out, &report.members)?;
    write_json(
        &out.join("summary.json"),
        &EnsembleSummary {
            members: report.members.iter().map(|m| m.seed).collect(),
            failures: report.failures.clone(),
        },
    )?;
    resolved.save_resolved(&out)?;
    println!(
        "ensemble: {} members trained, {} failed -> {}",
        report.members.len(),
        report.failures.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_eki_train(cfg: &RunConfig) -> Result<()> {
    let mut resolved = cfg.clone();
    let b = &mut resolved.eki_train;
    let split_seed = b.split_seed.unwrap_or(cfg.seed());
    b.split_seed = Some(split_seed);
    let noise_seed = b.noise_seed.unwrap_or(cfg.seed().wrapping_add(1));
    b.noise_seed = Some(noise_seed);
    b.eki.seed = cfg.seed();

    let ds = load_dataset(&cfg.path(&b.dataset, "dataset"))?;
    let set = TrainingSet::from_dataset(&ds, b.val_fraction, split_seed)?;
    let problem = EkiProblem::from_training_set(
        &set,
        &b.arch,
        b.noise_rel,
        b.time_stride,
        b.eki.obs_noise,
        noise_seed,
    )?;
    let (ens, misfit) = eki_train(&problem, &b.eki)?;
    let particles = b.eki.ensemble_size;

    let out = cfg.path(&b.out, "eki");
    save_checkpoint(&out, &problem.template, &ens)?;
    save_misfit(&out.join("misfit.csv"), &misfit)?;
    resolved.save_resolved(&out)?;
    let last = misfit.last().map(|r| r.mean_misfit).unwrap_or(f64::NAN);
    println!(
        "eki-train: {particles} particles, {} iterations, final mean misfit {last:.6} -> {}",
        misfit.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TransferSummary {
    label: String,
    measured_terminal_mm: f64,
    predicted_terminal_mm: f64,
    terminal_residual_mm: f64,
    converged: bool,
}

pub fn cmd_transfer(cfg: &RunConfig) -> Result<()> {
    let b = &cfg.transfer;
    let model = FilmDeepOnet::load(&cfg.path(&b.model, "model/model.json"))?;
    let rec = load_experiment(cfg, &b.experiment, &b.experiment_meta)?;
    let outcome = fine_tune(&model, &rec, &b.transfer)?;

    let out = cfg.path(&b.out, "transfer");
    fs::create_dir_all(&out)?;
    outcome.model.save(&out.join("model.json"))?;
    let mut hist = String::from("iter,loss,terminal_residual_mm\n");
    for row in &outcome.history {
        hist.push_str(&format!(
            "{},{},{}\n",
            row.iter, row.loss, row.terminal_residual_mm
        ));
    }
    fs::write(out.join("history.csv"), hist)?;
    prediction_to_csv(&out.join("baseline.csv"), &outcome.baseline)?;
    prediction_to_csv(&out.join("prediction.csv"), &outcome.prediction)?;
    write_json(
        &out.join("summary.json"),
        &TransferSummary {
            label: rec.label.clone(),
            measured_terminal_mm: rec.terminal_deformation_mm,
            predicted_terminal_mm: outcome.predicted_terminal_mm,
            terminal_residual_mm: outcome.terminal_residual_mm,
            converged: outcome.converged,
        },
    )?;
    cfg.save_resolved(&out)?;
    println!(
        "transfer: {} -> terminal {:.3} mm against measured {:.3} mm ({})",
        rec.label,
        outcome.predicted_terminal_mm,
        rec.terminal_deformation_mm,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EkiTransferSummary {
    label: String,
    measured_terminal_mm: f64,
    terminal_mean_mm: f64,
    terminal_std_mm: f64,
    particles: usize,
}

pub fn cmd_eki_transfer(cfg: &RunConfig) -> Result<()> {
    let mut resolved = cfg.clone();
    let b = &mut resolved.eki_transfer;
    b.eki.seed = cfg.seed();

    let (template, ens) = load_checkpoint(&cfg.path(&b.checkpoint, "eki"))?;
    let rec = load_experiment(cfg, &b.experiment, &b.experiment_meta)?;
    let outcome = eki_transfer(&template, &ens, &rec, &b.eki)?;

    let out = cfg.path(&b.out, "eki_transfer");
    save_checkpoint(&out, &outcome.template, &outcome.ensemble)?;
    save_misfit(&out.join("misfit.csv"), &outcome.misfit)?;
    let mut terms = String::from("particle,terminal_mm\n");
    for (j, v) in outcome.terminal_mm.iter().enumerate() {
        terms.push_str(&format!("{j},{v}\n"));
    }
    fs::write(out.join("terminals.csv"), terms)?;
    write_json(
        &out.join("summary.json"),
        &EkiTransferSummary {
            label: rec.label.clone(),
            measured_terminal_mm: rec.terminal_deformation_mm,
            terminal_mean_mm: outcome.terminal_mean_mm,
            terminal_std_mm: outcome.terminal_std_mm,
            particles: outcome.terminal_mm.len(),
        },
    )?;
    resolved.save_resolved(&out)?;
    println!(
        "eki-transfer: {} -> terminal {:.3} mm +/- {:.3} against measured {:.3} mm ({})",
        rec.label,
        outcome.terminal_mean_mm,
        outcome.terminal_std_mm,
        rec.terminal_deformation_mm,
        out.display()
    );
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let b = &cfg.predict;
    let model = FilmDeepOnet::load(&cfg.path(&b.model, "model/model.json"))?;
    let profile = build_profile(&b.anchors, b.t1, b.temp1)?;
    let temps = profile.sample_uniform(model.sensor_count)?;
    let times = profile.uniform_times(b.n_points);
    let pred = model.predict_trajectory(&temps, b.doc0, &times)?;

    let out = cfg.path(&b.out, "predict");
    fs::create_dir_all(&out)?;
    let profile_temps = profile.sample_uniform(b.n_points)?;
    let mut rows = String::from("time_min,temp_C,doc,log_visc_lnPaS,deformation_mm\n");
    for i in 0..pred.times.len() {
        rows.push_str(&format!(
            "{},{},{},{},{}\n",
            pred.times[i],
            profile_temps[i],
            pred.doc_hat[i],
            pred.log_visc_hat[i],
            pred.deformation_hat[i]
        ));
    }
    fs::write(out.join("prediction.csv"), rows)?;
    cfg.save_resolved(&out)?;
    let terminal = pred.deformation_hat.last().copied().unwrap_or(f64::NAN);
    println!(
        "predict: t1 {} min, T1 {} C -> terminal {:.3} mm ({})",
        b.t1,
        b.temp1,
        terminal,
        out.display()
    );
    Ok(())
}

pub fn cmd_bands(cfg: &RunConfig) -> Result<()> {
    let b = &cfg.bands;
    let profile = build_profile(&b.anchors, b.t1, b.temp1)?;
    let times = profile.uniform_times(b.n_points);
    let out = cfg.path(&b.out, "bands");
    fs::create_dir_all(&out)?;

    match (&b.ensemble, &b.checkpoint) {
        (Some(_), Some(_)) => {
            return Err(Error::config(
                "bands needs exactly one source, got both bands.ensemble and bands.checkpoint",
            ));
        }
        (Some(dir), None) => {
            let members = load_ensemble(&cfg.path(&Some(dir.clone()), "ensemble"))?;
            let models: Vec<FilmDeepOnet> = members.into_iter().map(|(_, m)| m).collect();
            if models.is_empty() {
                return Err(Error::data("the ensemble directory holds no models"));
            }
            let temps = profile.sample_uniform(models[0].sensor_count)?;
            let stats = ensemble_stats(&models, &temps, b.doc0, &times)?;
            stats.to_csv(&out.join("bands.csv"))?;
            println!(
                "bands: {} seed models -> {}",
                models.len(),
                out.display()
            );
        }
        (None, Some(dir)) => {
            let (template, ens) = load_checkpoint(&cfg.path(&Some(dir.clone()), "eki"))?;
            let temps = profile.sample_uniform(template.sensor_count)?;
            let bands = predict_bands(&template, &ens, &temps, b.doc0, &times, b.include_particles)?;
            fs::write(out.join("bands.csv"), bands.to_csv())?;
            if let Some(particles) = bands.particles_to_csv() {
                fs::write(out.join("particles.csv"), particles)?;
            }
            println!(
                "bands: {} particles -> {}",
                ens.n_particles(),
                out.display()
            );
        }
        (None, None) => {
            return Err(Error::config(
                "bands needs a source: set bands.ensemble or bands.checkpoint",
            ));
        }
    }
    cfg.save_resolved(&out)?;
    Ok(())
}

pub fn cmd_optimize(cfg: &RunConfig) -> Result<()> {
    let b = &cfg.optimize;
    let model = FilmDeepOnet::load(&cfg.path(&b.model, "model/model.json"))?;
    let out = cfg.path(&b.out, "optimize");
    fs::create_dir_all(&out)?;

    let (search, best_line) = if b.verify {
        let verifier = SimModel {
            kinetics: b.kinetics.clone(),
            deformation: b.deformation.clone(),
            ..SimModel::default()
        };
        let verified = optimize_verified(&model, &verifier, &b.problem)?;
        write_json(&out.join("verified.json"), &verified)?;
        let line = match &verified.confirmed {
            Some(c) => format!(
                "confirmed t1 {:.3} min, T1 {:.3} C, {:.3} mm after {} rejections",
                c.optimum.t1, c.optimum.temp1, c.optimum.objective_mm, verified.rejected
            ),
            None => "no schedule survived verification".to_string(),
        };
        (verified.search, line)
    } else {
        let search = optimize(&model, &b.problem)?;
        let line = match &search.best {
            Some(o) => format!(
                "best t1 {:.3} min, T1 {:.3} C, {:.3} mm",
                o.t1, o.temp1, o.objective_mm
            ),
            None => "no feasible schedule on the grid".to_string(),
        };
        (search, line)
    };

    fs::write(out.join("map.csv"), map_to_csv(&search.map))?;
    write_json(&out.join("result.json"), &search)?;
    cfg.save_resolved(&out)?;
    println!("optimize: {best_line} ({})", out.display());
    Ok(())
}
