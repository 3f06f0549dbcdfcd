//! Ensemble checkpoints: a JSON manifest, the template model, and one
//! parameter file per particle.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::FilmDeepOnet;

use super::ensemble::EkiEnsemble;

const CHECKPOINT_FORMAT: &str = "eki-ensemble";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    iteration: usize,
    n_params: usize,
    n_particles: usize,
    template: String,
    particles: Vec<String>,
}

/// Writes the ensemble state into `dir`, creating it if needed.
pub fn save_checkpoint(dir: &Path, template: &FilmDeepOnet, ens: &EkiEnsemble) -> Result<()> {
    if ens.n_params() != template.param_count() {
        return Err(Error::config(format!(
            "ensemble carries {} parameters but the template has {}",
            ens.n_params(),
            template.param_count()
        )));
    }
    fs::create_dir_all(dir)?;
    template.save(&dir.join("template.json"))?;
    let mut particles = Vec::with_capacity(ens.n_particles());
    for j in 0..ens.n_particles() {
        let name = format!("particle_{j:04}.json");
        let column: Vec<f64> = ens.particle(j).to_vec();
        let file = File::create(dir.join(&name))?;
        serde_json::to_writer(BufWriter::new(file), &column)
            .map_err(|e| Error::data(format!("cannot write particle {j}: {e}")))?;
        particles.push(name);
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        iteration: ens.iteration,
        n_params: ens.n_params(),
        n_particles: ens.n_particles(),
        template: "template.json".to_string(),
        particles,
    };
    let file = File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &manifest)
        .map_err(|e| Error::data(format!("cannot write checkpoint manifest: {e}")))?;
    Ok(())
}

/// Reads a checkpoint written by `save_checkpoint`.
pub fn load_checkpoint(dir: &Path) -> Result<(FilmDeepOnet, EkiEnsemble)> {
    let manifest_path = dir.join("manifest.json");
    let file = File::open(&manifest_path)?;
    let manifest: Manifest = serde_json::from_reader(BufReader::new(file)).map_err(|e| {
        Error::data(format!(
            "cannot parse checkpoint manifest {}: {e}",
            manifest_path.display()
        ))
    })?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::data(format!(
            "unexpected checkpoint format {:?}",
            manifest.format
        )));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    if manifest.particles.len() != manifest.n_particles {
        return Err(Error::data(format!(
            "manifest lists {} particle files but declares {}",
            manifest.particles.len(),
            manifest.n_particles
        )));
    }
    let template = FilmDeepOnet::load(&dir.join(&manifest.template))?;
    if template.param_count() != manifest.n_params {
        return Err(Error::data(format!(
            "template has {} parameters but the manifest declares {}",
            template.param_count(),
            manifest.n_params
        )));
    }
    let mut params = Array2::zeros((manifest.n_params, manifest.n_particles));
    for (j, name) in manifest.particles.iter().enumerate() {
        let path = dir.join(name);
        let file = File::open(&path)?;
        let column: Vec<f64> = serde_json::from_reader(BufReader::new(file)).map_err(|e| {
            Error::data(format!("cannot parse particle file {}: {e}", path.display()))
        })?;
        if column.len() != manifest.n_params {
            return Err(Error::data(format!(
                "particle file {} has {} parameters, expected {}",
                path.display(),
                column.len(),
                manifest.n_params
            )));
        }
        for (i, v) in column.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "particle file {} has a non-finite value at index {i}",
                    path.display()
                )));
            }
            params[[i, j]] = *v;
        }
    }
    Ok((
        template,
        EkiEnsemble {
            params,
            forwards: None,
            iteration: manifest.iteration,
        },
    ))
}
