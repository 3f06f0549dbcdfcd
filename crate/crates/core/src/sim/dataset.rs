//! Synthetic dataset generation over a grid of cure-cycle designs.
//!
//! Each record pairs one `(t1, temp1, doc0)` design with its simulated
//! trajectory and the branch sensor vector: `sensor_count` temperatures on a
//! uniform grid over `[t0, t3]` followed by the initial degree of cure.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::integrate::{simulate, DEFAULT_DT, DEFAULT_TRAJECTORY_POINTS};
use crate::sim::kinetics::{DeformationParams, KineticsParams};
use crate::sim::profile::{build_profile, uniform_grid, ProfileAnchors};
use crate::sim::trajectory::CureTrajectory;

/// Default number of branch temperature sensors.
pub const DEFAULT_SENSOR_COUNT: usize = 32;

/// Grid specification for dataset generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    /// Number of `t1` grid values.
    pub n_t1: usize,
    /// Number of `temp1` grid values.
    pub n_temp1: usize,
    /// Initial degrees of cure to pair with every `(t1, temp1)` point.
    pub doc0_values: Vec<f64>,
    /// Optional explicit `t1` span; defaults to the profile placement bounds.
    pub t1_range: Option<(f64, f64)>,
    /// Optional explicit `temp1` span; defaults to the profile temperature
    /// bounds.
    pub temp1_range: Option<(f64, f64)>,
    /// Branch sensor count.
    pub sensor_count: usize,
    /// Trajectory output points.
    pub trajectory_points: usize,
    /// Integrator maximum step, minutes.
    pub dt: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            n_t1: 10,
            n_temp1: 10,
            doc0_values: vec![0.001, 0.3],
            t1_range: None,
            temp1_range: None,
            sensor_count: DEFAULT_SENSOR_COUNT,
            trajectory_points: DEFAULT_TRAJECTORY_POINTS,
            dt: DEFAULT_DT,
        }
    }
}

impl GridSpec {
    fn validate(&self) -> Result<()> {
        if self.n_t1 == 0 || self.n_temp1 == 0 {
            return Err(Error::config("grid needs at least one point per axis".to_string()));
        }
        if self.doc0_values.is_empty() {
            return Err(Error::config("doc0_values must be non-empty".to_string()));
        }
        if self.sensor_count < 2 {
            return Err(Error::config(format!(
                "sensor_count must be at least 2, got {}",
                self.sensor_count
            )));
        }
        Ok(())
    }

    fn axis(&self, range: Option<(f64, f64)>, fallback: (f64, f64), n: usize) -> Vec<f64> {
        let (lo, hi) = range.unwrap_or(fallback);
        if n == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            uniform_grid(lo, hi, n)
        }
    }
}

/// One simulated record of the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRecord {
    pub id: String,
    pub t1: f64,
    pub temp1: f64,
    pub doc0: f64,
    /// Raw sensor temperatures, Celsius, on the uniform sensor grid.
    pub sensor_temps: Vec<f64>,
    pub trajectory: CureTrajectory,
}

/// A grid point that could not be simulated, with the rejection reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPoint {
    pub t1: f64,
    pub temp1: f64,
    pub doc0: f64,
    pub reason: String,
}

/// Generated dataset: records plus everything needed to regenerate them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub anchors: ProfileAnchors,
    pub kinetics: KineticsParams,
    pub deformation: DeformationParams,
    pub grid: GridSpec,
    pub records: Vec<DataRecord>,
    pub skipped: Vec<SkippedPoint>,
}

/// Simulates the full design grid. Grid points whose profile violates the
/// placement bounds are skipped and reported, not fatal.
pub fn generate_dataset(
    anchors: &ProfileAnchors,
    kp: &KineticsParams,
    dp: &DeformationParams,
    grid: &GridSpec,
) -> Result<Dataset> {
    grid.validate()?;
    kp.validate()?;
    dp.validate()?;
    for &doc0 in &grid.doc0_values {
        if !(0.0..1.0).contains(&doc0) {
            return Err(Error::config(format!("doc0 = {doc0} outside [0, 1)")));
        }
    }

    let t1_axis = grid.axis(grid.t1_range, anchors.t1_bounds(), grid.n_t1);
    let temp1_axis = grid.axis(grid.temp1_range, anchors.temp1_bounds(), grid.n_temp1);

    let mut points = Vec::new();
    for &t1 in &t1_axis {
        for &temp1 in &temp1_axis {
            for &doc0 in &grid.doc0_values {
                points.push((t1, temp1, doc0));
            }
        }
    }

    let results: Vec<_> = points
        .par_iter()
        .map(|&(t1, temp1, doc0)| {
            let profile = match build_profile(anchors, t1, temp1) {
                Ok(p) => p,
                Err(e) => {
                    return Ok::<_, Error>(Err(SkippedPoint {
                        t1,
                        temp1,
                        doc0,
                        reason: e.to_string(),
                    }))
                }
            };
            let trajectory = simulate(&profile, doc0, kp, dp, grid.dt, grid.trajectory_points)?;
            let sensor_temps = profile.sample_uniform(grid.sensor_count)?;
            Ok(Ok(DataRecord {
                id: String::new(),
                t1,
                temp1,
                doc0,
                sensor_temps,
                trajectory,
            }))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(mut rec) => {
                rec.id = format!("record_{:04}", records.len());
                records.push(rec);
            }
            Err(s) => skipped.push(s),
        }
    }

    if records.is_empty() {
        return Err(Error::config(
            "every grid point was rejected; nothing to simulate".to_string(),
        ));
    }

    Ok(Dataset {
        anchors: anchors.clone(),
        kinetics: kp.clone(),
        deformation: dp.clone(),
        grid: grid.clone(),
        records,
        skipped,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    t1: f64,
    temp1: f64,
    doc0: f64,
    sensor_temps: Vec<f64>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format: String,
    version: u32,
    anchors: ProfileAnchors,
    kinetics: KineticsParams,
    deformation: DeformationParams,
    grid: GridSpec,
    skipped: Vec<SkippedPoint>,
    records: Vec<ManifestRecord>,
}

const DATASET_FORMAT: &str = "cure-dataset";
const DATASET_VERSION: u32 = 1;

/// Writes the dataset as `manifest.json` plus one trajectory CSV per record
/// under `records/`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let records_dir = dir.join("records");
    std::fs::create_dir_all(&records_dir)?;
    let mut manifest = DatasetManifest {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        anchors: ds.anchors.clone(),
        kinetics: ds.kinetics.clone(),
        deformation: ds.deformation.clone(),
        grid: ds.grid.clone(),
        skipped: ds.skipped.clone(),
        records: Vec::new(),
    };
    for rec in &ds.records {
        let file = format!("records/{}.csv", rec.id);
        rec.trajectory.to_csv(&dir.join(&file))?;
        manifest.records.push(ManifestRecord {
            id: rec.id.clone(),
            t1: rec.t1,
            temp1: rec.temp1,
            doc0: rec.doc0,
            sensor_temps: rec.sensor_temps.clone(),
            file,
        });
    }
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::data(format!("manifest serialization failed: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(())
}

/// Loads a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("malformed dataset manifest: {e}")))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::data(format!(
            "unexpected dataset format {:?}",
            manifest.format
        )));
    }
    if manifest.version != DATASET_VERSION {
        return Err(Error::data(format!(
            "unsupported dataset version {}",
            manifest.version
        )));
    }
    let mut records = Vec::with_capacity(manifest.records.len());
    for m in &manifest.records {
        let trajectory = CureTrajectory::from_csv(&dir.join(&m.file))?;
        if trajectory.len() != manifest.grid.trajectory_points {
            return Err(Error::data(format!(
                "record {} has {} trajectory points, manifest says {}",
                m.id,
                trajectory.len(),
                manifest.grid.trajectory_points
            )));
        }
        records.push(DataRecord {
            id: m.id.clone(),
            t1: m.t1,
            temp1: m.temp1,
            doc0: m.doc0,
            sensor_temps: m.sensor_temps.clone(),
            trajectory,
        });
    }
    Ok(Dataset {
        anchors: manifest.anchors,
        kinetics: manifest.kinetics,
        deformation: manifest.deformation,
        grid: manifest.grid,
        records,
        skipped: manifest.skipped,
    })
}
