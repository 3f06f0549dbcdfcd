//! Cure trajectory container and its CSV representation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column header shared by trajectory CSV files and prediction output.
pub const TRAJECTORY_CSV_HEADER: &str = "time_min,temp_C,doc,log_visc_lnPaS,deformation_mm";

/// Time histories of the simulated cure state on a uniform output grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CureTrajectory {
    /// Output times, minutes.
    pub times: Vec<f64>,
    /// Profile temperature at each output time, Celsius.
    pub temp_c: Vec<f64>,
    /// Degree of cure, fraction in [0, 1].
    pub doc: Vec<f64>,
    /// Log-viscosity `ln(mu + 1e-8)`, ln(Pa s).
    pub log_visc: Vec<f64>,
    /// Accumulated deformation, mm.
    pub deformation_mm: Vec<f64>,
    /// Initial degree of cure, fraction.
    pub doc0: f64,
}

impl CureTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn terminal_doc(&self) -> f64 {
        *self.doc.last().expect("trajectory is non-empty")
    }

    pub fn terminal_deformation(&self) -> f64 {
        *self.deformation_mm.last().expect("trajectory is non-empty")
    }

    /// Writes the trajectory as CSV with the shared five-column header.
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        w.write_record(TRAJECTORY_CSV_HEADER.split(','))
            .map_err(csv_error)?;
        for i in 0..self.len() {
            w.write_record([
                self.times[i].to_string(),
                self.temp_c[i].to_string(),
                self.doc[i].to_string(),
                self.log_visc[i].to_string(),
                self.deformation_mm[i].to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a trajectory CSV, rejecting files with an unexpected header or
    /// non-finite values.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)
            .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
        let header = r.headers().map_err(csv_error)?.iter().collect::<Vec<_>>().join(",");
        if header != TRAJECTORY_CSV_HEADER {
            return Err(Error::data(format!(
                "unexpected trajectory header {header:?} in {}",
                path.display()
            )));
        }
        let mut out = CureTrajectory {
            times: Vec::new(),
            temp_c: Vec::new(),
            doc: Vec::new(),
            log_visc: Vec::new(),
            deformation_mm: Vec::new(),
            doc0: 0.0,
        };
        for (row, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_error)?;
            if rec.len() != 5 {
                return Err(Error::data(format!(
                    "trajectory row {} has {} fields, expected 5",
                    row + 1,
                    rec.len()
                )));
            }
            let mut vals = [0.0f64; 5];
            for (i, field) in rec.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    Error::data(format!(
                        "unparsable value {field:?} at trajectory row {}",
                        row + 1
                    ))
                })?;
                if !v.is_finite() {
                    return Err(Error::data(format!(
                        "non-finite value at trajectory row {}",
                        row + 1
                    )));
                }
                vals[i] = v;
            }
            out.times.push(vals[0]);
            out.temp_c.push(vals[1]);
            out.doc.push(vals[2]);
            out.log_visc.push(vals[3]);
            out.deformation_mm.push(vals[4]);
        }
        if out.len() < 2 {
            return Err(Error::data(format!(
                "trajectory {} has fewer than two rows",
                path.display()
            )));
        }
        out.doc0 = out.doc[0];
        Ok(out)
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::data(format!("csv error: {e}"))
}
