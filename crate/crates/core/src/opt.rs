//! Constrained cure-schedule search over the intermediate profile point.
//!
//! The design variables are the intermediate knot `(t1, temp1)` of the cure
//! cycle. A candidate is feasible when the knot lies inside the placement
//! rectangle, the two heating ramps satisfy `m1 > m2 > 0`, and the predicted
//! final degree of cure clears a full-cure threshold. The search evaluates an
//! exhaustive grid through a terminal-state model, keeps the feasible
//! candidate with the smallest terminal deformation magnitude, and optionally
//! sharpens it on local grids of halving cell size. A separate verification
//! pass re-checks winners against the process simulator.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::FilmDeepOnet;
use crate::sim::{
    build_profile, simulate, uniform_grid, DeformationParams, KineticsParams, ProfileAnchors,
    TemperatureProfile, DEFAULT_DT, DEFAULT_TRAJECTORY_POINTS,
};

/// Final degree of cure and final deformation of one candidate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalState {
    pub doc: f64,
    pub deformation_mm: f64,
}

/// Predicts the terminal state of a cure cycle for the schedule search.
pub trait TerminalModel: Sync {
    fn terminal_state(&self, profile: &TemperatureProfile, doc0: f64) -> Result<TerminalState>;

    /// Initial-cure range the model is valid for; `None` means unrestricted.
    fn doc0_range(&self) -> Option<(f64, f64)> {
        None
    }
}

impl TerminalModel for FilmDeepOnet {
    fn terminal_state(&self, profile: &TemperatureProfile, doc0: f64) -> Result<TerminalState> {
        let sensor_temps = profile.sample_uniform(self.sensor_count)?;
        let terminal = profile.anchors().t3;
        let pred = self.predict_trajectory(&sensor_temps, doc0, &[terminal])?;
        Ok(TerminalState {
            doc: pred.doc_hat[0],
            deformation_mm: pred.deformation_hat[0],
        })
    }

    fn doc0_range(&self) -> Option<(f64, f64)> {
        Some(self.doc0_range)
    }
}

/// Terminal-state model backed by the process simulator; used as the
/// brute-force reference and for verifying surrogate winners.
#[derive(Debug, Clone)]
pub struct SimModel {
    pub kinetics: KineticsParams,
    pub deformation: DeformationParams,
    pub dt: f64,
    pub n_points: usize,
}

impl Default for SimModel {
    fn default() -> Self {
        SimModel {
            kinetics: KineticsParams::default(),
            deformation: DeformationParams::default(),
            dt: DEFAULT_DT,
            n_points: DEFAULT_TRAJECTORY_POINTS,
        }
    }
}

impl TerminalModel for SimModel {
    fn terminal_state(&self, profile: &TemperatureProfile, doc0: f64) -> Result<TerminalState> {
        let traj = simulate(
            profile,
            doc0,
            &self.kinetics,
            &self.deformation,
            self.dt,
            self.n_points,
        )?;
        Ok(TerminalState {
            doc: traj.terminal_doc(),
            deformation_mm: traj.terminal_deformation(),
        })
    }
}

/// Search space and constraints for the schedule optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptProblem {
    pub anchors: ProfileAnchors,
    /// Distance of the `t1` grid edges from `t0` and `t2`, minutes.
    pub margin_min: f64,
    /// Full-cure threshold on the final degree of cure.
    pub doc_min: f64,
    /// Initial degree of cure the schedules are evaluated at.
    pub doc0: f64,
    /// Grid resolution along `t1`.
    pub n_t1: usize,
    /// Grid resolution along `temp1`.
    pub n_temp1: usize,
    /// Local refinement rounds around the incumbent; each round halves the
    /// cell size. Zero disables refinement.
    pub refine_rounds: usize,
    /// Points per axis of each local refinement grid.
    pub refine_points: usize,
}

impl Default for OptProblem {
    fn default() -> Self {
        OptProblem {
            anchors: ProfileAnchors::default(),
            margin_min: 1.0,
            doc_min: 0.990,
            doc0: 0.3,
            n_t1: 50,
            n_temp1: 50,
            refine_rounds: 2,
            refine_points: 5,
        }
    }
}

impl OptProblem {
    pub fn validate(&self) -> Result<()> {
        if !self.doc_min.is_finite() || self.doc_min <= 0.0 || self.doc_min > 1.0 {
            return Err(Error::config(format!(
                "doc_min must lie in (0, 1], got {}",
                self.doc_min
            )));
        }
        if !(0.0..1.0).contains(&self.doc0) {
            return Err(Error::config(format!(
                "doc0 = {} outside [0, 1)",
                self.doc0
            )));
        }
        if self.n_t1 < 2 || self.n_temp1 < 2 {
            return Err(Error::config(format!(
                "grid must be at least 2x2, got {}x{}",
                self.n_t1, self.n_temp1
            )));
        }
        if !self.margin_min.is_finite() || self.margin_min <= 0.0 {
            return Err(Error::config(format!(
                "margin_min must be positive, got {}",
                self.margin_min
            )));
        }
        let (lo, hi) = self.t1_span();
        if lo >= hi {
            return Err(Error::config(format!(
                "margin_min {} leaves an empty t1 span [{lo}, {hi}]",
                self.margin_min
            )));
        }
        if self.refine_rounds > 0 && self.refine_points < 2 {
            return Err(Error::config(format!(
                "refinement grids need at least 2 points per axis, got {}",
                self.refine_points
            )));
        }
        Ok(())
    }

    /// Search interval of the intermediate time, insetting the margin.
    pub fn t1_span(&self) -> (f64, f64) {
        (
            self.anchors.t0 + self.margin_min,
            self.anchors.t2 - self.margin_min,
        )
    }

    /// Search interval of the intermediate temperature.
    pub fn temp1_span(&self) -> (f64, f64) {
        (self.anchors.temp_start, self.anchors.temp_peak)
    }
}

/// Constraint-by-constraint audit of one candidate point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub t1: f64,
    pub temp1: f64,
    /// Candidate lies inside the placement rectangle.
    pub in_bounds: bool,
    /// First-ramp slope, Celsius per minute.
    pub m1: f64,
    /// Second-ramp slope, Celsius per minute.
    pub m2: f64,
    /// `m1 > m2 > 0` holds.
    pub slopes_ordered: bool,
    /// Predicted final degree of cure; NaN when the model was not consulted.
    pub doc_final: f64,
    /// `doc_final - doc_min`; negative means under-cured.
    pub doc_margin: f64,
    /// Predicted terminal deformation, millimeters; NaN when the model was
    /// not consulted.
    pub deformation_mm: f64,
    pub feasible: bool,
}

/// Audits one candidate. Bound and slope checks come first; the model is
/// consulted only for in-bounds candidates, so out-of-bounds reports carry
/// NaN model fields.
pub fn feasible_report<M: TerminalModel>(
    model: &M,
    problem: &OptProblem,
    t1: f64,
    temp1: f64,
) -> Result<ConstraintReport> {
    let a = &problem.anchors;
    let (t1_lo, t1_hi) = a.t1_bounds();
    let (temp_lo, temp_hi) = a.temp1_bounds();
    let in_bounds = t1.is_finite()
        && temp1.is_finite()
        && (t1_lo..=t1_hi).contains(&t1)
        && (temp_lo..=temp_hi).contains(&temp1);

    let m1 = if t1 != a.t0 {
        (temp1 - a.temp_start) / (t1 - a.t0)
    } else {
        f64::NAN
    };
    let m2 = if t1 != a.t2 {
        (a.temp_peak - temp1) / (a.t2 - t1)
    } else {
        f64::NAN
    };
    let slopes_ordered = m1 > m2 && m2 > 0.0;

    if !in_bounds {
        return Ok(ConstraintReport {
            t1,
            temp1,
            in_bounds,
            m1,
            m2,
            slopes_ordered,
            doc_final: f64::NAN,
            doc_margin: f64::NAN,
            deformation_mm: f64::NAN,
            feasible: false,
        });
    }

    let profile = build_profile(a, t1, temp1)?;
    let state = model.terminal_state(&profile, problem.doc0)?;
    let doc_margin = state.doc - problem.doc_min;
    Ok(ConstraintReport {
        t1,
        temp1,
        in_bounds,
        m1,
        m2,
        slopes_ordered,
        doc_final: state.doc,
        doc_margin,
        deformation_mm: state.deformation_mm,
        feasible: slopes_ordered && doc_margin >= 0.0,
    })
}

/// One evaluated cell of the search grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapCell {
    pub t1: f64,
    pub temp1: f64,
    pub feasible: bool,
    pub doc_final: f64,
    pub deformation_mm: f64,
}

/// Header of the feasibility-map export.
pub const FEASIBILITY_CSV_HEADER: &str = "t1_min,T1_C,feasible,doc_final,deformation_mm";

/// Renders the feasibility map as CSV, feasible encoded as 1/0.
pub fn map_to_csv(cells: &[MapCell]) -> String {
    let mut out = String::from(FEASIBILITY_CSV_HEADER);
    out.push('\n');
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.t1,
            c.temp1,
            u8::from(c.feasible),
            c.doc_final,
            c.deformation_mm
        ));
    }
    out
}

/// The selected schedule and its audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptOptimum {
    pub t1: f64,
    pub temp1: f64,
    /// Terminal deformation magnitude at the optimum, millimeters.
    pub objective_mm: f64,
    pub report: ConstraintReport,
    /// Reported location uncertainty: one final cell along `t1`, minutes.
    pub half_cell_t1: f64,
    /// Reported location uncertainty: one final cell along `temp1`, Celsius.
    pub half_cell_temp1: f64,
}

/// Outcome of the grid search: the best feasible candidate, if any, plus the
/// full evaluated map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub best: Option<OptOptimum>,
    pub map: Vec<MapCell>,
}

fn evaluate_points<M: TerminalModel>(
    model: &M,
    problem: &OptProblem,
    points: &[(f64, f64)],
) -> Result<Vec<ConstraintReport>> {
    points
        .par_iter()
        .map(|&(t1, temp1)| feasible_report(model, problem, t1, temp1))
        .collect()
}

/// Scans reports in order and keeps the feasible one with the strictly
/// smallest objective, so earlier candidates win ties.
fn argmin_feasible(reports: &[ConstraintReport], range: Range<usize>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in range {
        let r = &reports[i];
        if !r.feasible {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => r.deformation_mm.abs() < reports[b].deformation_mm.abs(),
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Exhaustive grid search for the feasible schedule with the smallest
/// terminal deformation magnitude.
///
/// The grid is scanned in ascending `t1`, then ascending `temp1`, and only a
/// strict improvement replaces the incumbent, so ties resolve to the smaller
/// `t1`, then the smaller `temp1`. Refinement rounds, when enabled, evaluate
/// a local grid around the incumbent with the cell size halved each round;
/// the returned uncertainty is one final cell per coordinate. With no
/// feasible cell the result carries the full map and no best point.
pub fn optimize<M: TerminalModel>(model: &M, problem: &OptProblem) -> Result<OptResult> {
    problem.validate()?;
    if let Some((lo, hi)) = model.doc0_range() {
        if !(lo..=hi).contains(&problem.doc0) {
            return Err(Error::config(format!(
                "problem doc0 = {} outside the model's trained range [{lo}, {hi}]",
                problem.doc0
            )));
        }
    }

    let (t1_lo, t1_hi) = problem.t1_span();
    let (temp_lo, temp_hi) = problem.temp1_span();
    let t1_axis = uniform_grid(t1_lo, t1_hi, problem.n_t1);
    let temp1_axis = uniform_grid(temp_lo, temp_hi, problem.n_temp1);
    let mut points = Vec::with_capacity(problem.n_t1 * problem.n_temp1);
    for &t1 in &t1_axis {
        for &temp1 in &temp1_axis {
            points.push((t1, temp1));
        }
    }

    let reports = evaluate_points(model, problem, &points)?;
    let map: Vec<MapCell> = reports
        .iter()
        .map(|r| MapCell {
            t1: r.t1,
            temp1: r.temp1,
            feasible: r.feasible,
            doc_final: r.doc_final,
            deformation_mm: r.deformation_mm,
        })
        .collect();

    let mut cell_t1 = (t1_hi - t1_lo) / (problem.n_t1 - 1) as f64;
    let mut cell_temp1 = (temp_hi - temp_lo) / (problem.n_temp1 - 1) as f64;
    let Some(base_idx) = argmin_feasible(&reports, 0..reports.len()) else {
        return Ok(OptResult { best: None, map });
    };
    let mut incumbent = reports[base_idx].clone();

    for _ in 0..problem.refine_rounds {
        cell_t1 /= 2.0;
        cell_temp1 /= 2.0;
        let half = (problem.refine_points - 1) as f64 / 2.0;
        let mut local = Vec::with_capacity(problem.refine_points * problem.refine_points);
        for i in 0..problem.refine_points {
            let t1 = (incumbent.t1 + (i as f64 - half) * cell_t1).clamp(t1_lo, t1_hi);
            for k in 0..problem.refine_points {
                let temp1 =
                    (incumbent.temp1 + (k as f64 - half) * cell_temp1).clamp(temp_lo, temp_hi);
                local.push((t1, temp1));
            }
        }
        let local_reports = evaluate_points(model, problem, &local)?;
        if let Some(i) = argmin_feasible(&local_reports, 0..local_reports.len()) {
            if local_reports[i].deformation_mm.abs() < incumbent.deformation_mm.abs() {
                incumbent = local_reports[i].clone();
            }
        }
    }

    Ok(OptResult {
        best: Some(OptOptimum {
            t1: incumbent.t1,
            temp1: incumbent.temp1,
            objective_mm: incumbent.deformation_mm.abs(),
            report: incumbent,
            half_cell_t1: cell_t1,
            half_cell_temp1: cell_temp1,
        }),
        map,
    })
}

/// A winner confirmed by an independent model, usually the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfirmedOptimum {
    pub optimum: OptOptimum,
    /// The verifier's audit of the same point.
    pub verifier_report: ConstraintReport,
}

/// Search outcome plus the verification trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifiedResult {
    pub search: OptResult,
    pub confirmed: Option<ConfirmedOptimum>,
    /// Candidates the verifier rejected before one was confirmed.
    pub rejected: usize,
}

/// Runs the search with `model`, then re-checks the winner with `verifier`.
///
/// A rejected winner falls back to the remaining feasible grid cells in
/// ascending objective order until the verifier accepts one; if every
/// candidate is rejected the result carries no confirmed optimum.
pub fn optimize_verified<M: TerminalModel, V: TerminalModel>(
    model: &M,
    verifier: &V,
    problem: &OptProblem,
) -> Result<VerifiedResult> {
    let search = optimize(model, problem)?;
    let Some(best) = search.best.clone() else {
        return Ok(VerifiedResult {
            search,
            confirmed: None,
            rejected: 0,
        });
    };

    let mut candidates: Vec<OptOptimum> = vec![best.clone()];
    let mut feasible_cells: Vec<&MapCell> = search.map.iter().filter(|c| c.feasible).collect();
    feasible_cells.sort_by(|a, b| {
        a.deformation_mm
            .abs()
            .total_cmp(&b.deformation_mm.abs())
            .then(a.t1.total_cmp(&b.t1))
            .then(a.temp1.total_cmp(&b.temp1))
    });
    let base_cell_t1 = best.half_cell_t1 * (1 << problem.refine_rounds) as f64;
    let base_cell_temp1 = best.half_cell_temp1 * (1 << problem.refine_rounds) as f64;
    for cell in feasible_cells {
        if cell.t1 == best.t1 && cell.temp1 == best.temp1 {
            continue;
        }
        let report = feasible_report(model, problem, cell.t1, cell.temp1)?;
        candidates.push(OptOptimum {
            t1: cell.t1,
            temp1: cell.temp1,
            objective_mm: cell.deformation_mm.abs(),
            report,
            half_cell_t1: base_cell_t1,
            half_cell_temp1: base_cell_temp1,
        });
    }

    let mut rejected = 0;
    for candidate in candidates {
        let verifier_report = feasible_report(verifier, problem, candidate.t1, candidate.temp1)?;
        if verifier_report.feasible {
            return Ok(VerifiedResult {
                search,
                confirmed: Some(ConfirmedOptimum {
                    optimum: candidate,
                    verifier_report,
                }),
                rejected,
            });
        }
        rejected += 1;
    }
    Ok(VerifiedResult {
        search,
        confirmed: None,
        rejected,
    })
}
