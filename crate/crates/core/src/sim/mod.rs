//! Synthetic cure-process simulator: temperature profiles, cure kinetics,
//! chemoviscosity, deformation accumulation, and dataset generation.

pub mod dataset;
pub mod integrate;
pub mod kinetics;
pub mod profile;
pub mod trajectory;

pub use dataset::{
    generate_dataset, load_dataset, save_dataset, DataRecord, Dataset, GridSpec, SkippedPoint,
    DEFAULT_SENSOR_COUNT,
};
pub use integrate::{simulate, DEFAULT_DT, DEFAULT_TRAJECTORY_POINTS};
pub use kinetics::{
    compute_initial_doc, cure_rate, log_viscosity, stiffness_gate, viscosity, viscosity_formula,
    DeformationParams, InitialDoc, KineticsParams, GAS_CONSTANT, LOG_VISC_EPS,
};
pub use profile::{build_profile, uniform_grid, ProfileAnchors, TemperatureProfile};
pub use trajectory::{CureTrajectory, TRAJECTORY_CSV_HEADER};
