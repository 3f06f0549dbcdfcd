//! Ensemble Kalman inversion: derivative-free operator training, regularized
//! last-layer transfer, and ensemble uncertainty bands.
//!
//! An ensemble of parameter particles is advanced by Kalman-type updates
//! built from empirical cross-covariances. Each iteration jitters the
//! particles with process noise, evaluates the forward map on every particle
//! in parallel, and applies the update in the ensemble subspace, so the only
//! dense factorization is of a particle-count-sized Gram matrix.

mod bands;
mod checkpoint;
mod config;
mod ensemble;
mod observation;
mod step;
mod train_op;
mod transfer_op;

pub use bands::{predict_bands, EkiBands, BANDS_CSV_HEADER, PARTICLES_CSV_HEADER};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::EkiConfig;
pub use ensemble::{init_ensemble, particle_model, EkiEnsemble};
pub use observation::Observation;
pub use step::{eki_step, EkiForward, StepStats, TikhonovAnchor};
pub use train_op::{eki_train, save_misfit, EkiProblem, MisfitRow, MISFIT_CSV_HEADER};
pub use transfer_op::{eki_transfer, EkiTransferOutcome};
