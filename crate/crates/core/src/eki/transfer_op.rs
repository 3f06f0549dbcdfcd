//! Ensemble transfer of the final branch layer to one measured cure cycle.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::operator::FilmDeepOnet;
use crate::transfer::{resample_experiment, ExperimentRecord};

use super::config::EkiConfig;
use super::ensemble::{particle_model, EkiEnsemble};
use super::observation::Observation;
use super::step::{eki_step, EkiForward, TikhonovAnchor};
use super::train_op::MisfitRow;

/// Result of adapting a trained ensemble to one experiment.
#[derive(Debug, Clone)]
pub struct EkiTransferOutcome {
    /// Template with the time axis rescaled to the experiment duration; pair
    /// it with `ensemble` for predictions in the experiment frame.
    pub template: FilmDeepOnet,
    /// Full parameter ensemble with updated final branch layers; every other
    /// coordinate is carried over per particle unchanged.
    pub ensemble: EkiEnsemble,
    pub misfit: Vec<MisfitRow>,
    /// Per-particle terminal deformation after adaptation, millimeters.
    pub terminal_mm: Vec<f64>,
    pub terminal_mean_mm: f64,
    /// Population standard deviation of the per-particle terminals.
    pub terminal_std_mm: f64,
}

/// Forward map for transfer: the unknowns are one particle's final branch
/// layer and the output is the predicted terminal deformation; every other
/// coordinate stays at that particle's trained value.
struct TransferForward {
    bases: Vec<FilmDeepOnet>,
    base_flats: Vec<Vec<f64>>,
    phi_final: Vec<Array1<f64>>,
    /// Shared branch input row for the experiment's resampled profile.
    x: Array2<f64>,
    cond: Array2<f64>,
    range: std::ops::Range<usize>,
}

impl TransferForward {
    fn terminal_mm(&self, particle: usize, layer: &[f64]) -> Result<f64> {
        let mut flat = self.base_flats[particle].clone();
        flat[self.range.clone()].copy_from_slice(layer);
        let mut model = self.bases[particle].clone();
        model.set_params(&flat)?;
        let h = model.branch.forward(&self.x, &self.cond)?;
        let g = model.latent_width;
        let phi = &self.phi_final[particle];
        let mut raw = 0.0;
        for (k, p) in phi.iter().enumerate() {
            raw += h[[0, 2 * g + k]] * p;
        }
        Ok(model.norm.denormalize_channel(2, raw))
    }
}

impl EkiForward for TransferForward {
    fn n_params(&self) -> usize {
        self.range.len()
    }

    fn n_obs(&self) -> usize {
        1
    }

    fn evaluate(&self, particle: usize, params: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let layer: Vec<f64> = params.to_vec();
        let terminal = self.terminal_mm(particle, &layer)?;
        Ok(Array1::from_elem(1, terminal))
    }
}

/// Adapts every particle's final branch layer so the ensemble matches one
/// measured terminal deformation.
///
/// The particle layers start from their trained values, which also serve as
/// per-particle Tikhonov anchors weighted by `lambda_tik` (anchor variance
/// `1 / lambda_tik`); `lambda_tik = 0` drops the anchor and fits the terminal
/// unregularized. The returned template has its time scale set to the
/// experiment duration, so particle predictions use the experiment frame.
pub fn eki_transfer(
    template: &FilmDeepOnet,
    trained: &EkiEnsemble,
    rec: &ExperimentRecord,
    config: &EkiConfig,
) -> Result<EkiTransferOutcome> {
    config.validate()?;
    rec.validate()?;
    if trained.n_params() != template.param_count() {
        return Err(Error::config(format!(
            "ensemble carries {} parameters but the template has {}",
            trained.n_params(),
            template.param_count()
        )));
    }
    if trained.n_particles() < 2 {
        return Err(Error::config(format!(
            "transfer needs at least 2 particles, got {}",
            trained.n_particles()
        )));
    }
    let (lo, hi) = template.doc0_range;
    if !(lo..=hi).contains(&rec.doc0) {
        return Err(Error::config(format!(
            "initial cure {} outside the surrogate's trained range [{lo}, {hi}]",
            rec.doc0
        )));
    }

    let mut adapted_template = template.clone();
    adapted_template.norm.time_scale = rec.duration_min;
    let sensor_temps = resample_experiment(rec, adapted_template.sensor_count)?;
    let range = adapted_template.last_branch_layer_range();
    let n_layer = range.len();
    let n_particles = trained.n_particles();

    let x = adapted_template
        .branch_input(&sensor_temps, rec.doc0)?
        .insert_axis(Axis(0));
    let cond = Array2::from_elem((1, 1), rec.doc0);

    let mut bases = Vec::with_capacity(n_particles);
    let mut base_flats = Vec::with_capacity(n_particles);
    let mut phi_final = Vec::with_capacity(n_particles);
    let mut anchors = Array2::zeros((n_layer, n_particles));
    for j in 0..n_particles {
        let model = particle_model(&adapted_template, trained, j)?;
        let flat = model.flatten_params();
        for (i, k) in range.clone().enumerate() {
            anchors[[i, j]] = flat[k];
        }
        let (phi, _) = model.trunk_basis(1.0)?;
        phi_final.push(phi);
        base_flats.push(flat);
        bases.push(model);
    }

    let observation = Observation::uniform(
        Array1::from_elem(1, rec.terminal_deformation_mm),
        config.obs_noise,
    )?;
    let anchor = if config.lambda_tik > 0.0 {
        Some(TikhonovAnchor {
            targets: anchors.clone(),
            variance: 1.0 / config.lambda_tik,
        })
    } else {
        None
    };

    let forward = TransferForward {
        bases,
        base_flats,
        phi_final,
        x,
        cond,
        range: range.clone(),
    };

    let mut layer_ens = EkiEnsemble {
        params: anchors,
        forwards: None,
        iteration: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut misfit = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let stats = eki_step(
            &mut layer_ens,
            &forward,
            &observation,
            anchor.as_ref(),
            config,
            &mut rng,
        )?;
        misfit.push(MisfitRow {
            iter,
            mean_misfit: stats.mean_misfit,
            min_misfit: stats.min_misfit,
            ensemble_spread: stats.spread,
        });
    }

    let mut full = trained.params.clone();
    let mut terminal_mm = Vec::with_capacity(n_particles);
    for j in 0..n_particles {
        let layer: Vec<f64> = layer_ens.params.column(j).to_vec();
        for (i, k) in range.clone().enumerate() {
            full[[k, j]] = layer[i];
        }
        terminal_mm.push(forward.terminal_mm(j, &layer)?);
    }
    let n = n_particles as f64;
    let terminal_mean_mm = terminal_mm.iter().sum::<f64>() / n;
    let terminal_std_mm = (terminal_mm
        .iter()
        .map(|u| (u - terminal_mean_mm) * (u - terminal_mean_mm))
        .sum::<f64>()
        / n)
        .sqrt();

    Ok(EkiTransferOutcome {
        template: adapted_template,
        ensemble: EkiEnsemble {
            params: full,
            forwards: None,
            iteration: trained.iteration + config.iterations,
        },
        misfit,
        terminal_mm,
        terminal_mean_mm,
        terminal_std_mm,
    })
}
