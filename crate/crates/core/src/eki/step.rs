//! One ensemble Kalman update in the particle subspace.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};

use super::config::EkiConfig;
use super::ensemble::EkiEnsemble;
use super::observation::Observation;

/// A forward map evaluated per particle.
///
/// The particle index is part of the call so a map can carry per-particle
/// state, such as a frozen base model or an anchor vector, alongside the
/// parameters being inverted.
pub trait EkiForward: Sync {
    fn n_params(&self) -> usize;
    fn n_obs(&self) -> usize;
    fn evaluate(&self, particle: usize, params: ArrayView1<'_, f64>) -> Result<Array1<f64>>;
}

/// Summary of one update, recorded before and after the particle move.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    /// Mean over particles of the whitened RMS residual against the data.
    pub mean_misfit: f64,
    /// Smallest whitened RMS residual over particles.
    pub min_misfit: f64,
    /// Mean per-coordinate parameter standard deviation after the update.
    pub spread: f64,
}

/// Regularization block for anchored updates: each particle is softly pinned
/// to its own target parameter vector.
///
/// The block enters the update as extra observation rows whose values are the
/// parameters themselves, so their ensemble covariance is the parameter
/// covariance; the per-particle innovation pulls toward that particle's
/// target column. Rows are weighted by `variance` (the reciprocal of the
/// regularization strength) and carry no observation perturbation.
#[derive(Debug, Clone)]
pub struct TikhonovAnchor {
    /// Per-particle parameter targets, shape `(n_params, n_particles)`.
    pub targets: Array2<f64>,
    /// Variance of the anchor rows; smaller means stiffer anchoring.
    pub variance: f64,
}

impl TikhonovAnchor {
    pub fn validate(&self) -> Result<()> {
        if !self.variance.is_finite() || self.variance <= 0.0 {
            return Err(Error::config(format!(
                "anchor variance must be finite and positive, got {}",
                self.variance
            )));
        }
        if let Some(v) = self.targets.iter().find(|v| !v.is_finite()) {
            return Err(Error::data(format!("anchor target {v} is not finite")));
        }
        Ok(())
    }
}

/// Advances the ensemble by one perturbed-observation Kalman update.
///
/// The sequence per call: jitter every particle with process noise, draw one
/// observation perturbation per particle, evaluate the forward map on all
/// jittered particles in parallel, then move each particle by
/// `Theta * solve(I + Yt' Yt, Yt' dt)` where `Theta` and `Yt` are the
/// centered, noise-whitened deviations scaled by `1/sqrt(J - 1)` and `dt` is
/// the whitened perturbed innovation. With an anchor, the whitened parameter
/// deviations and per-particle anchor innovations are appended to `Yt` and
/// `dt` as additional rows. All random draws happen on the caller's RNG in a
/// fixed order before the parallel section, so runs are reproducible
/// regardless of thread count. The reported misfit covers the data rows only.
pub fn eki_step<F, R>(
    ens: &mut EkiEnsemble,
    forward: &F,
    obs: &Observation,
    anchor: Option<&TikhonovAnchor>,
    config: &EkiConfig,
    rng: &mut R,
) -> Result<StepStats>
where
    F: EkiForward,
    R: Rng + ?Sized,
{
    obs.validate()?;
    let n_params = ens.n_params();
    let n_particles = ens.n_particles();
    let n_obs = obs.len();
    if let Some(anchor) = anchor {
        anchor.validate()?;
        if anchor.targets.dim() != (n_params, n_particles) {
            return Err(Error::config(format!(
                "anchor targets have shape {:?}, expected ({n_params}, {n_particles})",
                anchor.targets.dim()
            )));
        }
    }
    if n_particles < 2 {
        return Err(Error::config(format!(
            "ensemble update needs at least 2 particles, got {n_particles}"
        )));
    }
    if forward.n_params() != n_params {
        return Err(Error::config(format!(
            "forward map expects {} parameters but the ensemble has {n_params}",
            forward.n_params()
        )));
    }
    if forward.n_obs() != n_obs {
        return Err(Error::config(format!(
            "forward map produces {} components but the observation has {n_obs}",
            forward.n_obs()
        )));
    }
    if !config.process_noise.is_finite() || config.process_noise < 0.0 {
        return Err(Error::config(format!(
            "process_noise must be finite and non-negative, got {}",
            config.process_noise
        )));
    }

    let mut jittered = ens.params.clone();
    if config.process_noise > 0.0 {
        let q_std = config.process_noise.sqrt();
        for j in 0..n_particles {
            for i in 0..n_params {
                let z: f64 = rng.sample(StandardNormal);
                jittered[[i, j]] += q_std * z;
            }
        }
    }

    let sigma = obs.std();
    let mut zeta = Array2::zeros((n_obs, n_particles));
    for j in 0..n_particles {
        for i in 0..n_obs {
            let z: f64 = rng.sample(StandardNormal);
            zeta[[i, j]] = sigma[i] * z;
        }
    }

    let columns: Vec<Result<Array1<f64>>> = (0..n_particles)
        .into_par_iter()
        .map(|j| forward.evaluate(j, jittered.column(j)))
        .collect();
    let mut y_hat = Array2::zeros((n_obs, n_particles));
    for (j, column) in columns.into_iter().enumerate() {
        let column =
            column.map_err(|e| Error::numerical(format!("particle {j} forward failed: {e}")))?;
        if column.len() != n_obs {
            return Err(Error::numerical(format!(
                "particle {j} forward returned {} components, expected {n_obs}",
                column.len()
            )));
        }
        for i in 0..n_obs {
            let v = column[i];
            if !v.is_finite() {
                return Err(Error::numerical(format!(
                    "particle {j} forward produced a non-finite value at component {i}"
                )));
            }
            y_hat[[i, j]] = v;
        }
    }

    let mut mean_misfit = 0.0;
    let mut min_misfit = f64::INFINITY;
    for j in 0..n_particles {
        let mut ss = 0.0;
        for i in 0..n_obs {
            let r = (obs.values[i] - y_hat[[i, j]]) / sigma[i];
            ss += r * r;
        }
        let rms = (ss / n_obs as f64).sqrt();
        mean_misfit += rms;
        min_misfit = min_misfit.min(rms);
    }
    mean_misfit /= n_particles as f64;

    let scale = 1.0 / ((n_particles - 1) as f64).sqrt();
    let theta_mean = jittered.mean_axis(Axis(1)).expect("particles present");
    let y_mean = y_hat.mean_axis(Axis(1)).expect("particles present");
    let theta_dev = Array2::from_shape_fn((n_params, n_particles), |(i, j)| {
        (jittered[[i, j]] - theta_mean[i]) * scale
    });
    let y_dev = Array2::from_shape_fn((n_obs, n_particles), |(i, j)| {
        (y_hat[[i, j]] - y_mean[i]) / sigma[i] * scale
    });
    let innovations = Array2::from_shape_fn((n_obs, n_particles), |(i, j)| {
        (obs.values[i] - y_hat[[i, j]] + zeta[[i, j]]) / sigma[i]
    });

    let mut gram = y_dev.t().dot(&y_dev);
    let mut rhs_nd = y_dev.t().dot(&innovations);
    if let Some(anchor) = anchor {
        let sigma_a = anchor.variance.sqrt();
        let anchor_dev = theta_dev.mapv(|v| v / sigma_a);
        let anchor_innov = Array2::from_shape_fn((n_params, n_particles), |(i, j)| {
            (anchor.targets[[i, j]] - jittered[[i, j]]) / sigma_a
        });
        gram += &anchor_dev.t().dot(&anchor_dev);
        rhs_nd += &anchor_dev.t().dot(&anchor_innov);
    }
    let mut gram_na = DMatrix::from_fn(n_particles, n_particles, |r, c| gram[[r, c]]);
    for d in 0..n_particles {
        gram_na[(d, d)] += 1.0;
    }
    let chol = gram_na
        .cholesky()
        .ok_or_else(|| Error::numerical("ensemble Gram matrix factorization failed".to_string()))?;
    let rhs = DMatrix::from_fn(n_particles, n_particles, |r, c| rhs_nd[[r, c]]);
    let solved = chol.solve(&rhs);
    let weights = Array2::from_shape_fn((n_particles, n_particles), |(r, c)| solved[(r, c)]);
    let delta = theta_dev.dot(&weights);

    ens.params = &jittered + &delta;
    ens.forwards = Some(y_hat);
    ens.iteration += 1;

    Ok(StepStats {
        mean_misfit,
        min_misfit,
        spread: ens.spread(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eki::ensemble::init_ensemble;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Identity {
        dim: usize,
    }

    impl EkiForward for Identity {
        fn n_params(&self) -> usize {
            self.dim
        }
        fn n_obs(&self) -> usize {
            self.dim
        }
        fn evaluate(&self, _particle: usize, params: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
            Ok(params.to_owned())
        }
    }

    struct LinearMap {
        a: Array2<f64>,
    }

    impl EkiForward for LinearMap {
        fn n_params(&self) -> usize {
            self.a.ncols()
        }
        fn n_obs(&self) -> usize {
            self.a.nrows()
        }
        fn evaluate(&self, _particle: usize, params: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
            Ok(self.a.dot(&params))
        }
    }

    fn scalar_config(seed: u64) -> EkiConfig {
        EkiConfig {
            ensemble_size: 2000,
            iterations: 1,
            process_noise: 0.0,
            obs_noise: 0.5,
            lambda_tik: 0.0,
            prior_std: 1.0,
            seed,
        }
    }

    #[test]
    fn scalar_update_recovers_the_conjugate_posterior_mean() {
        let config = scalar_config(42);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ens = init_ensemble(&mut rng, config.ensemble_size, config.prior_std, 1).unwrap();
        let obs = Observation::uniform(array![1.0], config.obs_noise).unwrap();
        let stats = eki_step(&mut ens, &Identity { dim: 1 }, &obs, None, &config, &mut rng).unwrap();
        let mean = ens.mean()[0];
        assert!(
            (mean - 2.0 / 3.0).abs() < 0.05,
            "posterior mean {mean}, misfit {}",
            stats.mean_misfit
        );
    }

    #[test]
    fn subspace_update_matches_the_direct_observation_space_solve() {
        let n_params = 4;
        let n_obs = 6;
        let n_particles = 12;
        let mut setup_rng = ChaCha8Rng::seed_from_u64(77);
        let a = Array2::from_shape_fn((n_obs, n_params), |_| {
            let z: f64 = setup_rng.sample(StandardNormal);
            z
        });
        let forward = LinearMap { a: a.clone() };
        let config = EkiConfig {
            ensemble_size: n_particles,
            iterations: 1,
            process_noise: 0.01,
            obs_noise: 0.04,
            lambda_tik: 0.0,
            prior_std: 1.0,
            seed: 5,
        };
        let obs_values = Array1::from_shape_fn(n_obs, |i| 0.3 * i as f64 - 0.5);
        let obs = Observation::uniform(obs_values.clone(), config.obs_noise).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ens =
            init_ensemble(&mut rng, n_particles, config.prior_std, n_params).unwrap();
        let initial = ens.params.clone();
        eki_step(&mut ens, &forward, &obs, None, &config, &mut rng).unwrap();

        let mut ref_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let ref_init = init_ensemble(&mut ref_rng, n_particles, config.prior_std, n_params)
            .unwrap()
            .params;
        assert_eq!(ref_init, initial);
        let q_std = config.process_noise.sqrt();
        let mut jittered = ref_init.clone();
        for j in 0..n_particles {
            for i in 0..n_params {
                let z: f64 = ref_rng.sample(StandardNormal);
                jittered[[i, j]] += q_std * z;
            }
        }
        let sigma = obs.std();
        let mut zeta = Array2::zeros((n_obs, n_particles));
        for j in 0..n_particles {
            for i in 0..n_obs {
                let z: f64 = ref_rng.sample(StandardNormal);
                zeta[[i, j]] = sigma[i] * z;
            }
        }
        let y_hat = a.dot(&jittered);
        let scale = 1.0 / ((n_particles - 1) as f64).sqrt();
        let theta_mean = jittered.mean_axis(Axis(1)).unwrap();
        let y_mean = y_hat.mean_axis(Axis(1)).unwrap();
        let theta_dev = Array2::from_shape_fn((n_params, n_particles), |(i, j)| {
            (jittered[[i, j]] - theta_mean[i]) * scale
        });
        let y_dev = Array2::from_shape_fn((n_obs, n_particles), |(i, j)| {
            (y_hat[[i, j]] - y_mean[i]) / sigma[i] * scale
        });
        let innovations = Array2::from_shape_fn((n_obs, n_particles), |(i, j)| {
            (obs_values[i] - y_hat[[i, j]] + zeta[[i, j]]) / sigma[i]
        });

        let mut cov = y_dev.dot(&y_dev.t());
        for d in 0..n_obs {
            cov[[d, d]] += 1.0;
        }
        let cov_na = DMatrix::from_fn(n_obs, n_obs, |r, c| cov[[r, c]]);
        let inv = cov_na.try_inverse().unwrap();
        let inv_nd = Array2::from_shape_fn((n_obs, n_obs), |(r, c)| inv[(r, c)]);
        let weights = y_dev.t().dot(&inv_nd.dot(&innovations));
        let expected = &jittered + &theta_dev.dot(&weights);

        for (got, want) in ens.params.iter().zip(expected.iter()) {
            let denom = want.abs().max(1.0);
            assert!(
                (got - want).abs() / denom < 1e-8,
                "subspace {got} vs direct {want}"
            );
        }
    }

    #[test]
    fn huge_observation_variance_freezes_the_particles() {
        let mut setup_rng = ChaCha8Rng::seed_from_u64(9);
        let a = Array2::from_shape_fn((5, 3), |_| {
            let z: f64 = setup_rng.sample(StandardNormal);
            z
        });
        let forward = LinearMap { a };
        let config = EkiConfig {
            ensemble_size: 30,
            iterations: 1,
            process_noise: 0.0,
            obs_noise: 1e8,
            lambda_tik: 0.0,
            prior_std: 1.0,
            seed: 13,
        };
        let obs = Observation::uniform(Array1::ones(5), config.obs_noise).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ens = init_ensemble(&mut rng, 30, 1.0, 3).unwrap();
        let before = ens.params.clone();
        eki_step(&mut ens, &forward, &obs, None, &config, &mut rng).unwrap();
        let max_move = (&ens.params - &before)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_move < 1e-3, "max move {max_move}");
    }

    #[test]
    fn repeated_runs_with_one_seed_are_bitwise_identical() {
        let forward = Identity { dim: 2 };
        let config = EkiConfig {
            ensemble_size: 25,
            iterations: 3,
            process_noise: 0.01,
            obs_noise: 0.1,
            lambda_tik: 0.0,
            prior_std: 1.0,
            seed: 3,
        };
        let obs = Observation::uniform(array![0.4, -0.2], config.obs_noise).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut ens = init_ensemble(&mut rng, 25, 1.0, 2).unwrap();
            for _ in 0..config.iterations {
                eki_step(&mut ens, &forward, &obs, None, &config, &mut rng).unwrap();
            }
            ens.params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn tight_data_with_no_jitter_collapses_the_spread() {
        let forward = Identity { dim: 3 };
        let config = EkiConfig {
            ensemble_size: 60,
            iterations: 40,
            process_noise: 0.0,
            obs_noise: 1e-4,
            lambda_tik: 0.0,
            prior_std: 1.0,
            seed: 21,
        };
        let obs = Observation::uniform(array![0.5, -0.1, 0.2], config.obs_noise).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ens = init_ensemble(&mut rng, 60, 1.0, 3).unwrap();
        let initial_spread = ens.spread();
        let mut last = f64::INFINITY;
        for _ in 0..config.iterations {
            let stats = eki_step(&mut ens, &forward, &obs, None, &config, &mut rng).unwrap();
            last = stats.spread;
        }
        assert!(last < 0.05 * initial_spread, "spread {last} from {initial_spread}");
        let mean = ens.mean();
        for (m, y) in mean.iter().zip(obs.values.iter()) {
            assert!((m - y).abs() < 0.05, "mean {m} target {y}");
        }
    }

    struct PoisonedForward;

    impl EkiForward for PoisonedForward {
        fn n_params(&self) -> usize {
            1
        }
        fn n_obs(&self) -> usize {
            1
        }
        fn evaluate(&self, particle: usize, params: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
            if particle == 7 {
                Ok(array![f64::NAN])
            } else {
                Ok(params.to_owned())
            }
        }
    }

    #[test]
    fn non_finite_forward_names_the_particle() {
        let config = EkiConfig {
            ensemble_size: 10,
            iterations: 1,
            process_noise: 0.0,
            obs_noise: 0.1,
            lambda_tik: 0.0,
            prior_std: 1.0,
            seed: 1,
        };
        let obs = Observation::uniform(array![0.0], config.obs_noise).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ens = init_ensemble(&mut rng, 10, 1.0, 1).unwrap();
        let err = eki_step(&mut ens, &PoisonedForward, &obs, None, &config, &mut rng).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("particle 7"), "unexpected error: {text}");
    }

    #[test]
    fn stiff_anchors_pull_each_particle_to_its_target_when_data_is_vague() {
        let config = EkiConfig {
            ensemble_size: 30,
            iterations: 1,
            process_noise: 0.0,
            obs_noise: 1e8,
            lambda_tik: 0.0,
            prior_std: 1.0,
            seed: 11,
        };
        let obs = Observation::uniform(array![0.0], config.obs_noise).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ens = init_ensemble(&mut rng, 30, 1.0, 1).unwrap();
        let anchor = TikhonovAnchor {
            targets: Array2::from_elem((1, 30), 2.0),
            variance: 1e-8,
        };
        eki_step(
            &mut ens,
            &Identity { dim: 1 },
            &obs,
            Some(&anchor),
            &config,
            &mut rng,
        )
        .unwrap();
        for j in 0..30 {
            let v = ens.params[[0, j]];
            assert!((v - 2.0).abs() < 0.01, "particle {j} at {v}");
        }
    }

    #[test]
    fn anchors_at_the_current_positions_suppress_the_data_update() {
        let mut setup_rng = ChaCha8Rng::seed_from_u64(9);
        let a = Array2::from_shape_fn((5, 3), |_| {
            let z: f64 = setup_rng.sample(StandardNormal);
            z
        });
        let forward = LinearMap { a };
        let config = EkiConfig {
            ensemble_size: 30,
            iterations: 1,
            process_noise: 0.0,
            obs_noise: 0.1,
            lambda_tik: 0.0,
            prior_std: 1.0,
            seed: 13,
        };
        let obs = Observation::uniform(Array1::ones(5), config.obs_noise).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ens = init_ensemble(&mut rng, 30, 1.0, 3).unwrap();
        let before = ens.params.clone();
        let anchor = TikhonovAnchor {
            targets: before.clone(),
            variance: 1e-8,
        };
        eki_step(&mut ens, &forward, &obs, Some(&anchor), &config, &mut rng).unwrap();
        let max_move = (&ens.params - &before)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_move < 1e-4, "max move {max_move}");
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let config = EkiConfig {
            ensemble_size: 6,
            iterations: 1,
            process_noise: 0.0,
            obs_noise: 0.1,
            lambda_tik: 0.0,
            prior_std: 1.0,
            seed: 0,
        };
        let obs = Observation::uniform(array![0.0, 1.0], config.obs_noise).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ens = init_ensemble(&mut rng, 6, 1.0, 1).unwrap();
        let err = eki_step(&mut ens, &Identity { dim: 1 }, &obs, None, &config, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
