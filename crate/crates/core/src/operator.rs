//! Operator network mapping a sampled temperature profile and initial degree
//! of cure to full cure histories.
//!
//! The branch network encodes the profile: its input is the `k` sensor
//! temperatures plus the initial degree of cure, and a FiLM layer conditioned
//! on the initial degree of cure modulates the first hidden activation. The
//! branch output splits into three equal latent blocks, one per predicted
//! channel (degree of cure, log-viscosity, deformation). The trunk network
//! maps normalized time to a shared latent basis, and each channel's
//! prediction is the dot product of its branch block with that basis.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{Dense, DenseGrad, Film, FilmCache, FilmGrad, Mlp};
use crate::sim::ProfileAnchors;

/// Number of predicted channels: degree of cure, log-viscosity, deformation.
pub const CHANNELS: usize = 3;

const MODEL_FORMAT: &str = "film-deeponet";
const MODEL_VERSION: u32 = 1;

/// An MLP whose first hidden activation is modulated by a FiLM layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilmMlp {
    pub mlp: Mlp,
    pub film: Film,
    /// Index of the hidden layer whose post-tanh activation is modulated.
    pub film_layer: usize,
}

/// Activations retained by [`FilmMlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct FilmMlpCache {
    /// Input to each dense layer.
    inputs: Vec<Array2<f64>>,
    /// Post-activation output of each layer, before any modulation.
    post_act: Vec<Array2<f64>>,
    film: FilmCache,
}

/// Gradients for a modulated MLP.
#[derive(Debug, Clone)]
pub struct FilmMlpGrad {
    pub layers: Vec<DenseGrad>,
    pub film: FilmGrad,
}

impl FilmMlp {
    /// Builds the composite with the modulation on hidden layer
    /// `film_layer` (zero-based) and a conditioning vector of width `cond`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], cond: usize, rng: &mut R) -> Result<Self> {
        let mlp = Mlp::new(widths, rng)?;
        if widths.len() < 3 {
            return Err(Error::config(
                "a modulated network needs at least one hidden layer".to_string(),
            ));
        }
        let film = Film::identity_init(widths[1], cond, rng);
        Ok(FilmMlp {
            mlp,
            film,
            film_layer: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n_hidden = self.mlp.layers.len() - 1;
        if self.film_layer >= n_hidden {
            return Err(Error::config(format!(
                "modulated layer index {} out of range for {n_hidden} hidden layers",
                self.film_layer
            )));
        }
        let width = self.mlp.layers[self.film_layer].n_out();
        if self.film.features() != width {
            return Err(Error::config(format!(
                "modulation width {} does not match hidden width {width}",
                self.film.features()
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count() + self.film.param_count()
    }

    /// Batched forward pass: `x` is `(batch, n_in)`, `cond` is
    /// `(batch, cond_width)`.
    pub fn forward(&self, x: &Array2<f64>, cond: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x, cond)?.1)
    }

    /// Forward pass retaining the cache for [`FilmMlp::backward`].
    pub fn forward_cached(
        &self,
        x: &Array2<f64>,
        cond: &Array2<f64>,
    ) -> Result<(FilmMlpCache, Array2<f64>)> {
        self.validate()?;
        if x.ncols() != self.mlp.n_in() {
            return Err(Error::data(format!(
                "network expects {} input features, got {}",
                self.mlp.n_in(),
                x.ncols()
            )));
        }
        let n = self.mlp.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut post_act = Vec::with_capacity(n);
        let mut film_cache = None;
        let mut h = x.clone();
        for (l, layer) in self.mlp.layers.iter().enumerate() {
            inputs.push(h.clone());
            let mut z = layer.forward(&h);
            if l + 1 < n {
                z.mapv_inplace(f64::tanh);
            }
            post_act.push(z.clone());
            if l == self.film_layer {
                let (fc, modulated) = self.film.forward_cached(&z, cond)?;
                film_cache = Some(fc);
                z = modulated;
            }
            h = z;
        }
        Ok((
            FilmMlpCache {
                inputs,
                post_act,
                film: film_cache.unwrap(),
            },
            h,
        ))
    }

    /// Backpropagates `grad_out` through the cached pass; returns parameter
    /// gradients, the input gradient, and the conditioning gradient.
    pub fn backward(
        &self,
        cache: &FilmMlpCache,
        grad_out: &Array2<f64>,
    ) -> Result<(FilmMlpGrad, Array2<f64>, Array2<f64>)> {
        let n = self.mlp.layers.len();
        if cache.inputs.len() != n || cache.post_act.len() != n {
            return Err(Error::data(format!(
                "forward cache holds {} layers, network has {n}",
                cache.inputs.len()
            )));
        }
        if grad_out.dim() != cache.post_act[n - 1].dim() {
            return Err(Error::data(format!(
                "output gradient shape {:?} does not match cached output {:?}",
                grad_out.dim(),
                cache.post_act[n - 1].dim()
            )));
        }
        let mut layer_grads: Vec<DenseGrad> =
            self.mlp.layers.iter().map(DenseGrad::zeros_like).collect();
        let mut film_grad = None;
        let mut grad_cond = Array2::zeros(cache.film.cond.dim());
        let mut delta = grad_out.clone();
        for l in (0..n).rev() {
            if l == self.film_layer {
                let (fg, gh, gc) = self.film.backward(&cache.film, &delta)?;
                film_grad = Some(fg);
                grad_cond = gc;
                delta = gh;
            }
            if l + 1 < n {
                delta = &delta * &cache.post_act[l].mapv(|y| 1.0 - y * y);
            }
            layer_grads[l].w = delta.t().dot(&cache.inputs[l]);
            layer_grads[l].b = delta.sum_axis(Axis(0));
            delta = delta.dot(&self.mlp.layers[l].w);
        }
        Ok((
            FilmMlpGrad {
                layers: layer_grads,
                film: film_grad.unwrap(),
            },
            delta,
            grad_cond,
        ))
    }
}

/// Normalization constants shared by a trained model and its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    /// Subtracted from temperatures before scaling, Celsius.
    pub temp_offset: f64,
    /// Temperature scale divisor, Celsius.
    pub temp_scale: f64,
    /// Trunk times are divided by this horizon, minutes.
    pub time_scale: f64,
    /// Per-channel target mean in the order doc, log-viscosity, deformation.
    pub channel_mean: [f64; CHANNELS],
    /// Per-channel target standard deviation, same order.
    pub channel_std: [f64; CHANNELS],
}

impl Normalization {
    /// Temperature and time scaling from profile anchors, identity channel
    /// scaling until training statistics replace it.
    pub fn from_anchors(anchors: &ProfileAnchors) -> Self {
        Normalization {
            temp_offset: anchors.temp_start,
            temp_scale: anchors.temp_peak - anchors.temp_start,
            time_scale: anchors.t3,
            channel_mean: [0.0; CHANNELS],
            channel_std: [1.0; CHANNELS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temp_scale == 0.0 || !self.temp_scale.is_finite() {
            return Err(Error::config(format!(
                "temperature scale must be finite and nonzero, got {}",
                self.temp_scale
            )));
        }
        if self.time_scale <= 0.0 || !self.time_scale.is_finite() {
            return Err(Error::config(format!(
                "time scale must be positive, got {}",
                self.time_scale
            )));
        }
        if self.channel_std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::config(format!(
                "channel standard deviations must be positive, got {:?}",
                self.channel_std
            )));
        }
        Ok(())
    }

    pub fn normalize_temp(&self, t_c: f64) -> f64 {
        (t_c - self.temp_offset) / self.temp_scale
    }

    pub fn normalize_time(&self, t_min: f64) -> f64 {
        t_min / self.time_scale
    }

    pub fn normalize_channel(&self, channel: usize, value: f64) -> f64 {
        (value - self.channel_mean[channel]) / self.channel_std[channel]
    }

    pub fn denormalize_channel(&self, channel: usize, value: f64) -> f64 {
        value * self.channel_std[channel] + self.channel_mean[channel]
    }
}

/// Architecture of an operator network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub sensor_count: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub latent_width: usize,
    /// Initial degree-of-cure interval the model is meant to cover.
    pub doc0_range: (f64, f64),
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            sensor_count: 32,
            hidden_width: 20,
            hidden_layers: 3,
            latent_width: 20,
            doc0_range: (0.001, 0.3),
        }
    }
}

impl Architecture {
    /// Smaller variant for ensemble inversion, where parameter count
    /// dominates cost.
    pub fn compact() -> Self {
        Architecture {
            hidden_width: 10,
            hidden_layers: 2,
            latent_width: 30,
            ..Architecture::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sensor_count == 0
            || self.hidden_width == 0
            || self.hidden_layers == 0
            || self.latent_width == 0
        {
            return Err(Error::config(
                "architecture dimensions must be positive".to_string(),
            ));
        }
        let (lo, hi) = self.doc0_range;
        if !(0.0..1.0).contains(&lo) || !(0.0..1.0).contains(&hi) || lo > hi {
            return Err(Error::config(format!(
                "doc0 range ({lo}, {hi}) must be ordered within [0, 1)"
            )));
        }
        Ok(())
    }

    fn branch_widths(&self) -> Vec<usize> {
        let mut w = vec![self.sensor_count + 1];
        w.extend(std::iter::repeat(self.hidden_width).take(self.hidden_layers));
        w.push(CHANNELS * self.latent_width);
        w
    }

    fn trunk_widths(&self) -> Vec<usize> {
        let mut w = vec![1];
        w.extend(std::iter::repeat(self.hidden_width).take(self.hidden_layers));
        w.push(self.latent_width);
        w
    }
}

/// One predicted set of cure histories in physical units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    /// Query times, minutes.
    pub times: Vec<f64>,
    pub doc_hat: Vec<f64>,
    pub log_visc_hat: Vec<f64>,
    pub deformation_hat: Vec<f64>,
    /// True when any query time fell outside the normalized interval [0, 1].
    pub extrapolated: bool,
}

/// The full operator network: modulated branch, trunk, and normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilmDeepOnet {
    pub branch: FilmMlp,
    pub trunk: Mlp,
    pub latent_width: usize,
    pub sensor_count: usize,
    pub norm: Normalization,
    pub doc0_range: (f64, f64),
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    model: FilmDeepOnet,
}

impl FilmDeepOnet {
    pub fn new<R: Rng + ?Sized>(
        arch: &Architecture,
        norm: Normalization,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        norm.validate()?;
        let branch = FilmMlp::new(&arch.branch_widths(), 1, rng)?;
        let trunk = Mlp::new(&arch.trunk_widths(), rng)?;
        Ok(FilmDeepOnet {
            branch,
            trunk,
            latent_width: arch.latent_width,
            sensor_count: arch.sensor_count,
            norm,
            doc0_range: arch.doc0_range,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.branch.validate()?;
        self.norm.validate()?;
        if self.branch.mlp.n_in() != self.sensor_count + 1 {
            return Err(Error::config(format!(
                "branch input width {} does not match {} sensors plus one",
                self.branch.mlp.n_in(),
                self.sensor_count
            )));
        }
        if self.branch.mlp.n_out() != CHANNELS * self.latent_width {
            return Err(Error::config(format!(
                "branch output width {} is not {CHANNELS} x latent width {}",
                self.branch.mlp.n_out(),
                self.latent_width
            )));
        }
        if self.trunk.n_in() != 1 || self.trunk.n_out() != self.latent_width {
            return Err(Error::config(format!(
                "trunk maps {} -> {}, expected 1 -> {}",
                self.trunk.n_in(),
                self.trunk.n_out(),
                self.latent_width
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.branch.param_count() + self.trunk.param_count()
    }

    /// Assembles one normalized branch input row from raw sensor readings.
    pub fn branch_input(&self, sensor_temps_c: &[f64], doc0: f64) -> Result<Array1<f64>> {
        if sensor_temps_c.len() != self.sensor_count {
            return Err(Error::data(format!(
                "expected {} sensor temperatures, got {}",
                self.sensor_count,
                sensor_temps_c.len()
            )));
        }
        let mut x = Array1::zeros(self.sensor_count + 1);
        for (i, &t) in sensor_temps_c.iter().enumerate() {
            x[i] = self.norm.normalize_temp(t);
        }
        x[self.sensor_count] = doc0;
        Ok(x)
    }

    /// Branch encoding of one profile, split into the per-channel latent
    /// blocks in the order doc, log-viscosity, deformation.
    pub fn encode_branch(
        &self,
        sensor_temps_c: &[f64],
        doc0: f64,
    ) -> Result<(Array1<f64>, Array1<f64>, Array1<f64>)> {
        let x = self
            .branch_input(sensor_temps_c, doc0)?
            .insert_axis(Axis(0));
        let cond = Array2::from_elem((1, 1), doc0);
        let out = self.branch.forward(&x, &cond)?.remove_axis(Axis(0));
        let g = self.latent_width;
        Ok((
            out.slice(ndarray::s![0..g]).to_owned(),
            out.slice(ndarray::s![g..2 * g]).to_owned(),
            out.slice(ndarray::s![2 * g..3 * g]).to_owned(),
        ))
    }

    /// Trunk basis at one normalized time; the flag reports extrapolation
    /// beyond [0, 1].
    pub fn trunk_basis(&self, t_norm: f64) -> Result<(Array1<f64>, bool)> {
        let out = self
            .trunk
            .forward_one(&Array1::from_elem(1, t_norm))?;
        Ok((out, !(0.0..=1.0).contains(&t_norm)))
    }

    /// Evaluates the full operator at raw physical inputs.
    pub fn predict_trajectory(
        &self,
        sensor_temps_c: &[f64],
        doc0: f64,
        times_min: &[f64],
    ) -> Result<Prediction> {
        let (h_d, h_v, h_e) = self.encode_branch(sensor_temps_c, doc0)?;
        let mut doc_hat = Vec::with_capacity(times_min.len());
        let mut log_visc_hat = Vec::with_capacity(times_min.len());
        let mut deformation_hat = Vec::with_capacity(times_min.len());
        let mut extrapolated = false;
        for &t in times_min {
            let (phi, outside) = self.trunk_basis(self.norm.normalize_time(t))?;
            extrapolated |= outside;
            doc_hat.push(self.norm.denormalize_channel(0, contract(&h_d, &phi)?));
            log_visc_hat.push(self.norm.denormalize_channel(1, contract(&h_v, &phi)?));
            deformation_hat.push(self.norm.denormalize_channel(2, contract(&h_e, &phi)?));
        }
        Ok(Prediction {
            times: times_min.to_vec(),
            doc_hat,
            log_visc_hat,
            deformation_hat,
            extrapolated,
        })
    }

    /// Flattens all parameters into one vector with a fixed layout: branch
    /// dense layers in order (weights row-major, then biases), the modulation
    /// maps (gamma weights, gamma biases, beta weights, beta biases), then
    /// trunk layers in the same per-layer layout.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.branch.mlp.layers {
            out.extend(layer.w.iter());
            out.extend(layer.b.iter());
        }
        let film = &self.branch.film;
        out.extend(film.gamma_w.iter());
        out.extend(film.gamma_b.iter());
        out.extend(film.beta_w.iter());
        out.extend(film.beta_b.iter());
        for layer in &self.trunk.layers {
            out.extend(layer.w.iter());
            out.extend(layer.b.iter());
        }
        out
    }

    /// Writes a flat vector in [`FilmDeepOnet::flatten_params`] layout back
    /// into the network.
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::data(format!(
                "parameter vector length {} does not match model size {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut it = flat.iter().copied();
        let mut fill = |dst: &mut [f64]| {
            for v in dst {
                *v = it.next().unwrap();
            }
        };
        for layer in &mut self.branch.mlp.layers {
            fill(layer.w.as_slice_mut().unwrap());
            fill(layer.b.as_slice_mut().unwrap());
        }
        let film = &mut self.branch.film;
        fill(film.gamma_w.as_slice_mut().unwrap());
        fill(film.gamma_b.as_slice_mut().unwrap());
        fill(film.beta_w.as_slice_mut().unwrap());
        fill(film.beta_b.as_slice_mut().unwrap());
        for layer in &mut self.trunk.layers {
            fill(layer.w.as_slice_mut().unwrap());
            fill(layer.b.as_slice_mut().unwrap());
        }
        Ok(())
    }

    /// Flattens gradients into the [`FilmDeepOnet::flatten_params`] layout.
    pub fn flatten_grads(&self, branch: &FilmMlpGrad, trunk: &[DenseGrad]) -> Result<Vec<f64>> {
        if branch.layers.len() != self.branch.mlp.layers.len()
            || trunk.len() != self.trunk.layers.len()
        {
            return Err(Error::data(
                "gradient layer count does not match the model".to_string(),
            ));
        }
        let mut out = Vec::with_capacity(self.param_count());
        for g in &branch.layers {
            out.extend(g.w.iter());
            out.extend(g.b.iter());
        }
        out.extend(branch.film.gamma_w.iter());
        out.extend(branch.film.gamma_b.iter());
        out.extend(branch.film.beta_w.iter());
        out.extend(branch.film.beta_b.iter());
        for g in trunk {
            out.extend(g.w.iter());
            out.extend(g.b.iter());
        }
        if out.len() != self.param_count() {
            return Err(Error::data(format!(
                "flattened gradient length {} does not match model size {}",
                out.len(),
                self.param_count()
            )));
        }
        Ok(out)
    }

    /// Range of the final branch dense layer (weights then biases) inside the
    /// [`FilmDeepOnet::flatten_params`] vector.
    pub fn last_branch_layer_range(&self) -> std::ops::Range<usize> {
        let before: usize = self
            .branch
            .mlp
            .layers
            .iter()
            .take(self.branch.mlp.layers.len() - 1)
            .map(Dense::param_count)
            .sum();
        let last = self.branch.mlp.layers.last().unwrap().param_count();
        before..before + last
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            model: self.clone(),
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::data(format!("model serialization failed: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let file: ModelFile = serde_json::from_str(&json).map_err(|e| {
            Error::data(format!("cannot parse model file {}: {e}", path.display()))
        })?;
        if file.format != MODEL_FORMAT {
            return Err(Error::data(format!(
                "unexpected model format {:?} in {}",
                file.format,
                path.display()
            )));
        }
        if file.version != MODEL_VERSION {
            return Err(Error::data(format!(
                "unsupported model version {} in {}",
                file.version,
                path.display()
            )));
        }
        file.model.validate()?;
        Ok(file.model)
    }
}

/// Dot-product contraction of a branch block with a trunk basis.
pub fn contract(h: &Array1<f64>, phi: &Array1<f64>) -> Result<f64> {
    if h.len() != phi.len() {
        return Err(Error::data(format!(
            "contraction length mismatch: {} vs {}",
            h.len(),
            phi.len()
        )));
    }
    Ok(h.dot(phi))
}
