//! Dense feed-forward networks with tanh hidden layers.
//!
//! All forward and backward passes are batched: inputs are `(batch, features)`
//! matrices and gradients are accumulated over the batch. Single-sample
//! helpers wrap the batched path with a batch of one.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One dense layer, `y = W x + b`, with `w` stored as `(out, in)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    /// Glorot-uniform initialization over `[-s, s]` with
    /// `s = sqrt(6 / (in + out))`; biases start at zero.
    pub fn glorot<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let s = (6.0 / (n_in + n_out) as f64).sqrt();
        let w = Array2::from_shape_fn((n_out, n_in), |_| rng.random_range(-s..s));
        Dense {
            w,
            b: Array1::zeros(n_out),
        }
    }

    pub fn n_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.w.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// `x` is `(batch, n_in)`; returns `(batch, n_out)`.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }
}

/// Gradients for one dense layer, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct DenseGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl DenseGrad {
    pub fn zeros_like(layer: &Dense) -> Self {
        DenseGrad {
            w: Array2::zeros(layer.w.dim()),
            b: Array1::zeros(layer.b.dim()),
        }
    }
}

/// Multilayer perceptron: tanh after every layer except the last, which is
/// linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer activations retained by [`Mlp::forward_cached`] for the backward
/// pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// `inputs[l]` is the input to layer `l`, `(batch, n_in_l)`.
    pub inputs: Vec<Array2<f64>>,
    /// `outputs[l]` is the post-activation output of layer `l`.
    pub outputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// Builds an MLP with the given layer widths, e.g. `[4, 20, 20, 3]`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config(format!(
                "an MLP needs at least two widths, got {}",
                widths.len()
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::config("layer widths must be positive".to_string()));
        }
        let layers = widths
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], rng))
            .collect();
        Ok(Mlp { layers })
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().unwrap().n_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.n_in() {
            return Err(Error::data(format!(
                "network expects {} input features, got {}",
                self.n_in(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Batched forward pass, `(batch, n_in)` to `(batch, n_out)`.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.1)
    }

    /// Forward pass that also returns the cache needed by [`Mlp::backward`].
    pub fn forward_cached(&self, x: &Array2<f64>) -> Result<(MlpCache, Array2<f64>)> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut outputs = Vec::with_capacity(n);
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            inputs.push(h.clone());
            let mut z = layer.forward(&h);
            if l + 1 < n {
                z.mapv_inplace(f64::tanh);
            }
            outputs.push(z.clone());
            h = z;
        }
        Ok((MlpCache { inputs, outputs }, h))
    }

    /// Backpropagates `grad_out` `(batch, n_out)` through the cached forward
    /// pass; returns per-layer parameter gradients and the gradient with
    /// respect to the input batch.
    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_out: &Array2<f64>,
    ) -> Result<(Vec<DenseGrad>, Array2<f64>)> {
        let n = self.layers.len();
        if cache.inputs.len() != n || cache.outputs.len() != n {
            return Err(Error::data(format!(
                "forward cache holds {} layers, network has {n}",
                cache.inputs.len()
            )));
        }
        if grad_out.dim() != cache.outputs[n - 1].dim() {
            return Err(Error::data(format!(
                "output gradient shape {:?} does not match cached output {:?}",
                grad_out.dim(),
                cache.outputs[n - 1].dim()
            )));
        }
        let mut grads: Vec<DenseGrad> =
            self.layers.iter().map(DenseGrad::zeros_like).collect();
        let mut delta = grad_out.clone();
        for l in (0..n).rev() {
            if l + 1 < n {
                // Hidden layers cache post-tanh values, so tanh' = 1 - y^2.
                delta = &delta * &cache.outputs[l].mapv(|y| 1.0 - y * y);
            }
            if cache.inputs[l].dim() != (delta.nrows(), self.layers[l].n_in()) {
                return Err(Error::data(format!(
                    "cached input shape {:?} does not match layer {l}",
                    cache.inputs[l].dim()
                )));
            }
            grads[l].w = delta.t().dot(&cache.inputs[l]);
            grads[l].b = delta.sum_axis(Axis(0));
            delta = delta.dot(&self.layers[l].w);
        }
        Ok((grads, delta))
    }

    /// Convenience forward pass for one sample.
    pub fn forward_one(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        let batch = x.clone().insert_axis(Axis(0));
        Ok(self.forward(&batch)?.remove_axis(Axis(0)))
    }
}
