//! Dense feed-forward networks with explicit backpropagation.
//!
//! The last layer emits margins; the softmax lives in the loss so bottom
//! models of a split network and terminal classifiers share one engine.

pub(crate) mod train;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use train::{
    batch_schedule, derive_seed, predict, predict_proba, softmax_cross_entropy, train, train_centralized, train_model,
    TrainConfig, TrainOutcome,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    GlorotUniform,
    HeNormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_width: usize,
    pub layers: Vec<LayerSpec>,
    pub init: Init,
    pub seed: u64,
}

impl MlpSpec {
    /// `hidden` layers of `width` units with `activation`, followed by an
    /// identity layer of `output` margins.
    pub fn classifier(input_width: usize, hidden: usize, width: usize, activation: Activation, output: usize) -> Self {
        let mut layers = vec![LayerSpec { width, activation }; hidden];
        layers.push(LayerSpec { width: output, activation: Activation::Identity });
        let init = if activation == Activation::Relu { Init::HeNormal } else { Init::GlorotUniform };
        Self { input_width, layers, init, seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(self.input_width, |l| l.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        if self.input_width == 0 || self.layers.iter().any(|l| l.width == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Weights are stored `fan_in × fan_out` so a batch forward is `X·W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub spec: MlpSpec,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Inputs, pre-activations and outputs of every layer for one batch.
#[derive(Clone, Debug)]
pub struct Activations {
    pub input: Array2<f64>,
    pub pre: Vec<Array2<f64>>,
    pub post: Vec<Array2<f64>>,
}

impl Activations {
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().expect("validated spec has a layer")
    }
}

/// Parameter gradients, shaped like the model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpModel {
    /// Seeded initialization; biases start at zero.
    pub fn init(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut weights = Vec::with_capacity(spec.layers.len());
        let mut biases = Vec::with_capacity(spec.layers.len());
        let mut fan_in = spec.input_width;
        for layer in &spec.layers {
            let fan_out = layer.width;
            let w = match spec.init {
                Init::GlorotUniform => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                    Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(&mut rng))
                }
                Init::HeNormal => {
                    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(&mut rng))
                }
            };
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
            fan_in = fan_out;
        }
        Ok(Self { spec: spec.clone(), weights, biases })
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    pub fn n_parameters(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Activations> {
        if x.ncols() != self.input_width() {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_width()
            )));
        }
        let mut pre = Vec::with_capacity(self.n_layers());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(self.n_layers());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let a_in = if l == 0 { x } else { post[l - 1].view() };
            let z = a_in.dot(w) + b;
            let act = self.spec.layers[l].activation;
            let a = z.mapv(|v| act.apply(v));
            pre.push(z);
            post.push(a);
        }
        Ok(Activations { input: x.to_owned(), pre, post })
    }

    /// Output margins only.
    pub fn outputs(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.post.pop().expect("validated spec has a layer"))
    }

    /// Backpropagates `upstream = ∂L/∂output` through the recorded batch.
    /// Returns the parameter gradients and `∂L/∂input`.
    pub fn backward(&self, acts: &Activations, upstream: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        if acts.post.len() != self.n_layers() {
            return Err(Error::Shape(format!("{} recorded layers, model has {}", acts.post.len(), self.n_layers())));
        }
        if upstream.dim() != acts.output().dim() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.dim(),
                acts.output().dim()
            )));
        }
        let n = self.n_layers();
        let mut gw = vec![Array2::zeros((0, 0)); n];
        let mut gb = vec![Array1::zeros(0); n];
        let mut delta = upstream.to_owned();
        for l in (0..n).rev() {
            let act = self.spec.layers[l].activation;
            ndarray::Zip::from(&mut delta)
                .and(&acts.pre[l])
                .and(&acts.post[l])
                .for_each(|d, &z, &a| *d *= act.derivative(z, a));
            let a_in = if l == 0 { acts.input.view() } else { acts.post[l - 1].view() };
            gw[l] = a_in.t().dot(&delta);
            gb[l] = delta.sum_axis(Axis(0));
            delta = delta.dot(&self.weights[l].t());
        }
        Ok((Gradients { weights: gw, biases: gb }, delta))
    }

    /// `θ ← θ − lr·∇θ`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            w.scaled_add(-lr, g);
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            b.scaled_add(-lr, g);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(s)?;
        model.spec.validate()?;
        let mut fan_in = model.spec.input_width;
        if model.weights.len() != model.spec.layers.len() || model.biases.len() != model.spec.layers.len() {
            return Err(Error::Shape("parameter count does not match layer count".into()));
        }
        for ((w, b), layer) in model.weights.iter().zip(&model.biases).zip(&model.spec.layers) {
            if w.dim() != (fan_in, layer.width) || b.len() != layer.width {
                return Err(Error::Shape(format!("layer of width {} has weights {:?}", layer.width, w.dim())));
            }
            fan_in = layer.width;
        }
        Ok(model)
    }
}
