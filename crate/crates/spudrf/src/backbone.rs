//! Fully-connected feature backbone.
//!
//! Maps a raw input vector to the split-activation vector consumed by the
//! forest. Hidden layers are sigmoid, the output layer is identity, and all
//! gradients are computed analytically. The struct tracks a version counter
//! so a forward cache taken before a parameter update cannot be replayed
//! through `backward` afterwards.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{salt, stream};

/// Elementwise nonlinearity of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Identity,
}

impl Activation {
    /// Apply the nonlinearity to one pre-activation.
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the *output* value, which is all the
    /// backward pass keeps around: sigmoid' = a(1-a), identity' = 1.
    pub fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One dense layer: `out = act(w * in + b)`, weights stored row-per-output.
#[derive(Debug, Clone)]
pub struct Layer {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }
}

/// The whole backbone: an ordered stack of layers plus a version counter
/// bumped on every parameter write.
#[derive(Debug, Clone)]
pub struct BackboneParams {
    layers: Vec<Layer>,
    version: u64,
}

/// Per-sample activations recorded by [`BackboneParams::forward`], needed to
/// run [`BackboneParams::backward`]. `activations[0]` is the input itself.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    /// Output of the final layer (the feature vector).
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds >= 1 vector")
    }
}

/// Gradients with the same shape as the parameters they belong to.
#[derive(Debug, Clone)]
pub struct BackboneGrads {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl BackboneGrads {
    /// Zero gradients shaped like `params`.
    pub fn zeros_like(params: &BackboneParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| LayerGrads {
                weights: vec![vec![0.0; l.in_dim()]; l.out_dim()],
                bias: vec![0.0; l.out_dim()],
            })
            .collect();
        BackboneGrads { layers }
    }

    /// Elementwise `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &BackboneGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (ra, rb) in a.weights.iter_mut().zip(&b.weights) {
                for (wa, wb) in ra.iter_mut().zip(rb) {
                    *wa += wb;
                }
            }
            for (ba, bb) in a.bias.iter_mut().zip(&b.bias) {
                *ba += bb;
            }
        }
    }

    /// Elementwise scale by `c`.
    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            for row in &mut l.weights {
                for w in row {
                    *w *= c;
                }
            }
            for b in &mut l.bias {
                *b *= c;
            }
        }
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().flatten().all(|w| w.is_finite())
                && l.bias.iter().all(|b| b.is_finite())
        })
    }
}

impl BackboneParams {
    /// Build from explicit layers, validating that they compose.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("backbone needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.out_dim() == 0 || layer.in_dim() == 0 {
                return Err(Error::Config(format!("layer {i} has a zero dimension")));
            }
            if layer.weights.len() != layer.out_dim() {
                return Err(Error::Config(format!(
                    "layer {i}: {} weight rows for {} outputs",
                    layer.weights.len(),
                    layer.out_dim()
                )));
            }
            let in_dim = layer.in_dim();
            if layer.weights.iter().any(|row| row.len() != in_dim) {
                return Err(Error::Config(format!("layer {i} has ragged weight rows")));
            }
            let finite = layer.weights.iter().flatten().all(|w| w.is_finite())
                && layer.bias.iter().all(|b| b.is_finite());
            if !finite {
                return Err(Error::Numeric(format!(
                    "layer {i} contains non-finite parameters"
                )));
            }
            if i > 0 && layers[i - 1].out_dim() != in_dim {
                return Err(Error::Config(format!(
                    "layer {i} expects {} inputs but layer {} emits {}",
                    in_dim,
                    i - 1,
                    layers[i - 1].out_dim()
                )));
            }
        }
        Ok(BackboneParams { layers, version: 0 })
    }

    /// Random initialization: sigmoid hidden layers, identity output, weights
    /// uniform in `[-s, s]` with `s = sqrt(6 / (fan_in + fan_out))`, zero
    /// biases. Deterministic in `seed`.
    pub fn init(input_dim: usize, hidden: &[usize], feature_dim: usize, seed: u64) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(feature_dim);
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("backbone layer widths must be >= 1".into()));
        }
        let mut rng = stream(seed, salt::BACKBONE_INIT, 0);
        let last = dims.len() - 2;
        let layers = (0..dims.len() - 1)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = (0..fan_out)
                    .map(|_| (0..fan_in).map(|_| rng.random_range(-s..s)).collect())
                    .collect();
                Layer {
                    weights,
                    bias: vec![0.0; fan_out],
                    activation: if i == last {
                        Activation::Identity
                    } else {
                        Activation::Sigmoid
                    },
                }
            })
            .collect();
        BackboneParams::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_dim)
    }

    /// Monotone counter identifying the current parameter values.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Compute the feature vector for `input`, returning it with the cache
    /// needed for a later backward pass.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if input.len() != self.input_dim() {
            return Err(Error::Usage(format!(
                "input has {} entries, backbone expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        if !input.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("non-finite value in backbone input".into()));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        for layer in &self.layers {
            let prev = activations.last().expect("non-empty");
            let mut out = Vec::with_capacity(layer.out_dim());
            for (row, b) in layer.weights.iter().zip(&layer.bias) {
                let mut z = *b;
                for (w, a) in row.iter().zip(prev) {
                    z += w * a;
                }
                out.push(layer.activation.apply(z));
            }
            activations.push(out);
        }
        let features = activations.last().expect("non-empty").clone();
        Ok((
            features,
            ForwardCache {
                version: self.version,
                activations,
            },
        ))
    }

    /// Backpropagate `grad_output` (d objective / d feature vector) through
    /// the cached activations, returning parameter gradients.
    pub fn backward(&self, grad_output: &[f64], cache: &ForwardCache) -> Result<BackboneGrads> {
        if cache.version != self.version {
            return Err(Error::Usage(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        if grad_output.len() != self.feature_dim() {
            return Err(Error::Usage(format!(
                "gradient has {} entries, feature vector has {}",
                grad_output.len(),
                self.feature_dim()
            )));
        }
        let mut grads = BackboneGrads::zeros_like(self);
        let mut upstream = grad_output.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let out_act = &cache.activations[l + 1];
            let in_act = &cache.activations[l];
            // d objective / d pre-activation, via the output-form derivative.
            let dz: Vec<f64> = upstream
                .iter()
                .zip(out_act)
                .map(|(g, &a)| g * layer.activation.derivative_from_output(a))
                .collect();
            let lg = &mut grads.layers[l];
            for (j, &dzj) in dz.iter().enumerate() {
                lg.bias[j] += dzj;
                for (w, &a) in lg.weights[j].iter_mut().zip(in_act) {
                    *w += dzj * a;
                }
            }
            if l > 0 {
                let mut next = vec![0.0; in_act.len()];
                for (j, &dzj) in dz.iter().enumerate() {
                    for (i, &w) in layer.weights[j].iter().enumerate() {
                        next[i] += w * dzj;
                    }
                }
                upstream = next;
            }
        }
        Ok(grads)
    }

    /// One SGD step `p -= lr * g`. Rejects non-finite gradients without
    /// touching any parameter; a zero learning rate is a valid no-op step.
    pub fn sgd_step(&mut self, grads: &BackboneGrads, learning_rate: f64) -> Result<()> {
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {learning_rate}"
            )));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Usage(
                "gradient shape does not match backbone".into(),
            ));
        }
        if !grads.is_finite() {
            return Err(Error::Numeric(
                "non-finite gradient; parameters left unchanged".into(),
            ));
        }
        for (layer, lg) in self.layers.iter_mut().zip(&grads.layers) {
            if lg.bias.len() != layer.bias.len() || lg.weights.len() != layer.weights.len() {
                return Err(Error::Usage(
                    "gradient shape does not match backbone".into(),
                ));
            }
            for (row, grow) in layer.weights.iter_mut().zip(&lg.weights) {
                for (w, g) in row.iter_mut().zip(grow) {
                    *w -= learning_rate * g;
                }
            }
            for (b, g) in layer.bias.iter_mut().zip(&lg.bias) {
                *b -= learning_rate * g;
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Total number of scalar parameters (weights + biases).
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.out_dim() * l.in_dim() + l.out_dim())
            .sum()
    }

    /// Read parameter `i` in flat order (per layer: weights row-major, then
    /// biases). Used by finite-difference checks.
    pub fn get_param(&self, mut i: usize) -> f64 {
        for l in &self.layers {
            let nw = l.out_dim() * l.in_dim();
            if i < nw {
                return l.weights[i / l.in_dim()][i % l.in_dim()];
            }
            i -= nw;
            if i < l.out_dim() {
                return l.bias[i];
            }
            i -= l.out_dim();
        }
        panic!("parameter index out of range");
    }

    /// Write parameter `i` in flat order; bumps the version.
    pub fn set_param(&mut self, mut i: usize, value: f64) {
        self.version += 1;
        for l in &mut self.layers {
            let nw = l.out_dim() * l.in_dim();
            if i < nw {
                let in_dim = l.in_dim();
                l.weights[i / in_dim][i % in_dim] = value;
                return;
            }
            i -= nw;
            if i < l.out_dim() {
                l.bias[i] = value;
                return;
            }
            i -= l.out_dim();
        }
        panic!("parameter index out of range");
    }
}
