//! Multilayer perceptron with `K+1` output logits, hand-derived backprop,
//! SGD with momentum and a step learning-rate schedule, and the binary
//! checkpoint format.
//!
//! Hidden layers use ReLU; the output layer is linear. Weights are stored
//! `in x out` so a forward pass is `a · W + b` on row-major batches.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng};

/// One affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `in x out`.
    pub weights: Matrix,
    /// `1 x out`.
    pub biases: Matrix,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Matrix::zeros(fan_in, fan_out),
            biases: Matrix::zeros(1, fan_out),
        }
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.weights.rows() == other.weights.rows()
            && self.weights.cols() == other.weights.cols()
            && self.biases.cols() == other.biases.cols()
    }
}

/// Parameter gradients, one [`Layer`] per model layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.biases.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `rows x (K+1)`.
    pub logits: Matrix,
    /// Activations feeding the output layer, `rows x last_hidden`.
    pub penultimate: Matrix,
}

/// Layer inputs recorded by [`MlpModel::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    dims: Vec<usize>,
    activations: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    layers: Vec<Layer>,
}

impl MlpModel {
    /// He-uniform initialized model. `layer_dims` is `[d, hidden.., K+1]`.
    pub fn new(layer_dims: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut model = Self::zeros(layer_dims)?;
        for layer in &mut model.layers {
            let fan_in = layer.weights.rows();
            let limit = (6.0 / fan_in as f64).sqrt();
            for w in layer.weights.as_mut_slice() {
                *w = (2.0 * rng.uniform() - 1.0) * limit;
            }
        }
        Ok(model)
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        validate_dims(layer_dims)?;
        let layers = layer_dims
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("model needs at least one layer".into()));
        }
        let mut dims = vec![layers[0].weights.rows()];
        for (i, l) in layers.iter().enumerate() {
            if l.weights.rows() != *dims.last().unwrap()
                || l.biases.rows() != 1
                || l.biases.cols() != l.weights.cols()
            {
                return Err(Error::Shape(format!("layer {i} does not chain")));
            }
            if !l.weights.is_finite() || !l.biases.is_finite() {
                return Err(Error::InvalidInput(format!("layer {i} has non-finite parameters")));
            }
            dims.push(l.weights.cols());
        }
        validate_dims(&dims)?;
        Ok(Self {
            layer_dims: dims,
            layers,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    /// Number of ID classes `K` (the output has `K+1` logits).
    pub fn num_classes(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 1] - 1
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.biases.is_finite())
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardOutput> {
        self.forward_cached(x).map(|(out, _)| out)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(ForwardOutput, ForwardCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = current.matmul(&layer.weights)?;
            let b = layer.biases.as_slice();
            for r in 0..next.rows() {
                for (v, &bias) in next.row_mut(r).iter_mut().zip(b) {
                    *v += bias;
                    if i < last && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            activations.push(std::mem::replace(&mut current, next));
        }
        let out = ForwardOutput {
            logits: current,
            penultimate: activations[last].clone(),
        };
        Ok((
            out,
            ForwardCache {
                dims: self.layer_dims.clone(),
                activations,
            },
        ))
    }

    /// Gradients of a scalar loss given `d loss / d logits` for the rows
    /// recorded in `cache`.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Matrix) -> Result<Gradients> {
        if cache.dims != self.layer_dims || cache.activations.len() != self.layers.len() {
            return Err(Error::State(
                "forward cache was produced by a different model".into(),
            ));
        }
        let rows = cache.activations[0].rows();
        if grad_logits.rows() != rows || grad_logits.cols() != *self.layer_dims.last().unwrap() {
            return Err(Error::State(format!(
                "gradient is {}x{}, cached forward pass is {}x{}",
                grad_logits.rows(),
                grad_logits.cols(),
                rows,
                self.layer_dims.last().unwrap()
            )));
        }
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_logits.clone();
        for i in (0..self.layers.len()).rev() {
            let input = &cache.activations[i];
            let weights = input.t_matmul(&delta)?;
            let mut biases = Matrix::zeros(1, delta.cols());
            for r in 0..delta.rows() {
                for (b, &d) in biases.as_mut_slice().iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
            if i > 0 {
                let mut prev = delta.matmul_t(&self.layers[i].weights)?;
                // ReLU: the recorded input is the post-activation, positive iff active.
                for (g, &a) in prev.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
                delta = prev;
            }
            grads.push(Layer { weights, biases });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Shape("layer_dims needs input and output sizes".into()));
    }
    if dims.contains(&0) {
        return Err(Error::Shape(format!("zero-width layer in {dims:?}")));
    }
    if *dims.last().unwrap() < 2 {
        return Err(Error::Shape(
            "output must have K+1 >= 2 logits (K classes plus the absent category)".into(),
        ));
    }
    Ok(())
}

/// SGD with momentum, L2 weight decay folded into the gradient and a
/// multi-step learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    velocity: Vec<Layer>,
}

impl SgdState {
    pub fn new(
        model: &MlpModel,
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
        milestones: Vec<usize>,
        decay_factor: f64,
    ) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {learning_rate} must be >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {weight_decay} must be >= 0")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            milestones,
            decay_factor,
            velocity: model
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weights.rows(), l.weights.cols()))
                .collect(),
        })
    }

    pub fn velocity(&self) -> &[Layer] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Layer>) -> Result<()> {
        if velocity.len() != self.velocity.len()
            || velocity.iter().zip(&self.velocity).any(|(a, b)| !a.same_shape(b))
        {
            return Err(Error::Shape("velocity buffers do not match the model".into()));
        }
        self.velocity = velocity;
        Ok(())
    }

    /// Initial rate times `decay_factor` per milestone already reached.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.learning_rate * self.decay_factor.powi(passed as i32)
    }

    /// `v ← μ·v + g + λ·θ`, `θ ← θ − lr·v`.
    pub fn step(&mut self, model: &mut MlpModel, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.layers.len() != model.layers.len()
            || grads
                .layers
                .iter()
                .zip(&model.layers)
                .any(|(g, l)| !g.same_shape(l))
        {
            return Err(Error::Shape("gradient blocks do not match the model".into()));
        }
        if !grads.is_finite() {
            return Err(Error::Divergence {
                at: "sgd step".into(),
                detail: "non-finite gradient".into(),
            });
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((layer, grad), vel) in model
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.velocity)
        {
            for (p, (g, v)) in [
                (&mut layer.weights, (&grad.weights, &mut vel.weights)),
                (&mut layer.biases, (&grad.biases, &mut vel.biases)),
            ] {
                for ((theta, &gi), vi) in p
                    .as_mut_slice()
                    .iter_mut()
                    .zip(g.as_slice())
                    .zip(v.as_mut_slice())
                {
                    *vi = mu * *vi + gi + wd * *theta;
                    *theta -= lr * *vi;
                }
            }
        }
        if !model.is_finite() {
            return Err(Error::Divergence {
                at: "sgd step".into(),
                detail: "parameters became non-finite".into(),
            });
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 7] = b"DOSCKPT";
const CHECKPOINT_VERSION: u8 = b'1';

/// Serialized training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MlpModel,
    /// Momentum buffers, same shapes as the model layers.
    pub velocity: Vec<Layer>,
    pub epoch: u64,
    pub seed: u64,
    pub config_hash: u64,
}

impl Checkpoint {
    /// Layout: `DOSCKPT1`, u32 dim count, u32 dims, per-layer weights then
    /// biases (f64), the same for velocity buffers, u64 epoch, u64 seed,
    /// u64 config hash. All little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        let dims = self.model.layer_dims();
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for layers in [self.model.layers(), &self.velocity[..]] {
            for l in layers {
                for v in l.weights.as_slice().iter().chain(l.biases.as_slice()) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(8).map_err(&err)?;
        if &magic[..7] != CHECKPOINT_MAGIC {
            return Err(err("not a checkpoint file (bad magic)".into()));
        }
        if magic[7] != CHECKPOINT_VERSION {
            return Err(err(format!(
                "unsupported checkpoint version '{}' (expected '{}')",
                magic[7] as char, CHECKPOINT_VERSION as char
            )));
        }
        let n_dims = r.u32().map_err(&err)? as usize;
        if !(2..=64).contains(&n_dims) {
            return Err(err(format!("implausible layer count {n_dims}")));
        }
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            dims.push(r.u32().map_err(&err)? as usize);
        }
        validate_dims(&dims).map_err(|e| err(e.to_string()))?;
        let expected: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>() * 2 * 8 + 24;
        if bytes.len() - r.pos != expected {
            return Err(err(format!(
                "expected {} bytes of parameters and trailer, found {}",
                expected,
                bytes.len() - r.pos
            )));
        }
        let read_layers = |r: &mut ByteReader| -> Result<Vec<Layer>> {
            let mut layers = Vec::new();
            for w in dims.windows(2) {
                let weights = Matrix::from_vec(w[0], w[1], r.f64s(w[0] * w[1]).map_err(&err)?)
                    .map_err(|e| err(e.to_string()))?;
                let biases = Matrix::from_vec(1, w[1], r.f64s(w[1]).map_err(&err)?)
                    .map_err(|e| err(e.to_string()))?;
                layers.push(Layer { weights, biases });
            }
            Ok(layers)
        };
        let params = read_layers(&mut r)?;
        let velocity = read_layers(&mut r)?;
        let epoch = r.u64().map_err(&err)?;
        let seed = r.u64().map_err(&err)?;
        let config_hash = r.u64().map_err(&err)?;
        Ok(Self {
            model: MlpModel::from_layers(params).map_err(|e| err(e.to_string()))?,
            velocity,
            epoch,
            seed,
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated at byte offset {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
