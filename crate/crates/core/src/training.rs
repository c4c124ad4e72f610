//! Frozen base network and per-shard adapter training.
//!
//! The base network is a small feed-forward net ending in a single logit.
//! Its weights never change; training only moves the `(B, A)` factors of the
//! adapted layers, by plain mini-batch SGD on binary cross-entropy.
//!
//! Training is a pure function of `(base, ordered samples, config)`. All
//! randomness (adapter init, epoch shuffles) flows from `TrainConfig::seed`,
//! and shard `k` trains with `mix_seed(seed, k)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{init_adapter, Adapter, LayerUpdate};
use crate::dataset::{Dataset, InstructionSample};
use crate::error::{ApaError, Result};
use crate::numerics::{gaussian_matrix, gaussian_vector, mix_seed, softplus, Matrix, SeededRng, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    None,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::None => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `h`.
    fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::None => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vector,
    pub activation: Activation,
    /// Whether an adapter slot attaches to this layer.
    pub adapted: bool,
}

/// Layer sizes and init scales for [`BaseModel::random`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Std of the head weights, in units of `1/sqrt(fan_in)`.
    pub head_scale: f64,
    pub bias_std: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            head_scale: 4.0,
            bias_std: 0.1,
        }
    }
}

/// The frozen network. Hidden layers are adapted; the head is not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseModel {
    layers: Vec<DenseLayer>,
}

impl BaseModel {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| ApaError::Empty("base model has no layers".into()))?;
        if last.weight.rows() != 1 {
            return Err(ApaError::Shape(format!(
                "final layer must emit one logit, emits {}",
                last.weight.rows()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.rows() {
                return Err(ApaError::Shape(format!(
                    "layer {i}: bias {} vs weight {}x{}",
                    l.bias.len(),
                    l.weight.rows(),
                    l.weight.cols()
                )));
            }
            if i > 0 && layers[i - 1].weight.rows() != l.weight.cols() {
                return Err(ApaError::Shape(format!(
                    "layer {i} expects {} inputs, previous layer emits {}",
                    l.weight.cols(),
                    layers[i - 1].weight.rows()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Random "pretrained" network. Hidden layers get `N(0, 1/fan_in)`
    /// weights and are marked adapted; the head gets
    /// `N(0, head_scale²/fan_in)` and stays frozen without a slot.
    pub fn random(arch: &Architecture, seed: u64) -> Result<Self> {
        if arch.input_dim == 0 || arch.hidden.is_empty() || arch.hidden.contains(&0) {
            return Err(ApaError::InvalidArgument(
                "architecture needs input_dim > 0 and at least one nonzero hidden layer".into(),
            ));
        }
        let mut rng = SeededRng::new(seed);
        let mut layers = Vec::with_capacity(arch.hidden.len() + 1);
        let mut fan_in = arch.input_dim;
        for &width in &arch.hidden {
            layers.push(DenseLayer {
                weight: gaussian_matrix(width, fan_in, 1.0 / (fan_in as f64).sqrt(), &mut rng)?,
                bias: bias(width, arch.bias_std, &mut rng),
                activation: arch.activation,
                adapted: true,
            });
            fan_in = width;
        }
        layers.push(DenseLayer {
            weight: gaussian_matrix(1, fan_in, arch.head_scale / (fan_in as f64).sqrt(), &mut rng)?,
            bias: bias(1, arch.bias_std, &mut rng),
            activation: Activation::None,
            adapted: false,
        });
        BaseModel::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    /// Width of the penultimate activation, i.e. the embedding size.
    pub fn hidden_width(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    /// `(d1, d2)` of every adapted layer, in slot order.
    pub fn adapted_shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .filter(|l| l.adapted)
            .map(|l| l.weight.shape())
            .collect()
    }

    /// Penultimate activation with no adapter attached.
    pub fn hidden(&self, x: &[f64]) -> Result<Vector> {
        check_input(self, x)?;
        let mut h = x.to_vec();
        for layer in &self.layers[..self.layers.len() - 1] {
            let mut z = layer.weight.matvec(&h)?;
            for (zi, b) in z.iter_mut().zip(layer.bias.iter()) {
                *zi = layer.activation.apply(*zi + b);
            }
            h = z;
        }
        Ok(Vector(h))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| ApaError::json("serialize base model", e))?;
        fs::write(path, s).map_err(|e| ApaError::io(format!("write {}", path.display()), e))
    }

    pub fn load_json(path: &Path) -> Result<BaseModel> {
        let s = fs::read_to_string(path).map_err(|e| ApaError::io(format!("read {}", path.display()), e))?;
        let m: BaseModel =
            serde_json::from_str(&s).map_err(|e| ApaError::json(format!("parse {}", path.display()), e))?;
        BaseModel::new(m.layers)
    }
}

fn bias(len: usize, std: f64, rng: &mut SeededRng) -> Vector {
    if std > 0.0 {
        gaussian_vector(len, std, rng)
    } else {
        Vector::zeros(len)
    }
}

fn check_input(base: &BaseModel, x: &[f64]) -> Result<()> {
    if x.len() != base.input_dim() {
        return Err(ApaError::Shape(format!(
            "input has {} features, base model expects {}",
            x.len(),
            base.input_dim()
        )));
    }
    Ok(())
}

fn check_update(base: &BaseModel, update: &dyn LayerUpdate) -> Result<()> {
    let shapes = base.adapted_shapes();
    if update.slot_count() != shapes.len() {
        return Err(ApaError::Shape(format!(
            "update has {} slots, base model has {} adapted layers",
            update.slot_count(),
            shapes.len()
        )));
    }
    for (slot, &shape) in shapes.iter().enumerate() {
        if update.slot_shape(slot) != shape {
            return Err(ApaError::Shape(format!(
                "slot {slot}: update is {:?}, base layer is {shape:?}",
                update.slot_shape(slot)
            )));
        }
    }
    Ok(())
}

/// Logit of the base model with an optional update in every adapted layer.
pub fn model_forward(base: &BaseModel, update: Option<&dyn LayerUpdate>, x: &[f64]) -> Result<f64> {
    check_input(base, x)?;
    if let Some(u) = update {
        check_update(base, u)?;
    }
    let mut h = x.to_vec();
    let mut slot = 0;
    for layer in &base.layers {
        let mut z = layer.weight.matvec(&h)?;
        if layer.adapted {
            if let Some(u) = update {
                u.add_delta(slot, &h, &mut z)?;
            }
            slot += 1;
        }
        for (zi, b) in z.iter_mut().zip(layer.bias.iter()) {
            *zi = layer.activation.apply(*zi + b);
        }
        h = z;
    }
    let logit = h[0];
    if !logit.is_finite() {
        return Err(ApaError::NonFinite("model logit".into()));
    }
    Ok(logit)
}

/// Binary cross-entropy of `σ(logit)` against `label`, via softplus.
pub fn bce_loss(logit: f64, label: u8) -> f64 {
    if label == 1 {
        softplus(-logit)
    } else {
        softplus(logit)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init_stddev: f64,
    pub rank: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 40,
            batch_size: 16,
            seed: 0,
            init_stddev: 0.02,
            rank: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| ApaError::Config {
            field: format!("train.{field}"),
            message: message.into(),
        };
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(bad("learning_rate", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be >= 1"));
        }
        if self.init_stddev.is_nan() || self.init_stddev <= 0.0 {
            return Err(bad("init_stddev", "must be > 0"));
        }
        if self.rank == 0 {
            return Err(bad("rank", "must be >= 1"));
        }
        Ok(())
    }

    /// Seed used by shard `k`.
    pub fn shard_seed(&self, shard: usize) -> u64 {
        mix_seed(self.seed, shard as u64)
    }
}

/// Per-sample forward record needed by backprop.
struct Trace {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// `A·x` for each adapted layer, by slot.
    bottlenecks: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

fn forward_traced(base: &BaseModel, adapter: &Adapter, x: &[f64]) -> Result<Trace> {
    let n = base.layers.len();
    let mut trace = Trace {
        inputs: Vec::with_capacity(n),
        bottlenecks: Vec::with_capacity(adapter.layers().len()),
        pre: Vec::with_capacity(n),
        post: Vec::with_capacity(n),
    };
    let mut h = x.to_vec();
    let mut slot = 0;
    for layer in &base.layers {
        let mut z = layer.weight.matvec(&h)?;
        if layer.adapted {
            let al = &adapter.layers()[slot];
            let u = al.a().matvec(&h)?;
            al.b().matvec_add_into(&u, &mut z)?;
            trace.bottlenecks.push(u);
            slot += 1;
        }
        for (zi, b) in z.iter_mut().zip(layer.bias.iter()) {
            *zi += b;
        }
        let out: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
        trace.inputs.push(std::mem::replace(&mut h, out.clone()));
        trace.pre.push(z);
        trace.post.push(out);
    }
    Ok(trace)
}

/// Adds `scale · ∂loss/∂(B, A)` for one sample into `grad`; returns the loss.
fn accumulate_gradient(
    base: &BaseModel,
    adapter: &Adapter,
    sample: &InstructionSample,
    scale: f64,
    grad: &mut Adapter,
) -> Result<f64> {
    let trace = forward_traced(base, adapter, &sample.features)?;
    let logit = trace.post[base.layers.len() - 1][0];
    let loss = bce_loss(logit, sample.label);
    // dL/dlogit for BCE on a sigmoid output.
    let mut upstream = vec![crate::numerics::sigmoid(logit) - f64::from(sample.label)];
    let mut slot = adapter.layers().len();
    for (li, layer) in base.layers.iter().enumerate().rev() {
        let delta: Vec<f64> = upstream
            .iter()
            .zip(&trace.pre[li])
            .zip(&trace.post[li])
            .map(|((&g, &z), &h)| g * layer.activation.derivative(z, h))
            .collect();
        let x = &trace.inputs[li];
        let mut g_bottleneck = None;
        if layer.adapted {
            slot -= 1;
            let al = &adapter.layers()[slot];
            let gl = &mut grad.layers_mut()[slot];
            gl.b_mut().add_outer(scale, &delta, &trace.bottlenecks[slot]);
            let mut gb = vec![0.0; al.rank()];
            al.b().matvec_transpose_into(&delta, &mut gb)?;
            gl.a_mut().add_outer(scale, &gb, x);
            g_bottleneck = Some(gb);
        }
        if li > 0 {
            let mut dx = vec![0.0; x.len()];
            layer.weight.matvec_transpose_into(&delta, &mut dx)?;
            if let Some(gb) = g_bottleneck {
                let mut extra = vec![0.0; x.len()];
                adapter.layers()[slot].a().matvec_transpose_into(&gb, &mut extra)?;
                for (d, e) in dx.iter_mut().zip(&extra) {
                    *d += e;
                }
            }
            upstream = dx;
        }
    }
    Ok(loss)
}

/// Gradient of the single-sample loss with respect to every adapter entry.
pub fn analytic_gradient(base: &BaseModel, adapter: &Adapter, sample: &InstructionSample) -> Result<Adapter> {
    check_update(base, adapter)?;
    check_input(base, &sample.features)?;
    let mut grad = adapter.zeros_like();
    accumulate_gradient(base, adapter, sample, 1.0, &mut grad)?;
    Ok(grad)
}

/// Mean BCE of `update` over `data`.
pub fn mean_loss(base: &BaseModel, update: Option<&dyn LayerUpdate>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(ApaError::Empty("no samples to score".into()));
    }
    let mut total = 0.0;
    for s in data {
        total += bce_loss(model_forward(base, update, &s.features)?, s.label);
    }
    Ok(total / data.len() as f64)
}

/// Trains a fresh adapter on `data` in order, with seed `cfg.seed`.
pub fn train_adapter(base: &BaseModel, data: &Dataset, cfg: &TrainConfig) -> Result<Adapter> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ApaError::Empty("cannot train on an empty shard".into()));
    }
    if data.dim() != base.input_dim() {
        return Err(ApaError::Shape(format!(
            "data has {} features, base model expects {}",
            data.dim(),
            base.input_dim()
        )));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let init_seed = rng.next_u64();
    let mut adapter = init_adapter(&base.adapted_shapes(), cfg.rank, cfg.init_stddev, init_seed)?;
    adapter.seed = cfg.seed;
    if cfg.learning_rate == 0.0 || cfg.epochs == 0 {
        return Ok(adapter);
    }

    let samples = data.samples();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut grad = adapter.zeros_like();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            for l in grad.layers_mut() {
                l.b_mut().data_mut().fill(0.0);
                l.a_mut().data_mut().fill(0.0);
            }
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                accumulate_gradient(base, &adapter, &samples[i], scale, &mut grad)?;
            }
            for (p, g) in adapter.layers_mut().iter_mut().zip(grad.layers()) {
                p.b_mut().add_scaled(-cfg.learning_rate, g.b())?;
                p.a_mut().add_scaled(-cfg.learning_rate, g.a())?;
            }
        }
    }
    Ok(adapter)
}

/// Trains shard `shard`'s adapter with its derived seed.
pub fn train_shard(base: &BaseModel, shard_data: &Dataset, cfg: &TrainConfig, shard: usize) -> Result<Adapter> {
    let shard_cfg = TrainConfig {
        seed: cfg.shard_seed(shard),
        ..cfg.clone()
    };
    let mut adapter = train_adapter(base, shard_data, &shard_cfg)?;
    adapter.shard = Some(shard);
    Ok(adapter)
}

fn entry_mut(ad: &mut Adapter, slot: usize, is_b: bool, i: usize) -> &mut f64 {
    let l = &mut ad.layers_mut()[slot];
    let m = if is_b { l.b_mut() } else { l.a_mut() };
    &mut m.data_mut()[i]
}

/// Number of coordinates [`grad_check`] probes.
pub const GRAD_CHECK_COORDS: usize = 24;

/// Compares analytic gradients with central differences on random `(B, A)`
/// coordinates and returns the worst relative error.
///
/// Relative error is `|g - ĝ| / max(|g|, |ĝ|, 1e-6)`; the floor keeps
/// vanishing gradients from dividing noise by zero.
pub fn grad_check(base: &BaseModel, adapter: &Adapter, sample: &InstructionSample, h: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(ApaError::InvalidArgument(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let analytic = analytic_gradient(base, adapter, sample)?;
    let loss_at =
        |ad: &Adapter| -> Result<f64> { Ok(bce_loss(model_forward(base, Some(ad), &sample.features)?, sample.label)) };

    // (slot, is_b, flat index)
    let mut coords = Vec::new();
    for (slot, l) in adapter.layers().iter().enumerate() {
        coords.extend((0..l.b().data().len()).map(|i| (slot, true, i)));
        coords.extend((0..l.a().data().len()).map(|i| (slot, false, i)));
    }
    let mut rng = SeededRng::new(mix_seed(sample.id, adapter.seed));
    rng.shuffle(&mut coords);
    coords.truncate(GRAD_CHECK_COORDS);

    let mut worst: f64 = 0.0;
    let mut probe = adapter.clone();
    for (slot, is_b, i) in coords {
        let original = *entry_mut(&mut probe, slot, is_b, i);
        *entry_mut(&mut probe, slot, is_b, i) = original + h;
        let up = loss_at(&probe)?;
        *entry_mut(&mut probe, slot, is_b, i) = original - h;
        let down = loss_at(&probe)?;
        *entry_mut(&mut probe, slot, is_b, i) = original;
        let numeric = (up - down) / (2.0 * h);
        let g = {
            let l = &analytic.layers()[slot];
            if is_b {
                l.b().data()[i]
            } else {
                l.a().data()[i]
            }
        };
        let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}
