//! Feed-forward network with hand-written backpropagation.
//!
//! Weights of layer `l` are stored as an `out × in` row-major [`Tensor`],
//! biases as a length-`out` tensor. The flat parameter order used by
//! [`ParameterSet::flatten`] is layer by layer, weights first, then bias.

use serde::{Deserialize, Serialize};

use crate::data::{sample_minibatch, Dataset, MiniBatch, Shard};
use crate::error::{FflError, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Layer widths from input to output; hidden layers use `activation`, the
/// output layer produces raw logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = MlpSpec {
            layer_sizes,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(FflError::config("layer_sizes", "need an input and an output size"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(FflError::config("layer_sizes", "every layer needs at least one unit"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total scalar count `d`.
    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            weights: Tensor::zeros(vec![fan_out, fan_in]),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    fn fan_in(&self) -> usize {
        self.weights.shape()[1]
    }

    fn fan_out(&self) -> usize {
        self.weights.shape()[0]
    }
}

/// A contiguous row-major matrix inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Layered tensors with the layout described at module level. Used both for
/// model weights and for gradients / momentum buffers of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub layers: Vec<Layer>,
}

/// Gradients share the parameter layout.
pub type GradientBundle = ParameterSet;

impl ParameterSet {
    pub fn zeros(spec: &MlpSpec) -> Self {
        ParameterSet {
            layers: spec
                .layer_sizes
                .windows(2)
                .map(|w| Layer::zeros(w[0], w[1]))
                .collect(),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &MlpSpec, rng: &mut RngStream) -> Self {
        let mut params = ParameterSet::zeros(spec);
        for layer in &mut params.layers {
            let limit = (6.0 / (layer.fan_in() + layer.fan_out()) as f64).sqrt();
            for w in layer.weights.values_mut() {
                *w = (2.0 * rng.uniform() - 1.0) * limit;
            }
        }
        params
    }

    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for l in &self.layers {
            out.extend_from_slice(l.weights.values());
            out.extend_from_slice(l.bias.values());
        }
        out
    }

    /// Overwrite every scalar from a flat vector laid out like [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.dim() {
            return Err(FflError::Dimension(format!(
                "flat vector of {} for {} parameters",
                flat.len(),
                self.dim()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            for t in [&mut l.weights, &mut l.bias] {
                let n = t.len();
                t.values_mut().copy_from_slice(&flat[at..at + n]);
                at += n;
            }
        }
        Ok(())
    }

    pub fn unflatten_like(&self, flat: &[f64]) -> Result<Self> {
        let mut out = self.zeros_like();
        out.assign_flat(flat)?;
        Ok(out)
    }

    /// Matrix blocks of the flat layout: each weight matrix, and each bias as a `1 × out` row.
    pub fn blocks(&self) -> Vec<Block> {
        let mut blocks = Vec::with_capacity(2 * self.layers.len());
        let mut offset = 0;
        for l in &self.layers {
            blocks.push(Block {
                offset,
                rows: l.fan_out(),
                cols: l.fan_in(),
            });
            offset += l.weights.len();
            blocks.push(Block {
                offset,
                rows: 1,
                cols: l.fan_out(),
            });
            offset += l.bias.len();
        }
        blocks
    }

    fn check_congruent(&self, other: &ParameterSet) -> Result<()> {
        let same = self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.shape() == b.weights.shape() && a.bias.shape() == b.bias.shape()
            });
        if same {
            Ok(())
        } else {
            Err(FflError::Dimension("parameter layouts differ".into()))
        }
    }

    fn check_spec(&self, spec: &MlpSpec) -> Result<()> {
        let ok = self.layers.len() == spec.num_layers()
            && self
                .layers
                .iter()
                .zip(spec.layer_sizes.windows(2))
                .all(|(l, w)| l.fan_in() == w[0] && l.fan_out() == w[1]);
        if ok {
            Ok(())
        } else {
            Err(FflError::Dimension("parameters do not match the layer sizes".into()))
        }
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &ParameterSet, scale: f64) -> Result<()> {
        self.check_congruent(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(a.weights.values_mut(), b.weights.values(), scale);
            axpy(a.bias.values_mut(), b.bias.values(), scale);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.is_finite() && l.bias.is_finite())
    }
}

fn axpy(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Per-layer activations of one batch pass; `acts[0]` is the input.
struct Trace {
    acts: Vec<Vec<f64>>,
}

fn run_forward(spec: &MlpSpec, params: &ParameterSet, batch: &MiniBatch) -> Result<Trace> {
    if batch.dim != spec.input_dim() {
        return Err(FflError::config(
            "layer_sizes",
            format!("batch has {} features, network expects {}", batch.dim, spec.input_dim()),
        ));
    }
    params.check_spec(spec)?;
    let n = batch.len();
    let last = params.layers.len() - 1;
    let mut acts = Vec::with_capacity(params.layers.len() + 1);
    acts.push(batch.features.clone());
    for (l, layer) in params.layers.iter().enumerate() {
        let (fan_in, fan_out) = (layer.fan_in(), layer.fan_out());
        let w = layer.weights.values();
        let b = layer.bias.values();
        let input = &acts[l];
        let mut out = vec![0.0; n * fan_out];
        for s in 0..n {
            let x = &input[s * fan_in..(s + 1) * fan_in];
            let z = &mut out[s * fan_out..(s + 1) * fan_out];
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                z[o] = if l == last {
                    dot + b[o]
                } else {
                    spec.activation.apply(dot + b[o])
                };
            }
        }
        acts.push(out);
    }
    Ok(Trace { acts })
}

/// Logits, `batch × classes`.
pub fn forward(spec: &MlpSpec, params: &ParameterSet, batch: &MiniBatch) -> Result<Tensor> {
    let mut trace = run_forward(spec, params, batch)?;
    let logits = trace.acts.pop().expect("at least one layer");
    Tensor::new(vec![batch.len(), spec.classes()], logits)
}

/// Mean softmax cross-entropy of `logits` (`n × classes`) against `labels`,
/// plus the softmax probabilities.
fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut probs = vec![0.0; logits.len()];
    for (s, &y) in labels.iter().enumerate() {
        let z = &logits[s * classes..(s + 1) * classes];
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        total += lse - z[y];
        for c in 0..classes {
            probs[s * classes + c] = (z[c] - lse).exp();
        }
    }
    (total / labels.len() as f64, probs)
}

fn check_labels(batch: &MiniBatch, classes: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(FflError::invalid("empty batch"));
    }
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= classes) {
        return Err(FflError::invalid(format!("label {y} outside 0..{classes}")));
    }
    Ok(())
}

/// Mean cross-entropy loss over the batch.
pub fn loss(spec: &MlpSpec, params: &ParameterSet, batch: &MiniBatch) -> Result<f64> {
    check_labels(batch, spec.classes())?;
    let trace = run_forward(spec, params, batch)?;
    Ok(cross_entropy(trace.acts.last().unwrap(), &batch.labels, spec.classes()).0)
}

/// Mean cross-entropy loss and its gradient with respect to every parameter.
pub fn loss_and_grad(
    spec: &MlpSpec,
    params: &ParameterSet,
    batch: &MiniBatch,
) -> Result<(f64, GradientBundle)> {
    check_labels(batch, spec.classes())?;
    let trace = run_forward(spec, params, batch)?;
    let n = batch.len();
    let classes = spec.classes();
    let (loss, probs) = cross_entropy(trace.acts.last().unwrap(), &batch.labels, classes);

    // dL/dz at the output: (softmax − onehot) / n.
    let inv_n = 1.0 / n as f64;
    let mut delta = probs;
    for (s, &y) in batch.labels.iter().enumerate() {
        delta[s * classes + y] -= 1.0;
    }
    delta.iter_mut().for_each(|d| *d *= inv_n);

    let mut grad = params.zeros_like();
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let (fan_in, fan_out) = (layer.fan_in(), layer.fan_out());
        let input = &trace.acts[l];
        let g = &mut grad.layers[l];
        {
            let gw = g.weights.values_mut();
            for s in 0..n {
                let x = &input[s * fan_in..(s + 1) * fan_in];
                for o in 0..fan_out {
                    let d = delta[s * fan_out + o];
                    if d != 0.0 {
                        axpy(&mut gw[o * fan_in..(o + 1) * fan_in], x, d);
                    }
                }
            }
        }
        {
            let gb = g.bias.values_mut();
            for s in 0..n {
                for o in 0..fan_out {
                    gb[o] += delta[s * fan_out + o];
                }
            }
        }
        if l > 0 {
            let w = layer.weights.values();
            let mut prev = vec![0.0; n * fan_in];
            for s in 0..n {
                let dx = &mut prev[s * fan_in..(s + 1) * fan_in];
                for o in 0..fan_out {
                    let d = delta[s * fan_out + o];
                    if d != 0.0 {
                        axpy(dx, &w[o * fan_in..(o + 1) * fan_in], d);
                    }
                }
                let a = &input[s * fan_in..(s + 1) * fan_in];
                for (v, &act) in dx.iter_mut().zip(a) {
                    *v *= spec.activation.derivative_from_output(act);
                }
            }
            delta = prev;
        }
    }
    Ok((loss, grad))
}

/// One SGD step in place. With `momentum == 0` this is exactly
/// `params − eta · grad`; otherwise `v ← momentum · v + grad` and
/// `params ← params − eta · v`.
pub fn sgd_step(
    params: &mut ParameterSet,
    grad: &GradientBundle,
    eta: f64,
    momentum: f64,
    velocity: &mut GradientBundle,
) -> Result<()> {
    if !(eta > 0.0) {
        return Err(FflError::config("eta", format!("learning rate must be positive, got {eta}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(FflError::config("momentum", format!("must lie in [0, 1), got {momentum}")));
    }
    params.check_congruent(grad)?;
    params.check_congruent(velocity)?;
    if momentum == 0.0 {
        return params.add_scaled(grad, -eta);
    }
    for (v, g) in velocity.layers.iter_mut().zip(&grad.layers) {
        for (vt, gt) in [(&mut v.weights, &g.weights), (&mut v.bias, &g.bias)] {
            for (a, b) in vt.values_mut().iter_mut().zip(gt.values()) {
                *a = momentum * *a + b;
            }
        }
    }
    params.add_scaled(velocity, -eta)
}

/// Result of τ local steps on one worker.
#[derive(Debug, Clone)]
pub struct LocalRun {
    pub params: ParameterSet,
    /// Sum of the τ mini-batch gradients.
    pub g_agg: GradientBundle,
    /// Mini-batch loss before each step.
    pub losses: Vec<f64>,
}

impl LocalRun {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

/// Run `tau` local SGD steps from `start` on mini-batches drawn with
/// replacement from `shard`. The momentum buffer starts at zero every call.
#[allow(clippy::too_many_arguments)]
pub fn local_update_run(
    spec: &MlpSpec,
    start: &ParameterSet,
    ds: &Dataset,
    shard: &Shard,
    tau: usize,
    eta: f64,
    batch_size: usize,
    momentum: f64,
    rng: &mut RngStream,
) -> Result<LocalRun> {
    if tau < 1 {
        return Err(FflError::invalid("local update count must be at least 1"));
    }
    let mut params = start.clone();
    let mut g_agg = start.zeros_like();
    let mut velocity = start.zeros_like();
    let mut losses = Vec::with_capacity(tau);
    for _ in 0..tau {
        let batch = sample_minibatch(shard, ds, batch_size, rng)?;
        let (l, g) = loss_and_grad(spec, &params, &batch)?;
        g_agg.add_scaled(&g, 1.0)?;
        sgd_step(&mut params, &g, eta, momentum, &mut velocity)?;
        losses.push(l);
    }
    Ok(LocalRun {
        params,
        g_agg,
        losses,
    })
}
