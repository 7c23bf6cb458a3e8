//! Fully-connected networks with exact reverse-mode gradients.
//!
//! Parameters are stored as `f32`; activations, tapes and gradients are
//! carried in `f64` so finite-difference checks are not limited by
//! single-precision rounding.

mod checkpoint;
mod gradcheck;
mod loss;
mod optim;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{check_dim, AirdError, Result};

pub use checkpoint::{Checkpoint, EncoderTable, SectionTag, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub(crate) fn checkpoint_encoder(enc: &crate::counterfeiter::MetadataEncoder) -> EncoderTable {
    EncoderTable {
        vocab: enc.vocab(),
        width: enc.width(),
        rows: enc.table().to_vec(),
    }
}
pub use gradcheck::{check_gradients, check_gradients_of, GradCheckReport, GradientCheckable, LossSpec, Probe};
pub use loss::{bce_terms, softmax_temperature, softmax_temperature_backward, PROB_CLAMP};
pub use optim::{Adam, AdamConfig};

static STAMPS: AtomicU64 = AtomicU64::new(1);

fn next_stamp() -> u64 {
    STAMPS.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
            Activation::Linear => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Sigmoid),
            2 => Some(Activation::Linear),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Linear => z,
        }
    }

    /// Derivative given pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Linear => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `y = act(W x + b)` with `W` stored `outputs × inputs` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    /// Uniform fan-in initialization; biases start at zero.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut crate::Rng) -> Self {
        let scale = match activation {
            Activation::Relu => 6.0,
            _ => 3.0,
        };
        let bound = (scale / inputs.max(1) as f64).sqrt() as f32;
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
            activation,
        }
    }

    fn params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone)]
pub struct DenseNet {
    layers: Vec<Layer>,
    stamp: u64,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Cached per-layer inputs and pre-activations from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    stamp: u64,
    inputs: Vec<Vec<f64>>,
    preacts: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Pre-activations of every relu layer, concatenated in layer order.
    pub fn relu_preacts(&self, net: &DenseNet) -> impl Iterator<Item = f64> + '_ {
        let relu: Vec<bool> = net
            .layers
            .iter()
            .map(|l| l.activation == Activation::Relu)
            .collect();
        self.preacts
            .iter()
            .zip(relu)
            .filter(|(_, r)| *r)
            .flat_map(|(z, _)| z.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradient buffers shaped like a [`DenseNet`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrad {
    pub layers: Vec<LayerGrad>,
}

impl NetGrad {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|x| *x *= s);
        }
    }

    /// Tensors in the order [`DenseNet::tensors_mut`] yields them.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }
}

impl DenseNet {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(AirdError::config("a network needs at least one layer"));
        }
        for l in &layers {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(AirdError::ShapeMismatch(format!(
                    "layer {}x{} has {} weights and {} biases",
                    l.outputs,
                    l.inputs,
                    l.weights.len(),
                    l.bias.len()
                )));
            }
            if l.weights.iter().chain(&l.bias).any(|x| !x.is_finite()) {
                return Err(AirdError::config("non-finite network parameter"));
            }
        }
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(AirdError::ShapeMismatch(format!(
                    "layer output {} does not feed input {}",
                    w[0].outputs, w[1].inputs
                )));
            }
        }
        Ok(Self {
            layers,
            stamp: next_stamp(),
        })
    }

    /// `sizes` lists layer widths from input to output; one activation per layer.
    pub fn new(sizes: &[usize], activations: &[Activation], rng: &mut crate::Rng) -> Result<Self> {
        if sizes.len() != activations.len() + 1 {
            return Err(AirdError::config("need one activation per layer"));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &a)| Layer::init(w[0], w[1], a, rng))
            .collect();
        Self::from_layers(layers)
    }

    pub fn zeros(sizes: &[usize], activations: &[Activation]) -> Result<Self> {
        if sizes.len() != activations.len() + 1 {
            return Err(AirdError::config("need one activation per layer"));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &a)| Layer::zeros(w[0], w[1], a))
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable layer access; invalidates outstanding tapes.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.stamp = next_stamp();
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::params).sum()
    }

    /// Weight and bias tensors of each layer in order; invalidates outstanding tapes.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        self.stamp = next_stamp();
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()])
            .collect()
    }

    /// Flat parameter `i` in tensor order.
    pub fn param(&self, mut i: usize) -> f32 {
        for l in &self.layers {
            if i < l.weights.len() {
                return l.weights[i];
            }
            i -= l.weights.len();
            if i < l.bias.len() {
                return l.bias[i];
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set_param(&mut self, mut i: usize, v: f32) {
        self.stamp = next_stamp();
        for l in &mut self.layers {
            if i < l.weights.len() {
                l.weights[i] = v;
                return;
            }
            i -= l.weights.len();
            if i < l.bias.len() {
                l.bias[i] = v;
                return;
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range")
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        check_dim(self.input_dim(), x.len())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for l in &self.layers {
            let z: Vec<f64> = l
                .weights
                .chunks_exact(l.inputs)
                .zip(&l.bias)
                .map(|(row, &b)| {
                    row.iter()
                        .zip(&cur)
                        .fold(b as f64, |acc, (&w, &xi)| acc + w as f64 * xi)
                })
                .collect();
            let a: Vec<f64> = z.iter().map(|&zi| l.activation.apply(zi)).collect();
            inputs.push(cur);
            preacts.push(z);
            cur = a;
        }
        let tape = Tape {
            stamp: self.stamp,
            inputs,
            preacts,
            output: cur.clone(),
        };
        Ok((cur, tape))
    }

    /// Forward pass without a tape.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let mut cur = x.to_vec();
        for l in &self.layers {
            cur = l
                .weights
                .chunks_exact(l.inputs)
                .zip(&l.bias)
                .map(|(row, &b)| {
                    let z = row
                        .iter()
                        .zip(&cur)
                        .fold(b as f64, |acc, (&w, &xi)| acc + w as f64 * xi);
                    l.activation.apply(z)
                })
                .collect();
        }
        Ok(cur)
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward_into(&self, tape: &Tape, output_grad: &[f64], grad: &mut NetGrad) -> Result<Vec<f64>> {
        if tape.stamp != self.stamp || tape.inputs.len() != self.layers.len() {
            return Err(AirdError::StaleTape(
                "tape was recorded against different parameters".into(),
            ));
        }
        if grad.layers.len() != self.layers.len() {
            return Err(AirdError::ShapeMismatch("gradient buffer layer count".into()));
        }
        check_dim(self.output_dim(), output_grad.len())?;
        let mut g = output_grad.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let z = &tape.preacts[li];
            let x = &tape.inputs[li];
            let a_out: &[f64] = if li + 1 < self.layers.len() {
                &tape.inputs[li + 1]
            } else {
                &tape.output
            };
            let dz: Vec<f64> = g
                .iter()
                .zip(z)
                .zip(a_out)
                .map(|((&gi, &zi), &ai)| gi * l.activation.derivative(zi, ai))
                .collect();
            let lg = &mut grad.layers[li];
            let mut dx = vec![0f64; l.inputs];
            for (o, &d) in dz.iter().enumerate() {
                lg.bias[o] += d;
                if d == 0.0 {
                    continue;
                }
                let wrow = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                let grow = &mut lg.weights[o * l.inputs..(o + 1) * l.inputs];
                for ((gw, &xi), (dxi, &w)) in grow.iter_mut().zip(x).zip(dx.iter_mut().zip(wrow)) {
                    *gw += d * xi;
                    *dxi += d * w as f64;
                }
            }
            g = dx;
        }
        Ok(g)
    }

    /// Parameter gradients and input gradient for one tape.
    pub fn backward(&self, tape: &Tape, output_grad: &[f64]) -> Result<(NetGrad, Vec<f64>)> {
        let mut grad = NetGrad::zeros_like(self);
        let dx = self.backward_into(tape, output_grad, &mut grad)?;
        Ok((grad, dx))
    }
}
