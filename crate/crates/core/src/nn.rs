//! Dense-network core: layers with single-use tapes, dropout, softmax, KL,
//! optimizers and the learning-rate schedule.
//!
//! Parameters are held in `f64` and all arithmetic is `f64`. The optimizer
//! can round parameters to `f32` after every update so that checkpoints,
//! which store `f32`, reproduce trained models exactly.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("{what}: expected length {expected}, found {found}")]
    Shape {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("dropout rate {0} outside [0, 1)")]
    DropoutRate(f64),
    #[error("schedule step {step} exceeds planned total {total}")]
    ScheduleOverrun { step: u64, total: u64 },
    #[error("operation requires a {expected} model, found {found}")]
    WrongKind { expected: String, found: String },
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn check_len(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(NnError::Shape { what: what.to_string(), expected, found })
    }
}

/// Forward-pass mode. Training passes carry the dropout stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train(r) => Mode::Train(r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    name: String,
    in_dim: usize,
    out_dim: usize,
    /// Row-major `out_dim × in_dim`.
    pub weight: Vec<f64>,
    /// Empty for bias-free projections.
    pub bias: Vec<f64>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Vec<f64>,
    activation: Activation,
}

/// What a dense forward pass records for its backward pass.
///
/// Backward consumes the tape, so replaying it twice does not compile:
///
/// ```compile_fail
/// use newsfusion::nn::{Activation, DenseLayer};
/// let mut layer = DenseLayer::zeros("l", 2, 2, true, Activation::Identity);
/// let (_, tape) = layer.forward(&[1.0, 2.0]).unwrap();
/// layer.backward(tape, &[1.0, 1.0]);
/// layer.backward(tape, &[1.0, 1.0]);
/// ```
#[derive(Debug)]
pub struct DenseTape {
    input: Vec<f64>,
    pre_activation: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(name: &str, in_dim: usize, out_dim: usize, with_bias: bool, activation: Activation) -> Self {
        let nb = if with_bias { out_dim } else { 0 };
        Self {
            name: name.to_string(),
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; nb],
            grad_weight: vec![0.0; in_dim * out_dim],
            grad_bias: vec![0.0; nb],
            activation,
        }
    }

    /// Glorot-uniform weights in ±√(6/(fan_in+fan_out)), zero biases.
    /// Values are rounded to `f32`.
    pub fn xavier(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        let mut layer = Self::zeros(name, in_dim, out_dim, with_bias, activation);
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        for w in &mut layer.weight {
            *w = f64::from(rng.random_range(-bound..bound) as f32);
        }
        layer
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn has_bias(&self) -> bool {
        !self.bias.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, DenseTape)> {
        check_len(&format!("{} input", self.name), self.in_dim, input.len())?;
        let mut pre = Vec::with_capacity(self.out_dim);
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = if self.bias.is_empty() { 0.0 } else { self.bias[o] };
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            pre.push(acc);
        }
        let out = match self.activation {
            Activation::Identity => pre.clone(),
            Activation::Relu => pre.iter().map(|v| v.max(0.0)).collect(),
        };
        Ok((out, DenseTape { input: input.to_vec(), pre_activation: pre }))
    }

    /// Eval-only forward that skips building a tape.
    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward(input).map(|(o, _)| o)
    }

    /// Accumulates parameter gradients for one recorded pass and returns the
    /// gradient with respect to the layer input.
    pub fn backward(&mut self, tape: DenseTape, upstream: &[f64]) -> Vec<f64> {
        debug_assert_eq!(upstream.len(), self.out_dim);
        let grad_pre: Vec<f64> = match self.activation {
            Activation::Identity => upstream.to_vec(),
            Activation::Relu => upstream
                .iter()
                .zip(&tape.pre_activation)
                .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
                .collect(),
        };
        let mut grad_in = vec![0.0; self.in_dim];
        for (o, g) in grad_pre.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let row = o * self.in_dim;
            for i in 0..self.in_dim {
                self.grad_weight[row + i] += g * tape.input[i];
                grad_in[i] += self.weight[row + i] * g;
            }
            if !self.bias.is_empty() {
                self.grad_bias[o] += g;
            }
        }
        grad_in
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.iter_mut().for_each(|g| *g = 0.0);
        self.grad_bias.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Sets the weight matrix to the identity (square layers) and zeroes biases.
    pub fn set_identity(&mut self) {
        assert_eq!(self.in_dim, self.out_dim, "identity needs a square layer");
        self.weight.iter_mut().for_each(|w| *w = 0.0);
        for i in 0..self.in_dim {
            self.weight[i * self.in_dim + i] = 1.0;
        }
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn round_to_f32(&mut self) {
        for v in self.weight.iter_mut().chain(self.bias.iter_mut()) {
            *v = f64::from(*v as f32);
        }
    }
}

/// A model made of dense layers in a fixed, documented order.
pub trait Parameterized {
    fn layers(&self) -> Vec<&DenseLayer>;
    fn layers_mut(&mut self) -> Vec<&mut DenseLayer>;

    fn zero_grad(&mut self) {
        for l in self.layers_mut() {
            l.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.num_params()).sum()
    }

    /// Parameters flattened layer by layer, weight then bias.
    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend_from_slice(&l.grad_weight);
            out.extend_from_slice(&l.grad_bias);
        }
        out
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        check_len("flat parameters", self.num_params(), flat.len())?;
        let mut at = 0;
        for l in self.layers_mut() {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    fn round_to_f32(&mut self) {
        for l in self.layers_mut() {
            l.round_to_f32();
        }
    }
}

/// Per-coordinate scale applied by one dropout draw (0 or 1/(1−rate)).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(pub Vec<f64>);

impl DropoutMask {
    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.0).map(|(x, m)| x * m).collect()
    }

    pub fn kept(&self) -> usize {
        self.0.iter().filter(|m| **m != 0.0).count()
    }
}

/// Inverted dropout. Eval mode and rate 0 are the identity.
pub fn dropout(input: &[f64], rate: f64, mode: &mut Mode<'_>) -> Result<(Vec<f64>, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NnError::DropoutRate(rate));
    }
    let mask = match mode {
        Mode::Train(rng) if rate > 0.0 => {
            let scale = 1.0 / (1.0 - rate);
            DropoutMask(
                input
                    .iter()
                    .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
                    .collect(),
            )
        }
        _ => DropoutMask::ones(input.len()),
    };
    Ok((mask.apply(input), mask))
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Vector-Jacobian product of softmax: given `p = softmax(z)` and `dL/dp`,
/// returns `dL/dz = p ⊙ (g − ⟨p, g⟩)`.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs.iter().zip(grad_probs).map(|(p, g)| p * (g - dot)).collect()
}

pub const KL_FLOOR: f64 = 1e-12;

/// `Σ p_i ln(p_i / q_i)` with `0·ln 0 = 0` and `q_i` floored at 1e-12.
pub fn kl_discrete(p: &[f64], q: &[f64]) -> Result<f64> {
    check_len("kl q", p.len(), q.len())?;
    Ok(p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(KL_FLOOR)).ln())
        .sum())
}

/// `base_lr·(1 − step/total_steps)`.
pub fn linear_decay_lr(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(NnError::ScheduleOverrun { step, total: total_steps });
    }
    if step == total_steps {
        return Ok(0.0);
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Round parameters to f32 after each update.
    pub store_f32: bool,
}

impl OptimizerConfig {
    pub fn adam(base_lr: f64, weight_decay: f64, total_steps: u64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            base_lr,
            weight_decay,
            total_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            store_f32: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m_w: Vec<f64>,
    v_w: Vec<f64>,
    m_b: Vec<f64>,
    v_b: Vec<f64>,
}

/// Optimizer state: moments per layer, in the order the layers are passed.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    step: u64,
    moments: Vec<Moments>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, step: 0, moments: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> Result<f64> {
        linear_decay_lr(self.step, self.config.total_steps, self.config.base_lr)
    }

    /// One update with decoupled weight decay, then zeroes gradients.
    ///
    /// Adam: `θ ← θ(1 − ηλ) − η·m̂/(√v̂ + ε)`. SGD: `θ ← θ(1 − ηλ) − η·g`.
    pub fn step(&mut self, layers: &mut [&mut DenseLayer]) -> Result<()> {
        for l in layers.iter() {
            if !l.grad_weight.iter().all(|g| g.is_finite()) {
                return Err(NnError::NonFiniteGradient(format!("{}.weight", l.name)));
            }
            if !l.grad_bias.iter().all(|g| g.is_finite()) {
                return Err(NnError::NonFiniteGradient(format!("{}.bias", l.name)));
            }
        }
        let lr = self.current_lr()?;
        if self.moments.is_empty() {
            self.moments = layers
                .iter()
                .map(|l| Moments {
                    m_w: vec![0.0; l.weight.len()],
                    v_w: vec![0.0; l.weight.len()],
                    m_b: vec![0.0; l.bias.len()],
                    v_b: vec![0.0; l.bias.len()],
                })
                .collect();
        }
        assert_eq!(self.moments.len(), layers.len(), "layer set changed between steps");
        let cfg = &self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let decay = 1.0 - lr * cfg.weight_decay;
        for (layer, mom) in layers.iter_mut().zip(self.moments.iter_mut()) {
            let groups = [
                (&mut layer.weight, &layer.grad_weight, &mut mom.m_w, &mut mom.v_w),
                (&mut layer.bias, &layer.grad_bias, &mut mom.m_b, &mut mom.v_b),
            ];
            for (params, grads, m, v) in groups {
                for i in 0..params.len() {
                    let g = grads[i];
                    params[i] *= decay;
                    match cfg.kind {
                        OptimizerKind::Adam => {
                            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                            let m_hat = m[i] / bc1;
                            let v_hat = v[i] / bc2;
                            params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
                        }
                        OptimizerKind::Sgd => params[i] -= lr * g,
                    }
                }
            }
            if cfg.store_f32 {
                layer.round_to_f32();
            }
            layer.zero_grad();
        }
        self.step += 1;
        Ok(())
    }
}
