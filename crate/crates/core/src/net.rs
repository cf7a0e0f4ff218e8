//! Fully connected networks: forward passes with activation capture, perturbed
//! forwards, representation Jacobians, and a small Adam trainer.
//!
//! Layer `i` is the affine map `g_i(h) = W_i h + b_i`. Every layer except the
//! last is followed by the model's activation, so the hidden post-activation
//! `h_i` exists for `i < num_layers() - 1`. Perturbing layer `i` means changing
//! `W_i`; the correction then refits layer `i + 1`.
//!
//! Flat weight vectors use row-major order: entry `(r, c)` of a `d_out x d_in`
//! weight sits at flat index `r * d_in + c`.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, gaussian_matrix, seeded_rng, Matrix, Vector};
use crate::serial::{self, MatrixBlock, VectorBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative at a pre-activation value (relu uses 0 at the kink).
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::InvalidConfig(format!("unknown activation '{other}'"))),
        }
    }
}

/// One affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vector,
}

impl Dense {
    pub fn new(weight: Matrix, bias: Vector) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::ShapeMismatch(format!(
                "weight has {} rows but bias has {} entries",
                weight.nrows(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Pre-activations for a batch stored one sample per row.
    pub fn apply_rows(&self, h: &Matrix) -> Matrix {
        let mut out = h * self.weight.transpose();
        for mut row in out.row_iter_mut() {
            row += self.bias.transpose();
        }
        out
    }

    /// `Theta = [b, W]`, of shape `d_out x (d_in + 1)`.
    pub fn theta(&self) -> Matrix {
        let mut theta = self.weight.clone().insert_column(0, 0.0);
        theta.set_column(0, &self.bias);
        theta
    }

    pub fn from_theta(theta: &Matrix) -> Self {
        let bias = theta.column(0).into_owned();
        let weight = theta.columns(1, theta.ncols() - 1).into_owned();
        Self { weight, bias }
    }
}

/// A pretrained fully connected network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Dense>,
    activation: Activation,
}

/// Per-sample record of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub input: Vector,
    /// Pre-activations of every layer; the last entry is the output.
    pub per_layer_pre: Vec<Vector>,
    /// Post-activations of the hidden layers only.
    pub per_layer_post: Vec<Vector>,
    pub output: Vector,
}

/// `[1; y]` for a hidden representation `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedRep {
    values: Vector,
}

impl AugmentedRep {
    pub fn from_hidden(h: &Vector) -> Self {
        Self { values: h.clone().insert_row(0, 1.0) }
    }

    pub fn values(&self) -> &Vector {
        &self.values
    }

    pub fn into_inner(self) -> Vector {
        self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMethod {
    Analytic,
    FiniteDifference,
}

/// `d ybar_v(x) / dv` at `v = 0`, shape `(d + 1) x K`; row 0 is the constant
/// bias coordinate and is identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RepJacobian {
    pub matrix: Matrix,
    pub method: JacobianMethod,
    pub fd_step: Option<f64>,
    /// Smallest |pre-activation| at the perturbed layer.
    pub kink_margin: f64,
    /// Set for relu networks when a probe can cross a kink.
    pub near_kink: bool,
}

/// Reshapes a flat row-major parameter vector to a `rows x cols` matrix.
pub fn reshape_flat(flat: &[f64], rows: usize, cols: usize) -> Matrix {
    Matrix::from_row_slice(rows, cols, flat)
}

/// Row-major flattening of a matrix.
pub fn flatten_row_major(m: &Matrix) -> Vec<f64> {
    let (rows, cols) = m.shape();
    (0..rows).flat_map(|i| (0..cols).map(move |j| m[(i, j)])).collect()
}

impl MlpModel {
    pub fn new(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("a model needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteResult(format!("parameters of layer {i}")));
            }
        }
        Ok(Self { layers, activation })
    }

    /// Fan-in scaled Gaussian initialization with zero biases.
    pub fn init(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig("need at least input and output dims".into()));
        }
        let mut rng = seeded_rng(seed);
        let gain = match activation {
            Activation::Relu => 2.0,
            _ => 1.0,
        };
        let layers = dims
            .windows(2)
            .map(|w| {
                let std = (gain / w[0] as f64).sqrt();
                Dense { weight: gaussian_matrix(w[1], w[0], &mut rng) * std, bias: Vector::zeros(w[1]) }
            })
            .collect();
        Self::new(layers, activation)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Result<&Dense> {
        self.layers
            .get(index)
            .ok_or_else(|| Error::InvalidLayer { index, reason: format!("model has {} layers", self.layers.len()) })
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Errors unless `index` names a hidden layer (one followed by another layer).
    pub fn check_hidden(&self, index: usize) -> Result<()> {
        if index >= self.hidden_count() {
            return Err(Error::InvalidLayer {
                index,
                reason: format!(
                    "only layers 0..{} are hidden; the output head is never perturbed",
                    self.hidden_count()
                ),
            });
        }
        Ok(())
    }

    pub fn with_layer(&self, index: usize, layer: Dense) -> Result<Self> {
        let mut layers = self.layers.clone();
        let slot =
            layers.get_mut(index).ok_or_else(|| Error::InvalidLayer { index, reason: "no such layer".into() })?;
        if slot.weight.shape() != layer.weight.shape() || slot.bias.len() != layer.bias.len() {
            return Err(Error::ShapeMismatch(format!("replacement for layer {index}")));
        }
        *slot = layer;
        Self::new(layers, self.activation)
    }

    fn is_hidden_index(&self, index: usize) -> bool {
        index + 1 < self.layers.len()
    }

    pub fn forward_trace(&self, x: &Vector) -> Result<ActivationTrace> {
        self.trace_with(x, &[])
    }

    /// Forward pass with some layers replaced.
    pub fn trace_with(&self, x: &Vector, overrides: &[(usize, &Dense)]) -> Result<ActivationTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input has length {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut h = x.clone();
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.hidden_count());
        for i in 0..self.layers.len() {
            let layer = lookup(&self.layers, overrides, i);
            let z = &layer.weight * &h + &layer.bias;
            if self.is_hidden_index(i) {
                h = z.map(|v| self.activation.apply(v));
                post.push(h.clone());
            } else {
                h = z.clone();
            }
            pre.push(z);
        }
        Ok(ActivationTrace { input: x.clone(), output: h, per_layer_pre: pre, per_layer_post: post })
    }

    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        Ok(self.forward_trace(x)?.output)
    }

    /// Runs layers `start..end` on a batch (one sample per row) that is the
    /// input to layer `start`. The result is the post-activation of layer
    /// `end - 1`, or its raw output if that is the last layer.
    pub fn propagate(&self, start: usize, end: usize, h: &Matrix, overrides: &[(usize, &Dense)]) -> Matrix {
        let mut cur = h.clone();
        for i in start..end {
            let layer = lookup(&self.layers, overrides, i);
            cur = layer.apply_rows(&cur);
            if self.is_hidden_index(i) {
                let act = self.activation;
                cur.apply(|v| *v = act.apply(*v));
            }
        }
        cur
    }

    pub fn predict_batch(&self, inputs: &Matrix) -> Matrix {
        self.propagate(0, self.layers.len(), inputs, &[])
    }

    /// Post-activations of hidden layer `index` for a batch.
    pub fn hidden_batch(&self, index: usize, inputs: &Matrix, overrides: &[(usize, &Dense)]) -> Matrix {
        self.propagate(0, index + 1, inputs, overrides)
    }

    /// Input to layer `index` for a batch (the raw inputs when `index == 0`).
    pub fn layer_input_batch(&self, index: usize, inputs: &Matrix, overrides: &[(usize, &Dense)]) -> Matrix {
        if index == 0 {
            inputs.clone()
        } else {
            self.propagate(0, index, inputs, overrides)
        }
    }
}

fn lookup<'a>(layers: &'a [Dense], overrides: &[(usize, &'a Dense)], i: usize) -> &'a Dense {
    overrides.iter().find(|(j, _)| *j == i).map(|(_, d)| *d).unwrap_or(&layers[i])
}

/// Forward pass with `W_layer` replaced by `W_layer + delta_w`.
pub fn perturbed_forward(
    model: &MlpModel,
    layer_index: usize,
    delta_w: &Matrix,
    x: &Vector,
) -> Result<ActivationTrace> {
    let base = model.layer(layer_index)?;
    if base.weight.shape() != delta_w.shape() {
        return Err(Error::ShapeMismatch(format!(
            "delta has shape {:?}, layer {layer_index} weight has {:?}",
            delta_w.shape(),
            base.weight.shape()
        )));
    }
    let perturbed = Dense { weight: &base.weight + delta_w, bias: base.bias.clone() };
    model.trace_with(x, &[(layer_index, &perturbed)])
}

pub fn augmented_rep(trace: &ActivationTrace, layer_index: usize) -> Result<AugmentedRep> {
    let h = trace.per_layer_post.get(layer_index).ok_or_else(|| Error::InvalidLayer {
        index: layer_index,
        reason: format!("trace has {} hidden layers", trace.per_layer_post.len()),
    })?;
    Ok(AugmentedRep::from_hidden(h))
}

fn check_basis(model: &MlpModel, layer_index: usize, basis: &Matrix) -> Result<()> {
    model.check_hidden(layer_index)?;
    let w = &model.layers[layer_index].weight;
    if basis.nrows() != w.len() {
        return Err(Error::ShapeMismatch(format!(
            "basis has {} rows but layer {layer_index} has {} weights",
            basis.nrows(),
            w.len()
        )));
    }
    Ok(())
}

fn basis_direction(basis: &Matrix, k: usize, rows: usize, cols: usize) -> Matrix {
    let col: Vec<f64> = basis.column(k).iter().copied().collect();
    reshape_flat(&col, rows, cols)
}

/// Largest pre-activation displacement produced by a unit step along any basis
/// direction, used for kink-proximity flagging.
fn probe_scale(basis: &Matrix, w: &Matrix, h_prev: &Vector) -> f64 {
    (0..basis.ncols()).map(|k| (basis_direction(basis, k, w.nrows(), w.ncols()) * h_prev).amax()).fold(0.0, f64::max)
}

/// Central finite-difference Jacobian of the augmented representation at
/// `layer_index` with respect to coefficients along the columns of `basis`.
pub fn rep_jacobian_fd(
    model: &MlpModel,
    layer_index: usize,
    basis: &Matrix,
    x: &Vector,
    step: f64,
) -> Result<RepJacobian> {
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be > 0, got {step}")));
    }
    check_basis(model, layer_index, basis)?;
    let base = &model.layers[layer_index];
    let (rows, cols) = base.weight.shape();
    let d = rows;
    let k_dim = basis.ncols();
    let mut jac = Matrix::zeros(d + 1, k_dim);
    for k in 0..k_dim {
        let dir = basis_direction(basis, k, rows, cols) * step;
        let plus = perturbed_forward(model, layer_index, &dir, x)?;
        let minus = perturbed_forward(model, layer_index, &(-dir), x)?;
        let hp = &plus.per_layer_post[layer_index];
        let hm = &minus.per_layer_post[layer_index];
        for r in 0..d {
            jac[(r + 1, k)] = (hp[r] - hm[r]) / (2.0 * step);
        }
    }
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteResult("finite-difference Jacobian".into()));
    }
    let trace = model.forward_trace(x)?;
    let h_prev = if layer_index == 0 { x.clone() } else { trace.per_layer_post[layer_index - 1].clone() };
    let margin = trace.per_layer_pre[layer_index].amin();
    let near_kink =
        model.activation == Activation::Relu && margin < 10.0 * step * probe_scale(basis, &base.weight, &h_prev);
    Ok(RepJacobian {
        matrix: jac,
        method: JacobianMethod::FiniteDifference,
        fd_step: Some(step),
        kink_margin: margin,
        near_kink,
    })
}

/// Forward-mode Jacobian: column `k` is `phi'(pre) * (D_k h_prev)` where `D_k`
/// is basis column `k` reshaped to the weight's shape.
pub fn rep_jacobian_analytic(model: &MlpModel, layer_index: usize, basis: &Matrix, x: &Vector) -> Result<RepJacobian> {
    check_basis(model, layer_index, basis)?;
    let trace = model.forward_trace(x)?;
    let h_prev = if layer_index == 0 { x.clone() } else { trace.per_layer_post[layer_index - 1].clone() };
    let pre = &trace.per_layer_pre[layer_index];
    let matrix = analytic_columns(model, layer_index, basis, &h_prev, pre);
    Ok(RepJacobian {
        matrix,
        method: JacobianMethod::Analytic,
        fd_step: None,
        kink_margin: pre.amin(),
        near_kink: false,
    })
}

fn analytic_columns(model: &MlpModel, layer_index: usize, basis: &Matrix, h_prev: &Vector, pre: &Vector) -> Matrix {
    let w = &model.layers[layer_index].weight;
    let (rows, cols) = w.shape();
    let act = model.activation;
    let mut jac = Matrix::zeros(rows + 1, basis.ncols());
    for k in 0..basis.ncols() {
        let moved = basis_direction(basis, k, rows, cols) * h_prev;
        for r in 0..rows {
            jac[(r + 1, k)] = act.derivative(pre[r]) * moved[r];
        }
    }
    jac
}

/// Analytic Jacobians for a batch of inputs (one per row), computed with one
/// matrix product per basis direction.
pub fn rep_jacobians_batch(
    model: &MlpModel,
    layer_index: usize,
    basis: &Matrix,
    inputs: &Matrix,
) -> Result<Vec<Matrix>> {
    check_basis(model, layer_index, basis)?;
    let w = &model.layers[layer_index];
    let (rows, cols) = w.weight.shape();
    let h_prev = model.layer_input_batch(layer_index, inputs, &[]);
    let pre = w.apply_rows(&h_prev);
    let act = model.activation;
    let n = inputs.nrows();
    let mut out = vec![Matrix::zeros(rows + 1, basis.ncols()); n];
    for k in 0..basis.ncols() {
        let dir = basis_direction(basis, k, rows, cols);
        let moved = &h_prev * dir.transpose();
        for (i, jac) in out.iter_mut().enumerate() {
            for r in 0..rows {
                jac[(r + 1, k)] = act.derivative(pre[(i, r)]) * moved[(i, r)];
            }
        }
    }
    Ok(out)
}

/// Training hyperparameters. Defaults: four hidden layers of 200 relu units,
/// 5000 Adam steps at learning rate 1e-3, batch size 64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![200, 200, 200, 200],
            activation: Activation::Relu,
            steps: 5000,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

pub fn mse(model: &MlpModel, inputs: &Matrix, targets: &Matrix) -> f64 {
    let pred = model.predict_batch(inputs);
    (pred - targets).norm_squared() / (targets.nrows() * targets.ncols()).max(1) as f64
}

struct AdamState {
    m: Vec<(Matrix, Vector)>,
    v: Vec<(Matrix, Vector)>,
    t: i32,
}

/// Trains an MLP on `(inputs, targets)` (one sample per row) by minibatch Adam
/// on the mean squared error.
pub fn train_mlp(inputs: &Matrix, targets: &Matrix, config: &TrainConfig, seed: u64) -> Result<MlpModel> {
    let n = inputs.nrows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if targets.nrows() != n {
        return Err(Error::LengthMismatch { left: n, right: targets.nrows() });
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be >= 1".into()));
    }
    let mut dims = vec![inputs.ncols()];
    dims.extend_from_slice(&config.hidden);
    dims.push(targets.ncols());
    let mut model = MlpModel::init(&dims, config.activation, derive_seed(seed, &[0]))?;
    if config.steps == 0 {
        return Ok(model);
    }
    let mut rng = seeded_rng(derive_seed(seed, &[1]));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut adam = AdamState {
        m: model.layers.iter().map(|l| (l.weight.map(|_| 0.0), l.bias.map(|_| 0.0))).collect(),
        v: model.layers.iter().map(|l| (l.weight.map(|_| 0.0), l.bias.map(|_| 0.0))).collect(),
        t: 0,
    };
    let batch = config.batch_size.min(n);
    for step in 0..config.steps {
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let xb = inputs.select_rows(idx);
        let yb = targets.select_rows(idx);
        let (loss, grads) = loss_and_grads(&model, &xb, &yb);
        if !loss.is_finite() {
            return Err(Error::DivergedTraining { step, loss });
        }
        adam_step(&mut model, &mut adam, &grads, config);
    }
    if model.layers.iter().any(|l| l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite())) {
        return Err(Error::DivergedTraining { step: config.steps, loss: f64::NAN });
    }
    Ok(model)
}

fn loss_and_grads(model: &MlpModel, x: &Matrix, y: &Matrix) -> (f64, Vec<(Matrix, Vector)>) {
    let act = model.activation;
    let nl = model.layers.len();
    let mut inputs_per_layer = Vec::with_capacity(nl);
    let mut pres = Vec::with_capacity(nl);
    let mut cur = x.clone();
    for (i, layer) in model.layers.iter().enumerate() {
        inputs_per_layer.push(cur.clone());
        let z = layer.apply_rows(&cur);
        cur = if i + 1 < nl { z.map(|v| act.apply(v)) } else { z.clone() };
        pres.push(z);
    }
    let count = (y.nrows() * y.ncols()) as f64;
    let diff = &cur - y;
    let loss = diff.norm_squared() / count;
    let mut delta = diff * (2.0 / count);
    let mut grads = vec![(Matrix::zeros(0, 0), Vector::zeros(0)); nl];
    for i in (0..nl).rev() {
        let gw = delta.transpose() * &inputs_per_layer[i];
        let gb = Vector::from_iterator(delta.ncols(), delta.column_iter().map(|c| c.sum()));
        if i > 0 {
            let mut back = &delta * &model.layers[i].weight;
            let pre = &pres[i - 1];
            back.zip_apply(pre, |b, p| *b *= act.derivative(p));
            delta = back;
        }
        grads[i] = (gw, gb);
    }
    (loss, grads)
}

fn adam_step(model: &mut MlpModel, state: &mut AdamState, grads: &[(Matrix, Vector)], cfg: &TrainConfig) {
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t);
    let bc2 = 1.0 - cfg.beta2.powi(state.t);
    let lr = cfg.learning_rate;
    for (i, (gw, gb)) in grads.iter().enumerate() {
        let (mw, mb) = &mut state.m[i];
        let (vw, vb) = &mut state.v[i];
        let layer = &mut model.layers[i];
        update_param(
            layer.weight.as_mut_slice(),
            mw.as_mut_slice(),
            vw.as_mut_slice(),
            gw.as_slice(),
            cfg,
            lr,
            bc1,
            bc2,
        );
        update_param(layer.bias.as_mut_slice(), mb.as_mut_slice(), vb.as_mut_slice(), gb.as_slice(), cfg, lr, bc1, bc2);
    }
}

#[allow(clippy::too_many_arguments)]
fn update_param(
    p: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    g: &[f64],
    cfg: &TrainConfig,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    for j in 0..p.len() {
        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
        let mhat = m[j] / bc1;
        let vhat = v[j] / bc2;
        p[j] -= lr * mhat / (vhat.sqrt() + cfg.epsilon);
    }
}

pub const MODEL_FORMAT: &str = "pnc-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBlock {
    pub weight: MatrixBlock,
    pub bias: VectorBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSection {
    pub activation: Activation,
    pub layers: Vec<LayerBlock>,
}

/// The model file: an MLP section and/or a conv-block section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp: Option<MlpSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<crate::conv_pnc::ConvSection>,
}

impl ModelDocument {
    pub fn empty() -> Self {
        Self { format: MODEL_FORMAT.into(), version: MODEL_VERSION, mlp: None, conv: None }
    }

    pub fn to_text(&self) -> String {
        serial::to_json(self)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc: ModelDocument = serial::parse_json(text)?;
        serial::check_format(&doc.format, MODEL_FORMAT)?;
        serial::check_version(doc.version, MODEL_VERSION)?;
        Ok(doc)
    }
}

impl MlpModel {
    pub fn to_section(&self) -> MlpSection {
        MlpSection {
            activation: self.activation,
            layers: self
                .layers
                .iter()
                .map(|l| LayerBlock {
                    weight: MatrixBlock::from_matrix(&l.weight),
                    bias: VectorBlock::from_vector(&l.bias),
                })
                .collect(),
        }
    }

    pub fn from_section(section: &MlpSection) -> Result<Self> {
        let layers = section
            .layers
            .iter()
            .map(|b| Dense::new(b.weight.to_matrix()?, b.bias.to_vector()?))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, section.activation)
    }

    pub fn to_text(&self) -> String {
        let mut doc = ModelDocument::empty();
        doc.mlp = Some(self.to_section());
        doc.to_text()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc = ModelDocument::from_text(text)?;
        let section = doc.mlp.ok_or_else(|| Error::CorruptFile("model file has no mlp section".into()))?;
        Self::from_section(&section)
    }

    /// SHA-256 of the serialized text, used to pin ensembles to their base.
    pub fn content_hash(&self) -> String {
        serial::sha256_hex(self.to_text().as_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_vector, orthonormal_basis};

    fn random_model(dims: &[usize], act: Activation, seed: u64) -> MlpModel {
        let mut m = MlpModel::init(dims, act, seed).unwrap();
        let mut rng = seeded_rng(seed + 1);
        for l in &mut m.layers {
            l.bias = gaussian_vector(l.bias.len(), &mut rng) * 0.3;
        }
        m
    }

    /// Independent layer-by-layer loop with explicit indexing.
    fn naive_forward(model: &MlpModel, x: &Vector) -> Vec<f64> {
        let mut h: Vec<f64> = x.iter().copied().collect();
        let nl = model.layers().len();
        for (i, l) in model.layers().iter().enumerate() {
            let mut out = vec![0.0; l.out_dim()];
            for r in 0..l.out_dim() {
                let mut s = l.bias[r];
                for c in 0..l.in_dim() {
                    s += l.weight[(r, c)] * h[c];
                }
                out[r] = if i + 1 < nl { model.activation().apply(s) } else { s };
            }
            h = out;
        }
        h
    }

    #[test]
    fn zero_weights_output_is_bias_composition() {
        let layers = vec![
            Dense::new(Matrix::zeros(2, 3), Vector::from_vec(vec![1.0, -1.0])).unwrap(),
            Dense::new(Matrix::zeros(1, 2), Vector::from_vec(vec![0.5])).unwrap(),
        ];
        let m = MlpModel::new(layers, Activation::Relu).unwrap();
        let t = m.forward_trace(&Vector::from_vec(vec![3.0, 4.0, 5.0])).unwrap();
        assert_eq!(t.per_layer_post[0].as_slice(), &[1.0, 0.0]);
        assert_eq!(t.output[0], 0.5);
    }

    #[test]
    fn identity_layer_passes_input() {
        let m = MlpModel::new(vec![Dense::new(Matrix::identity(3, 3), Vector::zeros(3)).unwrap()], Activation::Relu)
            .unwrap();
        let x = Vector::from_vec(vec![1.0, -2.0, 3.0]);
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn forward_matches_naive_loop() {
        let m = random_model(&[5, 200, 200, 200, 200, 3], Activation::Relu, 3);
        let mut rng = seeded_rng(4);
        let x = gaussian_vector(5, &mut rng);
        let out = m.forward(&x).unwrap();
        let naive = naive_forward(&m, &x);
        for (a, b) in out.iter().zip(&naive) {
            assert!((a - b).abs() < 1e-12);
        }
        let batch = m.predict_batch(&Matrix::from_row_slice(1, 5, x.as_slice()));
        assert!((batch.row(0).transpose() - out).amax() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let m = random_model(&[3, 4, 2], Activation::Tanh, 0);
        assert!(matches!(m.forward(&Vector::zeros(2)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let layers = vec![
            Dense::new(Matrix::zeros(2, 3), Vector::zeros(2)).unwrap(),
            Dense::new(Matrix::zeros(1, 3), Vector::zeros(1)).unwrap(),
        ];
        assert!(MlpModel::new(layers, Activation::Relu).is_err());
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let m = random_model(&[3, 6, 6, 2], Activation::Relu, 1);
        let x = Vector::from_vec(vec![0.3, -0.2, 0.9]);
        let a = m.forward_trace(&x).unwrap();
        let b = perturbed_forward(&m, 1, &Matrix::zeros(6, 6), &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_linear_layer_perturbation_is_linear() {
        let mut rng = seeded_rng(2);
        let w = gaussian_matrix(2, 3, &mut rng);
        let m = MlpModel::new(vec![Dense::new(w, Vector::zeros(2)).unwrap()], Activation::Relu).unwrap();
        let d = gaussian_matrix(2, 3, &mut rng);
        let x = gaussian_vector(3, &mut rng);
        let base = m.forward(&x).unwrap();
        let pert = perturbed_forward(&m, 0, &d, &x).unwrap().output;
        assert!(((pert - base) - &d * &x).amax() < 1e-14);
    }

    #[test]
    fn perturbed_forward_matches_materialized_model() {
        let m = random_model(&[4, 8, 8, 3], Activation::Tanh, 5);
        let mut rng = seeded_rng(6);
        let d = gaussian_matrix(8, 8, &mut rng) * 0.2;
        let x = gaussian_vector(4, &mut rng);
        let mut replaced = m.layer(1).unwrap().clone();
        replaced.weight += &d;
        let materialized = m.with_layer(1, replaced).unwrap();
        let a = perturbed_forward(&m, 1, &d, &x).unwrap();
        let b = materialized.forward_trace(&x).unwrap();
        assert!((a.output - b.output).amax() < 1e-14);
        assert!(matches!(perturbed_forward(&m, 1, &Matrix::zeros(3, 3), &x), Err(Error::ShapeMismatch(_))));
        assert!(matches!(perturbed_forward(&m, 7, &d, &x), Err(Error::InvalidLayer { .. })));
    }

    #[test]
    fn small_perturbations_are_lipschitz() {
        let m = random_model(&[3, 10, 10, 2], Activation::Tanh, 9);
        let mut rng = seeded_rng(10);
        let dir = gaussian_matrix(10, 10, &mut rng);
        let x = gaussian_vector(3, &mut rng);
        let base = m.forward(&x).unwrap();
        let secant = |eps: f64| {
            (perturbed_forward(&m, 1, &(&dir * eps), &x).unwrap().output - &base).norm() / (eps * dir.norm())
        };
        let l = secant(1e-3);
        for eps in [1e-4, 1e-5, 1e-6] {
            let diff = (perturbed_forward(&m, 1, &(&dir * eps), &x).unwrap().output - &base).norm();
            assert!(diff <= 1.1 * l * eps * dir.norm());
        }
    }

    #[test]
    fn augmented_rep_prepends_one() {
        let trace = ActivationTrace {
            input: Vector::zeros(1),
            per_layer_pre: vec![Vector::zeros(0), Vector::zeros(1)],
            per_layer_post: vec![Vector::zeros(0)],
            output: Vector::zeros(1),
        };
        assert_eq!(augmented_rep(&trace, 0).unwrap().values().as_slice(), &[1.0]);
        let h = AugmentedRep::from_hidden(&Vector::from_vec(vec![2.0, 3.0]));
        assert_eq!(h.values().as_slice(), &[1.0, 2.0, 3.0]);
        assert!(augmented_rep(&trace, 1).is_err());
    }

    #[test]
    fn theta_times_augmented_rep_is_next_preactivation() {
        let m = random_model(&[3, 7, 5, 2], Activation::Relu, 21);
        let x = Vector::from_vec(vec![0.1, 0.7, -0.4]);
        let t = m.forward_trace(&x).unwrap();
        for l in 0..m.hidden_count() {
            let ybar = augmented_rep(&t, l).unwrap();
            let z = m.layer(l + 1).unwrap().theta() * ybar.values();
            assert!((z - &t.per_layer_pre[l + 1]).amax() < 1e-12);
        }
    }

    #[test]
    fn linear_network_fd_jacobian_is_step_independent() {
        let m = random_model(&[3, 4, 4, 2], Activation::Identity, 2);
        let u = orthonormal_basis(16, 3, 1).unwrap();
        let x = Vector::from_vec(vec![0.5, 0.1, -0.3]);
        let a = rep_jacobian_fd(&m, 1, &u, &x, 1e-2).unwrap();
        let b = rep_jacobian_fd(&m, 1, &u, &x, 1.0).unwrap();
        let exact = rep_jacobian_analytic(&m, 1, &u, &x).unwrap();
        assert!((&a.matrix - &b.matrix).amax() < 1e-12);
        assert!((&a.matrix - &exact.matrix).amax() < 1e-12);
    }

    #[test]
    fn tanh_fd_error_is_second_order() {
        let m = random_model(&[3, 6, 6, 2], Activation::Tanh, 4);
        let u = orthonormal_basis(36, 4, 8).unwrap();
        let x = Vector::from_vec(vec![0.8, -0.5, 0.2]);
        let reference = rep_jacobian_fd(&m, 1, &u, &x, 1e-1 / 4.0).unwrap().matrix;
        let e1 = (rep_jacobian_fd(&m, 1, &u, &x, 1e-1).unwrap().matrix - &reference).norm();
        let e2 = (rep_jacobian_fd(&m, 1, &u, &x, 5e-2).unwrap().matrix - &reference).norm();
        // with e(h) = c h^2: e(h) - e(h/4) against e(h/2) - e(h/4) is 15/3 = 5
        let ratio = e1 / e2;
        assert!((ratio - 5.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn relu_jacobian_stable_away_from_kinks() {
        let m = random_model(&[3, 6, 6, 2], Activation::Relu, 14);
        let u = orthonormal_basis(36, 3, 2).unwrap();
        let mut rng = seeded_rng(15);
        let mut checked = 0;
        for _ in 0..20 {
            let x = gaussian_vector(3, &mut rng);
            let a = rep_jacobian_fd(&m, 1, &u, &x, 1e-3).unwrap();
            if a.near_kink {
                continue;
            }
            let b = rep_jacobian_fd(&m, 1, &u, &x, 1e-4).unwrap();
            assert!((&a.matrix - &b.matrix).amax() < 1e-9);
            checked += 1;
        }
        assert!(checked > 5);
    }

    #[test]
    fn jacobian_first_row_is_zero_and_analytic_matches_fd() {
        let m = random_model(&[3, 9, 9, 2], Activation::Tanh, 30);
        let u = orthonormal_basis(81, 5, 31).unwrap();
        let mut rng = seeded_rng(32);
        for _ in 0..5 {
            let x = gaussian_vector(3, &mut rng);
            let fd = rep_jacobian_fd(&m, 1, &u, &x, 1e-5).unwrap();
            let an = rep_jacobian_analytic(&m, 1, &u, &x).unwrap();
            assert!(fd.matrix.row(0).iter().all(|v| *v == 0.0));
            assert!(an.matrix.row(0).iter().all(|v| *v == 0.0));
            let rel = (&fd.matrix - &an.matrix).norm() / an.matrix.norm();
            assert!(rel < 1e-4, "rel {rel}");
        }
        let batch = Matrix::from_fn(4, 3, |i, j| (i as f64 - 1.5) * 0.3 + j as f64 * 0.1);
        let js = rep_jacobians_batch(&m, 1, &u, &batch).unwrap();
        for (i, j) in js.iter().enumerate() {
            let single = rep_jacobian_analytic(&m, 1, &u, &batch.row(i).transpose()).unwrap();
            assert!((j - &single.matrix).amax() < 1e-12);
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let x = Matrix::from_fn(10, 2, |i, j| (i + j) as f64 * 0.1);
        let y = Matrix::from_fn(10, 1, |i, _| i as f64);
        let cfg = TrainConfig { hidden: vec![5], steps: 0, ..TrainConfig::default() };
        let m = train_mlp(&x, &y, &cfg, 3).unwrap();
        assert_eq!(m, MlpModel::init(&[2, 5, 1], Activation::Relu, derive_seed(3, &[0])).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let mut rng = seeded_rng(40);
        let x = gaussian_matrix(200, 2, &mut rng);
        let y = x.map(|v| v.sin()).columns(0, 1).into_owned();
        let cfg = TrainConfig { hidden: vec![16, 16], steps: 300, batch_size: 32, ..TrainConfig::default() };
        let a = train_mlp(&x, &y, &cfg, 7).unwrap();
        let b = train_mlp(&x, &y, &cfg, 7).unwrap();
        assert_eq!(a, b);
        let init = train_mlp(&x, &y, &TrainConfig { steps: 0, ..cfg.clone() }, 7).unwrap();
        assert!(mse(&a, &x, &y) <= mse(&init, &x, &y));
    }

    #[test]
    fn linear_target_is_fit_closely() {
        let mut rng = seeded_rng(50);
        let x = gaussian_matrix(256, 3, &mut rng);
        let a = Matrix::from_row_slice(2, 3, &[1.0, -0.5, 0.25, 0.3, 0.8, -1.2]);
        let y = &x * a.transpose();
        let cfg = TrainConfig {
            hidden: vec![16],
            activation: Activation::Identity,
            steps: 3000,
            batch_size: 64,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let m = train_mlp(&x, &y, &cfg, 1).unwrap();
        let var = y.variance();
        assert!(mse(&m, &x, &y) < 1e-3 * var, "mse {} var {var}", mse(&m, &x, &y));
    }

    #[test]
    fn divergence_is_reported() {
        let x = Matrix::from_element(8, 1, 1e200);
        let y = Matrix::from_element(8, 1, 1.0);
        let cfg = TrainConfig { hidden: vec![4], steps: 5, batch_size: 4, ..TrainConfig::default() };
        assert!(matches!(train_mlp(&x, &y, &cfg, 0), Err(Error::DivergedTraining { .. })));
    }

    #[test]
    fn model_text_round_trip_is_bit_exact() {
        let m = random_model(&[3, 5, 2], Activation::Tanh, 60);
        let text = m.to_text();
        let back = MlpModel::from_text(&text).unwrap();
        assert_eq!(m, back);
        assert_eq!(m.content_hash(), back.content_hash());
        let bumped = text.replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(MlpModel::from_text(&bumped), Err(Error::VersionMismatch { found: 9, .. })));
    }
}
