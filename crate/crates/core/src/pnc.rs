//! Ensemble construction by random low-rank perturbation of a hidden layer
//! followed by a closed-form ridge refit of the next affine layer.
//!
//! A member perturbs `W_l` by `sigma * reshape(U z)` with `U` a random
//! orthonormal basis shared by all members and `z ~ N(0, I_K)`. The layer
//! `l + 1` is then refit so that on the calibration inputs its output on the
//! perturbed representation matches the base model's original pre-activations.
//!
//! Members store parameter deltas, so a member evaluates as the base model with
//! `W_l + dW` and `Theta_{l+1} + dTheta` substituted.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{reshape_flat, Dense, MlpModel};
use crate::numerics::{
    augment_ones, derive_seed, gaussian_vector, orthonormal_basis, seeded_rng, Matrix, SpdSystem, Vector,
};
use crate::serial::{self, MatrixBlock, VectorBlock};

const BASIS_TAG: u64 = 0xB0;
const COEFF_TAG: u64 = 0xC0;
const BOOTSTRAP_TAG: u64 = 0xB5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PncConfig {
    pub target_layers: Vec<usize>,
    pub ensemble_size: usize,
    pub rank: usize,
    pub scale: f64,
    pub ridge: f64,
    pub bootstrap_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for PncConfig {
    /// `M = 50`, `K = 20`, `lambda = 1e-2`, `sigma = 8`, full calibration set,
    /// perturbing the last hidden layer of a four-hidden-layer network.
    fn default() -> Self {
        Self {
            target_layers: vec![3],
            ensemble_size: 50,
            rank: 20,
            scale: 8.0,
            ridge: 1e-2,
            bootstrap_fraction: None,
            seed: 0,
        }
    }
}

impl PncConfig {
    /// Same settings, perturbing the deepest hidden layer of `model`.
    pub fn targeting_last_hidden(mut self, model: &MlpModel) -> Self {
        self.target_layers = vec![model.hidden_count().saturating_sub(1)];
        self
    }

    pub fn validate(&self, model: &MlpModel) -> Result<()> {
        if self.ensemble_size == 0 {
            return Err(Error::InvalidConfig("ensemble size must be >= 1".into()));
        }
        if self.rank == 0 {
            return Err(Error::InvalidConfig("rank must be >= 1".into()));
        }
        if !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidConfig(format!("scale must be >= 0, got {}", self.scale)));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(Error::InvalidConfig(format!("ridge must be >= 0, got {}", self.ridge)));
        }
        if let Some(f) = self.bootstrap_fraction {
            check_fraction(f)?;
        }
        if self.target_layers.is_empty() {
            return Err(Error::InvalidConfig("at least one target layer is required".into()));
        }
        for &l in &self.target_layers {
            model.check_hidden(l)?;
        }
        for pair in self.target_layers.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::InvalidConfig(format!(
                    "target layers must be strictly increasing, got {:?}",
                    self.target_layers
                )));
            }
            if pair[1] == pair[0] + 1 {
                return Err(Error::OverlappingLayers { first: pair[0], second: pair[1] });
            }
        }
        for &l in &self.target_layers {
            let w = &model.layers()[l].weight;
            if self.rank > w.len() {
                return Err(Error::InvalidRank { rank: self.rank, dim: w.len() });
            }
        }
        Ok(())
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::InvalidFraction(f));
    }
    Ok(())
}

/// The shared orthonormal basis for layer `layer`'s flattened weight.
pub fn layer_basis(model: &MlpModel, layer: usize, rank: usize, seed: u64) -> Result<Matrix> {
    model.check_hidden(layer)?;
    let w = &model.layers()[layer].weight;
    orthonormal_basis(w.len(), rank, derive_seed(seed, &[BASIS_TAG, layer as u64]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberPerturbation {
    pub layer_index: usize,
    pub basis: Arc<Matrix>,
    pub coeffs: Vector,
    pub scale: f64,
    pub weight_shape: (usize, usize),
}

impl MemberPerturbation {
    /// `sigma * reshape(U z)`.
    pub fn delta_w(&self) -> Matrix {
        let flat = &*self.basis * &self.coeffs * self.scale;
        reshape_flat(flat.as_slice(), self.weight_shape.0, self.weight_shape.1)
    }
}

pub fn sample_member(
    config: &PncConfig,
    model: &MlpModel,
    layer: usize,
    member_index: usize,
    basis: Arc<Matrix>,
) -> Result<MemberPerturbation> {
    model.check_hidden(layer)?;
    let shape = model.layers()[layer].weight.shape();
    if basis.nrows() != shape.0 * shape.1 {
        return Err(Error::ShapeMismatch(format!(
            "basis has {} rows, layer {layer} has {} weights",
            basis.nrows(),
            shape.0 * shape.1
        )));
    }
    let mut rng = seeded_rng(derive_seed(config.seed, &[COEFF_TAG, layer as u64, member_index as u64]));
    let coeffs = gaussian_vector(basis.ncols(), &mut rng);
    Ok(MemberPerturbation { layer_index: layer, basis, coeffs, scale: config.scale, weight_shape: shape })
}

/// One ridge repair: fit `Theta'` minimizing
/// `||design Theta'^T - targets||_F^2 + lambda ||Theta' - Theta||_F^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionSystem {
    pub design: Matrix,
    pub reference_design: Matrix,
    pub targets: Matrix,
    pub base_theta: Matrix,
    pub ridge: f64,
    pub subset_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionResult {
    pub corrected_theta: Matrix,
    /// `design Theta_hat^T - targets`.
    pub calib_residual: Matrix,
    pub theta_shift_norm: f64,
    /// Smallest eigenvalue of `design^T design + lambda I`.
    pub min_singular_value: f64,
}

impl CorrectionResult {
    pub fn theta_delta(&self, base_theta: &Matrix) -> Matrix {
        &self.corrected_theta - base_theta
    }
}

/// Builds the system directly from the inputs to the perturbed layer.
/// `perturbed_input` and `base_input` hold one calibration sample per row.
pub fn assemble_from_inputs(
    model: &MlpModel,
    layer: usize,
    perturbed_layer: &Dense,
    perturbed_input: &Matrix,
    base_input: &Matrix,
    ridge: f64,
    subset_ids: Vec<usize>,
) -> Result<CorrectionSystem> {
    model.check_hidden(layer)?;
    if base_input.nrows() == 0 {
        return Err(Error::EmptyCalibration);
    }
    if perturbed_input.shape() != base_input.shape() {
        return Err(Error::ShapeMismatch("perturbed and base calibration inputs differ in shape".into()));
    }
    let act = model.activation();
    let base = &model.layers()[layer];
    let mut h_base = base.apply_rows(base_input);
    h_base.apply(|v| *v = act.apply(*v));
    let mut h_pert = perturbed_layer.apply_rows(perturbed_input);
    h_pert.apply(|v| *v = act.apply(*v));
    let base_theta = model.layers()[layer + 1].theta();
    let reference_design = augment_ones(&h_base);
    let targets = &reference_design * base_theta.transpose();
    Ok(CorrectionSystem { design: augment_ones(&h_pert), reference_design, targets, base_theta, ridge, subset_ids })
}

/// Single-layer system on the given calibration inputs (one per row).
pub fn assemble_correction(
    model: &MlpModel,
    perturbation: &MemberPerturbation,
    calibration: &Matrix,
    ridge: f64,
) -> Result<CorrectionSystem> {
    if calibration.nrows() == 0 {
        return Err(Error::EmptyCalibration);
    }
    let l = perturbation.layer_index;
    let base = model.layer(l)?;
    let delta = perturbation.delta_w();
    if delta.shape() != base.weight.shape() {
        return Err(Error::ShapeMismatch("perturbation does not match layer weight".into()));
    }
    let perturbed = Dense { weight: &base.weight + &delta, bias: base.bias.clone() };
    let input = model.layer_input_batch(l, calibration, &[]);
    assemble_from_inputs(model, l, &perturbed, &input, &input, ridge, (0..calibration.nrows()).collect())
}

/// Closed-form solve, written as a shift from the base parameters:
/// `Theta_hat - Theta = (G_v^{-1} X_v^T (T - X_v Theta^T))^T` with
/// `G_v = X_v^T X_v + lambda I`. With `X_v = X` the shift is exactly zero.
pub fn solve_correction(system: &CorrectionSystem) -> Result<CorrectionResult> {
    let x = &system.design;
    if x.nrows() == 0 {
        return Err(Error::EmptyCalibration);
    }
    if x.ncols() != system.base_theta.ncols() || system.targets.nrows() != x.nrows() {
        return Err(Error::ShapeMismatch("correction system blocks are inconsistent".into()));
    }
    let gram = x.tr_mul(x);
    let spd = SpdSystem::new(gram, system.ridge)?;
    let resid0 = &system.targets - x * system.base_theta.transpose();
    let shift = if system.ridge == 0.0 && x.nrows() < x.ncols() {
        // Fewer rows than columns: the ridgeless limit is the interpolant
        // closest to Theta, X_v^T (X_v X_v^T)^{-1} R.
        let kernel = SpdSystem::new(x * x.transpose(), 0.0)?.factor()?;
        x.tr_mul(&kernel.solve(&resid0)?)
    } else {
        spd.factor()?.solve(&x.tr_mul(&resid0))?
    };
    let corrected_theta = &system.base_theta + shift.transpose();
    let calib_residual = x * corrected_theta.transpose() - &system.targets;
    Ok(CorrectionResult {
        theta_shift_norm: shift.norm(),
        min_singular_value: spd.min_eigenvalue(),
        corrected_theta,
        calib_residual,
    })
}

/// Ridge objective of a candidate `theta`.
pub fn correction_objective(system: &CorrectionSystem, theta: &Matrix) -> f64 {
    let fit = &system.design * theta.transpose() - &system.targets;
    fit.norm_squared() + system.ridge * (theta - &system.base_theta).norm_squared()
}

/// `max(1, round_half_up(f * n))` indices drawn with replacement from `0..n`.
pub fn bootstrap_subset(n: usize, fraction: f64, stream_seed: u64) -> Result<Vec<usize>> {
    check_fraction(fraction)?;
    if n == 0 {
        return Err(Error::EmptyCalibration);
    }
    let size = ((fraction * n as f64) + 0.5).floor().max(1.0) as usize;
    let mut rng = seeded_rng(stream_seed);
    Ok((0..size).map(|_| rng.random_range(0..n)).collect())
}

/// `m` independent bootstrap multisets.
pub fn bootstrap_subsets(n: usize, fraction: f64, m: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    (0..m).map(|j| bootstrap_subset(n, fraction, derive_seed(seed, &[BOOTSTRAP_TAG, j as u64]))).collect()
}

/// One perturb-and-repair step of a member.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRepair {
    pub layer: usize,
    pub coeffs: Vector,
    pub delta_w: Matrix,
    /// Change of `Theta_{layer+1} = [b, W]`; zero for uncorrected members.
    pub theta_delta: Matrix,
    pub subset: Option<Vec<usize>>,
    pub min_singular_value: f64,
    /// `||X_v - X||_F` on the calibration rows.
    pub calib_shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PncMember {
    pub index: usize,
    pub repairs: Vec<LayerRepair>,
}

impl PncMember {
    /// Replacement layers, in network order.
    pub fn substitutions(&self, base: &MlpModel) -> Vec<(usize, Dense)> {
        let mut out = Vec::with_capacity(2 * self.repairs.len());
        for r in &self.repairs {
            let w = &base.layers()[r.layer];
            out.push((r.layer, Dense { weight: &w.weight + &r.delta_w, bias: w.bias.clone() }));
            let next = base.layers()[r.layer + 1].theta() + &r.theta_delta;
            out.push((r.layer + 1, Dense::from_theta(&next)));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct PncEnsemble {
    base: Arc<MlpModel>,
    config: PncConfig,
    corrected: bool,
    bases: Vec<Arc<Matrix>>,
    members: Vec<PncMember>,
}

fn tag_member(err: Error, member: usize, layer: usize) -> Error {
    match err {
        Error::SingularSystem(msg) => Error::SingularSystem(format!("member {member}, layer {layer}: {msg}")),
        Error::NonFiniteResult(msg) => Error::NonFiniteResult(format!("member {member}, layer {layer}: {msg}")),
        other => other,
    }
}

fn select_rows(m: &Matrix, ids: &[usize]) -> Matrix {
    m.select_rows(ids)
}

/// Builds an ensemble with one target layer.
pub fn build_single_layer(model: Arc<MlpModel>, calibration: &Matrix, config: &PncConfig) -> Result<PncEnsemble> {
    if config.target_layers.len() != 1 {
        return Err(Error::InvalidConfig(format!(
            "single-layer construction needs exactly one target layer, got {:?}",
            config.target_layers
        )));
    }
    build_ensemble(model, calibration, config, true)
}

pub fn build_multi_layer(model: Arc<MlpModel>, calibration: &Matrix, config: &PncConfig) -> Result<PncEnsemble> {
    build_ensemble(model, calibration, config, true)
}

/// Builds members sequentially layer by layer. With `correct == false` the
/// perturbations are applied without any repair.
pub fn build_ensemble(
    model: Arc<MlpModel>,
    calibration: &Matrix,
    config: &PncConfig,
    correct: bool,
) -> Result<PncEnsemble> {
    config.validate(&model)?;
    if calibration.nrows() == 0 {
        return Err(Error::EmptyCalibration);
    }
    if calibration.ncols() != model.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "calibration inputs have {} columns, model expects {}",
            calibration.ncols(),
            model.input_dim()
        )));
    }
    let bases: Vec<Arc<Matrix>> = config
        .target_layers
        .iter()
        .map(|&l| layer_basis(&model, l, config.rank, config.seed).map(Arc::new))
        .collect::<Result<_>>()?;
    let first = config.target_layers[0];
    // Base-model inputs to every layer from the first target on.
    let mut base_inputs = vec![Matrix::zeros(0, 0); model.num_layers()];
    base_inputs[first] = model.layer_input_batch(first, calibration, &[]);
    for l in first + 1..model.num_layers() {
        base_inputs[l] = model.propagate(l - 1, l, &base_inputs[l - 1], &[]);
    }
    let members = (0..config.ensemble_size)
        .into_par_iter()
        .map(|m| build_member(&model, &base_inputs, &bases, config, m, correct))
        .collect::<Result<Vec<_>>>()?;
    Ok(PncEnsemble { base: model, config: config.clone(), corrected: correct, bases, members })
}

fn build_member(
    model: &MlpModel,
    base_inputs: &[Matrix],
    bases: &[Arc<Matrix>],
    config: &PncConfig,
    m: usize,
    correct: bool,
) -> Result<PncMember> {
    let n = base_inputs[config.target_layers[0]].nrows();
    let first = config.target_layers[0];
    let mut repairs: Vec<LayerRepair> = Vec::with_capacity(config.target_layers.len());
    let mut subs: Vec<(usize, Dense)> = Vec::new();
    for (j, &l) in config.target_layers.iter().enumerate() {
        let pert = sample_member(config, model, l, m, bases[j].clone())?;
        let subset = match config.bootstrap_fraction {
            Some(f) => Some(bootstrap_subset(n, f, derive_seed(config.seed, &[BOOTSTRAP_TAG, l as u64, m as u64]))?),
            None => None,
        };
        let ids: Vec<usize> = subset.clone().unwrap_or_else(|| (0..n).collect());
        let base_in = select_rows(&base_inputs[l], &ids);
        let pert_in = if subs.is_empty() {
            base_in.clone()
        } else {
            let start = select_rows(&base_inputs[first], &ids);
            let refs: Vec<(usize, &Dense)> = subs.iter().map(|(i, d)| (*i, d)).collect();
            model.propagate(first, l, &start, &refs)
        };
        let base_layer = &model.layers()[l];
        let delta_w = pert.delta_w();
        let perturbed = Dense { weight: &base_layer.weight + &delta_w, bias: base_layer.bias.clone() };
        let system = assemble_from_inputs(model, l, &perturbed, &pert_in, &base_in, config.ridge, ids)?;
        let calib_shift = (&system.design - &system.reference_design).norm();
        let (theta_delta, min_sv) = if correct {
            let res = solve_correction(&system).map_err(|e| tag_member(e, m, l))?;
            (res.theta_delta(&system.base_theta), res.min_singular_value)
        } else {
            let g = SpdSystem::new(system.design.tr_mul(&system.design), config.ridge)?;
            (Matrix::zeros(system.base_theta.nrows(), system.base_theta.ncols()), g.min_eigenvalue())
        };
        let repair = LayerRepair {
            layer: l,
            coeffs: pert.coeffs,
            delta_w,
            theta_delta,
            subset,
            min_singular_value: min_sv,
            calib_shift,
        };
        let one = PncMember { index: m, repairs: vec![repair.clone()] };
        subs.extend(one.substitutions(model));
        repairs.push(repair);
    }
    Ok(PncMember { index: m, repairs })
}

impl PncEnsemble {
    pub fn base(&self) -> &Arc<MlpModel> {
        &self.base
    }

    pub fn config(&self) -> &PncConfig {
        &self.config
    }

    pub fn is_corrected(&self) -> bool {
        self.corrected
    }

    pub fn members(&self) -> &[PncMember] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Shared basis of target layer `j` (position in `target_layers`).
    pub fn basis(&self, j: usize) -> &Arc<Matrix> {
        &self.bases[j]
    }

    pub fn member_model(&self, m: usize) -> Result<MlpModel> {
        let member = self.members.get(m).ok_or(Error::EmptyEnsemble)?;
        let mut model = (*self.base).clone();
        for (i, layer) in member.substitutions(&self.base) {
            model = model.with_layer(i, layer)?;
        }
        Ok(model)
    }

    /// Outputs of every member on a batch (one sample per row).
    pub fn member_predictions(&self, inputs: &Matrix) -> Vec<Matrix> {
        let first = self.config.target_layers[0];
        let prefix = self.base.layer_input_batch(first, inputs, &[]);
        self.members
            .par_iter()
            .map(|member| {
                let subs = member.substitutions(&self.base);
                let refs: Vec<(usize, &Dense)> = subs.iter().map(|(i, d)| (*i, d)).collect();
                self.base.propagate(first, self.base.num_layers(), &prefix, &refs)
            })
            .collect()
    }

    /// Post-activations of the first target layer under each member's
    /// perturbation, alongside the base activations.
    pub fn hidden_shift(&self, inputs: &Matrix) -> (Matrix, Vec<Matrix>) {
        let l = self.config.target_layers[0];
        let prev = self.base.layer_input_batch(l, inputs, &[]);
        let base_h = self.base.propagate(l, l + 1, &prev, &[]);
        let perturbed = self
            .members
            .par_iter()
            .map(|member| {
                let r = &member.repairs[0];
                let w = &self.base.layers()[l];
                let d = Dense { weight: &w.weight + &r.delta_w, bias: w.bias.clone() };
                self.base.propagate(l, l + 1, &prev, &[(l, &d)])
            })
            .collect();
        (base_h, perturbed)
    }

    /// Rebuilds the correction system of member `m` at target position `j`.
    pub fn correction_system(&self, m: usize, j: usize, calibration: &Matrix) -> Result<CorrectionSystem> {
        let member = self.members.get(m).ok_or(Error::EmptyEnsemble)?;
        let repair = member
            .repairs
            .get(j)
            .ok_or_else(|| Error::InvalidLayer { index: j, reason: "no such target position".into() })?;
        let first = self.config.target_layers[0];
        let l = repair.layer;
        let ids: Vec<usize> = repair.subset.clone().unwrap_or_else(|| (0..calibration.nrows()).collect());
        if ids.iter().any(|&i| i >= calibration.nrows()) {
            return Err(Error::ShapeMismatch("calibration set is smaller than recorded subset ids".into()));
        }
        let rows = calibration.select_rows(&ids);
        let base_in = self.base.layer_input_batch(l, &rows, &[]);
        let upstream = PncMember { index: m, repairs: member.repairs[..j].to_vec() };
        let subs = upstream.substitutions(&self.base);
        let refs: Vec<(usize, &Dense)> = subs.iter().map(|(i, d)| (*i, d)).collect();
        let pert_in = if refs.is_empty() {
            base_in.clone()
        } else {
            let start = self.base.layer_input_batch(first, &rows, &[]);
            self.base.propagate(first, l, &start, &refs)
        };
        let w = &self.base.layers()[l];
        let perturbed = Dense { weight: &w.weight + &repair.delta_w, bias: w.bias.clone() };
        assemble_from_inputs(&self.base, l, &perturbed, &pert_in, &base_in, self.config.ridge, ids)
    }

    /// The same ensemble with every repair removed.
    pub fn without_correction(&self) -> PncEnsemble {
        let members = self
            .members
            .iter()
            .map(|m| PncMember {
                index: m.index,
                repairs: m
                    .repairs
                    .iter()
                    .map(|r| LayerRepair { theta_delta: r.theta_delta.map(|_| 0.0), ..r.clone() })
                    .collect(),
            })
            .collect();
        PncEnsemble { members, corrected: false, ..self.clone() }
    }

    /// Smallest conditioning estimate over all members and layers.
    pub fn min_conditioning(&self) -> f64 {
        self.members.iter().flat_map(|m| m.repairs.iter().map(|r| r.min_singular_value)).fold(f64::INFINITY, f64::min)
    }
}

pub const ENSEMBLE_FORMAT: &str = "pnc-ensemble";
pub const ENSEMBLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RepairRecord {
    layer: usize,
    coeffs: VectorBlock,
    delta_w: MatrixBlock,
    theta_delta: MatrixBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subset: Option<Vec<usize>>,
    min_singular_value: f64,
    calib_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MemberRecord {
    index: usize,
    repairs: Vec<RepairRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EnsembleDocument {
    format: String,
    version: u32,
    base_model_sha256: String,
    corrected: bool,
    config: PncConfig,
    members: Vec<MemberRecord>,
}

impl PncEnsemble {
    pub fn to_text(&self) -> String {
        let doc = EnsembleDocument {
            format: ENSEMBLE_FORMAT.into(),
            version: ENSEMBLE_VERSION,
            base_model_sha256: self.base.content_hash(),
            corrected: self.corrected,
            config: self.config.clone(),
            members: self
                .members
                .iter()
                .map(|m| MemberRecord {
                    index: m.index,
                    repairs: m
                        .repairs
                        .iter()
                        .map(|r| RepairRecord {
                            layer: r.layer,
                            coeffs: VectorBlock::from_vector(&r.coeffs),
                            delta_w: MatrixBlock::from_matrix(&r.delta_w),
                            theta_delta: MatrixBlock::from_matrix(&r.theta_delta),
                            subset: r.subset.clone(),
                            min_singular_value: r.min_singular_value,
                            calib_shift: r.calib_shift,
                        })
                        .collect(),
                })
                .collect(),
        };
        serial::to_json(&doc)
    }

    /// Parses an ensemble and binds it to `base`, whose hash must match.
    pub fn from_text(text: &str, base: Arc<MlpModel>) -> Result<Self> {
        let doc: EnsembleDocument = serial::parse_json(text)?;
        serial::check_format(&doc.format, ENSEMBLE_FORMAT)?;
        serial::check_version(doc.version, ENSEMBLE_VERSION)?;
        let hash = base.content_hash();
        if hash != doc.base_model_sha256 {
            return Err(Error::CorruptFile(format!(
                "ensemble was built for base model {} but {} was supplied",
                doc.base_model_sha256, hash
            )));
        }
        doc.config.validate(&base)?;
        let members = doc
            .members
            .iter()
            .map(|m| {
                let repairs = m
                    .repairs
                    .iter()
                    .map(|r| {
                        Ok(LayerRepair {
                            layer: r.layer,
                            coeffs: r.coeffs.to_vector()?,
                            delta_w: r.delta_w.to_matrix()?,
                            theta_delta: r.theta_delta.to_matrix()?,
                            subset: r.subset.clone(),
                            min_singular_value: r.min_singular_value,
                            calib_shift: r.calib_shift,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(PncMember { index: m.index, repairs })
            })
            .collect::<Result<Vec<_>>>()?;
        for m in &members {
            if m.repairs.len() != doc.config.target_layers.len()
                || m.repairs.iter().zip(&doc.config.target_layers).any(|(r, &l)| r.layer != l)
            {
                return Err(Error::CorruptFile(format!("member {} does not match the target layers", m.index)));
            }
            for r in &m.repairs {
                let w = &base.layers()[r.layer].weight;
                let t = base.layers()[r.layer + 1].theta();
                if r.delta_w.shape() != w.shape() || r.theta_delta.shape() != t.shape() {
                    return Err(Error::CorruptFile(format!("member {} has mis-shaped deltas", m.index)));
                }
            }
        }
        let bases = doc
            .config
            .target_layers
            .iter()
            .map(|&l| layer_basis(&base, l, doc.config.rank, doc.config.seed).map(Arc::new))
            .collect::<Result<_>>()?;
        Ok(Self { base, config: doc.config, corrected: doc.corrected, bases, members })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, base: Arc<MlpModel>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?, base)
    }
}
