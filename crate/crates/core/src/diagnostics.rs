//! Quantities describing how much of a perturbation a correction leaves
//! behind at a test point, and how that residual is predicted by calibration
//! geometry.
//!
//! Notation: `X` is the augmented base calibration design (`B x (d+1)`),
//! `G = X^T X + lambda I`, and `ybar` is an augmented test representation.
//! Leverage is `h = ybar^T G^{-1} ybar`, hat weights are `w = X G^{-1} ybar`,
//! and the corrected sensitivity is `A = Theta (J_x - sum_i w_i J_{x_i})`,
//! a `q x K` map from basis coefficients to the residual.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::net::{rep_jacobian_analytic, rep_jacobians_batch, reshape_flat, Dense, MlpModel};
use crate::numerics::{augment_ones, seeded_rng, Matrix, SpdFactor, SpdSystem, Vector};
use crate::pnc::{assemble_from_inputs, solve_correction, PncEnsemble};

/// Cached factorization of `G = X^T X + lambda I` for one calibration design.
#[derive(Debug, Clone)]
pub struct RidgeGeometry {
    design: Matrix,
    ridge: f64,
    factor: SpdFactor,
}

impl RidgeGeometry {
    pub fn new(design: Matrix, ridge: f64) -> Result<Self> {
        if design.nrows() == 0 {
            return Err(Error::EmptyCalibration);
        }
        let factor = SpdSystem::new(design.tr_mul(&design), ridge)?.factor()?;
        Ok(Self { design, ridge, factor })
    }

    pub fn design(&self) -> &Matrix {
        &self.design
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn dim(&self) -> usize {
        self.design.ncols()
    }

    fn check(&self, ybar: &Vector) -> Result<()> {
        if ybar.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "representation has length {}, design has {} columns",
                ybar.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `G^{-1} ybar`.
    pub fn solve(&self, ybar: &Vector) -> Result<Vector> {
        self.check(ybar)?;
        self.factor.solve_vec(ybar)
    }

    pub fn leverage(&self, ybar: &Vector) -> Result<f64> {
        let g = self.solve(ybar)?;
        Ok(ybar.dot(&g).max(0.0))
    }

    pub fn hat_weights(&self, ybar: &Vector) -> Result<Vector> {
        Ok(&self.design * self.solve(ybar)?)
    }

    /// Hat weights for a batch of representations (one per row), `B x n`.
    pub fn hat_weights_batch(&self, reps: &Matrix) -> Result<Matrix> {
        let g = self.factor.solve(&reps.transpose())?;
        Ok(&self.design * g)
    }

    pub fn leverage_batch(&self, reps: &Matrix) -> Result<Vec<f64>> {
        let g = self.factor.solve(&reps.transpose())?;
        Ok((0..reps.nrows()).map(|i| reps.row(i).transpose().dot(&g.column(i)).max(0.0)).collect())
    }
}

pub fn ridge_leverage(ybar: &Vector, design: &Matrix, ridge: f64) -> Result<f64> {
    RidgeGeometry::new(design.clone(), ridge)?.leverage(ybar)
}

pub fn hat_weights(ybar: &Vector, design: &Matrix, ridge: f64) -> Result<Vector> {
    RidgeGeometry::new(design.clone(), ridge)?.hat_weights(ybar)
}

/// `Theta (J_x - sum_i w_i J_{x_i})`.
pub fn corrected_sensitivity(
    theta: &Matrix,
    j_x: &Matrix,
    weights: &Vector,
    calib_jacobians: &[Matrix],
) -> Result<Matrix> {
    let predicted = predicted_jacobian(j_x.shape(), weights, calib_jacobians)?;
    if theta.ncols() != j_x.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "theta has {} columns, Jacobian has {} rows",
            theta.ncols(),
            j_x.nrows()
        )));
    }
    Ok(theta * (j_x - predicted))
}

/// `T = sum_i w_i J_{x_i}`.
pub fn predicted_jacobian(shape: (usize, usize), weights: &Vector, calib_jacobians: &[Matrix]) -> Result<Matrix> {
    if weights.len() != calib_jacobians.len() {
        return Err(Error::LengthMismatch { left: weights.len(), right: calib_jacobians.len() });
    }
    let mut t = Matrix::zeros(shape.0, shape.1);
    for (w, j) in weights.iter().zip(calib_jacobians) {
        if j.shape() != shape {
            return Err(Error::ShapeMismatch("calibration Jacobians differ in shape".into()));
        }
        t += j * *w;
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub leverage: f64,
    pub hat_weights: Vec<f64>,
    #[serde(skip)]
    pub predicted_jacobian: Matrix,
    #[serde(skip)]
    pub test_jacobian: Matrix,
    #[serde(skip)]
    pub sensitivity: Matrix,
}

/// Calibration-side state needed to linearize the residual of one layer.
#[derive(Debug, Clone)]
pub struct SensitivityContext<'a> {
    pub model: &'a MlpModel,
    pub layer: usize,
    pub basis: &'a Matrix,
    pub calibration: Matrix,
    pub geometry: RidgeGeometry,
    calib_prev: Matrix,
    calib_pre: Matrix,
}

impl<'a> SensitivityContext<'a> {
    pub fn new(model: &'a MlpModel, layer: usize, basis: &'a Matrix, calibration: &Matrix, ridge: f64) -> Result<Self> {
        model.check_hidden(layer)?;
        if calibration.nrows() == 0 {
            return Err(Error::EmptyCalibration);
        }
        let calib_prev = model.layer_input_batch(layer, calibration, &[]);
        let calib_pre = model.layers()[layer].apply_rows(&calib_prev);
        let act = model.activation();
        let design = augment_ones(&calib_pre.map(|v| act.apply(v)));
        Ok(Self {
            model,
            layer,
            basis,
            calibration: calibration.clone(),
            geometry: RidgeGeometry::new(design, ridge)?,
            calib_prev,
            calib_pre,
        })
    }

    pub fn theta(&self) -> Matrix {
        self.model.layers()[self.layer + 1].theta()
    }

    /// Augmented base representations of a batch, one per row.
    pub fn reps(&self, inputs: &Matrix) -> Matrix {
        augment_ones(&self.model.hidden_batch(self.layer, inputs, &[]))
    }

    /// Full report at one point, built from per-point Jacobians.
    pub fn report(&self, x: &Vector) -> Result<SensitivityReport> {
        let trace = self.model.forward_trace(x)?;
        let ybar = trace.per_layer_post[self.layer].clone().insert_row(0, 1.0);
        let w = self.geometry.hat_weights(&ybar)?;
        let j_x = rep_jacobian_analytic(self.model, self.layer, self.basis, x)?.matrix;
        let jacs = rep_jacobians_batch(self.model, self.layer, self.basis, &self.calibration)?;
        let t = predicted_jacobian(j_x.shape(), &w, &jacs)?;
        let a = self.theta() * (&j_x - &t);
        Ok(SensitivityReport {
            leverage: self.geometry.leverage(&ybar)?,
            hat_weights: w.iter().copied().collect(),
            predicted_jacobian: t,
            test_jacobian: j_x,
            sensitivity: a,
        })
    }

    /// `J v` for every row of a batch given its layer input and
    /// pre-activation, as `n x (d + 1)` with a zero first column.
    fn directional(&self, prev: &Matrix, pre: &Matrix, dir: &Matrix) -> Matrix {
        let act = self.model.activation();
        let mut moved = prev * dir.transpose();
        moved.zip_apply(pre, |m, p| *m *= act.derivative(p));
        moved.insert_column(0, 0.0)
    }

    /// `A(x) v` for each row of `inputs`, returned as `n x q`.
    pub fn apply_batch(&self, inputs: &Matrix, v: &Vector) -> Result<Matrix> {
        let w_layer = &self.model.layers()[self.layer].weight;
        if v.len() != self.basis.ncols() {
            return Err(Error::ShapeMismatch("coefficient vector does not match basis rank".into()));
        }
        let flat = self.basis * v;
        let dir = reshape_flat(flat.as_slice(), w_layer.nrows(), w_layer.ncols());
        let prev = self.model.layer_input_batch(self.layer, inputs, &[]);
        let pre = self.model.layers()[self.layer].apply_rows(&prev);
        let act = self.model.activation();
        let reps = augment_ones(&pre.map(|p| act.apply(p)));
        let jv_test = self.directional(&prev, &pre, &dir);
        let jv_cal = self.directional(&self.calib_prev, &self.calib_pre, &dir);
        let weights = self.geometry.hat_weights_batch(&reps)?;
        let diff = jv_test - weights.tr_mul(&jv_cal);
        Ok(diff * self.theta().transpose())
    }

    /// `A(x)` for each row of `inputs`.
    pub fn sensitivity_batch(&self, inputs: &Matrix) -> Result<Vec<Matrix>> {
        let n = inputs.nrows();
        let k = self.basis.ncols();
        let q = self.model.layers()[self.layer + 1].out_dim();
        let mut out = vec![Matrix::zeros(q, k); n];
        for col in 0..k {
            let mut e = Vector::zeros(k);
            e[col] = 1.0;
            let av = self.apply_batch(inputs, &e)?;
            for (i, a) in out.iter_mut().enumerate() {
                a.set_column(col, &av.row(i).transpose());
            }
        }
        Ok(out)
    }
}

/// Re-runs perturb, assemble and solve for an arbitrary coefficient vector;
/// the reference the linearization is checked against.
#[derive(Debug, Clone)]
pub struct ResidualProbe<'a> {
    pub model: &'a MlpModel,
    pub layer: usize,
    pub basis: &'a Matrix,
    pub ridge: f64,
    calib_prev: Matrix,
}

impl<'a> ResidualProbe<'a> {
    pub fn new(model: &'a MlpModel, layer: usize, basis: &'a Matrix, calibration: &Matrix, ridge: f64) -> Result<Self> {
        model.check_hidden(layer)?;
        if calibration.nrows() == 0 {
            return Err(Error::EmptyCalibration);
        }
        Ok(Self { model, layer, basis, ridge, calib_prev: model.layer_input_batch(layer, calibration, &[]) })
    }

    /// `Theta_hat(v) ybar_v(x) - Theta ybar(x)` for each row of `inputs`.
    pub fn residuals(&self, inputs: &Matrix, v: &Vector) -> Result<Matrix> {
        let base = &self.model.layers()[self.layer];
        let flat = self.basis * v;
        let perturbed = Dense {
            weight: &base.weight + reshape_flat(flat.as_slice(), base.weight.nrows(), base.weight.ncols()),
            bias: base.bias.clone(),
        };
        let system = assemble_from_inputs(
            self.model,
            self.layer,
            &perturbed,
            &self.calib_prev,
            &self.calib_prev,
            self.ridge,
            Vec::new(),
        )?;
        let fit = solve_correction(&system)?;
        let prev = self.model.layer_input_batch(self.layer, inputs, &[]);
        let act = self.model.activation();
        let h_v = augment_ones(&perturbed.apply_rows(&prev).map(|p| act.apply(p)));
        let h = augment_ones(&base.apply_rows(&prev).map(|p| act.apply(p)));
        Ok(h_v * fit.corrected_theta.transpose() - h * system.base_theta.transpose())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub residual: Vec<f64>,
    pub magnitude: f64,
    pub calib_shift: f64,
    pub test_shift: f64,
    pub conditioning: f64,
}

/// Residual of member `m` at the first target layer for each row of `inputs`.
pub fn post_correction_residuals(ensemble: &PncEnsemble, m: usize, inputs: &Matrix) -> Result<Vec<ResidualReport>> {
    let member = ensemble.members().get(m).ok_or(Error::EmptyEnsemble)?;
    let layer = member.repairs[0].layer;
    let prev = ensemble.base().layer_input_batch(layer, inputs, &[]);
    Ok(residuals_from_prev(ensemble, m, &prev))
}

/// [`post_correction_residuals`] for every member, sharing the forward prefix.
pub fn ensemble_residuals(ensemble: &PncEnsemble, inputs: &Matrix) -> Result<Vec<Vec<ResidualReport>>> {
    let first = ensemble.members().first().ok_or(Error::EmptyEnsemble)?;
    let prev = ensemble.base().layer_input_batch(first.repairs[0].layer, inputs, &[]);
    Ok((0..ensemble.len()).into_par_iter().map(|m| residuals_from_prev(ensemble, m, &prev)).collect())
}

fn residuals_from_prev(ensemble: &PncEnsemble, m: usize, prev: &Matrix) -> Vec<ResidualReport> {
    let repair = &ensemble.members()[m].repairs[0];
    let model = ensemble.base();
    let l = repair.layer;
    let base = &model.layers()[l];
    let act = model.activation();
    let h = augment_ones(&base.apply_rows(prev).map(|p| act.apply(p)));
    let perturbed = Dense { weight: &base.weight + &repair.delta_w, bias: base.bias.clone() };
    let h_v = augment_ones(&perturbed.apply_rows(prev).map(|p| act.apply(p)));
    let theta = model.layers()[l + 1].theta();
    let theta_hat = &theta + &repair.theta_delta;
    let r = &h_v * theta_hat.transpose() - &h * theta.transpose();
    (0..prev.nrows())
        .map(|i| {
            let row: Vec<f64> = r.row(i).iter().copied().collect();
            ResidualReport {
                magnitude: r.row(i).norm(),
                residual: row,
                calib_shift: repair.calib_shift,
                test_shift: (h_v.row(i) - h.row(i)).norm(),
                conditioning: repair.min_singular_value,
            }
        })
        .collect()
}

pub fn post_correction_residual(ensemble: &PncEnsemble, m: usize, x: &Vector) -> Result<ResidualReport> {
    let row = Matrix::from_row_slice(1, x.len(), x.as_slice());
    Ok(post_correction_residuals(ensemble, m, &row)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SketchReport {
    pub estimate: f64,
    pub n: usize,
    pub exact: f64,
    /// Absent when `A = 0`.
    pub eff_rank: Option<f64>,
    pub predicted_rel_variance: Option<f64>,
}

/// `(1/n) sum ||A v_m||^2` with `v_m ~ N(0, sigma^2 I)`.
pub fn sketch_variance(a: &Matrix, sigma: f64, n: usize, seed: u64) -> Result<SketchReport> {
    if !(sigma > 0.0) || n == 0 {
        return Err(Error::InvalidConfig(format!("sketch needs sigma > 0 and n >= 1, got {sigma}, {n}")));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = seeded_rng(seed);
    let k = a.ncols();
    let mut total = 0.0;
    for _ in 0..n {
        let v = Vector::from_iterator(k, (0..k).map(|_| normal.sample(&mut rng)));
        total += (a * v).norm_squared();
    }
    let exact = sigma * sigma * a.norm_squared();
    let eff = match effective_rank(RankInput::Operator(a)) {
        Ok(r) => Some(r),
        Err(Error::ZeroMatrix) => None,
        Err(e) => return Err(e),
    };
    Ok(SketchReport {
        estimate: total / n as f64,
        n,
        exact,
        eff_rank: eff,
        predicted_rel_variance: eff.map(|r| 2.0 / (n as f64 * r)),
    })
}

#[derive(Debug, Clone, Copy)]
pub enum RankInput<'a> {
    /// `||A||_F^4 / ||A^T A||_F^2`.
    Operator(&'a Matrix),
    /// `tr(C)^2 / ||C||_F^2` for PSD `C`.
    Covariance(&'a Matrix),
}

fn check_psd(c: &Matrix) -> Result<()> {
    if !c.is_square() {
        return Err(Error::NotPsd("matrix is not square".into()));
    }
    let scale = c.amax().max(f64::MIN_POSITIVE);
    if (c - c.transpose()).amax() > 1e-10 * scale {
        return Err(Error::NotPsd("matrix is not symmetric".into()));
    }
    let tol = 1e-10 * scale;
    let mut shifted = (c + c.transpose()) * 0.5;
    for i in 0..c.nrows() {
        shifted[(i, i)] += tol;
    }
    if nalgebra::Cholesky::new(shifted).is_none() {
        return Err(Error::NotPsd("negative eigenvalue beyond tolerance".into()));
    }
    Ok(())
}

pub fn effective_rank(input: RankInput<'_>) -> Result<f64> {
    match input {
        RankInput::Operator(a) => {
            let fro2 = a.norm_squared();
            if fro2 == 0.0 {
                return Err(Error::ZeroMatrix);
            }
            Ok(fro2 * fro2 / a.tr_mul(a).norm_squared())
        }
        RankInput::Covariance(c) => {
            check_psd(c)?;
            let fro2 = c.norm_squared();
            if fro2 == 0.0 {
                return Err(Error::ZeroMatrix);
            }
            Ok(c.trace().powi(2) / fro2)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureRankReport {
    pub traces: Vec<f64>,
    pub norms: Vec<f64>,
    pub avg_alignment: f64,
    #[serde(skip)]
    pub mixture: Matrix,
    pub mixture_eff_rank: f64,
    pub formula_prediction: f64,
    /// Whether all traces and all Frobenius norms agree to 1e-9 relative.
    pub equal_trace_and_norm: bool,
}

pub fn mixture_rank(covariances: &[Matrix]) -> Result<MixtureRankReport> {
    let first = covariances.first().ok_or(Error::EmptyEnsemble)?;
    for c in covariances {
        if c.shape() != first.shape() {
            return Err(Error::ShapeMismatch("covariances differ in shape".into()));
        }
        check_psd(c)?;
    }
    let m = covariances.len();
    let traces: Vec<f64> = covariances.iter().map(|c| c.trace()).collect();
    let norms: Vec<f64> = covariances.iter().map(|c| c.norm()).collect();
    if norms.contains(&0.0) {
        return Err(Error::ZeroMatrix);
    }
    let mut align = 0.0;
    let mut pairs = 0usize;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                align += covariances[i].dot(&covariances[j]) / (norms[i] * norms[j]);
                pairs += 1;
            }
        }
    }
    let avg_alignment = if pairs == 0 { 1.0 } else { align / pairs as f64 };
    let mut mixture = Matrix::zeros(first.nrows(), first.ncols());
    for c in covariances {
        mixture += c;
    }
    mixture /= m as f64;
    let mixture_eff_rank = effective_rank(RankInput::Covariance(&mixture))?;
    let tau = traces.iter().sum::<f64>() / m as f64;
    let nu = norms.iter().sum::<f64>() / m as f64;
    let formula_prediction = tau * tau / (nu * nu) * m as f64 / (1.0 + (m as f64 - 1.0) * avg_alignment);
    let close = |v: &[f64], r: f64| v.iter().all(|x| (x - r).abs() <= 1e-9 * r.abs().max(f64::MIN_POSITIVE));
    Ok(MixtureRankReport {
        equal_trace_and_norm: close(&traces, tau) && close(&norms, nu),
        traces,
        norms,
        avg_alignment,
        mixture,
        mixture_eff_rank,
        formula_prediction,
    })
}

/// Gaussian reference fitted to calibration activations (one per row).
#[derive(Debug, Clone)]
pub struct MahalanobisModel {
    mean: Vector,
    factor: SpdFactor,
    pub epsilon: f64,
}

impl MahalanobisModel {
    /// `epsilon = None` uses `1e-6 * trace(cov) / d`.
    pub fn fit(activations: &Matrix, epsilon: Option<f64>) -> Result<Self> {
        let n = activations.nrows();
        if n < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 calibration activations, got {n}")));
        }
        let d = activations.ncols();
        let mean = activations.row_mean().transpose();
        let mut centered = activations.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
        let eps = epsilon.unwrap_or(1e-6 * cov.trace() / d.max(1) as f64);
        if !(eps >= 0.0) {
            return Err(Error::InvalidConfig(format!("regularizer must be >= 0, got {eps}")));
        }
        let factor = SpdSystem::new(cov, eps)?.factor().map_err(|e| match e {
            Error::SingularSystem(_) if eps == 0.0 => Error::DegenerateCovariance,
            other => other,
        })?;
        Ok(Self { mean, factor, epsilon: eps })
    }

    pub fn distance(&self, h: &Vector) -> Result<f64> {
        if h.len() != self.mean.len() {
            return Err(Error::ShapeMismatch("activation length differs from calibration".into()));
        }
        let diff = h - &self.mean;
        Ok(diff.dot(&self.factor.solve_vec(&diff)?).max(0.0).sqrt())
    }

    pub fn distances(&self, hs: &Matrix) -> Result<Vec<f64>> {
        (0..hs.nrows()).map(|i| self.distance(&hs.row(i).transpose())).collect()
    }
}

pub fn mahalanobis_hidden(h: &Vector, calibration_activations: &Matrix, epsilon: Option<f64>) -> Result<f64> {
    MahalanobisModel::fit(calibration_activations, epsilon)?.distance(h)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FloorCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub sigma_tr2: f64,
    pub l2_hat: f64,
    pub sensitivity_norm2: f64,
    pub accepted: usize,
    pub trials: usize,
    pub holds: bool,
}

/// Monte Carlo lower-bound check on the mean squared residual under
/// perturbations `v ~ N(0, sigma^2 I)` truncated to `||v|| <= r_trunc`.
#[allow(clippy::too_many_arguments)]
pub fn local_residual_floor_check(
    model: &MlpModel,
    layer: usize,
    basis: &Matrix,
    calibration: &Matrix,
    ridge: f64,
    x: &Vector,
    sigma: f64,
    r_trunc: f64,
    n_samples: usize,
    seed: u64,
) -> Result<FloorCheck> {
    if !(sigma > 0.0) || !(r_trunc > 0.0) || n_samples == 0 {
        return Err(Error::InvalidConfig("sigma, truncation radius and sample count must be positive".into()));
    }
    let ctx = SensitivityContext::new(model, layer, basis, calibration, ridge)?;
    let probe = ResidualProbe::new(model, layer, basis, calibration, ridge)?;
    let xm = Matrix::from_row_slice(1, x.len(), x.as_slice());
    let a = ctx.sensitivity_batch(&xm)?.remove(0);
    let k = basis.ncols();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = seeded_rng(seed);
    let mut samples = Vec::with_capacity(n_samples);
    let mut trials = 0usize;
    while samples.len() < n_samples {
        trials += 1;
        let v = Vector::from_iterator(k, (0..k).map(|_| normal.sample(&mut rng)));
        if v.norm() <= r_trunc {
            samples.push(v);
        }
        if trials >= 1000 && (samples.len() as f64) < 1e-3 * trials as f64 {
            return Err(Error::RejectionStarvation { accepted: samples.len(), trials });
        }
    }
    let mut sq = 0.0;
    let mut l2: f64 = 0.0;
    let mut v4 = 0.0;
    for v in &samples {
        let r = probe.residuals(&xm, v)?.row(0).transpose();
        sq += r.norm_squared();
        let nv2 = v.norm_squared();
        if nv2 > 0.0 {
            l2 = l2.max((&r - &a * v).norm() / nv2);
        }
        v4 += nv2 * nv2;
    }
    let n = samples.len() as f64;
    let mut var = 0.0;
    for c in 0..k {
        let mean = samples.iter().map(|v| v[c]).sum::<f64>() / n;
        var += samples.iter().map(|v| (v[c] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    }
    let sigma_tr2 = var / k as f64;
    let lhs = sq / n;
    let anorm2 = a.norm_squared();
    let rhs = 0.5 * sigma_tr2 * anorm2 - l2 * l2 * v4 / n;
    Ok(FloorCheck {
        lhs,
        rhs,
        sigma_tr2,
        l2_hat: l2,
        sensitivity_norm2: anorm2,
        accepted: samples.len(),
        trials,
        holds: lhs >= rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Activation;
    use crate::numerics::{gaussian_matrix, gaussian_vector, orthonormal_basis};
    use crate::pnc::{build_ensemble, PncConfig};
    use std::sync::Arc;

    fn rand_design(b: usize, d: usize, seed: u64) -> Matrix {
        augment_ones(&gaussian_matrix(b, d, &mut seeded_rng(seed)))
    }

    fn tanh_model(seed: u64) -> MlpModel {
        let m = MlpModel::init(&[3, 8, 8, 2], Activation::Tanh, seed).unwrap();
        let mut rng = seeded_rng(seed + 100);
        let layers = m
            .layers()
            .iter()
            .map(|l| Dense { weight: l.weight.clone(), bias: gaussian_vector(l.bias.len(), &mut rng) * 0.3 })
            .collect();
        MlpModel::new(layers, Activation::Tanh).unwrap()
    }

    #[test]
    fn square_design_has_unit_leverage_and_basis_weights() {
        let x = rand_design(5, 4, 1);
        let g = RidgeGeometry::new(x.clone(), 0.0).unwrap();
        for i in 0..5 {
            let y = x.row(i).transpose();
            assert!((g.leverage(&y).unwrap() - 1.0).abs() < 1e-9);
            let w = g.hat_weights(&y).unwrap();
            for j in 0..5 {
                assert!((w[j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn leverage_decreases_with_ridge() {
        let x = rand_design(30, 5, 2);
        let y = Vector::from_vec(vec![1.0, 0.5, -0.3, 2.0, 0.1, -1.0]);
        let mut last = f64::INFINITY;
        for lambda in [0.0, 1e-2, 1.0, 1e2, 1e4, 1e8] {
            let h = ridge_leverage(&y, &x, lambda).unwrap();
            assert!(h >= 0.0 && h < last);
            last = h;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn hat_matrix_trace_is_column_count() {
        let x = rand_design(200, 20, 3);
        let g = RidgeGeometry::new(x.clone(), 0.0).unwrap();
        let total: f64 = g.leverage_batch(&x).unwrap().iter().sum();
        assert!((total - 21.0).abs() < 1e-8);
    }

    #[test]
    fn hat_weight_identities() {
        for seed in 0..20 {
            let x = rand_design(15 + seed as usize, 6, seed);
            let y = gaussian_vector(7, &mut seeded_rng(seed + 50));
            for lambda in [0.0, 0.1, 3.0] {
                let g = RidgeGeometry::new(x.clone(), lambda).unwrap();
                let w = g.hat_weights(&y).unwrap();
                let ginv_y = g.solve(&y).unwrap();
                let recon = x.tr_mul(&w) - (&y - &ginv_y * lambda);
                assert!(recon.norm() <= 1e-8 * y.norm());
                let h = g.leverage(&y).unwrap();
                let rhs = h - lambda * ginv_y.norm_squared();
                assert!((w.norm_squared() - rhs).abs() <= 1e-8 * h.max(1.0));
                if lambda == 0.0 {
                    assert!((w.norm_squared() - h).abs() <= 1e-10 * h.max(1.0));
                }
            }
        }
    }

    #[test]
    fn sensitivity_special_cases() {
        let theta = Matrix::zeros(2, 4);
        let j = gaussian_matrix(4, 3, &mut seeded_rng(1));
        let a = corrected_sensitivity(&theta, &j, &Vector::from_vec(vec![1.0]), &[j.clone()]).unwrap();
        assert_eq!(a, Matrix::zeros(2, 3));
        let theta = gaussian_matrix(2, 4, &mut seeded_rng(2));
        let a = corrected_sensitivity(&theta, &j, &Vector::from_vec(vec![0.0, 1.0]), &[j.clone() * 3.0, j.clone()])
            .unwrap();
        assert!(a.amax() < 1e-15);
        assert!(corrected_sensitivity(&theta, &j, &Vector::zeros(1), &[]).is_err());
    }

    #[test]
    fn calibration_point_has_zero_sensitivity_in_square_regime() {
        let model = tanh_model(4);
        let u = orthonormal_basis(64, 4, 1).unwrap();
        let calib = gaussian_matrix(9, 3, &mut seeded_rng(5));
        let ctx = SensitivityContext::new(&model, 1, &u, &calib, 0.0).unwrap();
        let x = calib.row(2).transpose();
        let rep = ctx.report(&x).unwrap();
        assert!(rep.sensitivity.amax() < 1e-8);
        assert!((&rep.predicted_jacobian - &rep.test_jacobian).amax() < 1e-8);
    }

    #[test]
    fn batched_sensitivity_matches_pointwise_report() {
        let model = tanh_model(6);
        let u = orthonormal_basis(64, 5, 2).unwrap();
        let calib = gaussian_matrix(25, 3, &mut seeded_rng(7));
        let ctx = SensitivityContext::new(&model, 1, &u, &calib, 0.05).unwrap();
        let xs = gaussian_matrix(4, 3, &mut seeded_rng(8));
        let batch = ctx.sensitivity_batch(&xs).unwrap();
        for i in 0..4 {
            let rep = ctx.report(&xs.row(i).transpose()).unwrap();
            assert!((&batch[i] - &rep.sensitivity).amax() < 1e-10);
        }
    }

    #[test]
    fn sensitivity_matches_finite_differences_of_full_pipeline() {
        let model = tanh_model(9);
        let u = orthonormal_basis(64, 4, 3).unwrap();
        let calib = gaussian_matrix(20, 3, &mut seeded_rng(10));
        let ctx = SensitivityContext::new(&model, 1, &u, &calib, 0.02).unwrap();
        let probe = ResidualProbe::new(&model, 1, &u, &calib, 0.02).unwrap();
        let xs = gaussian_matrix(2, 3, &mut seeded_rng(11)) * 2.0;
        let a = ctx.sensitivity_batch(&xs).unwrap();
        let step = 1e-5;
        for k in 0..4 {
            let mut e = Vector::zeros(4);
            e[k] = step;
            let plus = probe.residuals(&xs, &e).unwrap();
            let minus = probe.residuals(&xs, &(-&e)).unwrap();
            let fd = (plus - minus) / (2.0 * step);
            for i in 0..2 {
                let col = a[i].column(k);
                assert!((fd.row(i).transpose() - col).norm() <= 1e-5 * (1.0 + col.norm()));
            }
        }
    }

    #[test]
    fn sketch_examples() {
        let z = sketch_variance(&Matrix::zeros(3, 4), 1.0, 10, 0).unwrap();
        assert_eq!(z.estimate, 0.0);
        assert_eq!(z.exact, 0.0);
        assert!(z.eff_rank.is_none());
        let eye = sketch_variance(&Matrix::identity(5, 5), 1.0, 20000, 1).unwrap();
        assert!((eye.estimate - 5.0).abs() < 0.1);
        assert!((eye.eff_rank.unwrap() - 5.0).abs() < 1e-12);
        assert!(sketch_variance(&Matrix::identity(2, 2), 0.0, 1, 0).is_err());
    }

    #[test]
    fn effective_rank_examples() {
        let flat = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 2.0, 2.0, 0.0]));
        assert!((effective_rank(RankInput::Operator(&flat)).unwrap() - 3.0).abs() < 1e-12);
        let u = Vector::from_vec(vec![1.0, 2.0, 3.0]);
        let v = Vector::from_vec(vec![-1.0, 0.5]);
        let r1 = &u * v.transpose();
        assert!((effective_rank(RankInput::Operator(&r1)).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(effective_rank(RankInput::Operator(&Matrix::zeros(2, 2))), Err(Error::ZeroMatrix)));
        let neg = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(effective_rank(RankInput::Covariance(&neg)), Err(Error::NotPsd(_))));
    }

    #[test]
    fn operator_and_covariance_ranks_agree() {
        for seed in 0..10 {
            let a = gaussian_matrix(4, 7, &mut seeded_rng(seed));
            let c = &a * a.transpose();
            let ra = effective_rank(RankInput::Operator(&a)).unwrap();
            let rc = effective_rank(RankInput::Covariance(&c)).unwrap();
            assert!((ra - rc).abs() < 1e-10 * ra);
            // participation ratio from an independent eigen-decomposition
            let eig = c.clone().symmetric_eigen().eigenvalues;
            let pr = eig.sum().powi(2) / eig.iter().map(|e| e * e).sum::<f64>();
            assert!((rc - pr).abs() < 1e-9 * pr);
            assert!((1.0..=4.0 + 1e-12).contains(&ra));
        }
    }

    fn rotated(spectrum: &[f64], seed: u64) -> Matrix {
        let q = orthonormal_basis(spectrum.len(), spectrum.len(), seed).unwrap();
        &q * Matrix::from_diagonal(&Vector::from_row_slice(spectrum)) * q.transpose()
    }

    #[test]
    fn mixture_rank_formula_cases() {
        let spectrum = [3.0, 2.0, 1.0, 0.5];
        let c = rotated(&spectrum, 1);
        let same = mixture_rank(&[c.clone(), c.clone(), c.clone()]).unwrap();
        assert!((same.avg_alignment - 1.0).abs() < 1e-12);
        let single = c.trace().powi(2) / c.norm_squared();
        assert!((same.mixture_eff_rank - single).abs() < 1e-9 * single);
        let blocks: Vec<Matrix> = (0..3)
            .map(|i| {
                let mut m = Matrix::zeros(6, 6);
                m[(2 * i, 2 * i)] = 2.0;
                m[(2 * i + 1, 2 * i + 1)] = 1.0;
                m
            })
            .collect();
        let orth = mixture_rank(&blocks).unwrap();
        assert!(orth.avg_alignment.abs() < 1e-15);
        let base = 9.0 / 5.0;
        assert!((orth.mixture_eff_rank - 3.0 * base).abs() < 1e-9 * base);
        assert!(orth.equal_trace_and_norm);
        let rot: Vec<Matrix> = (0..5).map(|s| rotated(&spectrum, 10 + s)).collect();
        let r = mixture_rank(&rot).unwrap();
        assert!(r.equal_trace_and_norm);
        assert!((r.formula_prediction - r.mixture_eff_rank).abs() < 1e-9 * r.mixture_eff_rank);
    }

    #[test]
    fn unequal_members_are_flagged() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 0.0]));
        let b = Matrix::from_diagonal(&Vector::from_vec(vec![0.0, 3.0]));
        let r = mixture_rank(&[a, b]).unwrap();
        assert!(!r.equal_trace_and_norm);
        assert!(mixture_rank(&[Matrix::identity(2, 2), Matrix::identity(3, 3)]).is_err());
    }

    #[test]
    fn mahalanobis_examples() {
        let acts = gaussian_matrix(50, 3, &mut seeded_rng(2));
        let model = MahalanobisModel::fit(&acts, None).unwrap();
        let mean = acts.row_mean().transpose();
        assert!(model.distance(&mean).unwrap() < 1e-12);
        // columns +-1 give identity sample covariance scaled by n/(n-1)
        let mut iso = Matrix::zeros(4, 2);
        iso[(0, 0)] = 1.0;
        iso[(1, 0)] = -1.0;
        iso[(2, 1)] = 1.0;
        iso[(3, 1)] = -1.0;
        let scaled = iso * (3.0f64 / 2.0).sqrt();
        let m = MahalanobisModel::fit(&scaled, Some(0.0)).unwrap();
        let p = Vector::from_vec(vec![0.6, -0.8]);
        assert!((m.distance(&p).unwrap() - 1.0).abs() < 1e-12);
        let flat = Matrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert!(matches!(MahalanobisModel::fit(&flat, Some(0.0)), Err(Error::DegenerateCovariance)));
        assert!(MahalanobisModel::fit(&flat, None).is_ok());
    }

    #[test]
    fn residual_report_on_zero_scale_member() {
        let model = Arc::new(tanh_model(12));
        let x = gaussian_matrix(30, 3, &mut seeded_rng(13));
        let cfg = PncConfig {
            target_layers: vec![1],
            ensemble_size: 2,
            rank: 3,
            scale: 0.0,
            ridge: 0.01,
            ..PncConfig::default()
        };
        let e = build_ensemble(model, &x, &cfg, true).unwrap();
        let r = post_correction_residual(&e, 1, &Vector::from_vec(vec![0.2, 0.1, -3.0])).unwrap();
        assert!(r.magnitude < 1e-12);
        assert_eq!(r.calib_shift, 0.0);
    }

    #[test]
    fn interpolating_member_has_tiny_calibration_residual() {
        let model = Arc::new(tanh_model(14));
        let x = gaussian_matrix(6, 3, &mut seeded_rng(15));
        let cfg = PncConfig {
            target_layers: vec![1],
            ensemble_size: 3,
            rank: 4,
            scale: 0.3,
            ridge: 0.0,
            ..PncConfig::default()
        };
        let e = build_ensemble(model, &x, &cfg, true).unwrap();
        for m in 0..3 {
            for r in post_correction_residuals(&e, m, &x).unwrap() {
                assert!(r.magnitude <= 1e-7);
            }
        }
    }

    #[test]
    fn floor_check_on_linear_network() {
        let m = MlpModel::init(&[3, 5, 5, 2], Activation::Identity, 3).unwrap();
        let u = orthonormal_basis(25, 3, 4).unwrap();
        let calib = gaussian_matrix(12, 3, &mut seeded_rng(5));
        let x = Vector::from_vec(vec![2.0, -1.0, 0.5]);
        let f = local_residual_floor_check(&m, 1, &u, &calib, 0.1, &x, 0.05, 0.2, 40, 6).unwrap();
        assert!(f.holds);
        assert!(f.lhs > 0.0);
    }

    #[test]
    fn floor_check_starves_on_tiny_radius() {
        let m = tanh_model(3);
        let u = orthonormal_basis(64, 6, 4).unwrap();
        let calib = gaussian_matrix(12, 3, &mut seeded_rng(5));
        let x = Vector::from_vec(vec![2.0, -1.0, 0.5]);
        let res = local_residual_floor_check(&m, 1, &u, &calib, 0.1, &x, 1.0, 1e-3, 5, 6);
        assert!(matches!(res, Err(Error::RejectionStarvation { .. })));
    }

    #[test]
    fn floor_check_on_calibration_point_is_vacuous() {
        let m = tanh_model(3);
        let u = orthonormal_basis(64, 3, 4).unwrap();
        let calib = gaussian_matrix(9, 3, &mut seeded_rng(5));
        let x = calib.row(0).transpose();
        let f = local_residual_floor_check(&m, 1, &u, &calib, 0.0, &x, 0.01, 0.05, 10, 6).unwrap();
        assert!(f.rhs <= 1e-12);
        assert!(f.holds);
    }
}
