//! Brute-force oracles for the closed forms, and the check suites built on
//! them. Oracles never call the code they check: the least-squares oracle is
//! plain gradient descent, the sensitivity oracle differentiates the full
//! perturb/solve pipeline numerically, and the moment oracle samples directly.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::conv_pnc::{
    accumulate_all, conv2d, conv_correction_system, conv_ridge_objective, fit_conv2, flatten_map, kernel_from_flat,
    kernel_matrix, solve_conv_correction, synthetic_images, unfold_patches, ConvBlockModel, ConvTarget, FeatureMap,
    Geometry,
};
use crate::diagnostics::{
    effective_rank, local_residual_floor_check, mixture_rank, post_correction_residuals, sketch_variance,
    MixtureRankReport, RankInput, ResidualProbe, RidgeGeometry, SensitivityContext,
};
use crate::ensemble_eval::spearman;
use crate::error::{Error, Result};
use crate::net::{Activation, Dense, MlpModel};
use crate::numerics::{
    augment_ones, derive_seed, gaussian_matrix, gaussian_vector, orthonormal_basis, seeded_rng, Matrix, Vector,
};
use crate::pnc::{build_ensemble, correction_objective, solve_correction, CorrectionSystem, PncConfig, PncEnsemble};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleConfig {
    pub max_iters: usize,
    pub step_size: f64,
    pub convergence_tol: f64,
    pub fd_step: f64,
    pub mc_repetitions: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            max_iters: 5_000_000,
            step_size: 1.0,
            convergence_tol: 1e-9,
            fd_step: 1e-5,
            mc_repetitions: 500,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0
            || !(self.step_size > 0.0)
            || !(self.convergence_tol > 0.0)
            || !(self.fd_step > 0.0)
            || self.mc_repetitions == 0
        {
            return Err(Error::InvalidConfig("oracle settings must all be positive".into()));
        }
        Ok(())
    }
}

/// Upper estimate of the largest Hessian eigenvalue `2 (s_max^2 + lambda)`,
/// by power iteration with a safety margin.
fn hessian_bound(design: &Matrix, ridge: f64, seed: u64) -> f64 {
    let mut v = gaussian_vector(design.ncols(), &mut seeded_rng(seed));
    let mut est = 0.0;
    for _ in 0..50 {
        let n = v.norm();
        if n == 0.0 {
            break;
        }
        v /= n;
        let w = design.tr_mul(&(design * &v));
        est = v.dot(&w);
        v = w;
    }
    (2.0 * (est * 1.05 + ridge)).max(1e-300)
}

/// Minimizes `||design theta^T - targets||_F^2 + lambda ||theta - theta0||_F^2`
/// by gradient descent from `theta0` with Armijo backtracking; trial steps
/// never exceed `step_size / L`.
pub fn ridge_descent(
    design: &Matrix,
    targets: &Matrix,
    theta0: &Matrix,
    ridge: f64,
    config: &OracleConfig,
) -> Result<(Matrix, usize)> {
    config.validate()?;
    if design.ncols() != theta0.ncols() || targets.shape() != (design.nrows(), theta0.nrows()) {
        return Err(Error::ShapeMismatch("oracle problem blocks are inconsistent".into()));
    }
    let mut theta = theta0.clone();
    let mut resid = design * theta.transpose() - targets;
    let mut grad = (resid.transpose() * design) * 2.0;
    let g0 = grad.norm().max(1.0);
    let cap = config.step_size / hessian_bound(design, ridge, config.seed);
    let mut step = cap;
    for iter in 0..config.max_iters {
        let gnorm2 = grad.norm_squared();
        if gnorm2.sqrt() <= config.convergence_tol * g0 {
            return Ok((theta, iter));
        }
        // f(theta - a g) - f(theta), expanded so it stays accurate near the optimum
        let xg = design * grad.transpose();
        let lin = 2.0 * (resid.dot(&xg) + ridge * (&theta - theta0).dot(&grad));
        let quad = xg.norm_squared() + ridge * gnorm2;
        loop {
            let change = -step * lin + step * step * quad;
            if change <= -1e-4 * step * gnorm2 {
                theta -= &grad * step;
                resid -= &xg * step;
                step = (step * 2.0).min(cap);
                break;
            }
            step *= 0.5;
            if step < 1e-300 {
                return Err(Error::NoConvergence { iters: iter, grad_norm: gnorm2.sqrt() });
            }
        }
        if iter % 64 == 63 {
            // refresh the running residual against drift
            resid = design * theta.transpose() - targets;
        }
        grad = (resid.transpose() * design) * 2.0 + (&theta - theta0) * (2.0 * ridge);
    }
    Err(Error::NoConvergence { iters: config.max_iters, grad_norm: grad.norm() })
}

/// Descent oracle for the correction problem with targets `X Theta^T`.
pub fn lsq_oracle(
    design: &Matrix,
    reference: &Matrix,
    theta: &Matrix,
    ridge: f64,
    config: &OracleConfig,
) -> Result<Matrix> {
    let targets = reference * theta.transpose();
    Ok(ridge_descent(design, &targets, theta, ridge, config)?.0)
}

/// Column `k` is the central difference of the residual at `x` along
/// coefficient `e_k`, each evaluation re-running perturb, assemble and solve.
pub fn sensitivity_fd_oracle(
    model: &MlpModel,
    layer: usize,
    basis: &Matrix,
    calibration: &Matrix,
    x: &Vector,
    ridge: f64,
    step: f64,
) -> Result<Matrix> {
    if !(step > 0.0) {
        return Err(Error::InvalidConfig("finite-difference step must be > 0".into()));
    }
    let probe = ResidualProbe::new(model, layer, basis, calibration, ridge)?;
    let xm = Matrix::from_row_slice(1, x.len(), x.as_slice());
    let k = basis.ncols();
    let q = model.layers()[layer + 1].out_dim();
    let mut out = Matrix::zeros(q, k);
    for col in 0..k {
        let mut e = Vector::zeros(k);
        e[col] = step;
        let plus = probe.residuals(&xm, &e)?;
        let minus = probe.residuals(&xm, &(-&e))?;
        out.set_column(col, &((plus - minus).row(0).transpose() / (2.0 * step)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentEstimate {
    pub mean: f64,
    pub variance: f64,
    pub mean_se: f64,
    pub repetitions: usize,
}

/// Mean and variance of the `n`-probe estimator over independent repetitions.
pub fn mc_moment_oracle(a: &Matrix, sigma: f64, n: usize, repetitions: usize, seed: u64) -> Result<MomentEstimate> {
    if repetitions < 100 {
        return Err(Error::InvalidConfig(format!("need at least 100 repetitions, got {repetitions}")));
    }
    if !(sigma > 0.0) || n == 0 {
        return Err(Error::InvalidConfig("sigma must be > 0 and n >= 1".into()));
    }
    let mut rng = seeded_rng(seed);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let (q, k) = a.shape();
    let values: Vec<f64> = (0..repetitions)
        .map(|_| {
            let mut total = 0.0;
            for _ in 0..n {
                let v: Vec<f64> = (0..k).map(|_| normal.sample(&mut rng)).collect();
                for i in 0..q {
                    let s: f64 = (0..k).map(|j| a[(i, j)] * v[j]).sum();
                    total += s * s;
                }
            }
            total / n as f64
        })
        .collect();
    let r = repetitions as f64;
    let mean = values.iter().sum::<f64>() / r;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
    Ok(MomentEstimate { mean, variance, mean_se: (variance / r).sqrt(), repetitions })
}

fn nnls3(features: &[[f64; 3]], y: &[f64]) -> [f64; 3] {
    let mut best = ([0.0; 3], y.iter().map(|v| v * v).sum::<f64>());
    for mask in 1u8..8 {
        let idx: Vec<usize> = (0..3).filter(|i| mask & (1 << i) != 0).collect();
        let f = Matrix::from_fn(features.len(), idx.len(), |r, c| features[r][idx[c]]);
        let yv = Vector::from_column_slice(y);
        let gram = f.tr_mul(&f);
        let Some(chol) = gram.cholesky() else { continue };
        let coef = chol.solve(&f.tr_mul(&yv));
        if coef.iter().any(|c| *c < 0.0 || !c.is_finite()) {
            continue;
        }
        let sse = (&f * &coef - &yv).norm_squared();
        if sse < best.1 {
            let mut c = [0.0; 3];
            for (j, &i) in idx.iter().enumerate() {
                c[i] = coef[j];
            }
            best = (c, sse);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WitnessRow {
    pub split: &'static str,
    pub member: usize,
    pub point: usize,
    pub rho: f64,
    pub sqrt_h_shift: f64,
    pub test_shift: f64,
    pub sqrt_h_shift_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WitnessReport {
    pub rows: Vec<WitnessRow>,
    /// Nonnegative least-squares fit of `rho` on the three bound features,
    /// scaled up so no fitting point exceeds it.
    pub coefficients: [f64; 3],
    pub envelope_scale: f64,
    pub id_heldout_exceedance: f64,
    pub ood_exceedance: f64,
    pub id_rank_correlation: Option<f64>,
}

/// Records `(rho, sqrt(h) Delta, delta_x)` per member and point, fits the
/// bound's functional form on even-indexed ID points and reports how often
/// held-out ID points and OOD points exceed the fitted envelope.
pub fn id_bound_witness(
    ensemble: &PncEnsemble,
    calibration: &Matrix,
    id_points: &Matrix,
    ood_points: &Matrix,
) -> Result<WitnessReport> {
    if id_points.nrows() == 0 || ood_points.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    let model = ensemble.base();
    let l = ensemble.config().target_layers[0];
    let reps = |x: &Matrix| augment_ones(&model.hidden_batch(l, x, &[]));
    let full_design = reps(calibration);
    let id_reps = reps(id_points);
    let ood_reps = reps(ood_points);
    let mut rows = Vec::new();
    for (m, member) in ensemble.members().iter().enumerate() {
        let repair = &member.repairs[0];
        let design = match &repair.subset {
            Some(ids) => full_design.select_rows(ids),
            None => full_design.clone(),
        };
        let geom = RidgeGeometry::new(design, ensemble.config().ridge)?;
        for (split, pts, rp) in [("id", id_points, &id_reps), ("ood", ood_points, &ood_reps)] {
            let lev = geom.leverage_batch(rp)?;
            let res = post_correction_residuals(ensemble, m, pts)?;
            for (i, r) in res.iter().enumerate() {
                let s = lev[i].sqrt() * r.calib_shift;
                rows.push(WitnessRow {
                    split,
                    member: m,
                    point: i,
                    rho: r.magnitude,
                    sqrt_h_shift: s,
                    test_shift: r.test_shift,
                    sqrt_h_shift_sq: s * r.calib_shift,
                });
            }
        }
    }
    let feat = |r: &WitnessRow| [r.sqrt_h_shift, r.test_shift, r.sqrt_h_shift_sq];
    let fit_rows: Vec<&WitnessRow> = rows.iter().filter(|r| r.split == "id" && r.point % 2 == 0).collect();
    let coef = nnls3(
        &fit_rows.iter().map(|r| feat(r)).collect::<Vec<_>>(),
        &fit_rows.iter().map(|r| r.rho).collect::<Vec<_>>(),
    );
    let predict = |r: &WitnessRow| {
        let f = feat(r);
        coef[0] * f[0] + coef[1] * f[1] + coef[2] * f[2]
    };
    let mut scale: f64 = 1.0;
    for r in &fit_rows {
        let p = predict(r);
        if r.rho > 0.0 {
            scale = if p > 0.0 { scale.max(r.rho / p) } else { f64::INFINITY };
        }
    }
    let exceed = |split: &str, held_out: bool| {
        let sel: Vec<&WitnessRow> =
            rows.iter().filter(|r| r.split == split && (!held_out || r.point % 2 == 1)).collect();
        if sel.is_empty() {
            return 0.0;
        }
        sel.iter().filter(|r| r.rho > scale * predict(r) * (1.0 + 1e-12)).count() as f64 / sel.len() as f64
    };
    let id_rows: Vec<&WitnessRow> = rows.iter().filter(|r| r.split == "id").collect();
    let rho_id: Vec<f64> = id_rows.iter().map(|r| r.rho).collect();
    let lev_id: Vec<f64> = id_rows.iter().map(|r| r.sqrt_h_shift).collect();
    Ok(WitnessReport {
        coefficients: [coef[0] * scale, coef[1] * scale, coef[2] * scale],
        envelope_scale: scale,
        id_heldout_exceedance: exceed("id", true),
        ood_exceedance: exceed("ood", false),
        id_rank_correlation: spearman(&rho_id, &lev_id).ok(),
        rows,
    })
}

/// One line of a verification table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub suite: &'static str,
    pub criterion: u8,
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckRow {
    fn at_most(suite: &'static str, criterion: u8, name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { suite, criterion, name: name.into(), value, threshold, passed: value <= threshold }
    }

    fn at_least(suite: &'static str, criterion: u8, name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { suite, criterion, name: name.into(), value, threshold, passed: value >= threshold }
    }
}

pub const SUITES: [&str; 5] = ["lsq", "sensitivity", "sketch", "mixture", "conv"];

pub fn run_suite(name: &str, seed: u64) -> Result<Vec<CheckRow>> {
    match name {
        "lsq" => lsq_suite(seed),
        "sensitivity" => sensitivity_suite(seed),
        "sketch" => sketch_suite(seed),
        "mixture" => mixture_suite(seed),
        "conv" => conv_suite(seed),
        "all" => {
            let mut rows = Vec::new();
            for s in SUITES {
                rows.extend(run_suite(s, seed)?);
            }
            Ok(rows)
        }
        other => Err(Error::InvalidConfig(format!("unknown suite '{other}'"))),
    }
}

fn random_correction(b: usize, d: usize, q: usize, ridge: f64, seed: u64) -> CorrectionSystem {
    let mut rng = seeded_rng(seed);
    let x = augment_ones(&gaussian_matrix(b, d, &mut rng));
    let xv = augment_ones(&(x.columns(1, d) + gaussian_matrix(b, d, &mut rng) * 0.3));
    let theta = gaussian_matrix(q, d + 1, &mut rng);
    CorrectionSystem {
        targets: &x * theta.transpose(),
        design: xv,
        reference_design: x,
        base_theta: theta,
        ridge,
        subset_ids: (0..b).collect(),
    }
}

fn small_model(dims: &[usize], act: Activation, seed: u64) -> MlpModel {
    let m = MlpModel::init(dims, act, seed).expect("valid dims");
    let mut rng = seeded_rng(seed ^ 0x5eed);
    let layers = m
        .layers()
        .iter()
        .map(|l| Dense { weight: l.weight.clone(), bias: gaussian_vector(l.bias.len(), &mut rng) * 0.3 })
        .collect();
    MlpModel::new(layers, act).expect("finite")
}

/// Closed form against descent, orthogonality, ridge limits, interpolation.
pub fn lsq_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let cfg = OracleConfig::default();
    let mut rows = Vec::new();

    let mut worst: f64 = f64::NEG_INFINITY;
    let mut count = 0;
    for (i, b) in [5usize, 11, 25, 100].iter().cycle().take(32).enumerate() {
        let sys = random_correction(*b, 10, 3, 1e-2, derive_seed(seed, &[1, i as u64]));
        let closed = solve_correction(&sys)?;
        let oracle = lsq_oracle(&sys.design, &sys.reference_design, &sys.base_theta, sys.ridge, &cfg)?;
        let ov = correction_objective(&sys, &oracle);
        let cv = correction_objective(&sys, &closed.corrected_theta);
        worst = worst.max((cv - ov) / (1.0 + ov));
        count += 1;
    }
    rows.push(CheckRow::at_most("lsq", 1, format!("closed-form objective gap over {count} instances"), worst, 1e-8));

    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let sys = random_correction(40, 8, 3, 0.0, derive_seed(seed, &[2, i]));
        let res = solve_correction(&sys)?;
        let lhs = sys.design.tr_mul(&res.calib_residual).norm();
        worst = worst.max(lhs / (sys.design.norm() * res.calib_residual.norm()));
    }
    rows.push(CheckRow::at_most("lsq", 2, "orthogonality of calibration residual", worst, 1e-8));

    let mut zero_shift: f64 = 0.0;
    let mut monotone = true;
    for i in 0..5u64 {
        let model = Arc::new(small_model(&[3, 12, 12, 2], Activation::Tanh, derive_seed(seed, &[3, i])));
        let calib = gaussian_matrix(40, 3, &mut seeded_rng(derive_seed(seed, &[4, i])));
        for lambda in [0.0, 1e-2, 1.0] {
            let c = PncConfig {
                target_layers: vec![1],
                ensemble_size: 2,
                rank: 4,
                scale: 0.0,
                ridge: lambda,
                seed: i,
                bootstrap_fraction: None,
            };
            let e = build_ensemble(model.clone(), &calib, &c, true)?;
            for m in e.members() {
                zero_shift = zero_shift.max(m.repairs[0].theta_delta.amax());
            }
        }
        let c = PncConfig {
            target_layers: vec![1],
            ensemble_size: 1,
            rank: 4,
            scale: 0.5,
            ridge: 0.0,
            seed: i,
            bootstrap_fraction: None,
        };
        let e = build_ensemble(model.clone(), &calib, &c, true)?;
        let mut last = f64::INFINITY;
        for lambda in [1e-4, 1e-2, 1.0, 1e2, 1e4] {
            let mut sys = e.correction_system(0, 0, &calib)?;
            sys.ridge = lambda;
            let n = solve_correction(&sys)?.theta_shift_norm;
            monotone &= n <= last;
            last = n;
        }
    }
    rows.push(CheckRow::at_most("lsq", 3, "max |Theta_hat - Theta| at zero scale", zero_shift, 0.0));
    rows.push(CheckRow::at_least("lsq", 3, "shift norm nonincreasing in ridge", monotone as u8 as f64, 1.0));

    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let b = [4usize, 8, 12, 16, 17][(i % 5) as usize];
        let model = Arc::new(small_model(&[3, 16, 16, 2], Activation::Tanh, derive_seed(seed, &[5, i])));
        let calib = gaussian_matrix(b, 3, &mut seeded_rng(derive_seed(seed, &[6, i])));
        let c = PncConfig {
            target_layers: vec![1],
            ensemble_size: 1,
            rank: 6,
            scale: 0.5,
            ridge: 0.0,
            seed: i,
            bootstrap_fraction: None,
        };
        let e = build_ensemble(model, &calib, &c, true)?;
        for r in post_correction_residuals(&e, 0, &calib)? {
            worst = worst.max(r.magnitude);
        }
    }
    rows.push(CheckRow::at_most("lsq", 4, "max calibration residual when interpolating", worst, 1e-7));
    Ok(rows)
}

/// Analytic sensitivity against finite differences, hat-weight identities,
/// and the local residual floor.
pub fn sensitivity_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let s = derive_seed(seed, &[10, i]);
        let mut rng = seeded_rng(s);
        let model = small_model(&[3, 8, 8, 2], Activation::Tanh, s);
        let layer = (i % 2) as usize;
        let flat = model.layers()[layer].weight.len();
        let u = orthonormal_basis(flat, 4, s ^ 1)?;
        let b = rng.random_range(10..=30);
        let calib = gaussian_matrix(b, 3, &mut rng);
        let lambda = 10f64.powf(rng.random_range(-3.0..-1.0));
        let x = gaussian_vector(3, &mut rng) * 1.5;
        let ctx = SensitivityContext::new(&model, layer, &u, &calib, lambda)?;
        let analytic = ctx.report(&x)?.sensitivity;
        let fd = sensitivity_fd_oracle(&model, layer, &u, &calib, &x, lambda, 1e-5)?;
        worst = worst.max((&fd - &analytic).norm() / analytic.norm().max(1e-300));
    }
    rows.push(CheckRow::at_most("sensitivity", 5, "analytic vs finite-difference sensitivity (rel)", worst, 1e-4));

    let mut recon: f64 = 0.0;
    let mut norm_id: f64 = 0.0;
    let mut exact_zero: f64 = 0.0;
    for i in 0..100u64 {
        let mut rng = seeded_rng(derive_seed(seed, &[11, i]));
        let d = rng.random_range(3..12);
        let b = rng.random_range(d + 2..4 * d + 4);
        let x = augment_ones(&gaussian_matrix(b, d, &mut rng));
        let lambda = if i % 4 == 0 { 0.0 } else { 10f64.powf(rng.random_range(-4.0..1.0)) };
        let y = gaussian_vector(d + 1, &mut rng);
        let g = RidgeGeometry::new(x.clone(), lambda)?;
        let w = g.hat_weights(&y)?;
        let ginv = g.solve(&y)?;
        let h = g.leverage(&y)?;
        recon = recon.max((x.tr_mul(&w) - (&y - &ginv * lambda)).norm() / y.norm());
        norm_id = norm_id.max((w.norm_squared() - (h - lambda * ginv.norm_squared())).abs() / h.max(1e-300));
        if lambda == 0.0 {
            exact_zero = exact_zero.max((w.norm_squared() - h).abs() / h.max(1e-300));
        }
    }
    rows.push(CheckRow::at_most("sensitivity", 6, "hat-weight reconstruction identity (rel)", recon, 1e-8));
    rows.push(CheckRow::at_most("sensitivity", 6, "hat-weight norm identity (rel)", norm_id, 1e-8));
    rows.push(CheckRow::at_most("sensitivity", 6, "norm equals leverage at zero ridge (rel)", exact_zero, 1e-8));

    let mut holds = 0;
    let mut worst_margin = f64::INFINITY;
    for i in 0..20u64 {
        let s = derive_seed(seed, &[12, i]);
        let mut rng = seeded_rng(s);
        let model = small_model(&[3, 8, 8, 2], Activation::Tanh, s);
        let u = orthonormal_basis(64, 4, s ^ 2)?;
        let calib = gaussian_matrix(15, 3, &mut rng);
        let x = gaussian_vector(3, &mut rng) * 1.5;
        let f = local_residual_floor_check(&model, 1, &u, &calib, 1e-2, &x, 0.02, 0.05, 60, s ^ 3)?;
        holds += f.holds as usize;
        worst_margin = worst_margin.min(f.lhs - f.rhs);
    }
    rows.push(CheckRow::at_least("sensitivity", 9, "residual floor holds (draws of 20)", holds as f64, 20.0));
    rows.push(CheckRow::at_least("sensitivity", 9, "min lhs - rhs", worst_margin, 0.0));
    Ok(rows)
}

/// Random-sketch moments over repeated estimates.
pub fn sketch_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let (n, reps, sigma) = (100usize, 500usize, 0.7);
    let mut worst_z: f64 = 0.0;
    let mut ratio_lo = f64::INFINITY;
    let mut ratio_hi: f64 = 0.0;
    let mut oracle_z: f64 = 0.0;
    for i in 0..5u64 {
        let mut rng = seeded_rng(derive_seed(seed, &[20, i]));
        let (q, k) = (rng.random_range(2..6), rng.random_range(4..12));
        let a = gaussian_matrix(q, k, &mut rng);
        let exact = sigma * sigma * a.norm_squared();
        let r_eff = effective_rank(RankInput::Operator(&a))?;
        let values: Vec<f64> = (0..reps)
            .map(|r| sketch_variance(&a, sigma, n, derive_seed(seed, &[21, i, r as u64])).map(|s| s.estimate))
            .collect::<Result<_>>()?;
        let mean = values.iter().sum::<f64>() / reps as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0);
        let se = (var / reps as f64).sqrt();
        worst_z = worst_z.max((mean - exact).abs() / se);
        let ratio = (var / (mean * mean)) / (2.0 / (n as f64 * r_eff));
        ratio_lo = ratio_lo.min(ratio);
        ratio_hi = ratio_hi.max(ratio);
        let o = mc_moment_oracle(&a, sigma, n, reps, derive_seed(seed, &[22, i]))?;
        oracle_z = oracle_z.max((o.mean - exact).abs() / o.mean_se);
    }
    rows.push(CheckRow::at_most("sketch", 7, "sketch mean deviation (standard errors)", worst_z, 4.0));
    rows.push(CheckRow::at_least("sketch", 7, "min relative-variance ratio", ratio_lo, 0.7));
    rows.push(CheckRow::at_most("sketch", 7, "max relative-variance ratio", ratio_hi, 1.3));
    rows.push(CheckRow::at_most("sketch", 7, "independent sampler mean deviation (standard errors)", oracle_z, 4.0));
    Ok(rows)
}

fn rotated_spectrum(spectrum: &[f64], seed: u64) -> Result<Matrix> {
    let q = orthonormal_basis(spectrum.len(), spectrum.len(), seed)?;
    Ok(&q * Matrix::from_diagonal(&Vector::from_row_slice(spectrum)) * q.transpose())
}

/// Equal trace/norm PSD family with pairwise alignment exactly `alpha`: each
/// member's eigenvectors are the shared ones rotated by `acos(alpha^(1/4))`
/// toward a private orthogonal block, so cross inner products pick up `cos^4`.
fn aligned_family(m: usize, alpha: f64, seed: u64) -> Result<Vec<Matrix>> {
    let spectrum = [3.0, 1.5, 0.5];
    let b = spectrum.len();
    let dim = b * (m + 1);
    let u = orthonormal_basis(b, b, seed)?;
    let theta = alpha.clamp(0.0, 1.0).powf(0.25).acos();
    let s = Matrix::from_diagonal(&Vector::from_row_slice(&spectrum));
    (0..m)
        .map(|j| {
            let mut w = Matrix::zeros(dim, b);
            w.view_mut((0, 0), (b, b)).copy_from(&(&u * theta.cos()));
            w.view_mut((b * (j + 1), 0), (b, b)).copy_from(&(&u * theta.sin()));
            Ok(&w * &s * w.transpose())
        })
        .collect()
}

fn formula_gap(r: &MixtureRankReport) -> f64 {
    (r.formula_prediction - r.mixture_eff_rank).abs() / r.mixture_eff_rank
}

/// Mixture effective rank against the alignment formula.
pub fn mixture_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let spectrum = [4.0, 2.0, 1.0, 0.5, 0.25];
    let same = rotated_spectrum(&spectrum, seed)?;
    let r1 = mixture_rank(&vec![same.clone(); 4])?;
    let blocks: Vec<Matrix> = (0..4)
        .map(|j| {
            let mut c = Matrix::zeros(20, 20);
            c.view_mut((5 * j, 5 * j), (5, 5)).copy_from(&rotated_spectrum(&spectrum, seed + 7 + j as u64)?);
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let r0 = mixture_rank(&blocks)?;
    let rot: Vec<Matrix> = (0..5).map(|j| rotated_spectrum(&spectrum, seed + 20 + j)).collect::<Result<_>>()?;
    let rr = mixture_rank(&rot)?;
    let half = mixture_rank(&aligned_family(4, 0.5, seed + 40)?)?;
    let half_gap = (half.avg_alignment - 0.5).abs();
    rows.push(CheckRow::at_most("mixture", 8, "formula gap at alignment 1", formula_gap(&r1), 1e-9));
    rows.push(CheckRow::at_most("mixture", 8, "formula gap at alignment 0", formula_gap(&r0), 1e-9));
    rows.push(CheckRow::at_most("mixture", 8, "formula gap on rotated family", formula_gap(&rr), 1e-9));
    rows.push(CheckRow::at_most("mixture", 8, "formula gap on interpolated family", formula_gap(&half), 1e-9));
    rows.push(CheckRow::at_most("mixture", 8, "interpolated family alignment error", half_gap, 1e-12));
    rows.push(CheckRow::at_least(
        "mixture",
        8,
        "equal trace and norm holds for constructed families",
        (r1.equal_trace_and_norm && r0.equal_trace_and_norm && rr.equal_trace_and_norm && half.equal_trace_and_norm)
            as u8 as f64,
        1.0,
    ));
    let mut decreasing = true;
    let mut last = f64::INFINITY;
    for step in 0..=10 {
        let t = step as f64 / 10.0;
        let r = mixture_rank(&aligned_family(4, t, seed + 60)?)?;
        decreasing &= r.formula_prediction < last && formula_gap(&r) <= 1e-9;
        last = r.formula_prediction;
    }
    rows.push(CheckRow::at_least(
        "mixture",
        8,
        "formula strictly decreasing in alignment",
        decreasing as u8 as f64,
        1.0,
    ));
    Ok(rows)
}

/// Independent OIHW loop convolution.
fn loop_conv(x: &FeatureMap, w: &crate::conv_pnc::Kernel, g: Geometry) -> FeatureMap {
    let (n, h, wd, c) = x.dim();
    let (k, _, _, o) = w.dim();
    let ho = (h + 2 * g.padding - k) / g.stride + 1;
    let wo = (wd + 2 * g.padding - k) / g.stride + 1;
    let mut out = FeatureMap::zeros((n, ho, wo, o));
    for b in 0..n {
        for oo in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for cc in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let ii = (i * g.stride + u) as isize - g.padding as isize;
                                let jj = (j * g.stride + v) as isize - g.padding as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                    acc += x[[b, ii as usize, jj as usize, cc]] * w[[u, v, cc, oo]];
                                }
                            }
                        }
                    }
                    out[[b, i, j, oo]] = acc;
                }
            }
        }
    }
    out
}

/// Patch identity, chunk invariance, conv ridge against descent, shortcut
/// equivalence.
pub fn conv_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let mut rng = seeded_rng(derive_seed(seed, &[30, i]));
        let stride = 1 + (i % 2) as usize;
        let k = [1usize, 3, 5][rng.random_range(0..3)];
        let (h, w, c, o) =
            (rng.random_range(k..k + 6), rng.random_range(k..k + 6), rng.random_range(1..4), rng.random_range(1..4));
        let n = rng.random_range(1..3);
        let g = Geometry { kernel: k, stride, padding: rng.random_range(0..=k / 2) };
        let x =
            FeatureMap::from_shape_vec((n, h, w, c), gaussian_matrix(1, n * h * w * c, &mut rng).as_slice().to_vec())
                .expect("shape");
        let kern = kernel_from_flat(gaussian_matrix(1, k * k * c * o, &mut rng).as_slice(), (k, k, c, o))?;
        let design = unfold_patches(&x, g)?;
        let prod = design.matrix.columns(1, c * k * k) * kernel_matrix(&kern);
        let direct = flatten_map(&loop_conv(&x, &kern, g));
        let via_conv = flatten_map(&conv2d(&x, &kern, None, g)?);
        let scale = direct.norm().max(1e-300);
        worst = worst.max((&prod - &direct).norm() / scale).max((&via_conv - &direct).norm() / scale);
    }
    rows.push(CheckRow::at_most("conv", 10, "patch product vs direct convolution (rel)", worst, 1e-9));

    let block = ConvBlockModel::random(4, 4, 3, 1, derive_seed(seed, &[31]))?;
    let images = synthetic_images(4, 6, 4, derive_seed(seed, &[32]));
    let mut rng = seeded_rng(derive_seed(seed, &[33]));
    let pert = &block.conv1
        + &kernel_from_flat((gaussian_matrix(1, block.conv1.len(), &mut rng) * 0.2).as_slice(), block.conv1.dim())?;
    let (design, targets, _) = conv_correction_system(&block, &pert, &images, ConvTarget::ConvOutput)?;
    let theta0 = block.conv2_theta();
    let whole = accumulate_all(theta0.nrows(), &design, &targets, &theta0, design.nrows())?;
    let mut chunk_gap: f64 = 0.0;
    for chunk in [1usize, 7, 64] {
        let acc = accumulate_all(theta0.nrows(), &design, &targets, &theta0, chunk)?;
        chunk_gap = chunk_gap
            .max((&acc.h - &whole.h).norm() / whole.h.norm())
            .max((&acc.beta - &whole.beta).norm() / whole.beta.norm());
    }
    let perm: Vec<usize> = (0..design.nrows()).rev().collect();
    let shuffled = accumulate_all(theta0.nrows(), &design.select_rows(&perm), &targets.select_rows(&perm), &theta0, 7)?;
    chunk_gap = chunk_gap
        .max((&shuffled.h - &whole.h).norm() / whole.h.norm())
        .max((&shuffled.beta - &whole.beta).norm() / whole.beta.norm());
    rows.push(CheckRow::at_most("conv", 10, "chunk partition and order invariance (rel)", chunk_gap, 1e-10));

    let small = ConvBlockModel::random(2, 2, 3, 1, derive_seed(seed, &[34]))?;
    let imgs = synthetic_images(4, 4, 2, derive_seed(seed, &[35]));
    let pert_small = &small.conv1
        + &kernel_from_flat((gaussian_matrix(1, small.conv1.len(), &mut rng) * 0.3).as_slice(), small.conv1.dim())?;
    let (d2, t2, _) = conv_correction_system(&small, &pert_small, &imgs, ConvTarget::ConvOutput)?;
    let th0 = small.conv2_theta();
    let acc = accumulate_all(th0.nrows(), &d2, &t2, &th0, 64)?;
    let lambda = 1e-3;
    let closed = solve_conv_correction(&acc, lambda, &th0)?;
    let oracle_cfg = OracleConfig { convergence_tol: 1e-13, ..OracleConfig::default() };
    let (oracle, _) = ridge_descent(&d2, &t2, &th0.transpose(), lambda, &oracle_cfg)?;
    let gap = conv_ridge_objective(&d2, &t2, &closed.theta, &th0, lambda)
        - conv_ridge_objective(&d2, &t2, &oracle.transpose(), &th0, lambda);
    rows.push(CheckRow::at_most("conv", 10, "conv ridge objective minus descent oracle", gap, 1e-7));

    let mut sc_gap: f64 = 0.0;
    for (cin, cout, s) in [(4usize, 4usize, 36u64), (3, 5, 37)] {
        let blk = ConvBlockModel::random(cin, cout, 3, 1, derive_seed(seed, &[s]))?;
        let im = synthetic_images(3, 6, cin, derive_seed(seed, &[s, 1]));
        let p = &blk.conv1
            + &kernel_from_flat((gaussian_matrix(1, blk.conv1.len(), &mut rng) * 0.2).as_slice(), blk.conv1.dim())?;
        let a = fit_conv2(&blk, &p, &im, lambda, 64, ConvTarget::ConvOutput)?;
        let b = fit_conv2(&blk, &p, &im, lambda, 64, ConvTarget::BlockOutput)?;
        sc_gap = sc_gap.max((&a.theta - &b.theta).amax());
    }
    rows.push(CheckRow::at_most("conv", 10, "conv-output vs block-output targets", sc_gap, 1e-9));
    Ok(rows)
}
