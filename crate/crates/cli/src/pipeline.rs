//! Benchmark workflows shared by the subcommands and the test suites.

use std::sync::Arc;

use pnc_core::bench_data::ShiftedDataset;
use pnc_core::diagnostics::{effective_rank, ensemble_residuals, MahalanobisModel, RankInput, SensitivityContext};
use pnc_core::ensemble_eval::{combine, evaluate_splits, noise_floor, spearman, EvalReport, Split};
use pnc_core::net::MlpModel;
use pnc_core::numerics::{Matrix, Vector};
use pnc_core::pnc::{build_ensemble, PncConfig, PncEnsemble};
use pnc_core::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

pub const EVAL_SPLITS: [&str; 4] = ["id", "near", "mid", "far"];

/// Min/max of `sigma_min(G_v + lambda I)` over members with at least one repair.
pub fn conditioning_summary(ensemble: &PncEnsemble) -> (f64, f64) {
    let vals = ensemble.members().iter().flat_map(|m| m.repairs.iter().map(|r| r.min_singular_value));
    vals.fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

pub fn eval_splits(data: &ShiftedDataset, names: &[&str]) -> Result<Vec<(String, Matrix, Matrix)>> {
    names
        .iter()
        .map(|n| {
            let s = data.split(n)?;
            Ok((n.to_string(), s.inputs.clone(), s.targets.clone()))
        })
        .collect()
}

/// Per-dim base-model residual variance on the validation split.
pub fn floor_for(model: &MlpModel, data: &ShiftedDataset) -> Result<Vec<f64>> {
    noise_floor(model, &data.val().inputs, &data.val().targets)
}

pub fn evaluate(ensemble: &PncEnsemble, data: &ShiftedDataset, names: &[&str], floor: &[f64]) -> Result<EvalReport> {
    let owned = eval_splits(data, names)?;
    let splits: Vec<Split<'_>> = owned.iter().map(|(n, x, y)| Split { name: n, inputs: x, targets: y }).collect();
    evaluate_splits(ensemble, &splits, floor)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticRow {
    pub split: String,
    pub point: usize,
    pub leverage: f64,
    pub mahalanobis: f64,
    pub rho_mean: f64,
    pub rho_max: f64,
    pub sketch: f64,
    pub eff_rank: f64,
    pub disagreement: f64,
}

pub const DIAGNOSTIC_COLUMNS: [&str; 9] =
    ["split", "point", "leverage", "mahalanobis", "rho_mean", "rho_max", "sketch", "eff_rank", "disagreement"];

/// Population variance trace of member outputs per row.
pub fn disagreement(preds: &[Matrix]) -> Result<Vec<f64>> {
    let q = preds.first().ok_or(Error::EmptyEnsemble)?.ncols();
    Ok(combine(preds, &vec![0.0; q])?.disagreement)
}

/// Sketch of the member-average squared residual: member `m` contributes
/// `||A_{S_m}(x) v_m||^2` with its own subset and coefficients.
pub fn ensemble_sketch(ensemble: &PncEnsemble, calibration: &Matrix, inputs: &Matrix) -> Result<Vec<f64>> {
    if ensemble.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let model = ensemble.base();
    let layer = ensemble.config().target_layers[0];
    let basis = ensemble.basis(0);
    let sigma = ensemble.config().scale;
    let parts: Vec<Vec<f64>> = ensemble
        .members()
        .par_iter()
        .map(|member| {
            let repair = &member.repairs[0];
            let calib = match &repair.subset {
                Some(ids) => calibration.select_rows(ids),
                None => calibration.clone(),
            };
            let ctx = SensitivityContext::new(model, layer, basis, &calib, ensemble.config().ridge)?;
            let v: Vector = &repair.coeffs * sigma;
            let av = ctx.apply_batch(inputs, &v)?;
            Ok((0..inputs.nrows()).map(|i| av.row(i).norm_squared()).collect())
        })
        .collect::<Result<_>>()?;
    let m = parts.len() as f64;
    Ok((0..inputs.nrows()).map(|i| parts.iter().map(|p| p[i]).sum::<f64>() / m).collect())
}

/// Point-level diagnostics at the first target layer. Leverage and effective
/// rank use the full calibration set. All splits are scored in one pass.
pub fn diagnose(
    ensemble: &PncEnsemble,
    calibration: &Matrix,
    splits: &[(String, Matrix)],
) -> Result<Vec<DiagnosticRow>> {
    let labels: Vec<(&str, usize)> =
        splits.iter().flat_map(|(name, x)| (0..x.nrows()).map(move |i| (name.as_str(), i))).collect();
    if labels.is_empty() {
        return Ok(Vec::new());
    }
    let dim = splits.iter().find(|(_, x)| x.nrows() > 0).map(|(_, x)| x.ncols()).unwrap_or(0);
    let mut inputs = Matrix::zeros(labels.len(), dim);
    let mut at = 0;
    for (_, x) in splits.iter().filter(|(_, x)| x.nrows() > 0) {
        inputs.view_mut((at, 0), x.shape()).copy_from(x);
        at += x.nrows();
    }
    let model = ensemble.base();
    let layer = ensemble.config().target_layers[0];
    let ctx = SensitivityContext::new(model, layer, ensemble.basis(0), calibration, ensemble.config().ridge)?;
    let maha = MahalanobisModel::fit(&model.hidden_batch(layer, calibration, &[]), None)?;
    let lev = ctx.geometry.leverage_batch(&ctx.reps(&inputs))?;
    let dist = maha.distances(&model.hidden_batch(layer, &inputs, &[]))?;
    let sens = ctx.sensitivity_batch(&inputs)?;
    let sketch = ensemble_sketch(ensemble, calibration, &inputs)?;
    let dis = disagreement(&ensemble.member_predictions(&inputs))?;
    let rhos = ensemble_residuals(ensemble, &inputs)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, (name, point))| {
            let rho: Vec<f64> = rhos.iter().map(|r| r[i].magnitude).collect();
            DiagnosticRow {
                split: name.to_string(),
                point: *point,
                leverage: lev[i],
                mahalanobis: dist[i],
                rho_mean: rho.iter().sum::<f64>() / rho.len() as f64,
                rho_max: rho.iter().copied().fold(0.0, f64::max),
                sketch: sketch[i],
                eff_rank: effective_rank(RankInput::Operator(&sens[i])).unwrap_or(f64::NAN),
                disagreement: dis[i],
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MechanismReport {
    /// Mean over members and ID points of `||dy|| / ||dh||`.
    pub corrected_gain: f64,
    pub uncorrected_gain: f64,
    pub base_id_rmse: f64,
    pub corrected_id_rmse: f64,
    pub uncorrected_id_rmse: f64,
    /// Mahalanobis distance vs disagreement, all eval splits pooled.
    pub mahalanobis_spearman: f64,
    /// Sketch vs disagreement over the same pooled points.
    pub sketch_spearman: f64,
}

fn output_gain(ensemble: &PncEnsemble, inputs: &Matrix) -> f64 {
    let base_y = ensemble.base().predict_batch(inputs);
    let (base_h, hs) = ensemble.hidden_shift(inputs);
    let preds = ensemble.member_predictions(inputs);
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, h) in preds.iter().zip(&hs) {
        for i in 0..inputs.nrows() {
            let dh = (h.row(i) - base_h.row(i)).norm();
            if dh > 0.0 {
                total += (p.row(i) - base_y.row(i)).norm() / dh;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Corrected vs uncorrected members at the same perturbations, plus the
/// rank correlations between geometry, sketch and disagreement.
pub fn mechanism(corrected: &PncEnsemble, data: &ShiftedDataset) -> Result<MechanismReport> {
    let uncorrected = corrected.without_correction();
    let id = data.split("id")?;
    let rmse = |p: &Matrix| ((p - &id.targets).norm_squared() / p.len() as f64).sqrt();
    let mean_pred = |e: &PncEnsemble| {
        let preds = e.member_predictions(&id.inputs);
        let n = preds.len() as f64;
        preds.into_iter().fold(Matrix::zeros(id.targets.nrows(), id.targets.ncols()), |a, p| a + p) / n
    };
    let pooled: Vec<(String, Matrix)> =
        EVAL_SPLITS.iter().map(|n| Ok((n.to_string(), data.split(n)?.inputs.clone()))).collect::<Result<_>>()?;
    let rows = diagnose(corrected, &data.train().inputs, &pooled)?;
    let maha: Vec<f64> = rows.iter().map(|r| r.mahalanobis).collect();
    let dis: Vec<f64> = rows.iter().map(|r| r.disagreement).collect();
    let sk: Vec<f64> = rows.iter().map(|r| r.sketch).collect();
    Ok(MechanismReport {
        corrected_gain: output_gain(corrected, &id.inputs),
        uncorrected_gain: output_gain(&uncorrected, &id.inputs),
        base_id_rmse: rmse(&corrected.base().predict_batch(&id.inputs)),
        corrected_id_rmse: rmse(&mean_pred(corrected)),
        uncorrected_id_rmse: rmse(&mean_pred(&uncorrected)),
        mahalanobis_spearman: spearman(&maha, &dis).unwrap_or(f64::NAN),
        sketch_spearman: spearman(&sk, &dis).unwrap_or(f64::NAN),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepGrid {
    pub sigmas: Vec<f64>,
    pub fractions: Vec<f64>,
    pub ridges: Vec<f64>,
    /// Adds one `sigma = 0` cell as the unperturbed reference.
    pub include_baseline: bool,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            sigmas: vec![8.0, 16.0, 32.0],
            fractions: vec![0.05, 0.1, 0.2, 0.3],
            ridges: vec![1e-4, 1e-2],
            include_baseline: true,
        }
    }
}

impl SweepGrid {
    pub fn cells(&self) -> Vec<(f64, Option<f64>, f64)> {
        let mut out = Vec::new();
        for &s in &self.sigmas {
            for &f in &self.fractions {
                for &l in &self.ridges {
                    out.push((s, Some(f), l));
                }
            }
        }
        if self.include_baseline {
            out.push((0.0, None, self.ridges.first().copied().unwrap_or(1e-2)));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub sigma: f64,
    pub fraction: Option<f64>,
    pub ridge: f64,
    pub val_nll: Option<f64>,
    pub error: Option<String>,
}

/// Index of the smallest finite validation NLL; failed cells never win.
pub fn select_winner(cells: &[SweepCell]) -> Option<usize> {
    cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.val_nll.filter(|v| v.is_finite()).map(|v| (i, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepOutcome {
    pub cells: Vec<SweepCell>,
    pub winner: usize,
    pub winner_config: PncConfig,
    pub winner_report: EvalReport,
    /// The `sigma = 0` cell on all splits, when the grid has one.
    pub baseline_report: Option<EvalReport>,
}

pub fn cell_config(template: &PncConfig, cell: (f64, Option<f64>, f64)) -> PncConfig {
    PncConfig { scale: cell.0, bootstrap_fraction: cell.1, ridge: cell.2, ..template.clone() }
}

/// Builds and scores every grid cell on `val`, then re-scores the winner.
pub fn sweep(
    model: Arc<MlpModel>,
    data: &ShiftedDataset,
    template: &PncConfig,
    grid: &SweepGrid,
) -> Result<SweepOutcome> {
    let floor = floor_for(&model, data)?;
    let calib = &data.train().inputs;
    let cells: Vec<SweepCell> = grid
        .cells()
        .into_iter()
        .map(|c| {
            let cfg = cell_config(template, c);
            let res = build_ensemble(model.clone(), calib, &cfg, true)
                .and_then(|e| evaluate(&e, data, &["val"], &floor).map(|r| r.splits[0].nll));
            SweepCell {
                sigma: c.0,
                fraction: c.1,
                ridge: c.2,
                val_nll: res.as_ref().ok().copied(),
                error: res.err().map(|e| e.to_string()),
            }
        })
        .collect();
    let winner = select_winner(&cells).ok_or_else(|| Error::InvalidConfig("every sweep cell failed".into()))?;
    let grid_cells = grid.cells();
    let winner_config = cell_config(template, grid_cells[winner]);
    let names = ["val", "id", "near", "mid", "far"];
    let winner_report = evaluate(&build_ensemble(model.clone(), calib, &winner_config, true)?, data, &names, &floor)?;
    let baseline_report = match grid_cells.iter().position(|c| c.0 == 0.0) {
        Some(i) if cells[i].error.is_none() => {
            let cfg = cell_config(template, grid_cells[i]);
            Some(evaluate(&build_ensemble(model, calib, &cfg, true)?, data, &names, &floor)?)
        }
        _ => None,
    };
    Ok(SweepOutcome { cells, winner, winner_config, winner_report, baseline_report })
}
