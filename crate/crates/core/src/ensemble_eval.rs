//! Uniform-mixture prediction and the regression/OOD metric stack.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::net::MlpModel;
use crate::numerics::{Matrix, Vector};
use crate::pnc::PncEnsemble;

/// Anything that yields one `N x q` prediction matrix per member.
pub trait EnsemblePredictor: Sync {
    fn member_predictions(&self, inputs: &Matrix) -> Vec<Matrix>;
}

impl EnsemblePredictor for PncEnsemble {
    fn member_predictions(&self, inputs: &Matrix) -> Vec<Matrix> {
        PncEnsemble::member_predictions(self, inputs)
    }
}

/// One model repeated `copies` times: a no-signal ensemble.
pub struct Replicated<'a> {
    pub model: &'a MlpModel,
    pub copies: usize,
}

impl EnsemblePredictor for Replicated<'_> {
    fn member_predictions(&self, inputs: &Matrix) -> Vec<Matrix> {
        let p = self.model.predict_batch(inputs);
        vec![p; self.copies]
    }
}

impl EnsemblePredictor for Vec<Matrix> {
    /// Precomputed predictions; `inputs` is ignored.
    fn member_predictions(&self, _inputs: &Matrix) -> Vec<Matrix> {
        self.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub mean: Vector,
    /// Member spread plus noise floor, elementwise.
    pub variance: Vector,
    /// `M x q`.
    pub member_means: Matrix,
    /// Trace of the member covariance (floor excluded).
    pub disagreement: f64,
}

/// Batched form: row `i` of each matrix belongs to input `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveBatch {
    pub mean: Matrix,
    pub variance: Matrix,
    pub disagreement: Vec<f64>,
}

impl PredictiveBatch {
    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.nrows() == 0
    }

    pub fn point(&self, i: usize) -> (Vector, Vector) {
        (self.mean.row(i).transpose(), self.variance.row(i).transpose())
    }
}

fn check_floor(noise_floor: &[f64], q: usize) -> Result<()> {
    if noise_floor.len() != q {
        return Err(Error::LengthMismatch { left: noise_floor.len(), right: q });
    }
    if let Some(v) = noise_floor.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::NonPositiveVariance(*v));
    }
    Ok(())
}

/// Mixture moments from per-member predictions (population variance over members).
pub fn combine(member_predictions: &[Matrix], noise_floor: &[f64]) -> Result<PredictiveBatch> {
    let first = member_predictions.first().ok_or(Error::EmptyEnsemble)?;
    let (n, q) = first.shape();
    check_floor(noise_floor, q)?;
    if let Some(bad) = member_predictions.iter().find(|p| p.shape() != (n, q)) {
        return Err(Error::ShapeMismatch(format!("member prediction {:?} vs {:?}", bad.shape(), (n, q))));
    }
    let m = member_predictions.len() as f64;
    // deviations from member 0 keep identical members at exactly zero spread
    let anchor = first;
    let mut shift = Matrix::zeros(n, q);
    for p in member_predictions {
        shift += p - anchor;
    }
    shift /= m;
    let mut spread = Matrix::zeros(n, q);
    for p in member_predictions {
        spread += (p - anchor - &shift).map(|d| d * d);
    }
    spread /= m;
    let mean = anchor + shift;
    let disagreement = (0..n).map(|i| spread.row(i).sum()).collect();
    let floor = Matrix::from_fn(n, q, |_, j| noise_floor[j]);
    Ok(PredictiveBatch { mean, variance: spread + floor, disagreement })
}

pub fn predict(ensemble: &dyn EnsemblePredictor, x: &Vector, noise_floor: &[f64]) -> Result<PredictiveDistribution> {
    let row = Matrix::from_row_slice(1, x.len(), x.as_slice());
    let preds = ensemble.member_predictions(&row);
    let batch = combine(&preds, noise_floor)?;
    let q = batch.mean.ncols();
    let member_means = Matrix::from_fn(preds.len(), q, |i, j| preds[i][(0, j)]);
    Ok(PredictiveDistribution {
        mean: batch.mean.row(0).transpose(),
        variance: batch.variance.row(0).transpose(),
        member_means,
        disagreement: batch.disagreement[0],
    })
}

pub fn predict_batch(
    ensemble: &dyn EnsemblePredictor,
    inputs: &Matrix,
    noise_floor: &[f64],
) -> Result<PredictiveBatch> {
    combine(&ensemble.member_predictions(inputs), noise_floor)
}

/// Mean over output dims of the Gaussian negative log-likelihood.
pub fn gaussian_nll(mean: &Vector, variance: &Vector, target: &Vector) -> Result<f64> {
    if mean.len() != target.len() || variance.len() != target.len() {
        return Err(Error::LengthMismatch { left: mean.len(), right: target.len() });
    }
    if mean.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut total = 0.0;
    for i in 0..mean.len() {
        let s2 = variance[i];
        if !(s2 > 0.0) {
            return Err(Error::NonPositiveVariance(s2));
        }
        let d = target[i] - mean[i];
        total += 0.5 * ((2.0 * std::f64::consts::PI * s2).ln() + d * d / s2);
    }
    Ok(total / mean.len() as f64)
}

/// Average of per-point [`gaussian_nll`] over a batch.
pub fn batch_nll(pred: &PredictiveBatch, targets: &Matrix) -> Result<f64> {
    if targets.shape() != pred.mean.shape() {
        return Err(Error::ShapeMismatch("targets do not match predictions".into()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut total = 0.0;
    for i in 0..pred.len() {
        let (m, v) = pred.point(i);
        total += gaussian_nll(&m, &v, &targets.row(i).transpose())?;
    }
    Ok(total / pred.len() as f64)
}

/// Root mean square error over all points and output dims.
pub fn rmse(predictions: &Matrix, targets: &Matrix) -> Result<f64> {
    if predictions.shape() != targets.shape() {
        return Err(Error::ShapeMismatch("targets do not match predictions".into()));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(((predictions - targets).norm_squared() / predictions.len() as f64).sqrt())
}

/// 1-based average ranks; tied values share the mean of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// P(ood > id) + P(ood = id) / 2 via the rank-sum statistic.
pub fn auroc(scores_id: &[f64], scores_ood: &[f64]) -> Result<f64> {
    if scores_id.is_empty() || scores_ood.is_empty() {
        return Err(Error::EmptyInput);
    }
    let all: Vec<f64> = scores_id.iter().chain(scores_ood).copied().collect();
    if all.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFiniteResult("NaN score".into()));
    }
    let ranks = midranks(&all);
    let (n0, n1) = (scores_id.len() as f64, scores_ood.len() as f64);
    let r1: f64 = ranks[scores_id.len()..].iter().sum();
    Ok((r1 - n1 * (n1 + 1.0) / 2.0) / (n0 * n1))
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.len() < 2 {
        return Err(Error::EmptyInput);
    }
    pearson(&midranks(a), &midranks(b))
}

/// Per-dim residual variance of `model` on a held-out split.
pub fn noise_floor(model: &MlpModel, inputs: &Matrix, targets: &Matrix) -> Result<Vec<f64>> {
    if inputs.nrows() < 2 {
        return Err(Error::EmptyInput);
    }
    let r = model.predict_batch(inputs) - targets;
    let n = r.nrows() as f64;
    Ok((0..r.ncols())
        .map(|j| {
            let col = r.column(j);
            let m = col.sum() / n;
            (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).max(1e-12)
        })
        .collect())
}

#[derive(Debug, Clone, Copy)]
pub struct Split<'a> {
    pub name: &'a str,
    pub inputs: &'a Matrix,
    pub targets: &'a Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitMetrics {
    pub split: String,
    pub rmse: f64,
    pub nll: f64,
    pub mean_disagreement: f64,
    /// Against the ID split; absent for the ID split itself.
    pub auroc: Option<f64>,
    /// Disagreement vs per-point error norm.
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub splits: Vec<SplitMetrics>,
}

impl EvalReport {
    pub fn split(&self, name: &str) -> Option<&SplitMetrics> {
        self.splits.iter().find(|s| s.split == name)
    }

    /// `(split, metric, value)` rows; absent metrics are skipped.
    pub fn rows(&self) -> Vec<(String, &'static str, f64)> {
        let mut out = Vec::new();
        for s in &self.splits {
            out.push((s.split.clone(), "rmse", s.rmse));
            out.push((s.split.clone(), "nll", s.nll));
            out.push((s.split.clone(), "mean_disagreement", s.mean_disagreement));
            if let Some(a) = s.auroc {
                out.push((s.split.clone(), "auroc", a));
            }
            if let Some(r) = s.spearman {
                out.push((s.split.clone(), "spearman", r));
            }
        }
        out
    }
}

/// Scores every split; the split named `id` is the AUROC reference.
pub fn evaluate_splits(
    ensemble: &dyn EnsemblePredictor,
    splits: &[Split<'_>],
    noise_floor: &[f64],
) -> Result<EvalReport> {
    if splits.is_empty() {
        return Err(Error::EmptyInput);
    }
    let batches: Vec<PredictiveBatch> =
        splits.par_iter().map(|s| predict_batch(ensemble, s.inputs, noise_floor)).collect::<Result<_>>()?;
    let id_scores = splits.iter().position(|s| s.name == "id").map(|i| batches[i].disagreement.clone());
    let mut out = Vec::new();
    for (s, b) in splits.iter().zip(&batches) {
        let errors: Vec<f64> = (0..b.len()).map(|i| (b.mean.row(i) - s.targets.row(i)).norm()).collect();
        let auroc_v = match (&id_scores, s.name) {
            (Some(ids), name) if name != "id" => Some(auroc(ids, &b.disagreement)?),
            _ => None,
        };
        out.push(SplitMetrics {
            split: s.name.to_string(),
            rmse: rmse(&b.mean, s.targets)?,
            nll: batch_nll(b, s.targets)?,
            mean_disagreement: b.disagreement.iter().sum::<f64>() / b.len() as f64,
            auroc: auroc_v,
            spearman: spearman(&b.disagreement, &errors).ok(),
        });
    }
    Ok(EvalReport { splits: out })
}
