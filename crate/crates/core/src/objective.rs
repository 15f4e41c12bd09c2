//! Dual-band contrastive losses, cross-entropy and the combined objective.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Band embeddings of one conversation graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub low: Array2<f64>,
    pub high: Array2<f64>,
    pub tau: f64,
    /// L2-normalize rows before taking inner products.
    pub normalize: bool,
}

impl ContrastiveBatch {
    pub fn new(low: Array2<f64>, high: Array2<f64>, tau: f64) -> Result<Self> {
        let batch = ContrastiveBatch {
            low,
            high,
            tau,
            normalize: true,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid_config(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.low.dim() != self.high.dim() {
            return Err(Error::invalid_input(format!(
                "band embeddings differ in shape: {:?} vs {:?}",
                self.low.dim(),
                self.high.dim()
            )));
        }
        if self.low.nrows() == 0 {
            return Err(Error::invalid_input("contrastive batch has no nodes"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub lfcl: f64,
    pub hfcl: f64,
    pub ccl: f64,
    pub total: f64,
    pub lambda_ccl: f64,
}

impl LossReport {
    pub fn new(ce: f64, lfcl: f64, hfcl: f64, lambda_ccl: f64) -> Self {
        let ccl = lfcl + hfcl;
        LossReport {
            ce,
            lfcl,
            hfcl,
            ccl,
            total: total_loss(ce, ccl, lambda_ccl),
            lambda_ccl,
        }
    }
}

pub fn total_loss(ce: f64, ccl: f64, lambda_ccl: f64) -> f64 {
    ce + lambda_ccl * ccl
}

/// Row-wise unit vectors and the norms they were divided by. Zero rows stay
/// zero.
fn normalize_rows(x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut out = x.to_owned();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        if n > 0.0 {
            row /= n;
        }
    }
    (out, norms)
}

/// Backward of [`normalize_rows`]: `(g - u (u . g)) / |x|`. Zero rows get no
/// gradient.
fn normalize_rows_backward(unit: ArrayView2<f64>, norms: ArrayView1<f64>, grad_unit: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(unit.dim());
    for i in 0..unit.nrows() {
        if norms[i] > 0.0 {
            let u = unit.row(i);
            let g = grad_unit.row(i);
            let proj = u.dot(&g);
            out.row_mut(i).assign(&((&g - &(&u * proj)) / norms[i]));
        }
    }
    out
}

/// Negative-only contrastive loss of `anchors` against every row of
/// `negatives` and its gradients with respect to both (already normalized)
/// inputs.
fn anchored_loss(anchors: ArrayView2<f64>, negatives: ArrayView2<f64>, tau: f64) -> (f64, Array2<f64>, Array2<f64>) {
    let n_anchor = anchors.nrows();
    let inv_tau = 1.0 / tau;
    let sims = anchors.dot(&negatives.t()) * inv_tau;
    let mut weights = Array2::<f64>::zeros(sims.dim());
    let mut loss = 0.0;
    for (a, row) in sims.rows().into_iter().enumerate() {
        let max = row.iter().copied().fold(inv_tau, f64::max);
        let positive = (inv_tau - max).exp();
        let mut sum = positive;
        for (i, &s) in row.iter().enumerate() {
            let e = (s - max).exp();
            weights[[a, i]] = e;
            sum += e;
        }
        loss += -inv_tau + max + sum.ln();
        weights.row_mut(a).mapv_inplace(|e| e / sum);
    }
    let scale = inv_tau / n_anchor as f64;
    let grad_anchor = weights.dot(&negatives) * scale;
    let grad_neg = weights.t().dot(&anchors) * scale;
    (loss / n_anchor as f64, grad_anchor, grad_neg)
}

/// Loss and gradients `(dL/dlow, dL/dhigh)` with low-band anchors
/// (`low_anchor = true`) or high-band anchors.
fn band_loss_with_grad(batch: &ContrastiveBatch, low_anchor: bool) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    batch.validate()?;
    let (low, low_norm) = if batch.normalize {
        normalize_rows(batch.low.view())
    } else {
        (batch.low.clone(), Array1::ones(batch.low.nrows()))
    };
    let (high, high_norm) = if batch.normalize {
        normalize_rows(batch.high.view())
    } else {
        (batch.high.clone(), Array1::ones(batch.high.nrows()))
    };
    let (loss, g_low, g_high) = if low_anchor {
        anchored_loss(low.view(), high.view(), batch.tau)
    } else {
        let (loss, g_high, g_low) = anchored_loss(high.view(), low.view(), batch.tau);
        (loss, g_low, g_high)
    };
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("contrastive loss is {loss}")));
    }
    if batch.normalize {
        Ok((
            loss,
            normalize_rows_backward(low.view(), low_norm.view(), g_low.view()),
            normalize_rows_backward(high.view(), high_norm.view(), g_high.view()),
        ))
    } else {
        Ok((loss, g_low, g_high))
    }
}

/// Low-band anchors against all high-band nodes.
pub fn lfcl(batch: &ContrastiveBatch) -> Result<f64> {
    Ok(band_loss_with_grad(batch, true)?.0)
}

/// High-band anchors against all low-band nodes.
pub fn hfcl(batch: &ContrastiveBatch) -> Result<f64> {
    Ok(band_loss_with_grad(batch, false)?.0)
}

pub fn ccl(batch: &ContrastiveBatch) -> Result<f64> {
    Ok(lfcl(batch)? + hfcl(batch)?)
}

/// Both contrastive terms with the gradient of their sum.
#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub lfcl: f64,
    pub hfcl: f64,
    pub grad_low: Array2<f64>,
    pub grad_high: Array2<f64>,
}

pub fn ccl_with_grad(batch: &ContrastiveBatch) -> Result<ContrastiveOutput> {
    let (lf, gl1, gh1) = band_loss_with_grad(batch, true)?;
    let (hf, gl2, gh2) = band_loss_with_grad(batch, false)?;
    Ok(ContrastiveOutput {
        lfcl: lf,
        hfcl: hf,
        grad_low: gl1 + gl2,
        grad_high: gh1 + gh2,
    })
}

fn check_labels(labels: &[usize], n_rows: usize, n_classes: usize) -> Result<()> {
    if labels.len() != n_rows {
        return Err(Error::invalid_input(format!("{} labels for {} rows", labels.len(), n_rows)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::invalid_input(format!("label {bad} is not below class count {n_classes}")));
    }
    if n_rows == 0 {
        return Err(Error::invalid_input("cross-entropy over zero rows"));
    }
    Ok(())
}

/// Mean cross-entropy from logits through log-softmax, with `dL/dlogits`.
pub fn cross_entropy_logits(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_labels(labels, logits.nrows(), logits.ncols())?;
    let n = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss -= row[labels[i]] - log_z;
        for (c, &z) in row.iter().enumerate() {
            grad[[i, c]] = (z - log_z).exp() / n;
        }
        grad[[i, labels[i]]] -= 1.0 / n;
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("cross-entropy is {loss}")));
    }
    Ok((loss, grad))
}

/// Mean cross-entropy from probability rows.
pub fn cross_entropy(probs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(labels, probs.nrows(), probs.ncols())?;
    for (i, row) in probs.rows().into_iter().enumerate() {
        let s = row.sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::invalid_input(format!("row {i} is not a probability vector (sum {s})")));
        }
    }
    let loss = -labels
        .iter()
        .enumerate()
        .map(|(i, &l)| probs[[i, l]].ln())
        .sum::<f64>()
        / labels.len() as f64;
    Ok(loss)
}

pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}
