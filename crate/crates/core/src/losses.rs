//! Training objectives.
//!
//! The AU contrastive loss aligns each AU's visual features with the text
//! embedding of the prompt matching the sample's label for that AU. Unlike
//! the diagonal CLIP target, every pair of samples that share the AU label
//! is a positive. Targets are the rows of the label matrix scaled to sum to
//! one, and the loss is averaged over both directions of the similarity
//! matrix.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{device, l2_normalize, log_softmax, Init, Linear, Param};

/// Visual-to-text width bridge applied before similarities.
#[derive(Debug, Clone)]
pub struct VisualProjection {
    pub linear: Linear,
}

impl VisualProjection {
    pub fn new(init: &mut Init, width: usize, text_dim: usize) -> Result<Self> {
        Ok(VisualProjection { linear: Linear::new(init, "proj.visual", width, text_dim, false)? })
    }

    /// Projects and L2-normalizes along the last axis.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.linear.forward(x)?)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.linear.params()
    }
}

/// Per-AU batch of visual features, matched text features and labels.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    /// Per AU, (B, d_t).
    pub visual: Vec<Tensor>,
    /// Per AU, (B, d_t).
    pub text: Vec<Tensor>,
    /// Per AU, length-B binary labels.
    pub labels: Vec<Vec<u8>>,
}

/// Cosine similarity between every visual row and every text row, (B, B).
pub fn similarity_matrix(visual: &Tensor, text: &Tensor) -> Result<Tensor> {
    for t in [visual, text] {
        let norms = t.sqr()?.sum(D::Minus1)?.to_vec1::<f64>()?;
        if let Some(row) = norms.iter().position(|n| !(*n > 1e-24)) {
            return Err(Error::ZeroNormRow(row));
        }
    }
    Ok(l2_normalize(visual)?.matmul(&l2_normalize(text)?.t()?)?)
}

/// LM[b1][b2] = 1 iff the two samples share the label.
pub fn miauc_label_matrix(labels: &[u8]) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|a| labels.iter().map(|b| if a == b { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub fn identity_label_matrix(b: usize) -> Vec<Vec<f64>> {
    (0..b).map(|i| (0..b).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// Logit scale 1/τ for a fixed temperature.
pub fn temperature_scale(temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    Ok(Tensor::new(1.0 / temperature, &device())?)
}

fn check_scale(scale: &Tensor) -> Result<()> {
    let s = scale.to_scalar::<f64>()?;
    if !(s > 0.0) {
        return Err(Error::NonPositiveTemperature(if s == 0.0 { f64::INFINITY } else { 1.0 / s }));
    }
    Ok(())
}

/// Soft-target cross-entropy of softmax(logits) against `targets` rows,
/// minus the target entropy, averaged over rows. Zero iff every predicted
/// row equals its target row.
fn soft_ce_rows(logits: &Tensor, targets: &[Vec<f64>]) -> Result<Tensor> {
    let b = targets.len();
    let normalized: Vec<Vec<f64>> = targets
        .iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            row.iter().map(|v| v / s).collect()
        })
        .collect();
    let entropy: f64 = normalized
        .iter()
        .flatten()
        .filter(|t| **t > 0.0)
        .map(|t| -t * t.ln())
        .sum::<f64>();
    let t = crate::nn::from_rows(&normalized)?;
    let ce = (t * log_softmax(logits, 1)?)?.sum_all()?.neg()?;
    Ok(((ce - entropy)? / b as f64)?)
}

/// Symmetric soft contrastive loss for one similarity matrix.
pub fn contrastive_term(similarity: &Tensor, label_matrix: &[Vec<f64>], logit_scale: &Tensor) -> Result<Tensor> {
    let logits = similarity.broadcast_mul(logit_scale)?;
    let transposed: Vec<Vec<f64>> = (0..label_matrix.len())
        .map(|j| label_matrix.iter().map(|row| row[j]).collect())
        .collect();
    let rows = soft_ce_rows(&logits, label_matrix)?;
    let cols = soft_ce_rows(&logits.t()?.contiguous()?, &transposed)?;
    Ok(((rows + cols)? * 0.5)?)
}

fn check_batch(batch: &ContrastiveBatch) -> Result<()> {
    if batch.visual.len() != batch.text.len() || batch.visual.len() != batch.labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} visual, {} text, {} label sets",
            batch.visual.len(),
            batch.text.len(),
            batch.labels.len()
        )));
    }
    Ok(())
}

/// Sum over AUs of the multi-positive contrastive term.
pub fn miauc_loss(batch: &ContrastiveBatch, logit_scale: &Tensor) -> Result<Tensor> {
    check_batch(batch)?;
    check_scale(logit_scale)?;
    let mut total = Tensor::new(0.0f64, &device())?;
    for n in 0..batch.visual.len() {
        let m = similarity_matrix(&batch.visual[n], &batch.text[n])?;
        let lm = miauc_label_matrix(&batch.labels[n]);
        total = (total + contrastive_term(&m, &lm, logit_scale)?)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrigClVariant {
    /// One pooled feature per sample against a whole-face description.
    Global,
    /// One diagonal-target term per AU.
    Local,
}

/// CLIP-style contrastive loss with diagonal targets. The global variant
/// expects a single-entry batch holding the pooled features.
pub fn origcl_loss(batch: &ContrastiveBatch, variant: OrigClVariant, logit_scale: &Tensor) -> Result<Tensor> {
    check_batch(batch)?;
    check_scale(logit_scale)?;
    if variant == OrigClVariant::Global && batch.visual.len() != 1 {
        return Err(Error::LengthMismatch(format!(
            "global contrastive loss takes one pooled entry, got {}",
            batch.visual.len()
        )));
    }
    let mut total = Tensor::new(0.0f64, &device())?;
    for n in 0..batch.visual.len() {
        let m = similarity_matrix(&batch.visual[n], &batch.text[n])?;
        let lm = identity_label_matrix(m.dim(0)?);
        total = (total + contrastive_term(&m, &lm, logit_scale)?)?;
    }
    Ok(total)
}

/// One-hot (B, N, 2) encoding of binary labels.
fn one_hot(labels: &[Vec<u8>]) -> Result<Tensor> {
    let b = labels.len();
    let n = labels.first().map_or(0, |r| r.len());
    let data: Vec<f64> = labels
        .iter()
        .flatten()
        .flat_map(|&y| if y == 1 { [0.0, 1.0] } else { [1.0, 0.0] })
        .collect();
    Ok(Tensor::from_vec(data, (b, n, 2), &device())?)
}

/// Σ_n CE(P_n, Y_n) averaged over the batch. `probs` is (B, N, 2).
pub fn multitask_loss(probs: &Tensor, labels: &[Vec<u8>]) -> Result<Tensor> {
    let b = labels.len();
    let picked = (one_hot(labels)? * probs)?.sum(2)?;
    Ok((picked.log()?.sum_all()?.neg()? / b as f64)?)
}

/// Same as [`multitask_loss`] computed from head logits.
pub fn multitask_loss_from_logits(logits: &Tensor, labels: &[Vec<u8>]) -> Result<Tensor> {
    let b = labels.len();
    Ok(((one_hot(labels)? * log_softmax(logits, 2)?)?.sum_all()?.neg()? / b as f64)?)
}

/// mt + alpha * contrastive + beta * gd.
pub fn total_loss(mt: &Tensor, contrastive: &Tensor, gd: &Tensor, alpha: f64, beta: f64) -> Result<Tensor> {
    Ok(((mt + (contrastive * alpha)?)? + (gd * beta)?)?)
}

/// Per AU, the (B, d_t) text rows matching each sample's label: the
/// positive prompt for label 1, the negative prompt otherwise.
pub fn matched_text(pos: &Tensor, neg: &Tensor, labels: &[Vec<u8>]) -> Result<Vec<Tensor>> {
    let n = pos.dim(0)?;
    (0..n)
        .map(|i| {
            let pair = Tensor::cat(&[pos.narrow(0, i, 1)?, neg.narrow(0, i, 1)?], 0)?;
            let ids: Vec<u32> = labels.iter().map(|row| if row[i] == 1 { 0 } else { 1 }).collect();
            Ok(pair.index_select(&Tensor::new(ids.as_slice(), &device())?, 0)?)
        })
        .collect()
}
