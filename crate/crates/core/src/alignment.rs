// SPDX-License-Identifier: Apache-2.0

//! Semantic alignment head: softmax over a vocabulary bank, argmax labeling,
//! and the two semantic training losses with analytic gradients.

use serde::Serialize;
use thiserror::Error;

use crate::embedding::EmbeddingBank;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignmentError {
    #[error("vocabulary bank is empty")]
    EmptyBank,
    #[error("inference view of the bank has no labeled entries")]
    NoLabeledEntries,
    #[error("feature dimension {got} does not match bank dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("feature has a non-finite component")]
    NonFinite,
    #[error("batch sizes differ: {left} vs {right}")]
    CountMismatch { left: usize, right: usize },
    #[error("target index {index} out of range for a bank of {len}")]
    TargetOutOfRange { index: usize, len: usize },
    #[error("loss batch is empty")]
    EmptyBatch,
    #[error("loss weights must be non-negative and finite")]
    InvalidWeight,
}

/// A detected object's feature vector; not required to be unit length.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectFeature(pub Vec<f64>);

impl ObjectFeature {
    pub fn new(values: Vec<f64>) -> Result<Self, AlignmentError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AlignmentError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Weights of the semantic terms of the training objective, plus the softmax
/// temperature of the contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_c: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_d: 1.0,
            lambda_c: 1.0,
            tau: 1.0,
        }
    }
}

/// Localization loss weights inherited from the detection backbone. Stored
/// for reference only; the localization loss itself is supplied externally.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocalizationWeights {
    pub objectness: f64,
    pub center: f64,
    pub size: f64,
    pub angle: f64,
}

pub const LOCALIZATION_WEIGHTS: LocalizationWeights = LocalizationWeights {
    objectness: 1.0,
    center: 0.5,
    size: 1.0,
    angle: 0.1,
};

fn check_tau(tau: f64) -> Result<(), AlignmentError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(AlignmentError::InvalidTemperature(tau))
    }
}

fn check_dim(f: &ObjectFeature, bank: &EmbeddingBank) -> Result<(), AlignmentError> {
    if f.dim() != bank.dim() {
        return Err(AlignmentError::DimMismatch {
            expected: bank.dim(),
            got: f.dim(),
        });
    }
    Ok(())
}

/// Raw dot products `f · e_k / tau` against every bank entry.
fn logits(f: &ObjectFeature, bank: &EmbeddingBank, tau: f64) -> Vec<f64> {
    bank.embeddings().map(|e| e.dot(f.values()) / tau).collect()
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over `f · e_k / tau` for every bank entry `e_k`.
pub fn class_probabilities(
    f: &ObjectFeature,
    bank: &EmbeddingBank,
    tau: f64,
) -> Result<Vec<f64>, AlignmentError> {
    if bank.is_empty() {
        return Err(AlignmentError::EmptyBank);
    }
    check_tau(tau)?;
    check_dim(f, bank)?;
    let mut z = logits(f, bank, tau);
    softmax_in_place(&mut z);
    Ok(z)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelAssignment {
    /// Index into the full bank.
    pub index: usize,
    /// `None` only when an unlabeled expansion entry wins outside the inference view.
    pub label: Option<String>,
    pub probability: f64,
}

/// Labels `f` with the most probable bank entry at unit temperature. With
/// `inference_view`, expansion entries are removed before the softmax. Ties go
/// to the lowest index.
pub fn assign_label(
    f: &ObjectFeature,
    bank: &EmbeddingBank,
    inference_view: bool,
) -> Result<LabelAssignment, AlignmentError> {
    if bank.is_empty() {
        return Err(AlignmentError::EmptyBank);
    }
    let (view, origin);
    let (scored, map): (&EmbeddingBank, Option<&[usize]>) = if inference_view {
        (view, origin) = bank.inference_view();
        if view.is_empty() {
            return Err(AlignmentError::NoLabeledEntries);
        }
        (&view, Some(&origin))
    } else {
        (bank, None)
    };
    check_dim(f, scored)?;
    let z = logits(f, scored, 1.0);
    let mut best = 0;
    for (k, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = k;
        }
    }
    let mut p = z;
    softmax_in_place(&mut p);
    let index = map.map_or(best, |m| m[best]);
    Ok(LabelAssignment {
        index,
        label: bank.entries()[index].label.clone(),
        probability: p[best],
    })
}

/// Loss value with its gradient with respect to each 3D feature.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad {
    pub value: f64,
    pub grad: Vec<Vec<f64>>,
}

/// Mean L1 distance between paired 3D and 2D features.
pub fn distillation_loss(
    f3d: &[ObjectFeature],
    f2d: &[ObjectFeature],
) -> Result<LossWithGrad, AlignmentError> {
    if f3d.len() != f2d.len() {
        return Err(AlignmentError::CountMismatch {
            left: f3d.len(),
            right: f2d.len(),
        });
    }
    if f3d.is_empty() {
        return Err(AlignmentError::EmptyBatch);
    }
    let n = f3d.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(f3d.len());
    for (a, b) in f3d.iter().zip(f2d) {
        if a.dim() != b.dim() {
            return Err(AlignmentError::DimMismatch {
                expected: a.dim(),
                got: b.dim(),
            });
        }
        let mut g = Vec::with_capacity(a.dim());
        for (&x, &y) in a.values().iter().zip(b.values()) {
            let d = x - y;
            value += d.abs();
            // sign(0) = 0
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            g.push(s / n);
        }
        grad.push(g);
    }
    Ok(LossWithGrad {
        value: value / n,
        grad,
    })
}

/// Mean cross-entropy of the bank softmax at temperature `tau` against the
/// target bank indices.
pub fn contrastive_loss(
    f3d: &[ObjectFeature],
    targets: &[usize],
    bank: &EmbeddingBank,
    tau: f64,
) -> Result<LossWithGrad, AlignmentError> {
    if f3d.len() != targets.len() {
        return Err(AlignmentError::CountMismatch {
            left: f3d.len(),
            right: targets.len(),
        });
    }
    if f3d.is_empty() {
        return Err(AlignmentError::EmptyBatch);
    }
    if bank.is_empty() {
        return Err(AlignmentError::EmptyBank);
    }
    check_tau(tau)?;
    let vectors: Vec<Vec<f64>> = bank.embeddings().map(|e| e.to_f64()).collect();
    let n = f3d.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(f3d.len());
    for (f, &y) in f3d.iter().zip(targets) {
        if y >= bank.len() {
            return Err(AlignmentError::TargetOutOfRange {
                index: y,
                len: bank.len(),
            });
        }
        check_dim(f, bank)?;
        let mut z: Vec<f64> = vectors
            .iter()
            .map(|e| e.iter().zip(f.values()).map(|(a, b)| a * b).sum::<f64>() / tau)
            .collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        value += log_sum - z[y];
        softmax_in_place(&mut z);
        let scale = 1.0 / (n * tau);
        let mut g = vec![0.0; f.dim()];
        for (p, e) in z.iter().zip(&vectors) {
            for (gi, ei) in g.iter_mut().zip(e) {
                *gi += p * ei;
            }
        }
        for (gi, ti) in g.iter_mut().zip(&vectors[y]) {
            *gi = (*gi - ti) * scale;
        }
        grad.push(g);
    }
    Ok(LossWithGrad {
        value: value / n,
        grad,
    })
}

/// Inputs to the semantic part of the training objective.
#[derive(Debug, Clone, Copy)]
pub struct SemanticBatch<'a> {
    pub f3d: &'a [ObjectFeature],
    pub f2d: &'a [ObjectFeature],
    pub targets: &'a [usize],
    pub bank: &'a EmbeddingBank,
}

/// `l_loc + λ_d · L_d + λ_c · L_c`, with the localization term given as a constant.
pub fn combine_losses(l_loc: f64, l_d: f64, l_c: f64, weights: &LossWeights) -> f64 {
    l_loc + weights.lambda_d * l_d + weights.lambda_c * l_c
}

pub fn total_semantic_loss(
    batch: &SemanticBatch<'_>,
    weights: &LossWeights,
    l_loc: f64,
) -> Result<f64, AlignmentError> {
    if !(weights.lambda_d >= 0.0
        && weights.lambda_d.is_finite()
        && weights.lambda_c >= 0.0
        && weights.lambda_c.is_finite())
    {
        return Err(AlignmentError::InvalidWeight);
    }
    let l_d = distillation_loss(batch.f3d, batch.f2d)?.value;
    let l_c = contrastive_loss(batch.f3d, batch.targets, batch.bank, weights.tau)?.value;
    Ok(combine_losses(l_loc, l_d, l_c, weights))
}
