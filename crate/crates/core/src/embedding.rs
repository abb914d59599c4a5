// SPDX-License-Identifier: Apache-2.0

//! Vocabulary feature banks.
//!
//! An [`EmbeddingBank`] is an ordered list of unit vectors of one dimension,
//! each tagged with where it came from (annotated base classes, caption nouns,
//! pseudo-box labels, or sampled expansion prototypes). Labeled entries are
//! unique under [`normalize_label`]; expansion entries carry no label.

use std::collections::HashMap;
use std::fmt;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum deviation of a stored vector's norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("embedding dimension must be at least 2, got {0}")]
    DimTooSmall(usize),
    #[error("embedding has a non-finite component")]
    NonFinite,
    #[error("embedding norm {0} is not within 1e-6 of 1")]
    NotUnitNorm(f64),
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("duplicate label '{0}' in bank")]
    DuplicateLabel(String),
    #[error("{0:?} entries must carry a label")]
    MissingLabel(Provenance),
    #[error("expanded entries must not carry a label (got '{0}')")]
    UnexpectedLabel(String),
    #[error("label must not be empty")]
    EmptyLabel,
    #[error("need at least {needed} entries, bank has {got}")]
    TooFewEntries { needed: usize, got: usize },
    #[error("no banks to combine")]
    NoBanks,
}

/// Case-folds, trims, and collapses internal whitespace.
pub fn normalize_label(label: &str) -> String {
    label
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// A unit-norm feature vector. Components are stored in single precision,
/// matching the on-disk format; arithmetic is done in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbeddingError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = norm_f32(&values);
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(EmbeddingError::NotUnitNorm(norm));
        }
        Ok(Self(values))
    }

    /// Scales `values` to unit length and rounds to single precision.
    pub fn normalized(values: &[f64]) -> Result<Self, EmbeddingError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbeddingError::ZeroVector);
        }
        Self::new(values.iter().map(|v| (v / norm) as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }

    /// Dot product with a double-precision vector of the same dimension.
    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(&a, &b)| a as f64 * b).sum()
    }
}

fn norm_f32(values: &[f32]) -> f64 {
    values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Cosine similarity of raw component slices, clamped to [-1, 1]. Exactly 1
/// for identical nonzero inputs.
pub(crate) fn cosine_slices(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(cosine_slices(&a.0, &b.0))
}

/// Which vocabulary source an entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Base,
    Caption,
    Pseudo,
    Expanded,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Base => "base",
            Provenance::Caption => "caption",
            Provenance::Pseudo => "pseudo",
            Provenance::Expanded => "expanded",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub label: Option<String>,
    pub embedding: Embedding,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    dim: usize,
    entries: Vec<BankEntry>,
    index: HashMap<String, usize>,
}

impl EmbeddingBank {
    pub fn new(dim: usize) -> Result<Self, EmbeddingError> {
        if dim < 2 {
            return Err(EmbeddingError::DimTooSmall(dim));
        }
        Ok(Self {
            dim,
            entries: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn from_entries(dim: usize, entries: Vec<BankEntry>) -> Result<Self, EmbeddingError> {
        let mut bank = Self::new(dim)?;
        for e in entries {
            bank.push(e.label, e.embedding, e.provenance)?;
        }
        Ok(bank)
    }

    pub fn push(
        &mut self,
        label: Option<String>,
        embedding: Embedding,
        provenance: Provenance,
    ) -> Result<usize, EmbeddingError> {
        if embedding.dim() != self.dim {
            return Err(EmbeddingError::DimMismatch {
                expected: self.dim,
                got: embedding.dim(),
            });
        }
        match (&label, provenance) {
            (Some(l), Provenance::Expanded) => {
                return Err(EmbeddingError::UnexpectedLabel(l.clone()))
            }
            (None, Provenance::Expanded) => {}
            (None, p) => return Err(EmbeddingError::MissingLabel(p)),
            (Some(l), _) => {
                let key = normalize_label(l);
                if key.is_empty() {
                    return Err(EmbeddingError::EmptyLabel);
                }
                if self.index.contains_key(&key) {
                    return Err(EmbeddingError::DuplicateLabel(key));
                }
                self.index.insert(key, self.entries.len());
            }
        }
        self.entries.push(BankEntry {
            label,
            embedding,
            provenance,
        });
        Ok(self.entries.len() - 1)
    }

    /// Convenience for labeled entries.
    pub fn push_labeled(
        &mut self,
        label: impl Into<String>,
        embedding: Embedding,
        provenance: Provenance,
    ) -> Result<usize, EmbeddingError> {
        self.push(Some(label.into()), embedding, provenance)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> Option<&BankEntry> {
        self.entries.get(i)
    }

    pub fn embeddings(&self) -> impl Iterator<Item = &Embedding> {
        self.entries.iter().map(|e| &e.embedding)
    }

    /// Position of the entry whose label normalizes to the same key as `label`.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(&normalize_label(label)).copied()
    }

    pub fn embedding_for(&self, label: &str) -> Option<&Embedding> {
        self.index_of(label).map(|i| &self.entries[i].embedding)
    }

    pub fn count_by(&self, provenance: Provenance) -> usize {
        self.entries
            .iter()
            .filter(|e| e.provenance == provenance)
            .count()
    }

    /// The bank without expansion entries, plus the original index of each
    /// kept entry. Used for label reporting, where unlabeled prototypes would
    /// produce unreadable outputs.
    pub fn inference_view(&self) -> (EmbeddingBank, Vec<usize>) {
        let mut view = EmbeddingBank {
            dim: self.dim,
            entries: Vec::new(),
            index: HashMap::new(),
        };
        let mut origin = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.provenance == Provenance::Expanded {
                continue;
            }
            if let Some(l) = &e.label {
                view.index.insert(normalize_label(l), view.entries.len());
            }
            view.entries.push(e.clone());
            origin.push(i);
        }
        (view, origin)
    }
}

/// A label dropped during [`union_banks`] because an earlier bank had it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelCollision {
    pub label: String,
    pub kept_bank: usize,
    pub dropped_bank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankUnion {
    pub bank: EmbeddingBank,
    pub collisions: Vec<LabelCollision>,
}

/// Concatenates banks in order. A label seen earlier wins (with its vector
/// and provenance); expansion entries are always kept.
pub fn union_banks(banks: &[&EmbeddingBank]) -> Result<BankUnion, EmbeddingError> {
    let first = banks.first().ok_or(EmbeddingError::NoBanks)?;
    let dim = first.dim;
    let mut out = EmbeddingBank::new(dim)?;
    let mut owner: HashMap<String, usize> = HashMap::new();
    let mut collisions = Vec::new();
    for (b, bank) in banks.iter().enumerate() {
        if bank.dim != dim {
            return Err(EmbeddingError::DimMismatch {
                expected: dim,
                got: bank.dim,
            });
        }
        for e in &bank.entries {
            if let Some(label) = &e.label {
                let key = normalize_label(label);
                if let Some(&kept) = owner.get(&key) {
                    debug!("label collision on '{key}': keeping bank {kept}, dropping bank {b}");
                    collisions.push(LabelCollision {
                        label: key,
                        kept_bank: kept,
                        dropped_bank: b,
                    });
                    continue;
                }
                owner.insert(key, b);
            }
            out.push(e.label.clone(), e.embedding.clone(), e.provenance)?;
        }
    }
    Ok(BankUnion {
        bank: out,
        collisions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub pairs: u64,
}

/// All cosine similarities over unordered distinct pairs `(i, j)`, `i < j`,
/// in row-major order.
pub fn pairwise_similarities(bank: &EmbeddingBank) -> Vec<f64> {
    let n = bank.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let a = bank.entries[i].embedding.values();
            ((i + 1)..n)
                .map(|j| cosine_slices(a, bank.entries[j].embedding.values()))
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .concat()
}

pub fn pairwise_similarity_stats(bank: &EmbeddingBank) -> Result<SimilarityStats, EmbeddingError> {
    if bank.len() < 2 {
        return Err(EmbeddingError::TooFewEntries {
            needed: 2,
            got: bank.len(),
        });
    }
    let sims = pairwise_similarities(bank);
    let count = sims.len() as f64;
    let mean = sims.iter().sum::<f64>() / count;
    let var = sims.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / count;
    Ok(SimilarityStats {
        mean,
        std: var.sqrt(),
        pairs: sims.len() as u64,
    })
}
