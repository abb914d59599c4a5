// SPDX-License-Identifier: Apache-2.0

//! Feature-space semantics expansion: rejection sampling of unlabeled
//! prototypes around an existing vocabulary bank.
//!
//! Each attempt draws, in this order from one [`SampleStream`]:
//!
//! 1. a reference index `r` uniformly over the base bank;
//! 2. `D` standard normal components of a direction `d`, then normalizes it;
//! 3. a step `λ` uniform on (0, 1).
//!
//! The candidate `e = normalize(r + λ·d)` (rounded to `f32`, the storage
//! precision) is accepted iff `cos(r, e) > θ_min` and its maximum cosine
//! against the base bank and every previously accepted prototype is
//! `< θ_max`.

use serde::Serialize;
use thiserror::Error;

use crate::embedding::{
    cosine_slices, pairwise_similarity_stats, union_banks, Embedding, EmbeddingBank,
    EmbeddingError, Provenance, SimilarityStats,
};
use crate::rng::SampleStream;

pub const DEFAULT_K_FRACTION: f64 = 0.30;
pub const DEFAULT_THETA_MIN: f64 = 0.7;
pub const DEFAULT_THETA_MAX: f64 = 0.8;
pub const DEFAULT_MAX_ATTEMPTS: u64 = 1_000_000;

/// How many prototypes to generate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleCount {
    /// `floor(fraction · |base|)`.
    Fraction(f64),
    Absolute(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FsseConfig {
    pub count: SampleCount,
    pub theta_min: f64,
    pub theta_max: f64,
    pub seed: u64,
    pub max_attempts: u64,
}

impl Default for FsseConfig {
    fn default() -> Self {
        Self {
            count: SampleCount::Fraction(DEFAULT_K_FRACTION),
            theta_min: DEFAULT_THETA_MIN,
            theta_max: DEFAULT_THETA_MAX,
            seed: 0,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }
}

impl FsseConfig {
    pub fn validate(&self) -> Result<(), FsseError> {
        let bad = |m: String| Err(FsseError::InvalidConfig(m));
        match self.count {
            SampleCount::Fraction(f) if !(f.is_finite() && f > 0.0) => {
                return bad(format!("k fraction must be positive, got {f}"))
            }
            SampleCount::Absolute(0) => return bad("k must be a positive integer".into()),
            _ => {}
        }
        if !(self.theta_min > 0.0 && self.theta_min < 1.0) {
            return bad(format!("theta_min must lie in (0, 1), got {}", self.theta_min));
        }
        if !(self.theta_max > self.theta_min && self.theta_max <= 1.0) {
            return bad(format!(
                "theta_max must lie in (theta_min, 1], got {} with theta_min {}",
                self.theta_max, self.theta_min
            ));
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        Ok(())
    }

    /// Number of prototypes requested for a base bank of `base_len` entries.
    pub fn target_count(&self, base_len: usize) -> usize {
        match self.count {
            // The epsilon absorbs representation error such as 0.29 * 100 = 28.999…
            SampleCount::Fraction(f) => (f * base_len as f64 + 1e-9).floor() as usize,
            SampleCount::Absolute(k) => k,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RejectionCounts {
    pub below_theta_min: u64,
    pub above_theta_max: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FsseOutcome {
    /// Accepted prototypes in acceptance order, all with provenance `Expanded`.
    pub expanded: EmbeddingBank,
    pub attempts_used: u64,
    pub rejections: RejectionCounts,
    /// Base index of the reference vector behind each accepted prototype.
    pub references: Vec<usize>,
}

#[derive(Debug, Error)]
pub enum FsseError {
    #[error("invalid expansion config: {0}")]
    InvalidConfig(String),
    #[error("base bank is empty")]
    EmptyBase,
    #[error(
        "accepted {accepted} of {target} prototypes after {} attempts; thresholds look infeasible for this bank",
        partial.attempts_used
    )]
    Exhausted {
        target: usize,
        accepted: usize,
        partial: Box<FsseOutcome>,
    },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

pub fn fsse_expand(base: &EmbeddingBank, config: &FsseConfig) -> Result<FsseOutcome, FsseError> {
    config.validate()?;
    if base.is_empty() {
        return Err(FsseError::EmptyBase);
    }
    let dim = base.dim();
    let target = config.target_count(base.len());
    let mut stream = SampleStream::new(config.seed);
    let mut outcome = FsseOutcome {
        expanded: EmbeddingBank::new(dim)?,
        attempts_used: 0,
        rejections: RejectionCounts::default(),
        references: Vec::with_capacity(target),
    };

    while outcome.expanded.len() < target {
        if outcome.attempts_used >= config.max_attempts {
            return Err(FsseError::Exhausted {
                target,
                accepted: outcome.expanded.len(),
                partial: Box::new(outcome),
            });
        }
        outcome.attempts_used += 1;

        let r_idx = stream.index(base.len());
        let direction = stream.normal_vector(dim);
        let lambda = stream.open01();

        let d_norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(d_norm > 0.0) {
            outcome.rejections.below_theta_min += 1;
            continue;
        }
        let reference = base.entries()[r_idx].embedding.values();
        let raw: Vec<f64> = reference
            .iter()
            .zip(&direction)
            .map(|(&r, &d)| r as f64 + lambda * d / d_norm)
            .collect();
        let candidate = match Embedding::normalized(&raw) {
            Ok(e) => e,
            Err(EmbeddingError::ZeroVector) => {
                outcome.rejections.below_theta_min += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };

        let s_ref = cosine_slices(reference, candidate.values());
        if !(s_ref > config.theta_min) {
            outcome.rejections.below_theta_min += 1;
            continue;
        }
        let too_close = base
            .embeddings()
            .chain(outcome.expanded.embeddings())
            .any(|f| cosine_slices(f.values(), candidate.values()) >= config.theta_max);
        if too_close {
            outcome.rejections.above_theta_max += 1;
            continue;
        }
        outcome.expanded.push(None, candidate, Provenance::Expanded)?;
        outcome.references.push(r_idx);
    }
    Ok(outcome)
}

/// A sample that fails the acceptance rule when replayed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditViolation {
    pub sample: usize,
    pub reference_similarity: f64,
    pub max_similarity: f64,
}

/// Re-checks every accepted prototype against its logged reference and
/// against the base bank plus the prototypes accepted before it.
pub fn audit_outcome(
    base: &EmbeddingBank,
    outcome: &FsseOutcome,
    theta_min: f64,
    theta_max: f64,
) -> Vec<AuditViolation> {
    let expanded = outcome.expanded.entries();
    let mut violations = Vec::new();
    for (i, (entry, &r)) in expanded.iter().zip(&outcome.references).enumerate() {
        let e = entry.embedding.values();
        let reference_similarity = base
            .get(r)
            .map(|b| cosine_slices(b.embedding.values(), e))
            .unwrap_or(f64::NAN);
        let max_similarity = base
            .embeddings()
            .chain(expanded[..i].iter().map(|x| &x.embedding))
            .map(|f| cosine_slices(f.values(), e))
            .fold(f64::NEG_INFINITY, f64::max);
        if !(reference_similarity > theta_min && max_similarity < theta_max) {
            violations.push(AuditViolation {
                sample: i,
                reference_similarity,
                max_similarity,
            });
        }
    }
    if outcome.references.len() != expanded.len() {
        violations.push(AuditViolation {
            sample: outcome.references.len().min(expanded.len()),
            reference_similarity: f64::NAN,
            max_similarity: f64::NAN,
        });
    }
    violations
}

/// Pairwise-similarity statistics of a bank before and after expansion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FsseStatsReport {
    pub before: SimilarityStats,
    pub after: SimilarityStats,
    pub base_count: usize,
    pub expanded_count: usize,
    /// `100 · (after − before) / before`; `None` when undefined (zero baseline).
    pub mean_change_pct: Option<f64>,
    pub std_change_pct: Option<f64>,
}

fn relative_change_pct(before: f64, after: f64) -> Option<f64> {
    if after == before {
        Some(0.0)
    } else if before == 0.0 {
        None
    } else {
        Some(100.0 * (after - before) / before.abs())
    }
}

pub fn fsse_stats_report(
    base: &EmbeddingBank,
    expanded: &EmbeddingBank,
) -> Result<FsseStatsReport, EmbeddingError> {
    let combined = union_banks(&[base, expanded])?.bank;
    let before = pairwise_similarity_stats(base)?;
    let after = pairwise_similarity_stats(&combined)?;
    Ok(FsseStatsReport {
        before,
        after,
        base_count: base.len(),
        expanded_count: expanded.len(),
        mean_change_pct: relative_change_pct(before.mean, after.mean),
        std_change_pct: relative_change_pct(before.std, after.std),
    })
}
