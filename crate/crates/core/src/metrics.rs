// SPDX-License-Identifier: Apache-2.0

//! Evaluation protocol for auto-vocabulary 3D detection.
//!
//! Two families of numbers are produced:
//!
//! * **Semantics** — each ground-truth box is matched one-to-one to the
//!   prediction with the highest IoU above the threshold. For matched pairs
//!   the cosine similarity of the ground-truth and predicted label embeddings
//!   is thresholded over a fixed grid; the trapezoidal area under the
//!   accuracy curve (AUC) is multiplied by the coverage (share of ground
//!   truths with at least one prediction above the IoU threshold), per split,
//!   and the two split scores are blended by the split proportions.
//! * **Localization** — every predicted label is mapped to its nearest
//!   ground-truth class in embedding space, after which per-class AP and
//!   recall are computed as in closed-vocabulary evaluation.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_slices, normalize_label, EmbeddingBank};
use crate::geometry::{iou3d, IouMode, OrientedBox3};

/// Similarity thresholds of the accuracy curve.
pub const SEMANTIC_THRESHOLDS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.25;
/// Base/novel proportions of ground-truth objects in the ScanNet validation set.
pub const SCANNET_ALPHAS: (f64, f64) = (0.405, 0.595);
/// Base/novel proportions of ground-truth objects in the SUNRGB-D validation set.
pub const SUNRGBD_ALPHAS: (f64, f64) = (0.710, 0.290);

const ALPHA_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("ground-truth label '{0}' is in neither the base nor the novel split")]
    UnknownSplitLabel(String),
    #[error("label '{0}' appears in both the base and the novel split")]
    OverlappingSplit(String),
    #[error("split weights must lie in [0, 1] and sum to 1, got ({0}, {1})")]
    InvalidAlphas(f64, f64),
    #[error("no embedding for label '{0}'")]
    MissingEmbedding(String),
    #[error("{0} box without a label")]
    MissingLabel(&'static str),
    #[error("prediction without a score in scene {scene}, box {index}; scores are required for ranking")]
    MissingScore { scene: usize, index: usize },
    #[error("predicted label '{0}' has no class assignment")]
    Unassigned(String),
    #[error("thresholds must be strictly increasing from 0 to 1")]
    InvalidThresholds,
    #[error("IoU threshold must lie in (0, 1), got {0}")]
    InvalidIouThreshold(f64),
    #[error("no ground-truth classes to assign to")]
    NoGroundTruthClasses,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Base,
    Novel,
}

/// Partition of ground-truth classes into base and novel, with the weights
/// used to blend their semantic scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SplitRecord", into = "SplitRecord")]
pub struct ClassSplit {
    base_labels: Vec<String>,
    novel_labels: Vec<String>,
    alpha_b: f64,
    alpha_n: f64,
}

#[derive(Serialize, Deserialize)]
struct SplitRecord {
    base_labels: Vec<String>,
    novel_labels: Vec<String>,
    alpha_b: f64,
    alpha_n: f64,
}

impl TryFrom<SplitRecord> for ClassSplit {
    type Error = MetricsError;

    fn try_from(r: SplitRecord) -> Result<Self, Self::Error> {
        ClassSplit::new(r.base_labels, r.novel_labels, r.alpha_b, r.alpha_n)
    }
}

impl From<ClassSplit> for SplitRecord {
    fn from(s: ClassSplit) -> Self {
        SplitRecord {
            base_labels: s.base_labels,
            novel_labels: s.novel_labels,
            alpha_b: s.alpha_b,
            alpha_n: s.alpha_n,
        }
    }
}

impl ClassSplit {
    /// Labels are normalized and deduplicated (first occurrence kept).
    /// `alpha_n` is stored as `1 − alpha_b` once the pair is validated, so the
    /// weights sum to exactly one.
    pub fn new(
        base_labels: Vec<String>,
        novel_labels: Vec<String>,
        alpha_b: f64,
        alpha_n: f64,
    ) -> Result<Self, MetricsError> {
        if !(0.0..=1.0).contains(&alpha_b)
            || !(0.0..=1.0).contains(&alpha_n)
            || (alpha_b + alpha_n - 1.0).abs() > ALPHA_SUM_TOLERANCE
        {
            return Err(MetricsError::InvalidAlphas(alpha_b, alpha_n));
        }
        let dedup = |labels: Vec<String>| {
            let mut seen = HashSet::new();
            labels
                .into_iter()
                .map(|l| normalize_label(&l))
                .filter(|l| seen.insert(l.clone()))
                .collect::<Vec<_>>()
        };
        let base_labels = dedup(base_labels);
        let novel_labels = dedup(novel_labels);
        let base_set: HashSet<&String> = base_labels.iter().collect();
        if let Some(l) = novel_labels.iter().find(|l| base_set.contains(l)) {
            return Err(MetricsError::OverlappingSplit(l.clone()));
        }
        Ok(Self {
            base_labels,
            novel_labels,
            alpha_b,
            alpha_n: 1.0 - alpha_b,
        })
    }

    pub fn scannet(base: Vec<String>, novel: Vec<String>) -> Result<Self, MetricsError> {
        Self::new(base, novel, SCANNET_ALPHAS.0, SCANNET_ALPHAS.1)
    }

    pub fn sunrgbd(base: Vec<String>, novel: Vec<String>) -> Result<Self, MetricsError> {
        Self::new(base, novel, SUNRGBD_ALPHAS.0, SUNRGBD_ALPHAS.1)
    }

    pub fn base_labels(&self) -> &[String] {
        &self.base_labels
    }

    pub fn novel_labels(&self) -> &[String] {
        &self.novel_labels
    }

    pub fn alpha_b(&self) -> f64 {
        self.alpha_b
    }

    pub fn alpha_n(&self) -> f64 {
        self.alpha_n
    }

    pub fn split_of(&self, label: &str) -> Option<SplitKind> {
        let key = normalize_label(label);
        if self.base_labels.contains(&key) {
            Some(SplitKind::Base)
        } else if self.novel_labels.contains(&key) {
            Some(SplitKind::Novel)
        } else {
            None
        }
    }

    /// All classes, base first, each in file order.
    pub fn classes(&self) -> impl Iterator<Item = &String> {
        self.base_labels.iter().chain(self.novel_labels.iter())
    }

    fn require(&self, label: &str) -> Result<SplitKind, MetricsError> {
        self.split_of(label)
            .ok_or_else(|| MetricsError::UnknownSplitLabel(normalize_label(label)))
    }
}

fn gt_label(b: &OrientedBox3) -> Result<&str, MetricsError> {
    b.label().ok_or(MetricsError::MissingLabel("ground-truth"))
}

fn check_iou_threshold(t: f64) -> Result<(), MetricsError> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(MetricsError::InvalidIouThreshold(t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxMatch {
    pub pred: usize,
    pub iou: f64,
}

/// One-to-one assignment between ground truths and predictions.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MatchResult {
    pub gt_matches: Vec<Option<BoxMatch>>,
    pub pred_consumed: Vec<bool>,
}

impl MatchResult {
    pub fn matched_count(&self) -> usize {
        self.gt_matches.iter().filter(|m| m.is_some()).count()
    }
}

/// Greedy matching: all pairs with IoU strictly above `iou_threshold`,
/// taken in descending IoU order (ties by ground-truth then prediction index),
/// skipping pairs whose ground truth or prediction is already used.
pub fn match_boxes(
    gt: &[OrientedBox3],
    pred: &[OrientedBox3],
    iou_threshold: f64,
    mode: IouMode,
) -> MatchResult {
    let mut candidates = Vec::new();
    for (g, gb) in gt.iter().enumerate() {
        for (p, pb) in pred.iter().enumerate() {
            let iou = iou3d(gb, pb, mode);
            if iou > iou_threshold {
                candidates.push((iou, g, p));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut result = MatchResult {
        gt_matches: vec![None; gt.len()],
        pred_consumed: vec![false; pred.len()],
    };
    for (iou, g, p) in candidates {
        if result.gt_matches[g].is_none() && !result.pred_consumed[p] {
            result.gt_matches[g] = Some(BoxMatch { pred: p, iou });
            result.pred_consumed[p] = true;
        }
    }
    result
}

/// Per-split counts of ground truths and of those with a prediction above the
/// IoU threshold. Merging is associative and commutative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CoverageCounts {
    pub covered_b: usize,
    pub total_b: usize,
    pub covered_n: usize,
    pub total_n: usize,
}

impl CoverageCounts {
    pub fn merge(&mut self, other: &CoverageCounts) {
        self.covered_b += other.covered_b;
        self.total_b += other.total_b;
        self.covered_n += other.covered_n;
        self.total_n += other.total_n;
    }

    pub fn cov_b(&self) -> f64 {
        ratio(self.covered_b, self.total_b)
    }

    pub fn cov_n(&self) -> f64 {
        ratio(self.covered_n, self.total_n)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn coverage_counts(
    gt: &[OrientedBox3],
    pred: &[OrientedBox3],
    split: &ClassSplit,
    iou_threshold: f64,
    mode: IouMode,
) -> Result<CoverageCounts, MetricsError> {
    let mut counts = CoverageCounts::default();
    for g in gt {
        let kind = split.require(gt_label(g)?)?;
        let covered = pred.iter().any(|p| iou3d(g, p, mode) > iou_threshold);
        let (covered_slot, total_slot) = match kind {
            SplitKind::Base => (&mut counts.covered_b, &mut counts.total_b),
            SplitKind::Novel => (&mut counts.covered_n, &mut counts.total_n),
        };
        *total_slot += 1;
        if covered {
            *covered_slot += 1;
        }
    }
    Ok(counts)
}

/// `(cov_b, cov_n)`; a split without ground truths reports 0.
pub fn coverage(
    gt: &[OrientedBox3],
    pred: &[OrientedBox3],
    split: &ClassSplit,
    iou_threshold: f64,
    mode: IouMode,
) -> Result<(f64, f64), MetricsError> {
    let c = coverage_counts(gt, pred, split, iou_threshold, mode)?;
    Ok((c.cov_b(), c.cov_n()))
}

pub fn validate_thresholds(thresholds: &[f64]) -> Result<(), MetricsError> {
    let ok = thresholds.len() >= 2
        && thresholds[0] == 0.0
        && *thresholds.last().unwrap() == 1.0
        && thresholds.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(MetricsError::InvalidThresholds)
    }
}

/// Fraction of similarities above each threshold. The comparison is strict,
/// except at a threshold of exactly 1.0 where `≥` lets identical labels count.
pub fn accuracy_curve(similarities: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| {
            let hits = similarities
                .iter()
                .filter(|&&s| if t >= 1.0 { s >= t } else { s > t })
                .count();
            ratio(hits, similarities.len())
        })
        .collect()
}

/// Trapezoidal area under `curve`, divided by the threshold span.
pub fn trapezoid_auc(thresholds: &[f64], curve: &[f64]) -> f64 {
    let mut area = 0.0;
    let mut span = 0.0;
    for k in 1..thresholds.len().min(curve.len()) {
        let w = thresholds[k] - thresholds[k - 1];
        area += w * (curve[k - 1] + curve[k]) / 2.0;
        span += w;
    }
    if span > 0.0 {
        area / span
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AucCurve {
    pub thresholds: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub auc: f64,
    pub pairs: usize,
    /// Set when the split had no matched pairs (AUC reported as 0).
    pub empty: bool,
}

impl AucCurve {
    pub fn from_similarities(similarities: &[f64], thresholds: &[f64]) -> Self {
        let accuracy = accuracy_curve(similarities, thresholds);
        let empty = similarities.is_empty();
        let auc = if empty {
            0.0
        } else {
            trapezoid_auc(thresholds, &accuracy)
        };
        Self {
            thresholds: thresholds.to_vec(),
            accuracy,
            auc,
            pairs: similarities.len(),
            empty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitAuc {
    pub base: AucCurve,
    pub novel: AucCurve,
}

fn embedding_of<'a>(bank: &'a EmbeddingBank, label: &str) -> Result<&'a [f32], MetricsError> {
    bank.embedding_for(label)
        .map(|e| e.values())
        .ok_or_else(|| MetricsError::MissingEmbedding(normalize_label(label)))
}

/// Label similarities of the matched pairs of one scene, per split.
pub fn matched_similarities(
    matches: &MatchResult,
    gt: &[OrientedBox3],
    pred: &[OrientedBox3],
    embeddings: &EmbeddingBank,
    split: &ClassSplit,
) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    let mut base = Vec::new();
    let mut novel = Vec::new();
    for (g, m) in gt.iter().zip(&matches.gt_matches) {
        let Some(m) = m else { continue };
        let gl = gt_label(g)?;
        let kind = split.require(gl)?;
        let pl = pred[m.pred]
            .label()
            .ok_or(MetricsError::MissingLabel("predicted"))?;
        let sim = cosine_slices(embedding_of(embeddings, gl)?, embedding_of(embeddings, pl)?);
        match kind {
            SplitKind::Base => base.push(sim),
            SplitKind::Novel => novel.push(sim),
        }
    }
    Ok((base, novel))
}

/// Semantic AUC per split for the matched pairs of one scene.
pub fn semantic_auc(
    matches: &MatchResult,
    gt: &[OrientedBox3],
    pred: &[OrientedBox3],
    embeddings: &EmbeddingBank,
    split: &ClassSplit,
    thresholds: &[f64],
) -> Result<SplitAuc, MetricsError> {
    validate_thresholds(thresholds)?;
    let (base, novel) = matched_similarities(matches, gt, pred, embeddings, split)?;
    Ok(SplitAuc {
        base: AucCurve::from_similarities(&base, thresholds),
        novel: AucCurve::from_similarities(&novel, thresholds),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticScores {
    #[serde(rename = "AUC_b")]
    pub auc_b: f64,
    #[serde(rename = "Cov_b")]
    pub cov_b: f64,
    #[serde(rename = "AUC_n")]
    pub auc_n: f64,
    #[serde(rename = "Cov_n")]
    pub cov_n: f64,
    #[serde(rename = "SS_b")]
    pub ss_b: f64,
    #[serde(rename = "SS_n")]
    pub ss_n: f64,
    #[serde(rename = "SS")]
    pub ss: f64,
    pub alpha_b: f64,
    pub alpha_n: f64,
}

pub fn semantic_score(
    auc_b: f64,
    cov_b: f64,
    auc_n: f64,
    cov_n: f64,
    split: &ClassSplit,
) -> SemanticScores {
    let ss_b = auc_b * cov_b;
    let ss_n = auc_n * cov_n;
    SemanticScores {
        auc_b,
        cov_b,
        auc_n,
        cov_n,
        ss_b,
        ss_n,
        ss: split.alpha_b * ss_b + split.alpha_n * ss_n,
        alpha_b: split.alpha_b,
        alpha_n: split.alpha_n,
    }
}

/// Box tallies behind a semantic report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SemanticCounts {
    pub gt_b: usize,
    pub gt_n: usize,
    pub matched_b: usize,
    pub matched_n: usize,
    pub unmatched_b: usize,
    pub unmatched_n: usize,
    /// Ground truths with at least one prediction above the IoU threshold;
    /// can exceed the matched count because coverage is not one-to-one.
    pub covered_b: usize,
    pub covered_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemanticReport {
    #[serde(flatten)]
    pub scores: SemanticScores,
    pub curves: SplitAuc,
    pub counts: SemanticCounts,
}

/// Mapping from each predicted label (normalized) to a ground-truth class.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassAssignment(pub BTreeMap<String, String>);

impl ClassAssignment {
    pub fn get(&self, pred_label: &str) -> Option<&str> {
        self.0.get(&normalize_label(pred_label)).map(String::as_str)
    }
}

/// Maps each distinct predicted label to the ground-truth class with the
/// highest embedding cosine; ties go to the earliest class in `gt_classes`.
pub fn assign_predicted_classes<S: AsRef<str>>(
    pred_labels: &[S],
    gt_classes: &[String],
    embeddings: &EmbeddingBank,
) -> Result<ClassAssignment, MetricsError> {
    if gt_classes.is_empty() {
        return Err(MetricsError::NoGroundTruthClasses);
    }
    let gt_vecs = gt_classes
        .iter()
        .map(|c| embedding_of(embeddings, c))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = BTreeMap::new();
    for label in pred_labels {
        let key = normalize_label(label.as_ref());
        if out.contains_key(&key) {
            continue;
        }
        let v = embedding_of(embeddings, &key)?;
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (i, g) in gt_vecs.iter().enumerate() {
            let s = cosine_slices(v, g);
            if s > best_sim {
                best = i;
                best_sim = s;
            }
        }
        out.insert(key, normalize_label(&gt_classes[best]));
    }
    Ok(ClassAssignment(out))
}

/// Ground truth and predictions of one scene.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneBoxes {
    pub gt: Vec<OrientedBox3>,
    pub pred: Vec<OrientedBox3>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Area under the monotone precision envelope at every recall step.
    #[default]
    AllPoint,
    /// Mean envelope precision at recall 0, 0.1, …, 1.0.
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassDetection {
    pub ap: f64,
    pub recall: f64,
    pub num_gt: usize,
    pub num_pred: usize,
    pub true_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionReport {
    pub per_class: BTreeMap<String, ClassDetection>,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mAP_b")]
    pub map_b: f64,
    #[serde(rename = "mAP_n")]
    pub map_n: f64,
    #[serde(rename = "Rec")]
    pub rec: f64,
    #[serde(rename = "Rec_b")]
    pub rec_b: f64,
    #[serde(rename = "Rec_n")]
    pub rec_n: f64,
}

/// AP from a ranked TP/FP sequence against `num_gt` positives.
pub fn average_precision(tp_flags: &[bool], num_gt: usize, interp: ApInterpolation) -> f64 {
    if num_gt == 0 || tp_flags.is_empty() {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &hit) in tp_flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // Monotone envelope from the right.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    match interp {
        ApInterpolation::AllPoint => {
            // Each true positive raises recall by exactly 1/num_gt.
            let sum: f64 = tp_flags
                .iter()
                .zip(&precision)
                .filter(|(&hit, _)| hit)
                .map(|(_, &p)| p)
                .sum();
            sum / num_gt as f64
        }
        ApInterpolation::ElevenPoint => {
            let mut total = 0.0;
            for step in 0..=10 {
                let t = step as f64 / 10.0;
                let p = recall
                    .iter()
                    .zip(&precision)
                    .filter(|(&r, _)| r >= t - 1e-12)
                    .map(|(_, &p)| p)
                    .fold(0.0, f64::max);
                total += p;
            }
            total / 11.0
        }
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Per-class AP and recall after mapping predictions through `assignment`.
///
/// For each ground-truth class, the class's predictions from all scenes are
/// ranked by score (ties by scene, then box index); each is a true positive
/// if some not-yet-claimed ground truth of that class in its scene overlaps it
/// above the threshold (the best such one is claimed). Means run over classes
/// with at least one ground-truth instance.
pub fn detection_metrics(
    scenes: &[SceneBoxes],
    split: &ClassSplit,
    iou_threshold: f64,
    mode: IouMode,
    assignment: &ClassAssignment,
    interp: ApInterpolation,
) -> Result<DetectionReport, MetricsError> {
    check_iou_threshold(iou_threshold)?;
    // class -> number of GTs
    let mut num_gt: BTreeMap<String, usize> = BTreeMap::new();
    for s in scenes {
        for g in &s.gt {
            let l = normalize_label(gt_label(g)?);
            split.require(&l)?;
            *num_gt.entry(l).or_default() += 1;
        }
    }
    // class -> [(score, scene, index)]
    let mut ranked: BTreeMap<String, Vec<(f64, usize, usize)>> = BTreeMap::new();
    for (si, s) in scenes.iter().enumerate() {
        for (pi, p) in s.pred.iter().enumerate() {
            let score = p.score().ok_or(MetricsError::MissingScore {
                scene: si,
                index: pi,
            })?;
            let label = p.label().ok_or(MetricsError::MissingLabel("predicted"))?;
            let class = assignment
                .get(label)
                .ok_or_else(|| MetricsError::Unassigned(normalize_label(label)))?;
            ranked
                .entry(class.to_string())
                .or_default()
                .push((score, si, pi));
        }
    }

    let mut per_class = BTreeMap::new();
    for (class, &n_gt) in &num_gt {
        let mut preds = ranked.remove(class).unwrap_or_default();
        preds.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut claimed: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gt.len()]).collect();
        let mut flags = Vec::with_capacity(preds.len());
        for &(_, si, pi) in &preds {
            let scene = &scenes[si];
            let p = &scene.pred[pi];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in scene.gt.iter().enumerate() {
                if claimed[si][gi] || normalize_label(gt_label(g)?) != *class {
                    continue;
                }
                let iou = iou3d(g, p, mode);
                if iou > iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, _)) = best {
                claimed[si][gi] = true;
                flags.push(true);
            } else {
                flags.push(false);
            }
        }
        let tp = flags.iter().filter(|&&f| f).count();
        per_class.insert(
            class.clone(),
            ClassDetection {
                ap: average_precision(&flags, n_gt, interp),
                recall: ratio(tp, n_gt),
                num_gt: n_gt,
                num_pred: preds.len(),
                true_positives: tp,
            },
        );
    }

    let collect = |kind: Option<SplitKind>, f: fn(&ClassDetection) -> f64| {
        let vals: Vec<f64> = per_class
            .iter()
            .filter(|(c, _)| kind.is_none_or(|k| split.split_of(c) == Some(k)))
            .map(|(_, d)| f(d))
            .collect();
        mean(&vals)
    };
    Ok(DetectionReport {
        map: collect(None, |d| d.ap),
        map_b: collect(Some(SplitKind::Base), |d| d.ap),
        map_n: collect(Some(SplitKind::Novel), |d| d.ap),
        rec: collect(None, |d| d.recall),
        rec_b: collect(Some(SplitKind::Base), |d| d.recall),
        rec_n: collect(Some(SplitKind::Novel), |d| d.recall),
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub mode: IouMode,
    pub thresholds: Vec<f64>,
    pub interpolation: ApInterpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            mode: IouMode::AxisAligned,
            thresholds: SEMANTIC_THRESHOLDS.to_vec(),
            interpolation: ApInterpolation::AllPoint,
        }
    }
}

/// Semantic tallies of one or more scenes. Merging concatenates similarity
/// lists and adds counts; the finished report depends only on the multiset
/// of similarities, so scene order does not matter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SemanticTally {
    pub similarities_b: Vec<f64>,
    pub similarities_n: Vec<f64>,
    pub coverage: CoverageCounts,
}

impl SemanticTally {
    pub fn merge(&mut self, other: SemanticTally) {
        self.similarities_b.extend(other.similarities_b);
        self.similarities_n.extend(other.similarities_n);
        self.coverage.merge(&other.coverage);
    }

    pub fn finish(&self, split: &ClassSplit, thresholds: &[f64]) -> SemanticReport {
        let base = AucCurve::from_similarities(&self.similarities_b, thresholds);
        let novel = AucCurve::from_similarities(&self.similarities_n, thresholds);
        let c = &self.coverage;
        let scores = semantic_score(base.auc, c.cov_b(), novel.auc, c.cov_n(), split);
        let counts = SemanticCounts {
            gt_b: c.total_b,
            gt_n: c.total_n,
            matched_b: base.pairs,
            matched_n: novel.pairs,
            unmatched_b: c.total_b - base.pairs,
            unmatched_n: c.total_n - novel.pairs,
            covered_b: c.covered_b,
            covered_n: c.covered_n,
        };
        SemanticReport {
            scores,
            curves: SplitAuc { base, novel },
            counts,
        }
    }
}

pub fn scene_semantic_tally(
    scene: &SceneBoxes,
    split: &ClassSplit,
    embeddings: &EmbeddingBank,
    config: &EvalConfig,
) -> Result<SemanticTally, MetricsError> {
    let matches = match_boxes(&scene.gt, &scene.pred, config.iou_threshold, config.mode);
    let (similarities_b, similarities_n) =
        matched_similarities(&matches, &scene.gt, &scene.pred, embeddings, split)?;
    let coverage = coverage_counts(&scene.gt, &scene.pred, split, config.iou_threshold, config.mode)?;
    Ok(SemanticTally {
        similarities_b,
        similarities_n,
        coverage,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    #[serde(flatten)]
    pub detection: DetectionReport,
    #[serde(flatten)]
    pub semantic: SemanticReport,
    pub assignment: ClassAssignment,
    pub iou_threshold: f64,
    pub iou_mode: IouMode,
}

/// Runs the full protocol over a set of scenes.
pub fn evaluate(
    scenes: &[SceneBoxes],
    split: &ClassSplit,
    embeddings: &EmbeddingBank,
    config: &EvalConfig,
) -> Result<EvaluationReport, MetricsError> {
    check_iou_threshold(config.iou_threshold)?;
    validate_thresholds(&config.thresholds)?;
    let mut tally = SemanticTally::default();
    for s in scenes {
        tally.merge(scene_semantic_tally(s, split, embeddings, config)?);
    }
    finish_evaluation(scenes, split, embeddings, config, &tally)
}

/// Completes an evaluation from a pre-merged semantic tally (for callers that
/// compute per-scene tallies in parallel).
pub fn finish_evaluation(
    scenes: &[SceneBoxes],
    split: &ClassSplit,
    embeddings: &EmbeddingBank,
    config: &EvalConfig,
    tally: &SemanticTally,
) -> Result<EvaluationReport, MetricsError> {
    let pred_labels = scenes
        .iter()
        .flat_map(|s| s.pred.iter())
        .map(|p| p.label().ok_or(MetricsError::MissingLabel("predicted")))
        .collect::<Result<Vec<_>, _>>()?;
    let classes: Vec<String> = split.classes().cloned().collect();
    let assignment = assign_predicted_classes(&pred_labels, &classes, embeddings)?;
    let detection = detection_metrics(
        scenes,
        split,
        config.iou_threshold,
        config.mode,
        &assignment,
        config.interpolation,
    )?;
    Ok(EvaluationReport {
        detection,
        semantic: tally.finish(split, &config.thresholds),
        assignment,
        iou_threshold: config.iou_threshold,
        iou_mode: config.mode,
    })
}
