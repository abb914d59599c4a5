// SPDX-License-Identifier: Apache-2.0

//! Pseudo 3D boxes from 2D object masks.
//!
//! Each mask selects the cloud points that project onto it; the group is
//! optionally cleaned of outliers and an oriented box is fitted by PCA on the
//! x–y coordinates, with z handled as an independent interval.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::normalize_label;
use crate::geometry::{
    canonical_yaw, points_in_mask, CameraModel, GeometryError, Mask2D, OrientedBox3, Point3,
    PointCloud,
};

pub const DEFAULT_MIN_POINTS: usize = 10;
pub const DEFAULT_MIN_EXTENT: f64 = 0.02;
pub const DEFAULT_OUTLIER_K: f64 = 5.0;

const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PseudoBoxError {
    #[error("need at least {needed} points to fit a box, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("detection label must be nonempty")]
    EmptyLabel,
    #[error("detection mask has no set pixels")]
    EmptyMask,
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub min_points: usize,
    pub min_extent: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            min_points: DEFAULT_MIN_POINTS,
            min_extent: DEFAULT_MIN_EXTENT,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), PseudoBoxError> {
        if self.min_points == 0 {
            return Err(PseudoBoxError::InvalidConfig("min_points must be at least 1".into()));
        }
        if !(self.min_extent.is_finite() && self.min_extent > 0.0) {
            return Err(PseudoBoxError::InvalidConfig(format!(
                "min_extent must be positive, got {}",
                self.min_extent
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxFit {
    pub bbox: OrientedBox3,
    /// True when the x–y covariance was rank-deficient and an axis-aligned
    /// box was fitted instead.
    pub fallback: bool,
}

/// Fits a gravity-aligned box whose yaw follows the first principal
/// component of the x–y coordinates.
pub fn fit_oriented_box_pca(points: &[Point3], config: &FitConfig) -> Result<BoxFit, PseudoBoxError> {
    config.validate()?;
    if points.len() < config.min_points {
        return Err(PseudoBoxError::TooFewPoints {
            needed: config.min_points,
            got: points.len(),
        });
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(GeometryError::NonFinite("points").into());
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let my = points.iter().map(|p| p.y).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p.x - mx, p.y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    sxx /= n;
    syy /= n;
    sxy /= n;

    let half_tr = (sxx + syy) / 2.0;
    let disc = (((sxx - syy) / 2.0).powi(2) + sxy * sxy).sqrt();
    let (l_max, l_min) = (half_tr + disc, half_tr - disc);
    let fallback = l_max <= 0.0 || l_min <= RANK_TOLERANCE * l_max;
    let yaw = if fallback || disc <= RANK_TOLERANCE * l_max {
        0.0
    } else {
        canonical_yaw(0.5 * (2.0 * sxy).atan2(sxx - syy))
    };

    let (c, s) = (yaw.cos(), yaw.sin());
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        let local = [c * p.x + s * p.y, -s * p.x + c * p.y, p.z];
        for k in 0..3 {
            lo[k] = lo[k].min(local[k]);
            hi[k] = hi[k].max(local[k]);
        }
    }
    let mid: [f64; 3] = std::array::from_fn(|k| (lo[k] + hi[k]) / 2.0);
    let size: [f64; 3] = std::array::from_fn(|k| (hi[k] - lo[k]).max(config.min_extent));
    let center = Point3::new(c * mid[0] - s * mid[1], s * mid[0] + c * mid[1], mid[2]);
    let bbox = OrientedBox3::new(center, size, yaw)?;
    Ok(BoxFit { bbox, fallback })
}

/// Keeps points whose distance `d` to the group centroid satisfies
/// `|d − median(d)| ≤ k·MAD(d)`. When the MAD is zero every point is kept.
/// Returns the kept indices (into `points`) in their original order.
pub fn filter_outliers(points: &[Point3], k: f64) -> Vec<usize> {
    if points.is_empty() {
        return Vec::new();
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let cz = points.iter().map(|p| p.z).sum::<f64>() / n;
    let d: Vec<f64> = points
        .iter()
        .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2) + (p.z - cz).powi(2)).sqrt())
        .collect();
    let med = median(d.clone());
    let mad = median(d.iter().map(|x| (x - med).abs()).collect());
    if mad == 0.0 {
        return (0..points.len()).collect();
    }
    (0..points.len())
        .filter(|&i| (d[i] - med).abs() <= k * mad)
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// A 2D detection: a binary mask and its predicted class name.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoDetection {
    mask: Mask2D,
    label: String,
}

impl PseudoDetection {
    pub fn new(mask: Mask2D, label: impl Into<String>) -> Result<Self, PseudoBoxError> {
        let label = label.into();
        if label.trim().is_empty() {
            return Err(PseudoBoxError::EmptyLabel);
        }
        if mask.count_set() == 0 {
            return Err(PseudoBoxError::EmptyMask);
        }
        Ok(Self { mask, label })
    }

    /// Uses the mask's own label.
    pub fn from_mask(mask: Mask2D) -> Result<Self, PseudoBoxError> {
        let label = mask.label().to_string();
        Self::new(mask, label)
    }

    pub fn mask(&self) -> &Mask2D {
        &self.mask
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

/// Cloud indices selected by one detection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointGroup {
    pub indices: Vec<usize>,
    pub label: String,
}

impl PointGroup {
    pub fn points(&self, cloud: &PointCloud) -> Vec<Point3> {
        self.indices.iter().map(|&i| cloud.points[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoBoxConfig {
    pub fit: FitConfig,
    /// MAD multiplier of the outlier filter; `None` disables filtering.
    pub outlier_k: Option<f64>,
}

impl Default for PseudoBoxConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig::default(),
            outlier_k: Some(DEFAULT_OUTLIER_K),
        }
    }
}

impl PseudoBoxConfig {
    pub fn validate(&self) -> Result<(), PseudoBoxError> {
        self.fit.validate()?;
        if let Some(k) = self.outlier_k {
            if !(k.is_finite() && k > 0.0) {
                return Err(PseudoBoxError::InvalidConfig(format!(
                    "outlier_k must be positive, got {k}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedDetection {
    pub detection: usize,
    pub label: String,
    pub points: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PseudoDiagnostics {
    pub detections: usize,
    pub produced: usize,
    pub skipped_count: usize,
    pub fallback_count: usize,
    pub outliers_removed: usize,
    pub skipped: Vec<SkippedDetection>,
    pub fallbacks: Vec<usize>,
    pub warnings: Vec<String>,
}

impl PseudoDiagnostics {
    pub fn merge(&mut self, other: &PseudoDiagnostics) {
        self.detections += other.detections;
        self.produced += other.produced;
        self.skipped_count += other.skipped_count;
        self.fallback_count += other.fallback_count;
        self.outliers_removed += other.outliers_removed;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBoxes {
    pub boxes: Vec<OrientedBox3>,
    /// Index of the detection each box came from.
    pub sources: Vec<usize>,
    pub diagnostics: PseudoDiagnostics,
}

enum DetectionResult {
    Fitted { fit: BoxFit, removed: usize },
    Skipped { points: usize, reason: String },
}

fn process_detection(
    cloud: &PointCloud,
    cam: &CameraModel,
    det: &PseudoDetection,
    config: &PseudoBoxConfig,
) -> Result<DetectionResult, PseudoBoxError> {
    let group = PointGroup {
        indices: points_in_mask(cloud, cam, det.mask())?,
        label: det.label.clone(),
    };
    let mut pts = group.points(cloud);
    let mut removed = 0;
    if let Some(k) = config.outlier_k {
        let keep = filter_outliers(&pts, k);
        removed = pts.len() - keep.len();
        pts = keep.into_iter().map(|i| pts[i]).collect();
    }
    match fit_oriented_box_pca(&pts, &config.fit) {
        Ok(fit) => Ok(DetectionResult::Fitted { fit, removed }),
        Err(e @ PseudoBoxError::TooFewPoints { .. }) => Ok(DetectionResult::Skipped {
            points: pts.len(),
            reason: e.to_string(),
        }),
        Err(e) => Err(e),
    }
}

/// Fits one labeled box per usable detection, in detection order.
/// Detections with too few points are skipped and recorded in the
/// diagnostics; a mask whose size does not match the camera is an error.
pub fn generate_pseudo_boxes(
    cloud: &PointCloud,
    cam: &CameraModel,
    detections: &[PseudoDetection],
    config: &PseudoBoxConfig,
) -> Result<PseudoBoxes, PseudoBoxError> {
    config.validate()?;
    cloud.validate()?;
    for d in detections {
        d.mask().check_camera(cam)?;
    }
    let results = detections
        .par_iter()
        .map(|d| process_detection(cloud, cam, d, config))
        .collect::<Result<Vec<_>, _>>()?;

    let mut out = PseudoBoxes {
        boxes: Vec::new(),
        sources: Vec::new(),
        diagnostics: PseudoDiagnostics {
            detections: detections.len(),
            ..Default::default()
        },
    };
    for (i, (res, det)) in results.into_iter().zip(detections).enumerate() {
        match res {
            DetectionResult::Fitted { fit, removed } => {
                if fit.fallback {
                    out.diagnostics.fallback_count += 1;
                    out.diagnostics.fallbacks.push(i);
                }
                out.diagnostics.outliers_removed += removed;
                out.boxes.push(fit.bbox.with_label(det.label())?);
                out.sources.push(i);
            }
            DetectionResult::Skipped { points, reason } => {
                out.diagnostics.skipped.push(SkippedDetection {
                    detection: i,
                    label: det.label().to_string(),
                    points,
                    reason,
                });
            }
        }
    }
    out.diagnostics.produced = out.boxes.len();
    out.diagnostics.skipped_count = out.diagnostics.skipped.len();
    if out.boxes.is_empty() {
        let msg = format!("no pseudo boxes produced from {} detections", detections.len());
        log::warn!("{msg}");
        out.diagnostics.warnings.push(msg);
    }
    Ok(out)
}

/// Distinct labels after case folding and whitespace trimming.
pub fn collect_pseudo_vocabulary(boxes: &[OrientedBox3]) -> BTreeSet<String> {
    boxes
        .iter()
        .filter_map(|b| b.label())
        .map(normalize_label)
        .filter(|l| !l.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{iou3d, yaw_distance, IouMode};
    use crate::rng::SampleStream;

    fn fill_box(center: [f64; 3], size: [f64; 3], yaw: f64, n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = SampleStream::new(seed);
        (0..n)
            .map(|_| {
                let local = Point3::new(
                    rng.uniform(-0.5, 0.5) * size[0],
                    rng.uniform(-0.5, 0.5) * size[1],
                    rng.uniform(-0.5, 0.5) * size[2],
                );
                local.rotated_z(yaw).offset(center)
            })
            .collect()
    }

    #[test]
    fn axis_aligned_slab() {
        let pts = fill_box([1.0, 2.0, 0.5], [2.0, 1.0, 1.0], 0.0, 4000, 1);
        let fit = fit_oriented_box_pca(&pts, &FitConfig::default()).unwrap();
        assert!(!fit.fallback);
        let b = fit.bbox;
        assert!(yaw_distance(b.yaw(), 0.0) < 0.05);
        for (got, want) in b.size().iter().zip([2.0, 1.0, 1.0]) {
            assert!((got - want).abs() / want < 0.05, "{got} vs {want}");
        }
        let c = b.center();
        assert!((c.x - 1.0).abs() < 0.02 && (c.y - 2.0).abs() < 0.02 && (c.z - 0.5).abs() < 0.02);
    }

    #[test]
    fn rotated_slab() {
        let pts = fill_box([0.0, 0.0, 0.0], [2.0, 1.0, 1.0], 0.6, 4000, 2);
        let b = fit_oriented_box_pca(&pts, &FitConfig::default()).unwrap().bbox;
        assert!(yaw_distance(b.yaw(), 0.6) < 0.05);
        let truth = OrientedBox3::new(Point3::default(), [2.0, 1.0, 1.0], 0.6).unwrap();
        assert!(iou3d(&b, &truth, IouMode::Oriented) >= 0.9);
    }

    #[test]
    fn collinear_points_fall_back() {
        let pts = [Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 1.0, 0.0), Point3::new(2.0, 2.0, 0.0)];
        let cfg = FitConfig { min_points: 3, ..Default::default() };
        let fit = fit_oriented_box_pca(&pts, &cfg).unwrap();
        assert!(fit.fallback);
        assert_eq!(fit.bbox.yaw(), 0.0);
        assert_eq!(fit.bbox.size(), [2.0, 2.0, DEFAULT_MIN_EXTENT]);
    }

    #[test]
    fn too_few_points() {
        let pts = fill_box([0.0; 3], [1.0; 3], 0.0, 9, 3);
        assert_eq!(
            fit_oriented_box_pca(&pts, &FitConfig::default()),
            Err(PseudoBoxError::TooFewPoints { needed: 10, got: 9 })
        );
    }

    #[test]
    fn square_footprint_gets_zero_yaw() {
        // a 3x3 grid is isotropic in x–y
        let pts: Vec<_> = (0..9)
            .map(|i| Point3::new((i % 3) as f64, (i / 3) as f64, 0.0))
            .chain((0..9).map(|i| Point3::new((i % 3) as f64, (i / 3) as f64, 1.0)))
            .collect();
        let b = fit_oriented_box_pca(&pts, &FitConfig::default()).unwrap().bbox;
        assert_eq!(b.yaw(), 0.0);
    }

    #[test]
    fn fit_contains_inliers() {
        let pts = fill_box([3.0, -1.0, 0.2], [1.5, 0.4, 0.3], 2.2, 500, 4);
        let b = fit_oriented_box_pca(&pts, &FitConfig::default()).unwrap().bbox;
        assert!(pts.iter().all(|p| b.contains(*p, 1e-9)));
    }

    #[test]
    fn outlier_far_away_dropped() {
        let mut pts = fill_box([0.0; 3], [1.0; 3], 0.0, 200, 5);
        pts.push(Point3::new(50.0, 0.0, 0.0));
        let keep = filter_outliers(&pts, 5.0);
        assert_eq!(keep.len(), 200);
        assert!(!keep.contains(&200));
        let same = vec![Point3::new(1.0, 1.0, 1.0); 12];
        assert_eq!(filter_outliers(&same, 5.0).len(), 12);
    }

    #[test]
    fn vocabulary() {
        let b = |l: &str| {
            OrientedBox3::new(Point3::default(), [1.0; 3], 0.0)
                .unwrap()
                .with_label(l)
                .unwrap()
        };
        let v = collect_pseudo_vocabulary(&[b("chair"), b("chair"), b("table")]);
        assert_eq!(v.into_iter().collect::<Vec<_>>(), vec!["chair", "table"]);
        assert!(collect_pseudo_vocabulary(&[]).is_empty());
        let v = collect_pseudo_vocabulary(&[b("Chair "), b("chair")]);
        assert_eq!(v.len(), 1);
    }

    #[test]
    fn empty_detection_rejected() {
        let m = Mask2D::empty(4, 4, "x").unwrap();
        assert_eq!(PseudoDetection::from_mask(m), Err(PseudoBoxError::EmptyMask));
        let m = Mask2D::full(4, 4, "x").unwrap();
        assert_eq!(PseudoDetection::new(m, " "), Err(PseudoBoxError::EmptyLabel));
    }
}
