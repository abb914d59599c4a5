// SPDX-License-Identifier: Apache-2.0

//! Synthetic scenes, embedding banks and scripted detectors with known
//! ground truth.
//!
//! Scenes hold disjoint gravity-aligned boxes filled with uniform interior
//! points, viewed by one pinhole camera. Objects are also kept apart in the
//! image (no pixel receives points of two objects), so each mask selects
//! exactly its own object's points.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{normalize_label, Embedding, EmbeddingBank, EmbeddingError, Provenance};
use crate::geometry::{
    intersection_volume, CameraModel, GeometryError, IouMode, Mask2D, OrientedBox3, Point3,
    PointCloud,
};
use crate::metrics::SplitKind;
use crate::rng::{derive_seed, SampleStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("could not place object {object} after {attempts} attempts")]
    PlacementFailed { object: usize, attempts: usize },
    #[error("could not pack {count} cluster centers {min_angle} rad apart in dimension {dim}")]
    InfeasiblePacking {
        count: usize,
        dim: usize,
        min_angle: f64,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolLabel {
    pub label: String,
    pub split: SplitKind,
}

/// Camera fixed at `position`, looking along +y and pitched down by `pitch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPlacement {
    pub position: [f64; 3],
    pub pitch: f64,
    pub focal: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraPlacement {
    fn default() -> Self {
        Self {
            position: [0.0, 0.0, 1.6],
            pitch: 0.35,
            focal: 525.0,
            width: 640,
            height: 480,
        }
    }
}

impl CameraPlacement {
    pub fn camera(&self) -> Result<CameraModel, GeometryError> {
        let (s, c) = self.pitch.sin_cos();
        let r = [[1.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]];
        let p = self.position;
        let t: [f64; 3] = std::array::from_fn(|i| -(r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]));
        CameraModel::pinhole(
            (self.focal, self.focal),
            (self.width as f64 / 2.0, self.height as f64 / 2.0),
            r,
            t,
            self.width,
            self.height,
        )
    }
}

/// Box footprints: the long side is drawn from `long_side`, the short side is
/// `long / aspect` with `aspect` drawn from `aspect`, and boxes rest on z = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSceneSpec {
    pub seed: u64,
    pub objects: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub long_side: (f64, f64),
    pub aspect: (f64, f64),
    pub height: (f64, f64),
    pub yaw_range: (f64, f64),
    pub points_per_object: usize,
    pub camera: CameraPlacement,
    pub labels: Vec<PoolLabel>,
    pub max_attempts: usize,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            objects: 3,
            x_range: (-1.5, 1.5),
            y_range: (2.5, 6.0),
            long_side: (0.8, 2.0),
            aspect: (1.8, 3.0),
            height: (0.4, 1.2),
            yaw_range: (0.0, std::f64::consts::PI),
            points_per_object: 1500,
            camera: CameraPlacement::default(),
            labels: default_label_pool(),
            max_attempts: 2000,
        }
    }
}

pub const DEFAULT_BASE_LABELS: [&str; 4] = ["chair", "table", "bed", "desk"];
pub const DEFAULT_NOVEL_LABELS: [&str; 4] = ["lamp", "ottoman", "piano", "stool"];

pub fn default_label_pool() -> Vec<PoolLabel> {
    let base = DEFAULT_BASE_LABELS.iter().map(|l| (l, SplitKind::Base));
    let novel = DEFAULT_NOVEL_LABELS.iter().map(|l| (l, SplitKind::Novel));
    base.chain(novel)
        .map(|(l, split)| PoolLabel {
            label: l.to_string(),
            split,
        })
        .collect()
}

fn check_range(name: &str, r: (f64, f64), positive: bool) -> Result<(), SynthError> {
    let ok = r.0.is_finite() && r.1.is_finite() && r.0 <= r.1 && (!positive || r.0 > 0.0);
    if ok {
        Ok(())
    } else {
        Err(SynthError::InvalidSpec(format!("{name} range {r:?} is empty or invalid")))
    }
}

impl SynthSceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        check_range("x", self.x_range, false)?;
        check_range("y", self.y_range, false)?;
        check_range("long side", self.long_side, true)?;
        check_range("height", self.height, true)?;
        check_range("yaw", self.yaw_range, false)?;
        check_range("aspect", self.aspect, true)?;
        if self.aspect.0 < 1.0 {
            return Err(SynthError::InvalidSpec("aspect must be at least 1".into()));
        }
        if self.points_per_object == 0 {
            return Err(SynthError::InvalidSpec("points_per_object must be positive".into()));
        }
        if self.labels.is_empty() {
            return Err(SynthError::InvalidSpec("label pool is empty".into()));
        }
        if self.labels.iter().any(|l| normalize_label(&l.label).is_empty()) {
            return Err(SynthError::InvalidSpec("label pool has an empty label".into()));
        }
        if self.max_attempts == 0 {
            return Err(SynthError::InvalidSpec("max_attempts must be positive".into()));
        }
        Ok(())
    }

    pub fn base_labels(&self) -> Vec<String> {
        self.pool(SplitKind::Base)
    }

    pub fn novel_labels(&self) -> Vec<String> {
        self.pool(SplitKind::Novel)
    }

    fn pool(&self, kind: SplitKind) -> Vec<String> {
        self.labels
            .iter()
            .filter(|l| l.split == kind)
            .map(|l| l.label.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub cloud: PointCloud,
    pub camera: CameraModel,
    /// One mask per object, labeled with the object's class.
    pub masks: Vec<Mask2D>,
    pub gt_boxes: Vec<OrientedBox3>,
}

fn sample_interior(b: &OrientedBox3, n: usize, rng: &mut SampleStream) -> Vec<Point3> {
    let size = b.size();
    (0..n)
        .map(|_| {
            let local = Point3::new(
                rng.uniform(-0.5, 0.5) * size[0],
                rng.uniform(-0.5, 0.5) * size[1],
                rng.uniform(-0.5, 0.5) * size[2],
            );
            local.rotated_z(b.yaw()).offset(b.center().to_array())
        })
        .collect()
}

pub fn generate_scene(spec: &SynthSceneSpec, id: impl Into<String>) -> Result<SceneRecord, SynthError> {
    spec.validate()?;
    let camera = spec.camera.camera()?;
    let mut rng = SampleStream::new(spec.seed);
    let mut failure = None;
    // a crowded early layout can block later objects; start the scene over
    for _ in 0..SCENE_RESTARTS {
        match place_objects(spec, &camera, &mut rng) {
            Ok((cloud, masks, gt_boxes)) => {
                return Ok(SceneRecord {
                    id: id.into(),
                    cloud,
                    camera,
                    masks,
                    gt_boxes,
                })
            }
            Err(e @ SynthError::PlacementFailed { .. }) => failure = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(failure.expect("at least one restart"))
}

const SCENE_RESTARTS: usize = 20;

type Placement = (PointCloud, Vec<Mask2D>, Vec<OrientedBox3>);

fn place_objects(spec: &SynthSceneSpec, camera: &CameraModel, rng: &mut SampleStream) -> Result<Placement, SynthError> {
    let (w, h) = (camera.width(), camera.height());
    let mut boxes: Vec<OrientedBox3> = Vec::with_capacity(spec.objects);
    let mut masks = Vec::with_capacity(spec.objects);
    let mut points = Vec::with_capacity(spec.objects * spec.points_per_object);
    let mut occupied = vec![false; w as usize * h as usize];

    for object in 0..spec.objects {
        let mut placed = false;
        for _ in 0..spec.max_attempts {
            let long = rng.uniform(spec.long_side.0, spec.long_side.1);
            let aspect = rng.uniform(spec.aspect.0, spec.aspect.1);
            let height = rng.uniform(spec.height.0, spec.height.1);
            let yaw = rng.uniform(spec.yaw_range.0, spec.yaw_range.1);
            let x = rng.uniform(spec.x_range.0, spec.x_range.1);
            let y = rng.uniform(spec.y_range.0, spec.y_range.1);
            let label = &spec.labels[rng.index(spec.labels.len())].label;
            let b = OrientedBox3::new(Point3::new(x, y, height / 2.0), [long, long / aspect, height], yaw)?
                .with_label(label.clone())?;
            // all corners in view, hence every interior point too
            if b.corners().iter().any(|c| camera.project(*c).is_none()) {
                continue;
            }
            if boxes
                .iter()
                .any(|o| intersection_volume(&b, o, IouMode::Oriented) > 0.0)
            {
                continue;
            }
            let pts = sample_interior(&b, spec.points_per_object, rng);
            let pixels: Vec<usize> = pts
                .iter()
                .filter_map(|p| camera.project(*p))
                .map(|(u, v)| v.floor() as usize * w as usize + u.floor() as usize)
                .collect();
            if pixels.len() != pts.len() || pixels.iter().any(|&px| occupied[px]) {
                continue;
            }
            let mut values = vec![false; occupied.len()];
            for &px in &pixels {
                values[px] = true;
                occupied[px] = true;
            }
            masks.push(Mask2D::new(w, h, values, label.clone())?);
            boxes.push(b);
            points.extend(pts);
            placed = true;
            break;
        }
        if !placed {
            return Err(SynthError::PlacementFailed {
                object,
                attempts: spec.max_attempts,
            });
        }
    }

    Ok((PointCloud::new(points), masks, boxes))
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

/// `count` scenes whose seeds are derived from `spec.seed` and the scene
/// index. Generated in parallel; the result is in index order.
pub fn generate_scenes(spec: &SynthSceneSpec, count: usize) -> Result<Vec<SceneRecord>, SynthError> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let s = SynthSceneSpec {
                seed: derive_seed(spec.seed, i as u64),
                ..spec.clone()
            };
            generate_scene(&s, scene_id(i))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CenterLayout {
    /// Standard basis vectors; needs `dim ≥ labels`.
    Orthogonal,
    /// Random directions, pairwise at least `min_angle` radians apart.
    Random { min_angle: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEmbeddingSpec {
    pub seed: u64,
    pub dim: usize,
    pub labels: Vec<String>,
    pub centers: CenterLayout,
    /// Maximum angle (radians) of a variant from its center.
    pub spread: f64,
    pub variants_per_label: usize,
    pub max_attempts: usize,
}

impl SynthEmbeddingSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.dim < 2 {
            return Err(SynthError::InvalidSpec(format!("dim must be at least 2, got {}", self.dim)));
        }
        if self.labels.is_empty() {
            return Err(SynthError::InvalidSpec("no labels".into()));
        }
        if !(self.spread.is_finite() && self.spread >= 0.0) {
            return Err(SynthError::InvalidSpec(format!("spread must be non-negative, got {}", self.spread)));
        }
        let separation = match self.centers {
            CenterLayout::Orthogonal => {
                if self.dim < self.labels.len() {
                    return Err(SynthError::InfeasiblePacking {
                        count: self.labels.len(),
                        dim: self.dim,
                        min_angle: std::f64::consts::FRAC_PI_2,
                    });
                }
                std::f64::consts::FRAC_PI_2
            }
            CenterLayout::Random { min_angle } => {
                if !(min_angle.is_finite() && min_angle > 0.0 && min_angle <= std::f64::consts::PI) {
                    return Err(SynthError::InvalidSpec(format!("min_angle {min_angle} outside (0, π]")));
                }
                min_angle
            }
        };
        // Two variants of different clusters stay closer to their own centers
        // only if the clusters cannot reach each other's half-way point.
        if 2.0 * self.spread >= separation {
            return Err(SynthError::InvalidSpec(format!(
                "spread {} must be less than half the center separation {separation}",
                self.spread
            )));
        }
        Ok(())
    }
}

pub fn variant_label(label: &str, i: usize) -> String {
    format!("{label}~{i}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthEmbeddings {
    /// One entry per label, in spec order.
    pub centers: EmbeddingBank,
    /// `variants_per_label` entries per label, labeled `label~i`.
    pub variants: EmbeddingBank,
    /// Center index of each variant.
    pub variant_center: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit vector at exactly `angle` radians from the unit vector `c`, in a
/// uniformly random direction orthogonal to it. Consumes one
/// `unit_vector(c.len())` draw.
pub fn rotate_towards_random(c: &[f64], angle: f64, rng: &mut SampleStream) -> Vec<f64> {
    let mut u = rng.unit_vector(c.len());
    let proj = dot(&u, c);
    u.iter_mut().zip(c).for_each(|(x, ck)| *x -= proj * ck);
    let norm = dot(&u, &u).sqrt();
    let (s, co) = angle.sin_cos();
    c.iter().zip(&u).map(|(ck, uk)| co * ck + s * uk / norm).collect()
}

pub fn generate_embeddings(spec: &SynthEmbeddingSpec) -> Result<SynthEmbeddings, SynthError> {
    spec.validate()?;
    let mut rng = SampleStream::new(spec.seed);
    let n = spec.labels.len();
    let centers: Vec<Vec<f64>> = match spec.centers {
        CenterLayout::Orthogonal => (0..n)
            .map(|i| (0..spec.dim).map(|k| if k == i { 1.0 } else { 0.0 }).collect())
            .collect(),
        CenterLayout::Random { min_angle } => {
            let max_cos = min_angle.cos();
            let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
            let mut attempts = 0;
            while out.len() < n {
                if attempts >= spec.max_attempts {
                    return Err(SynthError::InfeasiblePacking {
                        count: n,
                        dim: spec.dim,
                        min_angle,
                    });
                }
                attempts += 1;
                let v = rng.unit_vector(spec.dim);
                // compare against the f32-rounded vectors that end up stored
                let v32: Vec<f64> = Embedding::normalized(&v)?.to_f64();
                if out.iter().all(|c| dot(c, &v32) < max_cos) {
                    out.push(v32);
                }
            }
            out
        }
    };

    let mut center_bank = EmbeddingBank::new(spec.dim)?;
    for (label, c) in spec.labels.iter().zip(&centers) {
        center_bank.push_labeled(label.clone(), Embedding::normalized(c)?, Provenance::Base)?;
    }

    let mut variants = EmbeddingBank::new(spec.dim)?;
    let mut variant_center = Vec::new();
    for (ci, (label, c)) in spec.labels.iter().zip(&centers).enumerate() {
        for i in 0..spec.variants_per_label {
            let angle = if spec.spread > 0.0 { spec.spread * rng.open01() } else { 0.0 };
            let v = if angle > 0.0 { rotate_towards_random(c, angle, &mut rng) } else { c.clone() };
            variants.push_labeled(variant_label(label, i), Embedding::normalized(&v)?, Provenance::Base)?;
            variant_center.push(ci);
        }
    }
    Ok(SynthEmbeddings {
        centers: center_bank,
        variants,
        variant_center,
    })
}

/// Corruption applied by [`scripted_detector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorScript {
    pub drop_rate: f64,
    /// Half-width of the uniform center offset per axis, meters.
    pub center_jitter: f64,
    /// Half-width of the uniform relative size change per axis.
    pub size_jitter: f64,
    /// Probability of replacing a label with `confusion_label`.
    pub label_confusion: f64,
    pub confusion_label: Option<String>,
    pub seed: u64,
}

impl Default for DetectorScript {
    fn default() -> Self {
        Self {
            drop_rate: 0.0,
            center_jitter: 0.0,
            size_jitter: 0.0,
            label_confusion: 0.0,
            confusion_label: None,
            seed: 0,
        }
    }
}

impl DetectorScript {
    pub fn validate(&self) -> Result<(), SynthError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(SynthError::InvalidSpec(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("drop_rate", self.drop_rate)?;
        unit("label_confusion", self.label_confusion)?;
        if !(self.size_jitter >= 0.0 && self.size_jitter < 1.0) {
            return Err(SynthError::InvalidSpec(format!("size_jitter must lie in [0, 1), got {}", self.size_jitter)));
        }
        if !(self.center_jitter.is_finite() && self.center_jitter >= 0.0) {
            return Err(SynthError::InvalidSpec("center_jitter must be non-negative".into()));
        }
        if self.label_confusion > 0.0 && self.confusion_label.is_none() {
            return Err(SynthError::InvalidSpec("label_confusion needs a confusion_label".into()));
        }
        Ok(())
    }
}

/// Predictions derived from ground truth. Every box consumes the same number
/// of draws (drop, 3 center, 3 size, confusion, score) so the stream stays
/// aligned whatever the rates. Scores are uniform on (0.5, 1).
pub fn scripted_detector(gt: &[OrientedBox3], script: &DetectorScript) -> Result<Vec<OrientedBox3>, SynthError> {
    script.validate()?;
    let mut rng = SampleStream::new(script.seed);
    let mut out = Vec::with_capacity(gt.len());
    for g in gt {
        let dropped = rng.chance(script.drop_rate);
        let dc: [f64; 3] = std::array::from_fn(|_| rng.uniform(-1.0, 1.0) * script.center_jitter);
        let ds: [f64; 3] = std::array::from_fn(|_| 1.0 + rng.uniform(-1.0, 1.0) * script.size_jitter);
        let confused = rng.chance(script.label_confusion);
        let score = rng.uniform(0.5, 1.0);
        if dropped {
            continue;
        }
        let size = g.size();
        let mut b = OrientedBox3::new(
            g.center().offset(dc),
            std::array::from_fn(|k| size[k] * ds[k]),
            g.yaw(),
        )?;
        let label = match (&script.confusion_label, confused) {
            (Some(l), true) => Some(l.clone()),
            _ => g.label().map(str::to_string),
        };
        if let Some(l) = label {
            b = b.with_label(l)?;
        }
        out.push(b.with_score(score)?);
    }
    Ok(out)
}
