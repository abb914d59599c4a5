// SPDX-License-Identifier: Apache-2.0

//! Geometric primitives: points, gravity-aligned oriented boxes, pinhole
//! cameras, binary masks, and exact 3D box overlap.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("box size must be positive in every axis, got {0:?}")]
    InvalidSize([f64; 3]),
    #[error("box label must be a nonempty string")]
    EmptyLabel,
    #[error("box score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("mask is {mask_width}x{mask_height} but the camera image is {image_width}x{image_height}")]
    MaskSizeMismatch {
        mask_width: u32,
        mask_height: u32,
        image_width: u32,
        image_height: u32,
    },
    #[error("mask has {got} pixels, expected {expected}")]
    MaskDataLength { got: usize, expected: usize },
    #[error("mask label must be a nonempty string")]
    EmptyMaskLabel,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point cloud has {points} points but {colors} colors")]
    ColorCount { points: usize, colors: usize },
    #[error("depth image is {got_width}x{got_height}, expected {width}x{height}")]
    DepthSizeMismatch {
        got_width: u32,
        got_height: u32,
        width: u32,
        height: u32,
    },
}

/// A point in the scene frame, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn offset(self, d: [f64; 3]) -> Self {
        Self::new(self.x + d[0], self.y + d[1], self.z + d[2])
    }

    /// Rotation about the world z axis through the origin.
    pub fn rotated_z(self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl From<Point3> for [f64; 3] {
    fn from(p: Point3) -> Self {
        p.to_array()
    }
}

/// Ordered points with optional per-point RGB carried through I/O.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self {
            points,
            colors: None,
        }
    }

    pub fn with_colors(points: Vec<Point3>, colors: Vec<[u8; 3]>) -> Result<Self, GeometryError> {
        if colors.len() != points.len() {
            return Err(GeometryError::ColorCount {
                points: points.len(),
                colors: colors.len(),
            });
        }
        Ok(Self {
            points,
            colors: Some(colors),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.points.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite("point cloud"));
        }
        if let Some(colors) = &self.colors {
            if colors.len() != self.points.len() {
                return Err(GeometryError::ColorCount {
                    points: self.points.len(),
                    colors: colors.len(),
                });
            }
        }
        Ok(())
    }
}

/// Maps an angle onto `[0, π)`. A yaw-only box is unchanged by a half turn.
pub fn canonical_yaw(yaw: f64) -> f64 {
    let y = yaw.rem_euclid(PI);
    if y >= PI {
        0.0
    } else {
        y
    }
}

/// Absolute angular distance between two yaws modulo π, in `[0, π/2]`.
pub fn yaw_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

/// Gravity-aligned cuboid: center, extents along its local x/y/z, and a yaw
/// about world z. Optionally carries a class label and a confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxRecord", into = "BoxRecord")]
pub struct OrientedBox3 {
    center: Point3,
    size: [f64; 3],
    yaw: f64,
    label: Option<String>,
    score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct BoxRecord {
    center: [f64; 3],
    size: [f64; 3],
    #[serde(default)]
    yaw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

impl TryFrom<BoxRecord> for OrientedBox3 {
    type Error = GeometryError;

    fn try_from(r: BoxRecord) -> Result<Self, Self::Error> {
        let mut b = OrientedBox3::new(r.center.into(), r.size, r.yaw)?;
        if let Some(label) = r.label {
            b = b.with_label(label)?;
        }
        if let Some(score) = r.score {
            b = b.with_score(score)?;
        }
        Ok(b)
    }
}

impl From<OrientedBox3> for BoxRecord {
    fn from(b: OrientedBox3) -> Self {
        BoxRecord {
            center: b.center.to_array(),
            size: b.size,
            yaw: b.yaw,
            label: b.label,
            score: b.score,
        }
    }
}

impl OrientedBox3 {
    pub fn new(center: Point3, size: [f64; 3], yaw: f64) -> Result<Self, GeometryError> {
        if !center.is_finite() {
            return Err(GeometryError::NonFinite("box center"));
        }
        if !yaw.is_finite() {
            return Err(GeometryError::NonFinite("box yaw"));
        }
        if size.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(GeometryError::InvalidSize(size));
        }
        Ok(Self {
            center,
            size,
            yaw: canonical_yaw(yaw),
            label: None,
            score: None,
        })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Result<Self, GeometryError> {
        let label = label.into();
        if label.trim().is_empty() {
            return Err(GeometryError::EmptyLabel);
        }
        self.label = Some(label);
        Ok(self)
    }

    pub fn with_score(mut self, score: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::InvalidScore(score));
        }
        self.score = Some(score);
        Ok(self)
    }

    pub fn without_score(mut self) -> Self {
        self.score = None;
        self
    }

    pub fn center(&self) -> Point3 {
        self.center
    }

    pub fn size(&self) -> [f64; 3] {
        self.size
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn score(&self) -> Option<f64> {
        self.score
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Same box shifted by `d`.
    pub fn translated(&self, d: [f64; 3]) -> Self {
        Self {
            center: self.center.offset(d),
            ..self.clone()
        }
    }

    /// Same box rotated about the world z axis through the origin.
    pub fn rotated_z(&self, angle: f64) -> Self {
        Self {
            center: self.center.rotated_z(angle),
            yaw: canonical_yaw(self.yaw + angle),
            ..self.clone()
        }
    }

    /// Expresses `p` in the box's local frame (origin at the center).
    pub fn to_local(&self, p: Point3) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p.x - self.center.x;
        let dy = p.y - self.center.y;
        [c * dx + s * dy, -s * dx + c * dy, p.z - self.center.z]
    }

    /// True when `p` lies inside the box grown by `margin` on every face.
    pub fn contains(&self, p: Point3, margin: f64) -> bool {
        let local = self.to_local(p);
        local
            .iter()
            .zip(self.size.iter())
            .all(|(v, s)| v.abs() <= s / 2.0 + margin)
    }

    /// Footprint corners in counter-clockwise order.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.size[0] / 2.0;
        let hw = self.size[1] / 2.0;
        let local = [[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]];
        local.map(|[x, y]| [self.center.x + c * x - s * y, self.center.y + s * x + c * y])
    }

    /// All eight corners: footprint at the bottom face, then at the top face.
    pub fn corners(&self) -> [Point3; 8] {
        let fp = self.footprint();
        let z0 = self.center.z - self.size[2] / 2.0;
        let z1 = self.center.z + self.size[2] / 2.0;
        let mut out = [Point3::default(); 8];
        for (i, [x, y]) in fp.iter().enumerate() {
            out[i] = Point3::new(*x, *y, z0);
            out[i + 4] = Point3::new(*x, *y, z1);
        }
        out
    }

    fn z_interval(&self) -> (f64, f64) {
        (
            self.center.z - self.size[2] / 2.0,
            self.center.z + self.size[2] / 2.0,
        )
    }

    fn geometry_key(&self) -> [f64; 7] {
        [
            self.center.x,
            self.center.y,
            self.center.z,
            self.size[0],
            self.size[1],
            self.size[2],
            self.yaw,
        ]
    }
}

/// Raw camera file layout: row-major `K` and `R`, translation `t`, image size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub width: u32,
    pub height: u32,
}

/// Pinhole camera: intrinsics `K`, world-to-camera rotation `R` and
/// translation `t`, so a scene point projects as `K · (R·p + t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct CameraModel {
    intrinsics: [[f64; 3]; 3],
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    width: u32,
    height: u32,
}

const ROTATION_TOLERANCE: f64 = 1e-6;

impl CameraModel {
    pub fn new(
        intrinsics: [[f64; 3]; 3],
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let all = intrinsics
            .iter()
            .chain(rotation.iter())
            .flatten()
            .chain(translation.iter());
        for v in all {
            if !v.is_finite() {
                return Err(GeometryError::NonFinite("camera"));
            }
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidCamera(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        let k = &intrinsics;
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 {
            return Err(GeometryError::InvalidCamera(
                "intrinsics must be upper-triangular".into(),
            ));
        }
        if k[0][0] <= 0.0 || k[1][1] <= 0.0 || k[2][2] <= 0.0 {
            return Err(GeometryError::InvalidCamera(
                "intrinsics must have positive diagonal (focal) entries".into(),
            ));
        }
        let r = &rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|m| r[i][m] * r[j][m]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > ROTATION_TOLERANCE {
                    return Err(GeometryError::InvalidCamera(
                        "rotation is not orthonormal".into(),
                    ));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeometryError::InvalidCamera(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(Self {
            intrinsics,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Camera with focal lengths `(fx, fy)`, principal point `(cx, cy)` and the given pose.
    pub fn pinhole(
        focal: (f64, f64),
        principal: (f64, f64),
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = [
            [focal.0, 0.0, principal.0],
            [0.0, focal.1, principal.1],
            [0.0, 0.0, 1.0],
        ];
        Self::new(k, rotation, translation, width, height)
    }

    pub fn intrinsics(&self) -> &[[f64; 3]; 3] {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn translation(&self) -> [f64; 3] {
        self.translation
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn to_camera_frame(&self, p: Point3) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z + t[0],
            r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z + t[1],
            r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z + t[2],
        ]
    }

    /// Pixel coordinates of `p`, or `None` when it is behind the camera or
    /// outside `[0, width) × [0, height)`.
    pub fn project(&self, p: Point3) -> Option<(f64, f64)> {
        let c = self.to_camera_frame(p);
        if !(c[2] > 0.0) {
            return None;
        }
        let k = &self.intrinsics;
        let w = k[2][2] * c[2];
        let u = (k[0][0] * c[0] + k[0][1] * c[1] + k[0][2] * c[2]) / w;
        let v = (k[1][1] * c[1] + k[1][2] * c[2]) / w;
        if u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64 {
            Some((u, v))
        } else {
            None
        }
    }

    /// Optical center in the scene frame, `-Rᵀ t`.
    pub fn center(&self) -> Point3 {
        let r = &self.rotation;
        let t = &self.translation;
        Point3::new(
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        )
    }

    /// Ray through pixel `(u, v)`: the optical center and a unit direction in
    /// the scene frame. The direction has unit camera-frame depth scaled away.
    pub fn back_project_ray(&self, u: f64, v: f64) -> (Point3, [f64; 3]) {
        let k = &self.intrinsics;
        // Solve K · x = (u, v, 1) for the upper-triangular K.
        let z = 1.0 / k[2][2];
        let y = (v - k[1][2] * z) / k[1][1];
        let x = (u - k[0][1] * y - k[0][2] * z) / k[0][0];
        let r = &self.rotation;
        let mut d = [
            r[0][0] * x + r[1][0] * y + r[2][0] * z,
            r[0][1] * x + r[1][1] * y + r[2][1] * z,
            r[0][2] * x + r[1][2] * y + r[2][2] * z,
        ];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        d.iter_mut().for_each(|c| *c /= n);
        (self.center(), d)
    }
}

impl TryFrom<CameraRecord> for CameraModel {
    type Error = GeometryError;

    fn try_from(r: CameraRecord) -> Result<Self, Self::Error> {
        let m = |a: [f64; 9]| [[a[0], a[1], a[2]], [a[3], a[4], a[5]], [a[6], a[7], a[8]]];
        CameraModel::new(m(r.k), m(r.r), r.t, r.width, r.height)
    }
}

impl From<CameraModel> for CameraRecord {
    fn from(c: CameraModel) -> Self {
        let f = |m: [[f64; 3]; 3]| {
            [
                m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
            ]
        };
        CameraRecord {
            k: f(c.intrinsics),
            r: f(c.rotation),
            t: c.translation,
            width: c.width,
            height: c.height,
        }
    }
}

pub fn project_point(p: Point3, cam: &CameraModel) -> Option<(f64, f64)> {
    cam.project(p)
}

/// Binary object mask, row-major, with the class label of the detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask2D {
    width: u32,
    height: u32,
    values: Vec<bool>,
    label: String,
}

impl Mask2D {
    pub fn new(
        width: u32,
        height: u32,
        values: Vec<bool>,
        label: impl Into<String>,
    ) -> Result<Self, GeometryError> {
        let expected = width as usize * height as usize;
        if values.len() != expected {
            return Err(GeometryError::MaskDataLength {
                got: values.len(),
                expected,
            });
        }
        let label = label.into();
        if label.trim().is_empty() {
            return Err(GeometryError::EmptyMaskLabel);
        }
        Ok(Self {
            width,
            height,
            values,
            label,
        })
    }

    pub fn empty(width: u32, height: u32, label: impl Into<String>) -> Result<Self, GeometryError> {
        Self::new(width, height, vec![false; width as usize * height as usize], label)
    }

    pub fn full(width: u32, height: u32, label: impl Into<String>) -> Result<Self, GeometryError> {
        Self::new(width, height, vec![true; width as usize * height as usize], label)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height && self.values[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, on: bool) {
        if x < self.width && y < self.height {
            self.values[(y * self.width + x) as usize] = on;
        }
    }

    pub fn count_set(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn check_camera(&self, cam: &CameraModel) -> Result<(), GeometryError> {
        if self.width != cam.width || self.height != cam.height {
            return Err(GeometryError::MaskSizeMismatch {
                mask_width: self.width,
                mask_height: self.height,
                image_width: cam.width,
                image_height: cam.height,
            });
        }
        Ok(())
    }
}

/// Per-pixel camera-frame depth in meters, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f64>,
}

/// Optional occlusion test for [`points_in_mask_with`]: keep a point only if
/// its camera depth is within `tolerance` meters of the depth image.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthCheck {
    pub image: DepthImage,
    pub tolerance: f64,
}

/// Indices of the points that project onto a set pixel of `mask`.
pub fn points_in_mask(
    cloud: &PointCloud,
    cam: &CameraModel,
    mask: &Mask2D,
) -> Result<Vec<usize>, GeometryError> {
    points_in_mask_with(cloud, cam, mask, None)
}

pub fn points_in_mask_with(
    cloud: &PointCloud,
    cam: &CameraModel,
    mask: &Mask2D,
    depth: Option<&DepthCheck>,
) -> Result<Vec<usize>, GeometryError> {
    if cloud.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    mask.check_camera(cam)?;
    if let Some(check) = depth {
        if check.image.width != cam.width
            || check.image.height != cam.height
            || check.image.depth.len() != cam.width as usize * cam.height as usize
        {
            return Err(GeometryError::DepthSizeMismatch {
                got_width: check.image.width,
                got_height: check.image.height,
                width: cam.width,
                height: cam.height,
            });
        }
    }
    let mut out = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let Some((u, v)) = cam.project(*p) else {
            continue;
        };
        let (px, py) = (u.floor() as u32, v.floor() as u32);
        if !mask.get(px, py) {
            continue;
        }
        if let Some(check) = depth {
            let z = cam.to_camera_frame(*p)[2];
            let expected = check.image.depth[(py * cam.width + px) as usize];
            if (z - expected).abs() > check.tolerance {
                continue;
            }
        }
        out.push(i);
    }
    Ok(out)
}

/// How box overlap is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    /// Ignore yaw and intersect the boxes as axis-aligned cuboids.
    #[default]
    AxisAligned,
    /// Intersect the yaw-rotated footprints exactly.
    Oriented,
}

impl fmt::Display for IouMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IouMode::AxisAligned => "axis_aligned",
            IouMode::Oriented => "oriented",
        })
    }
}

impl FromStr for IouMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "axis_aligned" | "axis-aligned" | "aabb" => Ok(IouMode::AxisAligned),
            "oriented" => Ok(IouMode::Oriented),
            other => Err(format!(
                "unknown IoU mode '{other}' (expected axis_aligned or oriented)"
            )),
        }
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman clipping of `subject` against the convex,
/// counter-clockwise polygon `clip`.
pub fn clip_convex_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn segment_line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Shoelace area (absolute value).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    acc.abs() / 2.0
}

fn interval_overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// Intersection volume of two boxes under `mode`.
pub fn intersection_volume(a: &OrientedBox3, b: &OrientedBox3, mode: IouMode) -> f64 {
    let dz = interval_overlap(a.z_interval(), b.z_interval());
    if dz <= 0.0 {
        return 0.0;
    }
    let area = match mode {
        IouMode::AxisAligned => {
            let ix = interval_overlap(
                (a.center.x - a.size[0] / 2.0, a.center.x + a.size[0] / 2.0),
                (b.center.x - b.size[0] / 2.0, b.center.x + b.size[0] / 2.0),
            );
            let iy = interval_overlap(
                (a.center.y - a.size[1] / 2.0, a.center.y + a.size[1] / 2.0),
                (b.center.y - b.size[1] / 2.0, b.center.y + b.size[1] / 2.0),
            );
            ix * iy
        }
        IouMode::Oriented => {
            let reach_a = 0.5 * a.size[0].hypot(a.size[1]);
            let reach_b = 0.5 * b.size[0].hypot(b.size[1]);
            let gap = (a.center.x - b.center.x).hypot(a.center.y - b.center.y);
            if gap > reach_a + reach_b {
                0.0
            } else {
                polygon_area(&clip_convex_polygon(&a.footprint(), &b.footprint()))
            }
        }
    };
    area * dz
}

/// 3D intersection-over-union in `[0, 1]`. Exactly 1 for geometrically
/// identical boxes and exactly symmetric in its arguments.
pub fn iou3d(a: &OrientedBox3, b: &OrientedBox3, mode: IouMode) -> f64 {
    let (ka, kb) = (a.geometry_key(), b.geometry_key());
    let order = ka.partial_cmp(&kb).unwrap_or(Ordering::Equal);
    if order == Ordering::Equal {
        return 1.0;
    }
    let (first, second) = if order == Ordering::Less { (a, b) } else { (b, a) };
    let inter = intersection_volume(first, second, mode);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = first.volume() + second.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity() -> [[f64; 3]; 3] {
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    }

    fn cam() -> CameraModel {
        CameraModel::pinhole((500.0, 500.0), (320.0, 240.0), identity(), [0.0; 3], 640, 480)
            .unwrap()
    }

    fn unit_box(x: f64, y: f64, z: f64) -> OrientedBox3 {
        OrientedBox3::new(Point3::new(x, y, z), [1.0, 1.0, 1.0], 0.0).unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        assert_eq!(cam().project(Point3::new(0.0, 0.0, 1.0)), Some((320.0, 240.0)));
    }

    #[test]
    fn behind_camera_is_absent() {
        assert_eq!(cam().project(Point3::new(0.0, 0.0, -1.0)), None);
        assert_eq!(cam().project(Point3::new(0.0, 0.0, 0.0)), None);
    }

    #[test]
    fn out_of_frame_is_absent() {
        // u = 320 + 500 * 1 = 820 > 640
        assert_eq!(cam().project(Point3::new(1.0, 0.0, 1.0)), None);
        // u exactly at the width bound is outside the half-open frame
        assert_eq!(cam().project(Point3::new(0.64, 0.0, 1.0)), None);
    }

    #[test]
    fn back_projection_meets_point() {
        let p = Point3::new(0.3, -0.2, 2.5);
        let c = cam();
        let (u, v) = c.project(p).unwrap();
        let (o, d) = c.back_project_ray(u, v);
        let w = [p.x - o.x, p.y - o.y, p.z - o.z];
        let t = w[0] * d[0] + w[1] * d[1] + w[2] * d[2];
        let miss = [w[0] - t * d[0], w[1] - t * d[1], w[2] - t * d[2]];
        assert!(miss.iter().map(|m| m * m).sum::<f64>().sqrt() < 1e-9);
    }

    #[test]
    fn camera_validation() {
        let mut k = [[500.0, 0.0, 320.0], [0.0, 500.0, 240.0], [0.0, 0.0, 1.0]];
        let bad_r = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraModel::new(k, bad_r, [0.0; 3], 10, 10).is_err());
        let reflect = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraModel::new(k, reflect, [0.0; 3], 10, 10).is_err());
        k[1][0] = 2.0;
        assert!(CameraModel::new(k, identity(), [0.0; 3], 10, 10).is_err());
        k[1][0] = 0.0;
        k[0][0] = -1.0;
        assert!(CameraModel::new(k, identity(), [0.0; 3], 10, 10).is_err());
        k[0][0] = 500.0;
        assert!(CameraModel::new(k, identity(), [0.0; 3], 0, 10).is_err());
    }

    #[test]
    fn camera_json_layout() {
        let json = serde_json::to_value(cam()).unwrap();
        assert_eq!(json["K"].as_array().unwrap().len(), 9);
        assert_eq!(json["R"][0], 1.0);
        assert_eq!(json["width"], 640);
        let back: CameraModel = serde_json::from_value(json).unwrap();
        assert_eq!(back, cam());
    }

    #[test]
    fn full_mask_selects_everything_in_front() {
        let cloud = PointCloud::new(vec![
            Point3::new(0.0, 0.0, 1.0),
            Point3::new(0.1, 0.1, 2.0),
            Point3::new(-0.2, 0.1, 3.0),
        ]);
        let mask = Mask2D::full(640, 480, "thing").unwrap();
        assert_eq!(points_in_mask(&cloud, &cam(), &mask).unwrap(), vec![0, 1, 2]);
        let empty = Mask2D::empty(640, 480, "thing").unwrap();
        assert!(points_in_mask(&cloud, &cam(), &empty).unwrap().is_empty());
    }

    #[test]
    fn points_in_mask_errors() {
        let mask = Mask2D::full(640, 480, "thing").unwrap();
        assert_eq!(
            points_in_mask(&PointCloud::default(), &cam(), &mask),
            Err(GeometryError::EmptyCloud)
        );
        let small = Mask2D::full(64, 48, "thing").unwrap();
        let cloud = PointCloud::new(vec![Point3::new(0.0, 0.0, 1.0)]);
        assert!(matches!(
            points_in_mask(&cloud, &cam(), &small),
            Err(GeometryError::MaskSizeMismatch { .. })
        ));
    }

    #[test]
    fn depth_check_drops_occluded() {
        let cloud = PointCloud::new(vec![Point3::new(0.0, 0.0, 1.0), Point3::new(0.0, 0.0, 3.0)]);
        let mask = Mask2D::full(640, 480, "thing").unwrap();
        let check = DepthCheck {
            image: DepthImage {
                width: 640,
                height: 480,
                depth: vec![1.0; 640 * 480],
            },
            tolerance: 0.05,
        };
        let got = points_in_mask_with(&cloud, &cam(), &mask, Some(&check)).unwrap();
        assert_eq!(got, vec![0]);
    }

    #[test]
    fn yaw_is_canonical() {
        let b = OrientedBox3::new(Point3::default(), [1.0, 2.0, 3.0], -0.5).unwrap();
        assert!((b.yaw() - (PI - 0.5)).abs() < 1e-15);
        let b = OrientedBox3::new(Point3::default(), [1.0, 2.0, 3.0], PI).unwrap();
        assert_eq!(b.yaw(), 0.0);
        assert!(yaw_distance(0.01, PI - 0.01) < 0.0200001);
    }

    #[test]
    fn box_validation() {
        assert!(OrientedBox3::new(Point3::default(), [0.0, 1.0, 1.0], 0.0).is_err());
        assert!(OrientedBox3::new(Point3::new(f64::NAN, 0.0, 0.0), [1.0; 3], 0.0).is_err());
        let b = unit_box(0.0, 0.0, 0.0);
        assert!(b.clone().with_label("  ").is_err());
        assert!(b.clone().with_score(1.5).is_err());
        assert!(serde_json::from_str::<OrientedBox3>(r#"{"center":[0,0,0],"size":[1,-1,1]}"#).is_err());
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = unit_box(0.0, 0.0, 0.0);
        assert_eq!(iou3d(&a, &a, IouMode::AxisAligned), 1.0);
        assert_eq!(iou3d(&a, &a, IouMode::Oriented), 1.0);
        let far = unit_box(5.0, 0.0, 0.0);
        assert_eq!(iou3d(&a, &far, IouMode::AxisAligned), 0.0);
        assert_eq!(iou3d(&a, &far, IouMode::Oriented), 0.0);
        let above = unit_box(0.0, 0.0, 1.5);
        assert_eq!(iou3d(&a, &above, IouMode::Oriented), 0.0);
    }

    #[test]
    fn iou_half_shift() {
        // overlap 0.5, union 1.5
        let a = unit_box(0.0, 0.0, 0.0);
        let b = unit_box(0.5, 0.0, 0.0);
        for mode in [IouMode::AxisAligned, IouMode::Oriented] {
            assert!((iou3d(&a, &b, mode) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn iou_rotated_square() {
        // unit square vs. the same square rotated 45°: the octagon has area 2(√2 − 1)
        let a = unit_box(0.0, 0.0, 0.0);
        let b = OrientedBox3::new(Point3::default(), [1.0; 3], PI / 4.0).unwrap();
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        let expected = inter / (2.0 - inter);
        assert!((iou3d(&a, &b, IouMode::Oriented) - expected).abs() < 1e-12);
        // yaw is ignored in axis-aligned mode
        assert_eq!(iou3d(&a, &b, IouMode::AxisAligned), 1.0);
    }

    #[test]
    fn contains_respects_yaw() {
        let b = OrientedBox3::new(Point3::default(), [2.0, 0.2, 1.0], PI / 2.0).unwrap();
        assert!(b.contains(Point3::new(0.0, 0.9, 0.0), 0.0));
        assert!(!b.contains(Point3::new(0.9, 0.0, 0.0), 0.0));
    }
}
