// SPDX-License-Identifier: Apache-2.0

//! File formats: point clouds (ASCII PLY, XYZ text), masks (binary PGM with a
//! JSON label sidecar), cameras and boxes (JSON), and embedding banks (EMB1).
//!
//! EMB1 is a JSON manifest
//! `{"dim", "count", "labels", "provenance", "data"}` where `data` is either
//! the path (relative to the manifest) of a raw little-endian `f32` file,
//! row-major `count × dim`, or the rows inline as nested arrays.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{BankEntry, Embedding, EmbeddingBank, EmbeddingError, Provenance};
use crate::geometry::{CameraModel, GeometryError, Mask2D, OrientedBox3, Point3, PointCloud};
use crate::synth::SceneRecord;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Geometry {
        path: PathBuf,
        #[source]
        source: GeometryError,
    },
    #[error("{path}: {source}")]
    Embedding {
        path: PathBuf,
        #[source]
        source: EmbeddingError,
    },
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn geo_err(path: &Path) -> impl FnOnce(GeometryError) -> IoError + '_ {
    move |source| IoError::Geometry {
        path: path.to_path_buf(),
        source,
    }
}

fn emb_err(path: &Path) -> impl FnOnce(EmbeddingError) -> IoError + '_ {
    move |source| IoError::Embedding {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Writes through a temporary file in the target directory, then renames it
/// into place. Missing parent directories are created.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(io_err(&parent))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&parent).map_err(io_err(&parent))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("in-memory JSON serialization");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_bytes(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Resolves `rel` against the directory containing `base_file`.
pub fn resolve(base_file: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    base_file.parent().map(|d| d.join(p)).unwrap_or_else(|| p.to_path_buf())
}

// ---------------------------------------------------------------- clouds

/// ASCII PLY with a `vertex` element carrying `x y z` and optionally
/// `red green blue`. Other elements are skipped.
pub fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(parse_err(path, "missing 'ply' magic"));
    }
    struct Element {
        name: String,
        count: usize,
        props: Vec<String>,
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut ascii = false;
    loop {
        let line = lines.next().ok_or_else(|| parse_err(path, "unterminated header"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(parse_err(path, format!("unsupported PLY format '{fmt}'")));
                }
                ascii = true;
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| parse_err(path, format!("bad element count '{count}'")))?,
                props: Vec::new(),
            }),
            ["property", "list", ..] => {
                let el = elements.last_mut().ok_or_else(|| parse_err(path, "property before element"))?;
                el.props.push("<list>".into());
            }
            ["property", _ty, name] => {
                let el = elements.last_mut().ok_or_else(|| parse_err(path, "property before element"))?;
                el.props.push(name.to_string());
            }
            _ => return Err(parse_err(path, format!("unrecognized header line '{line}'"))),
        }
    }
    if !ascii {
        return Err(parse_err(path, "missing format line"));
    }
    let mut points = Vec::new();
    let mut colors = Vec::new();
    let mut has_color = false;
    let mut found = false;
    for el in &elements {
        if el.name != "vertex" {
            for _ in 0..el.count {
                lines.next().ok_or_else(|| parse_err(path, "truncated element data"))?;
            }
            continue;
        }
        found = true;
        let idx = |n: &str| el.props.iter().position(|p| p == n);
        let (Some(ix), Some(iy), Some(iz)) = (idx("x"), idx("y"), idx("z")) else {
            return Err(parse_err(path, "vertex element needs x, y, z properties"));
        };
        let rgb = match (idx("red"), idx("green"), idx("blue")) {
            (Some(r), Some(g), Some(b)) => Some([r, g, b]),
            _ => None,
        };
        has_color = rgb.is_some();
        for row in 0..el.count {
            let line = lines
                .next()
                .ok_or_else(|| parse_err(path, format!("expected {} vertices, got {row}", el.count)))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < el.props.len() {
                return Err(parse_err(path, format!("vertex {row} has {} values", toks.len())));
            }
            let num = |i: usize| {
                toks[i]
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, format!("vertex {row}: bad number '{}'", toks[i])))
            };
            points.push(Point3::new(num(ix)?, num(iy)?, num(iz)?));
            if let Some(c) = rgb {
                let mut px = [0u8; 3];
                for (k, &i) in c.iter().enumerate() {
                    px[k] = toks[i]
                        .parse::<u8>()
                        .map_err(|_| parse_err(path, format!("vertex {row}: bad color '{}'", toks[i])))?;
                }
                colors.push(px);
            }
        }
    }
    if !found {
        return Err(parse_err(path, "no vertex element"));
    }
    let cloud = if has_color {
        PointCloud::with_colors(points, colors).map_err(geo_err(path))?
    } else {
        PointCloud::new(points)
    };
    cloud.validate().map_err(geo_err(path))?;
    Ok(cloud)
}

pub fn format_ply(cloud: &PointCloud) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.points.iter().enumerate() {
        let _ = write!(s, "{} {} {}", p.x, p.y, p.z);
        if let Some(c) = &cloud.colors {
            let _ = write!(s, " {} {} {}", c[i][0], c[i][1], c[i][2]);
        }
        s.push('\n');
    }
    s
}

/// One point per line, first three whitespace-separated numbers; `#` starts a comment.
pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(path, format!("line {}: bad number", n + 1)))?;
        if v.len() < 3 {
            return Err(parse_err(path, format!("line {}: expected 3 coordinates", n + 1)));
        }
        points.push(Point3::new(v[0], v[1], v[2]));
    }
    let cloud = PointCloud::new(points);
    cloud.validate().map_err(geo_err(path))?;
    Ok(cloud)
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut s = String::new();
    for p in &cloud.points {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}

/// Reads `.ply` files as PLY and anything else as XYZ text.
pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    let text = read_text(path)?;
    let is_ply = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if is_ply {
        parse_ply(&text, path)
    } else {
        parse_xyz(&text, path)
    }
}

pub fn write_point_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let is_ply = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    let text = if is_ply { format_ply(cloud) } else { format_xyz(cloud) };
    write_atomic(path, text.as_bytes())
}

// ---------------------------------------------------------------- masks

/// Binary PGM (`P5`, maxval 255); a pixel is set iff its value is ≥ 128.
pub fn parse_pgm(bytes: &[u8], label: &str, path: &Path) -> Result<Mask2D> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, "truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(parse_err(path, "not a binary PGM (expected P5)"));
    }
    let mut num = |what: &str| -> Result<u32> {
        let t = token()?;
        t.parse().map_err(|_| parse_err(path, format!("bad PGM {what} '{t}'")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(parse_err(path, format!("PGM maxval must be 255, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let expected = width as usize * height as usize;
    let raster = bytes.get(start..).unwrap_or(&[]);
    if raster.len() != expected {
        return Err(parse_err(
            path,
            format!("PGM raster has {} bytes, expected {expected}", raster.len()),
        ));
    }
    let values = raster.iter().map(|&b| b >= 128).collect();
    Mask2D::new(width, height, values, label).map_err(geo_err(path))
}

pub fn format_pgm(mask: &Mask2D) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.values().iter().map(|&v| if v { 255u8 } else { 0 }));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub label: String,
}

/// The label sidecar of `foo.pgm` is `foo.json`.
pub fn sidecar_path(mask_path: &Path) -> PathBuf {
    mask_path.with_extension("json")
}

pub fn read_mask(path: &Path) -> Result<Mask2D> {
    let side: MaskSidecar = read_json(&sidecar_path(path))?;
    parse_pgm(&read_bytes(path)?, &side.label, path)
}

pub fn write_mask(path: &Path, mask: &Mask2D) -> Result<()> {
    write_atomic(path, &format_pgm(mask))?;
    write_json(
        &sidecar_path(path),
        &MaskSidecar {
            label: mask.label().to_string(),
        },
    )
}

// ---------------------------------------------------------------- cameras

pub fn read_camera(path: &Path) -> Result<CameraModel> {
    read_json(path)
}

// ---------------------------------------------------------------- EMB1

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EmbData {
    Path(String),
    Inline(Vec<Vec<f32>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbManifest {
    pub dim: usize,
    pub count: usize,
    pub labels: Vec<Option<String>>,
    pub provenance: Vec<String>,
    pub data: EmbData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BankFormat {
    /// Manifest plus a sibling `.bin` file.
    #[default]
    Binary,
    /// Rows inline in the manifest.
    Json,
}

/// Rows of an EMB1 file without any unit-norm or label requirements.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMatrix {
    pub dim: usize,
    pub labels: Vec<Option<String>>,
    pub provenance: Vec<String>,
    pub rows: Vec<Vec<f32>>,
}

/// `labels.emb.json` → `labels.emb.bin`.
pub fn data_path_for(manifest: &Path) -> PathBuf {
    let name = manifest
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name.strip_suffix(".json").unwrap_or(&name);
    manifest.with_file_name(format!("{stem}.bin"))
}

pub fn read_matrix(path: &Path) -> Result<RawMatrix> {
    let m: EmbManifest = read_json(path)?;
    if m.labels.len() != m.count || m.provenance.len() != m.count {
        return Err(parse_err(
            path,
            format!(
                "count is {} but there are {} labels and {} provenance entries",
                m.count,
                m.labels.len(),
                m.provenance.len()
            ),
        ));
    }
    if m.dim == 0 {
        return Err(parse_err(path, "dim must be positive"));
    }
    let rows = match &m.data {
        EmbData::Inline(rows) => {
            if rows.len() != m.count {
                return Err(parse_err(path, format!("expected {} rows, got {}", m.count, rows.len())));
            }
            if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != m.dim) {
                return Err(parse_err(path, format!("row {i} has {} values, expected {}", r.len(), m.dim)));
            }
            rows.clone()
        }
        EmbData::Path(rel) => {
            let data_path = resolve(path, rel);
            let bytes = read_bytes(&data_path)?;
            let expected = m.count * m.dim * 4;
            if bytes.len() != expected {
                return Err(parse_err(
                    &data_path,
                    format!("binary data has {} bytes, expected {expected}", bytes.len()),
                ));
            }
            bytes
                .chunks_exact(m.dim * 4)
                .map(|row| {
                    row.chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect()
                })
                .collect()
        }
    };
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(parse_err(path, "non-finite value in embedding data"));
    }
    Ok(RawMatrix {
        dim: m.dim,
        labels: m.labels,
        provenance: m.provenance,
        rows,
    })
}

pub fn write_matrix(path: &Path, matrix: &RawMatrix, format: BankFormat) -> Result<()> {
    let data = match format {
        BankFormat::Json => EmbData::Inline(matrix.rows.clone()),
        BankFormat::Binary => {
            let data_path = data_path_for(path);
            let mut bytes = Vec::with_capacity(matrix.rows.len() * matrix.dim * 4);
            for v in matrix.rows.iter().flatten() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            write_atomic(&data_path, &bytes)?;
            EmbData::Path(
                data_path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            )
        }
    };
    let manifest = EmbManifest {
        dim: matrix.dim,
        count: matrix.rows.len(),
        labels: matrix.labels.clone(),
        provenance: matrix.provenance.clone(),
        data,
    };
    write_json(path, &manifest)
}

fn parse_provenance(s: &str) -> Option<Provenance> {
    match s {
        "base" => Some(Provenance::Base),
        "caption" => Some(Provenance::Caption),
        "pseudo" => Some(Provenance::Pseudo),
        "expanded" => Some(Provenance::Expanded),
        _ => None,
    }
}

pub fn bank_from_matrix(matrix: RawMatrix, path: &Path) -> Result<EmbeddingBank> {
    let mut entries = Vec::with_capacity(matrix.rows.len());
    for ((label, prov), row) in matrix.labels.into_iter().zip(&matrix.provenance).zip(matrix.rows) {
        let provenance = parse_provenance(prov)
            .ok_or_else(|| parse_err(path, format!("unknown provenance '{prov}'")))?;
        let embedding = Embedding::new(row).map_err(emb_err(path))?;
        entries.push(BankEntry {
            label,
            embedding,
            provenance,
        });
    }
    EmbeddingBank::from_entries(matrix.dim, entries).map_err(emb_err(path))
}

pub fn matrix_from_bank(bank: &EmbeddingBank) -> RawMatrix {
    RawMatrix {
        dim: bank.dim(),
        labels: bank.entries().iter().map(|e| e.label.clone()).collect(),
        provenance: bank.entries().iter().map(|e| e.provenance.to_string()).collect(),
        rows: bank.embeddings().map(|e| e.values().to_vec()).collect(),
    }
}

pub fn read_bank(path: &Path) -> Result<EmbeddingBank> {
    bank_from_matrix(read_matrix(path)?, path)
}

pub fn write_bank(path: &Path, bank: &EmbeddingBank, format: BankFormat) -> Result<()> {
    write_matrix(path, &matrix_from_bank(bank), format)
}

// ---------------------------------------------------------------- boxes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxScene {
    pub id: String,
    pub boxes: Vec<OrientedBox3>,
    /// Detection index each box came from, when produced by `pseudo`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sources: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxSceneList {
    pub scenes: Vec<BoxScene>,
}

impl BoxSceneList {
    pub fn find(&self, id: &str) -> Option<&BoxScene> {
        self.scenes.iter().find(|s| s.id == id)
    }
}

// ---------------------------------------------------------------- scenes

/// Scene description; paths are relative to the scene file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub id: String,
    pub cloud: String,
    pub camera: String,
    pub masks: Vec<String>,
}

/// `{"scenes": [paths to scene files]}`, relative to the index file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneIndex {
    pub scenes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScene {
    pub id: String,
    pub cloud: PointCloud,
    pub camera: CameraModel,
    pub masks: Vec<Mask2D>,
}

pub fn load_scene(path: &Path) -> Result<LoadedScene> {
    let f: SceneFile = read_json(path)?;
    let cloud = read_point_cloud(&resolve(path, &f.cloud))?;
    let camera = read_camera(&resolve(path, &f.camera))?;
    let masks = f
        .masks
        .iter()
        .map(|m| read_mask(&resolve(path, m)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedScene {
        id: f.id,
        cloud,
        camera,
        masks,
    })
}

pub fn load_scene_index(path: &Path) -> Result<Vec<PathBuf>> {
    let idx: SceneIndex = read_json(path)?;
    Ok(idx.scenes.iter().map(|s| resolve(path, s)).collect())
}

/// Writes `dir/scene.json` with `cloud.ply`, `camera.json` and
/// `masks/NNN.pgm` (+ sidecars) next to it. Returns the scene file path.
pub fn write_scene(dir: &Path, scene: &SceneRecord) -> Result<PathBuf> {
    write_point_cloud(&dir.join("cloud.ply"), &scene.cloud)?;
    write_json(&dir.join("camera.json"), &scene.camera)?;
    let mut masks = Vec::with_capacity(scene.masks.len());
    for (i, m) in scene.masks.iter().enumerate() {
        let rel = format!("masks/{i:03}.pgm");
        write_mask(&dir.join(&rel), m)?;
        masks.push(rel);
    }
    let file = SceneFile {
        id: scene.id.clone(),
        cloud: "cloud.ply".into(),
        camera: "camera.json".into(),
        masks,
    };
    let path = dir.join("scene.json");
    write_json(&path, &file)?;
    Ok(path)
}
