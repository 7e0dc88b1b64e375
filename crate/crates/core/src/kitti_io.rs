//! Readers and writers for KITTI-style calibration, odometry pose, object
//! label, 16-bit depth PNG and point cloud `.bin` files.
//!
//! Parsers take text or bytes; opening files is left to the caller. Every
//! writer produces output its parser reads back to the same values.

use std::fmt::Write as _;
use std::io::Cursor;

use log::warn;
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::deteval::Box3D;
use crate::geometry::{GeometryError, Intrinsics, PointCloud, Se3Pose};
use crate::mapeval::Trajectory;
use crate::raster::DepthMap;

/// Largest rotation drift a pose file may carry before it is rejected.
pub const MAX_POSE_DRIFT: f64 = 1e-3;

/// Depth units per meter in 16-bit depth PNGs.
pub const DEPTH_SCALE: f64 = 256.0;

/// Deepest value a depth PNG can hold, `65535 / 256` meters.
pub const MAX_PNG_DEPTH: f64 = 65535.0 / DEPTH_SCALE;

#[derive(Debug, Error)]
pub enum KittiError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no projection matrix")]
    NoProjection,
    #[error("key {0} not present")]
    MissingKey(String),
    #[error("line {line}: rotation drift {drift:.3e} exceeds {MAX_POSE_DRIFT:e}")]
    RotationDrift { line: usize, drift: f64 },
    #[error("empty pose file")]
    EmptyPoses,
    #[error("png: {0}")]
    Png(String),
    #[error("depth png must be 16-bit single-channel, got {0}")]
    DepthFormat(String),
    #[error("image dimensions {0}x{1} overflow the PNG size limit")]
    DimensionOverflow(usize, usize),
    #[error("point {0} is not finite")]
    NonFinitePoint(usize),
    #[error("point cloud byte length {0} is not a multiple of 16")]
    BinLength(usize),
    #[error("label cannot become a box: {0}")]
    NotABox(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn parse_f64(token: &str, line: usize) -> Result<f64, KittiError> {
    let v: f64 = token.parse().map_err(|_| KittiError::Parse {
        line,
        message: format!("not a number: {token:?}"),
    })?;
    if !v.is_finite() {
        return Err(KittiError::Parse {
            line,
            message: format!("non-finite value {token:?}"),
        });
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// Calibration

/// Matrices of a calibration file in their original key order. Projection
/// matrices (`P0`..`P3`) hold 12 values; 3x3 entries such as `R0_rect` hold 9.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibFile {
    pub entries: Vec<(String, Vec<f64>)>,
}

impl CalibFile {
    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_slice())
    }

    /// Keys of the 3x4 projection matrices, in file order.
    pub fn projection_keys(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(k, v)| k.starts_with('P') && v.len() == 12)
            .map(|(k, _)| k.as_str())
    }

    /// Intrinsics from projection matrix `key` for an image of the given size.
    pub fn intrinsics(&self, key: &str, width: usize, height: usize) -> Result<Intrinsics, KittiError> {
        let p = self
            .get(key)
            .filter(|p| p.len() == 12)
            .ok_or_else(|| KittiError::MissingKey(key.to_string()))?;
        Ok(Intrinsics::new(p[0], p[5], p[2], p[6], width, height)?)
    }

    /// Intrinsics from `P2` when present, else the first projection matrix.
    pub fn default_intrinsics(&self, width: usize, height: usize) -> Result<Intrinsics, KittiError> {
        let key = if self.get("P2").is_some_and(|p| p.len() == 12) {
            "P2"
        } else {
            self.projection_keys().next().ok_or(KittiError::NoProjection)?
        };
        self.intrinsics(key, width, height)
    }
}

pub fn parse_calib(text: &str) -> Result<CalibFile, KittiError> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (key, values) = raw.split_once(':').ok_or_else(|| KittiError::Parse {
            line,
            message: "expected \"KEY: values\"".into(),
        })?;
        let values = values
            .split_whitespace()
            .map(|t| parse_f64(t, line))
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != 12 && values.len() != 9 {
            return Err(KittiError::Parse {
                line,
                message: format!("{} has {} values, expected 12 (or 9 for a 3x3 matrix)", key.trim(), values.len()),
            });
        }
        entries.push((key.trim().to_string(), values));
    }
    let calib = CalibFile { entries };
    if calib.projection_keys().next().is_none() {
        return Err(KittiError::NoProjection);
    }
    Ok(calib)
}

/// Writes every value in shortest round-trip form.
pub fn write_calib(calib: &CalibFile) -> String {
    let mut out = String::new();
    for (key, values) in &calib.entries {
        out.push_str(key);
        out.push(':');
        for v in values {
            let _ = write!(out, " {v:e}");
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Odometry poses

/// Parses one world-from-camera 3x4 pose per line. Rotations drifting from
/// orthonormal by at most [`MAX_POSE_DRIFT`] are projected back onto SO(3)
/// with a logged warning.
pub fn parse_odometry_poses(text: &str) -> Result<Trajectory, KittiError> {
    let mut poses = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let v = raw
            .split_whitespace()
            .map(|t| parse_f64(t, line))
            .collect::<Result<Vec<_>, _>>()?;
        if v.len() != 12 {
            return Err(KittiError::Parse {
                line,
                message: format!("{} values, expected 12", v.len()),
            });
        }
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let t = Vector3::new(v[3], v[7], v[11]);
        let (pose, drift) = Se3Pose::new_repaired(r, t, MAX_POSE_DRIFT).map_err(|e| match e {
            GeometryError::NotARotation { drift, .. } => KittiError::RotationDrift { line, drift },
            other => KittiError::Geometry(other),
        })?;
        if drift > crate::geometry::ROTATION_TOLERANCE {
            warn!("pose line {line}: re-orthonormalized rotation with drift {drift:.3e}");
        }
        poses.push(pose);
    }
    Trajectory::new(poses).map_err(|_| KittiError::EmptyPoses)
}

pub fn write_odometry_poses(traj: &Trajectory) -> String {
    let mut out = String::new();
    for p in traj.poses() {
        let m = p.to_matrix();
        let values: Vec<String> = (0..3)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| format!("{:e}", m[(r, c)]))
            .collect();
        out.push_str(&values.join(" "));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Object labels

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub class: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    /// Left, top, right, bottom in pixels.
    pub bbox: [f64; 4],
    /// Height, width, length in meters.
    pub dimensions: [f64; 3],
    /// Bottom-center location in camera coordinates (meters).
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl LabelRecord {
    pub fn is_dont_care(&self) -> bool {
        self.class == "DontCare"
    }

    pub fn to_box3d(&self) -> Result<Box3D, KittiError> {
        if self.is_dont_care() {
            return Err(KittiError::NotABox("DontCare region".into()));
        }
        // Detector output files write -1 ("not applicable"); treat it as unknown.
        let occlusion = match self.occlusion {
            -1 => 3,
            o => u8::try_from(o)
                .ok()
                .filter(|o| *o <= 3)
                .ok_or_else(|| KittiError::NotABox(format!("occlusion {o}")))?,
        };
        let pi = std::f64::consts::PI;
        // Labels use [-pi, pi]; boxes use (-pi, pi].
        let yaw = if self.rotation_y == -pi { pi } else { self.rotation_y };
        let b = Box3D::new(&self.class, self.location, self.dimensions, yaw)
            .map_err(|e| KittiError::NotABox(e.to_string()))?
            .with_score(self.score.unwrap_or(1.0))
            .with_difficulty(self.bbox[3] - self.bbox[1], occlusion, self.truncation);
        Ok(b)
    }
}

pub fn parse_labels(text: &str) -> Result<Vec<LabelRecord>, KittiError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 15 && fields.len() != 16 {
            return Err(KittiError::Parse {
                line,
                message: format!("{} fields, expected 15 or 16", fields.len()),
            });
        }
        let num = |j: usize| parse_f64(fields[j], line);
        let occlusion = fields[2].parse::<i32>().map_err(|_| KittiError::Parse {
            line,
            message: format!("occlusion {:?} is not an integer", fields[2]),
        })?;
        out.push(LabelRecord {
            class: fields[0].to_string(),
            truncation: num(1)?,
            occlusion,
            alpha: num(3)?,
            bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
            dimensions: [num(8)?, num(9)?, num(10)?],
            location: [num(11)?, num(12)?, num(13)?],
            rotation_y: num(14)?,
            score: if fields.len() == 16 { Some(num(15)?) } else { None },
        });
    }
    Ok(out)
}

/// One line per record, numbers at 6 decimal places.
pub fn write_labels(records: &[LabelRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = write!(out, "{} {:.6} {} {:.6}", r.class, r.truncation, r.occlusion, r.alpha);
        for v in r.bbox.iter().chain(&r.dimensions).chain(&r.location) {
            let _ = write!(out, " {v:.6}");
        }
        let _ = write!(out, " {:.6}", r.rotation_y);
        if let Some(s) = r.score {
            let _ = write!(out, " {s:.6}");
        }
        out.push('\n');
    }
    out
}

/// Boxes of class `class` (all classes when `None`), skipping `DontCare` rows.
pub fn labels_to_boxes(records: &[LabelRecord], class: Option<&str>) -> Result<Vec<Box3D>, KittiError> {
    records
        .iter()
        .filter(|r| !r.is_dont_care() && class.is_none_or(|c| r.class == c))
        .map(LabelRecord::to_box3d)
        .collect()
}

// ---------------------------------------------------------------------------
// Depth PNG

/// Decodes a 16-bit grayscale PNG; `raw / 256` meters, raw 0 invalid.
pub fn read_depth_png(bytes: &[u8]) -> Result<DepthMap, KittiError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| KittiError::Png(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(KittiError::DepthFormat(format!(
            "{:?} at {:?} bits",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or(KittiError::DimensionOverflow(w, h))?;
    let mut buf = vec![0u8; size];
    reader
        .next_frame(&mut buf)
        .map_err(|e| KittiError::Png(e.to_string()))?;
    let data = buf
        .chunks_exact(2)
        .take(w * h)
        .map(|b| match u16::from_be_bytes([b[0], b[1]]) {
            0 => f64::NAN,
            raw => raw as f64 / DEPTH_SCALE,
        })
        .collect();
    DepthMap::new(w, h, data).map_err(|e| KittiError::Png(e.to_string()))
}

/// Raw 16-bit value for a depth: rounded half up, clamped to `1..=65535`
/// so that every valid depth stays valid; invalid pixels become 0.
pub fn depth_to_raw(depth: f64) -> u16 {
    if depth.is_nan() || depth <= 0.0 {
        return 0;
    }
    (depth * DEPTH_SCALE + 0.5).floor().clamp(1.0, 65535.0) as u16
}

pub fn write_depth_png(depth: &DepthMap) -> Result<Vec<u8>, KittiError> {
    let (w, h) = depth.dims();
    let (w32, h32) = match (u32::try_from(w), u32::try_from(h)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return Err(KittiError::DimensionOverflow(w, h)),
    };
    let raw: Vec<u8> = depth
        .data()
        .iter()
        .flat_map(|&d| depth_to_raw(d).to_be_bytes())
        .collect();
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, w32, h32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Sixteen);
        let mut writer = encoder
            .write_header()
            .map_err(|e| KittiError::Png(e.to_string()))?;
        writer
            .write_image_data(&raw)
            .map_err(|e| KittiError::Png(e.to_string()))?;
        writer.finish().map_err(|e| KittiError::Png(e.to_string()))?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Point clouds

/// Little-endian `f32` quadruples `(x, y, z, reflectance)`, reflectance 1
/// when the cloud has none. With `velodyne_frame` the camera axes are
/// remapped to `x' = z, y' = -x, z' = -y`.
pub fn write_pointcloud_bin(pc: &PointCloud, velodyne_frame: bool) -> Result<Vec<u8>, KittiError> {
    let mut out = Vec::with_capacity(16 * pc.len());
    for (i, p) in pc.points.iter().enumerate() {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(KittiError::NonFinitePoint(i));
        }
        let xyz = if velodyne_frame {
            [p.z, -p.x, -p.y]
        } else {
            [p.x, p.y, p.z]
        };
        let r = pc.reflectance.as_ref().and_then(|r| r.get(i)).copied().unwrap_or(1.0);
        for v in xyz {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&r.to_le_bytes());
    }
    Ok(out)
}

pub fn read_pointcloud_bin(bytes: &[u8]) -> Result<Vec<[f32; 4]>, KittiError> {
    if !bytes.len().is_multiple_of(16) {
        return Err(KittiError::BinLength(bytes.len()));
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |j: usize| f32::from_le_bytes([c[j], c[j + 1], c[j + 2], c[j + 3]]);
            [f(0), f(4), f(8), f(12)]
        })
        .collect())
}
