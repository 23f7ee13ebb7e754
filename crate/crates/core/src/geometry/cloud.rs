use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// An unordered set of 3D points with finite coordinates. Never empty.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        centroid(&self.points)
    }

    /// Length of the axis-aligned bounding box diagonal.
    pub fn bbox_diagonal(&self) -> f64 {
        bbox_diagonal(&self.points)
    }

    /// Parses the ASCII XYZ format: one `x y z` triple per line, `#` comments
    /// and blank lines ignored.
    pub fn parse_xyz(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut coords = [0.0; 3];
            let mut fields = line.split_whitespace();
            for c in coords.iter_mut() {
                let field = fields
                    .next()
                    .ok_or_else(|| Error::parse(format!("xyz line {}", lineno + 1), "expected three fields"))?;
                *c = field
                    .parse()
                    .map_err(|e| Error::parse(format!("xyz line {}", lineno + 1), format!("{field:?}: {e}")))?;
            }
            if fields.next().is_some() {
                return Err(Error::parse(format!("xyz line {}", lineno + 1), "expected exactly three fields"));
            }
            points.push(Vec3::from(coords));
        }
        Self::new(points)
    }

    pub fn read_xyz(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_xyz(&text)
    }

    pub fn write_xyz(&self, path: impl AsRef<Path>) -> Result<()> {
        write_xyz(path, &self.points)
    }
}

impl std::ops::Deref for PointCloud {
    type Target = [Vec3];

    fn deref(&self) -> &[Vec3] {
        &self.points
    }
}

/// Formats points as XYZ text. Uses the shortest decimal representation that
/// round-trips exactly.
pub fn format_xyz(points: &[Vec3]) -> String {
    let mut out = String::with_capacity(points.len() * 48);
    for p in points {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    out
}

pub fn write_xyz(path: impl AsRef<Path>, points: &[Vec3]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_xyz(points)).map_err(|e| Error::io(path, e))
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    let sum: Vec3 = points.iter().sum();
    sum / points.len().max(1) as f64
}

pub fn bbox(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

pub fn bbox_diagonal(points: &[Vec3]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let (lo, hi) = bbox(points);
    (hi - lo).norm()
}

/// Proper rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    /// Validates orthonormality (within 1e-9) and a positive determinant.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > 1e-9 || rotation.determinant() <= 0.0 {
            return Err(Error::invalid("rotation must be orthonormal with determinant +1"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_axis_angle(axis_angle: Vec3, translation: Vec3) -> Self {
        Self { rotation: *Rotation3::new(axis_angle).matrix(), translation }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_all(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|p| self.apply(p)).collect()
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

/// Maps a raw cloud into the canonical frame and back:
/// `normalized = (raw - centroid) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub centroid: [f64; 3],
    pub scale: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Self { centroid: [0.0; 3], scale: 1.0 }
    }

    pub fn centroid(&self) -> Vec3 {
        Vec3::from(self.centroid)
    }

    pub fn forward(&self, p: &Vec3) -> Vec3 {
        (p - self.centroid()) / self.scale
    }

    pub fn inverse(&self, p: &Vec3) -> Vec3 {
        p * self.scale + self.centroid()
    }

    pub fn forward_all(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|p| self.forward(p)).collect()
    }

    pub fn inverse_all(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|p| self.inverse(p)).collect()
    }
}

/// Centers the cloud at its centroid and scales its bounding-box diagonal to 1.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<(PointCloud, Normalization)> {
    let diag = cloud.bbox_diagonal();
    if !(diag > 1e-12) {
        return Err(Error::invalid("cannot normalize a cloud with zero bounding diagonal"));
    }
    let record = Normalization { centroid: cloud.centroid().into(), scale: diag };
    let points = record.forward_all(cloud.points());
    Ok((PointCloud { points }, record))
}
