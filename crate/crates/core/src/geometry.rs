//! Rotation representations, the pinhole camera, and translation recovery
//! from a projective centre plus a distance along the optical axis.
//!
//! Conventions: right-handed camera frame with +z pointing forward, pixel
//! origin at the top-left corner of the image, translations in metres.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when validating `RᵀR = I` and `det R = 1`.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Norm below which a Gram–Schmidt intermediate is treated as degenerate.
pub const DEGENERACY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate 6D rotation input: {0}")]
    DegenerateInput(&'static str),
    #[error("distance along the optical axis must be positive, got {0}")]
    InvalidDistance(f64),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("matrix is not a rotation (orthonormality error {orthonormality:.3e}, det {det:.6})")]
    NotARotation { orthonormality: f64, det: f64 },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// An element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates orthonormality and handedness.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let orthonormality = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if !orthonormality.is_finite()
            || orthonormality > ROTATION_TOLERANCE
            || (det - 1.0).abs() > ROTATION_TOLERANCE
        {
            return Err(GeometryError::NotARotation { orthonormality, det });
        }
        Ok(Self(m))
    }

    /// Builds a rotation from 9 entries in row-major order.
    pub fn from_row_major(r: &[f64; 9]) -> Result<Self, GeometryError> {
        Self::from_matrix(Matrix3::from_row_slice(r))
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn about_axis(axis: Vector3<f64>, angle: f64) -> Self {
        let q = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self(q.to_rotation_matrix().into_inner())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self(self.0 * other.0)
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.0 * x
    }

    /// Geodesic angle (radians) between two rotations.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        let rel = self.0.transpose() * other.0;
        ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Largest absolute deviation of `RᵀR` from the identity, and `|det R - 1|`.
    pub fn invariant_errors(&self) -> (f64, f64) {
        let m = &self.0;
        (
            (m.transpose() * m - Matrix3::identity()).abs().max(),
            (m.determinant() - 1.0).abs(),
        )
    }
}

impl TryFrom<[f64; 9]> for Rotation {
    type Error = GeometryError;
    fn try_from(r: [f64; 9]) -> Result<Self, Self::Error> {
        Rotation::from_row_major(&r)
    }
}

impl From<Rotation> for [f64; 9] {
    fn from(r: Rotation) -> Self {
        r.to_row_major()
    }
}

/// First two columns of a rotation matrix, stacked column after column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation6D(pub [f64; 6]);

impl Rotation6D {
    pub fn columns(&self) -> (Vector3<f64>, Vector3<f64>) {
        let r = &self.0;
        (
            Vector3::new(r[0], r[1], r[2]),
            Vector3::new(r[3], r[4], r[5]),
        )
    }
}

/// Object translation in the camera frame, metres. `z` is strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Translation(Vector3<f64>);

impl Translation {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        if !(z > 0.0) || !x.is_finite() || !y.is_finite() || !z.is_finite() {
            return Err(GeometryError::InvalidDistance(z));
        }
        Ok(Self(Vector3::new(x, y, z)))
    }

    pub fn from_vector(v: Vector3<f64>) -> Result<Self, GeometryError> {
        Self::new(v.x, v.y, v.z)
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }

    pub fn z(&self) -> f64 {
        self.0.z
    }
}

impl TryFrom<[f64; 3]> for Translation {
    type Error = GeometryError;
    fn try_from(t: [f64; 3]) -> Result<Self, Self::Error> {
        Translation::new(t[0], t[1], t[2])
    }
}

impl From<Translation> for [f64; 3] {
    fn from(t: Translation) -> Self {
        [t.0.x, t.0.y, t.0.z]
    }
}

/// Rigid object-to-camera transform `x ↦ R x + T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Translation,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Translation) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * x + self.translation.vector()
    }
}

/// Pinhole intrinsics in pixels, plus the image size they apply to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub px: f64,
    pub py: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        px: f64,
        py: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            px,
            py,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.px >= 0.0 && self.px < self.width as f64)
            || !(self.py >= 0.0 && self.py < self.height as f64)
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.px, self.py, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Projects a camera-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if !(p.z > 0.0) {
            return Err(GeometryError::BehindCamera(p.z));
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.px,
            self.fy * p.y / p.z + self.py,
        ))
    }

    /// Row-major 3×3 camera matrix.
    pub fn matrix_row_major(&self) -> [f64; 9] {
        [
            self.fx, 0.0, self.px, 0.0, self.fy, self.py, 0.0, 0.0, 1.0,
        ]
    }
}

/// Pixel projection of the object origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectiveCentre {
    pub cx: f64,
    pub cy: f64,
}

impl ProjectiveCentre {
    pub fn new(cx: f64, cy: f64) -> Self {
        Self { cx, cy }
    }

    /// The projective centre of a translation: where the object origin lands.
    pub fn of_translation(t: &Translation, k: &CameraIntrinsics) -> Self {
        let v = t.vector();
        Self {
            cx: k.fx * v.x / v.z + k.px,
            cy: k.fy * v.y / v.z + k.py,
        }
    }

    pub fn distance_to(&self, other: &ProjectiveCentre) -> f64 {
        ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt()
    }
}

pub fn rotation_to_6d(r: &Rotation) -> Rotation6D {
    let m = r.matrix();
    Rotation6D([
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ])
}

/// Maps a 6D representation onto SO(3) by Gram–Schmidt on its two columns.
pub fn gram_schmidt_6d(r: &Rotation6D) -> Result<Rotation, GeometryError> {
    if r.0.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::DegenerateInput("non-finite entry"));
    }
    let (a1, a2) = r.columns();
    let n1 = a1.norm();
    if n1 < DEGENERACY_TOLERANCE {
        return Err(GeometryError::DegenerateInput("first column is zero"));
    }
    let c1 = a1 / n1;
    let residual = a2 - c1 * c1.dot(&a2);
    let n2 = residual.norm();
    if n2 < DEGENERACY_TOLERANCE {
        return Err(GeometryError::DegenerateInput(
            "second column is parallel to the first",
        ));
    }
    let c2 = residual / n2;
    let c3 = c1.cross(&c2);
    Ok(Rotation(Matrix3::from_columns(&[c1, c2, c3])))
}

/// Recovers `T` from the projective centre and the distance `Tz`.
pub fn backproject_centre(
    c: &ProjectiveCentre,
    tz: f64,
    k: &CameraIntrinsics,
) -> Result<Translation, GeometryError> {
    if !(tz > 0.0) || !tz.is_finite() {
        return Err(GeometryError::InvalidDistance(tz));
    }
    Translation::new((c.cx - k.px) * tz / k.fx, (c.cy - k.py) * tz / k.fy, tz)
}

/// Projects an object-frame point through `pose` and `k`.
pub fn project_point(
    x: &Vector3<f64>,
    pose: &Pose,
    k: &CameraIntrinsics,
) -> Result<Vector2<f64>, GeometryError> {
    k.project(&pose.transform(x))
}

/// Haar-uniform rotation from a seed.
pub fn random_rotation(seed: u64) -> Rotation {
    random_rotation_with(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Haar measure conditioned on a rotation angle of at most `max_angle`
/// radians. The angle is drawn from its marginal density `(1 - cos θ) / π`
/// by inverting the CDF, and the axis uniformly on the sphere. Falls back to
/// the unrestricted sampler for `max_angle >= π`.
pub fn random_rotation_within<R: Rng + ?Sized>(rng: &mut R, max_angle: f64) -> Rotation {
    use std::f64::consts::PI;
    if max_angle >= PI {
        return random_rotation_with(rng);
    }
    let max_angle = max_angle.max(0.0);
    let cdf = |t: f64| t - t.sin();
    let target = rng.gen::<f64>() * cdf(max_angle);
    let (mut lo, mut hi) = (0.0, max_angle);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Rotation::about_axis(Vector3::new(r * phi.cos(), r * phi.sin(), z), 0.5 * (lo + hi))
}

/// Haar-uniform rotation via unit-quaternion sampling (Shoemake).
pub fn random_rotation_with<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    let u3: f64 = rng.gen();
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = nalgebra::Quaternion::new(
        b * (tau * u3).cos(),
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
    );
    let q = UnitQuaternion::from_quaternion(q);
    Rotation(q.to_rotation_matrix().into_inner())
}
