//! Rigid-body algebra, pinhole projection and depth back-projection.
//!
//! Camera frames follow the KITTI convention: `x` right, `y` down, `z` forward.
//! A pose `T_{a->b}` maps point coordinates expressed in frame `a` into frame
//! `b`, so `compose(a, b)` applies `b` first and then `a`.

use nalgebra::{Matrix3, Matrix4, Point2, Vector3, Vector6};
use thiserror::Error;

use crate::raster::{DepthMap, RasterError};

pub type Point3 = nalgebra::Point3<f64>;

/// Tolerance for the orthonormality and determinant checks on rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-9;
/// Drift above which composed rotations are projected back onto SO(3).
pub const REORTHONORMALIZE_DRIFT: f64 = 1e-12;
/// `log` refuses rotations whose angle is within this margin of pi.
pub const LOG_ANGLE_MARGIN: f64 = 1e-6;
/// Transformed depths at or below this are treated as behind the camera.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("matrix is not a rotation (orthonormality drift {drift:.3e}, det {det})")]
    NotARotation { drift: f64, det: f64 },
    #[error("non-finite pose component")]
    NonFinitePose,
    #[error("rotation angle {angle} is outside the log chart (must be < pi - {LOG_ANGLE_MARGIN})")]
    OutOfChart { angle: f64 },
    #[error("depth {0} is not finite and positive")]
    InvalidDepth(f64),
    #[error("point is behind the camera after transform (z = {0})")]
    BehindCamera(f64),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Pinhole intrinsics: focal lengths and principal point in pixels, plus the
/// image size they refer to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub f_u: f64,
    pub f_v: f64,
    pub c_u: f64,
    pub c_v: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        f_u: f64,
        f_v: f64,
        c_u: f64,
        c_v: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(f_u.is_finite() && f_u > 0.0 && f_v.is_finite() && f_v > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be finite and positive (f_u={f_u}, f_v={f_v})"
            )));
        }
        if !(c_u.is_finite() && c_v.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point must be finite".into(),
            ));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "image size must be at least 1x1 (got {width}x{height})"
            )));
        }
        Ok(Self {
            f_u,
            f_v,
            c_u,
            c_v,
            width,
            height,
        })
    }

    /// The 3x3 calibration matrix `K`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.f_u, 0.0, self.c_u, //
            0.0, self.f_v, self.c_v, //
            0.0, 0.0, 1.0,
        )
    }

    /// Intrinsics for the same camera resized to `width x height`: focal
    /// lengths and principal point scale proportionally per axis.
    pub fn resized(&self, width: usize, height: usize) -> Result<Self, GeometryError> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self::new(
            self.f_u * sx,
            self.f_v * sy,
            self.c_u * sx,
            self.c_v * sy,
            width,
            height,
        )
    }

    /// Intrinsics matching a 2x2 box-filtered image (pixel centres preserved).
    pub fn half(&self) -> Self {
        Self {
            f_u: self.f_u / 2.0,
            f_v: self.f_v / 2.0,
            c_u: (self.c_u + 0.5) / 2.0 - 0.5,
            c_v: (self.c_v + 0.5) / 2.0 - 0.5,
            width: (self.width / 2).max(1),
            height: (self.height / 2).max(1),
        }
    }
}

/// Rigid transform stored as a rotation matrix and a translation (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Se3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

fn orthonormality_drift(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

/// Nearest rotation in the Frobenius sense (polar factor of `r`).
fn nearest_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut out = u * v_t;
    if out.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        out = u * v_t;
    }
    out
}

#[inline]
pub(crate) fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -w.z, w.y, //
        w.z, 0.0, -w.x, //
        -w.y, w.x, 0.0,
    )
}

impl Se3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    /// Validates `rotation` against the SO(3) tolerances.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinitePose);
        }
        let drift = orthonormality_drift(&rotation);
        let det = rotation.determinant();
        if drift > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeometryError::NotARotation { drift, det });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Accepts a rotation with drift up to `max_drift` and projects it onto
    /// SO(3). Returns the repaired pose and the drift that was removed.
    pub fn new_repaired(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        max_drift: f64,
    ) -> Result<(Self, f64), GeometryError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinitePose);
        }
        let drift = orthonormality_drift(&rotation);
        let det = rotation.determinant();
        if drift > max_drift || det <= 0.0 {
            return Err(GeometryError::NotARotation { drift, det });
        }
        let rotation = if drift > REORTHONORMALIZE_DRIFT {
            nearest_rotation(&rotation)
        } else {
            rotation
        };
        Ok((
            Self {
                rotation,
                translation,
            },
            drift,
        ))
    }

    /// Rotation about `axis` (normalized internally) by `angle` radians.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let n = axis.norm();
        let w = if n > 0.0 { axis * (angle / n) } else { Vector3::zeros() };
        let mut xi = Vector6::zeros();
        xi.fixed_rows_mut::<3>(3).copy_from(&w);
        let r = Twist(xi).exp().rotation;
        Self {
            rotation: r,
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Exact identity test (no tolerance).
    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }

    /// `a ∘ b`: apply `b`, then `a`.
    pub fn compose(&self, b: &Se3Pose) -> Se3Pose {
        let mut rotation = self.rotation * b.rotation;
        if orthonormality_drift(&rotation) > REORTHONORMALIZE_DRIFT {
            rotation = nearest_rotation(&rotation);
        }
        Se3Pose {
            rotation,
            translation: self.rotation * b.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Se3Pose {
        let rt = self.rotation.transpose();
        Se3Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Rotation angle in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let s = 0.5
            * Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)])
                .norm();
        let c = 0.5 * (r.trace() - 1.0);
        s.atan2(c)
    }

    pub fn log(&self) -> Result<Twist, GeometryError> {
        Twist::log(self)
    }
}

/// Tangent-space coordinates `(v, ω)`: translational part in meters first,
/// rotational part in radians second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn new(v: Vector3<f64>, omega: Vector3<f64>) -> Self {
        let mut xi = Vector6::zeros();
        xi.fixed_rows_mut::<3>(0).copy_from(&v);
        xi.fixed_rows_mut::<3>(3).copy_from(&omega);
        Self(xi)
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        Self(Vector6::from_column_slice(xs))
    }

    pub fn v(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn omega(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    /// Norm with the rotational block scaled by `rot_weight`.
    pub fn weighted_norm(&self, rot_weight: f64) -> f64 {
        (self.v().norm_squared() + rot_weight * rot_weight * self.omega().norm_squared()).sqrt()
    }

    pub fn exp(&self) -> Se3Pose {
        let v = self.v();
        let w = self.omega();
        let theta_sq = w.norm_squared();
        let theta = theta_sq.sqrt();
        // R = I + a W + b W^2, V = I + b W + c W^2
        let (a, b, c) = if theta < 1e-4 {
            let t2 = theta_sq;
            (
                1.0 - t2 / 6.0 + t2 * t2 / 120.0,
                0.5 - t2 / 24.0 + t2 * t2 / 720.0,
                1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            )
        } else {
            let (s, co) = theta.sin_cos();
            (
                s / theta,
                (1.0 - co) / theta_sq,
                (theta - s) / (theta_sq * theta),
            )
        };
        let wx = hat(&w);
        let wx2 = wx * wx;
        let rotation = Matrix3::identity() + wx * a + wx2 * b;
        let jac = Matrix3::identity() + wx * b + wx2 * c;
        Se3Pose {
            rotation,
            translation: jac * v,
        }
    }

    pub fn log(pose: &Se3Pose) -> Result<Twist, GeometryError> {
        let r = &pose.rotation;
        let axis = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        let s = 0.5 * axis.norm();
        let c = 0.5 * (r.trace() - 1.0);
        let theta = s.atan2(c);
        if theta >= std::f64::consts::PI - LOG_ANGLE_MARGIN {
            return Err(GeometryError::OutOfChart { angle: theta });
        }
        let theta_sq = theta * theta;
        // ω = θ / (2 sin θ) · vee(R - Rᵀ)
        let scale = if theta < 1e-4 {
            0.5 + theta_sq / 12.0 + 7.0 * theta_sq * theta_sq / 720.0
        } else {
            theta / (2.0 * theta.sin())
        };
        let w = axis * scale;
        // V⁻¹ = I - W/2 + d W²
        let d = if theta < 1e-4 {
            1.0 / 12.0 + theta_sq / 720.0 + theta_sq * theta_sq / 30240.0
        } else {
            let (st, ct) = theta.sin_cos();
            (1.0 - theta * st / (2.0 * (1.0 - ct))) / theta_sq
        };
        let wx = hat(&w);
        let jac_inv = Matrix3::identity() - wx * 0.5 + wx * wx * d;
        Ok(Twist::new(jac_inv * pose.translation, w))
    }
}

/// Maps target pixel `p_t` with depth `depth` into the source image:
/// `p_s = K · T_{t->s} · D(p_t) · K⁻¹ · p_t`.
///
/// The returned coordinate may fall outside the image; callers mask it. An
/// exactly-identity pose returns `p_t` unchanged.
#[inline]
pub fn project_to_source(
    p_t: Point2<f64>,
    depth: f64,
    pose_t_to_s: &Se3Pose,
    k: &Intrinsics,
) -> Result<Point2<f64>, GeometryError> {
    if !(depth.is_finite() && depth > 0.0) {
        return Err(GeometryError::InvalidDepth(depth));
    }
    match Projector::new(pose_t_to_s, k).project(p_t.x, p_t.y, depth) {
        Ok(p) => Ok(Point2::new(p.0, p.1)),
        Err(z) => Err(GeometryError::BehindCamera(z)),
    }
}

/// Pose and intrinsics unpacked for per-pixel projection in tight loops.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Projector {
    r: [[f64; 3]; 3],
    t: [f64; 3],
    inv_f_u: f64,
    inv_f_v: f64,
    identity: bool,
    k: Intrinsics,
}

impl Projector {
    pub(crate) fn new(pose: &Se3Pose, k: &Intrinsics) -> Self {
        let m = pose.rotation();
        let r = [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ];
        let t = pose.translation();
        Self {
            r,
            t: [t.x, t.y, t.z],
            inv_f_u: 1.0 / k.f_u,
            inv_f_v: 1.0 / k.f_v,
            identity: pose.is_identity(),
            k: *k,
        }
    }

    /// Projects target pixel `(u, v)` at positive depth `z`; `Err` carries the
    /// transformed depth when the point lands behind the camera.
    #[inline(always)]
    pub(crate) fn project(&self, u: f64, v: f64, z: f64) -> Result<(f64, f64), f64> {
        if self.identity {
            return Ok((u, v));
        }
        let k = &self.k;
        // z · (R · K⁻¹ [u v 1]ᵀ) + t
        let rx = (u - k.c_u) * self.inv_f_u;
        let ry = (v - k.c_v) * self.inv_f_v;
        let r = &self.r;
        let qx = z * (r[0][0] * rx + r[0][1] * ry + r[0][2]) + self.t[0];
        let qy = z * (r[1][0] * rx + r[1][1] * ry + r[1][2]) + self.t[1];
        let qz = z * (r[2][0] * rx + r[2][1] * ry + r[2][2]) + self.t[2];
        if qz <= MIN_PROJECTION_DEPTH {
            return Err(qz);
        }
        let inv_z = 1.0 / qz;
        Ok((k.f_u * qx * inv_z + k.c_u, k.f_v * qy * inv_z + k.c_v))
    }
}

/// Perspective projection of a camera-frame point: `K · p / p.z`.
#[inline]
pub fn project(p: &Point3, k: &Intrinsics) -> Result<Point2<f64>, GeometryError> {
    if p.z <= MIN_PROJECTION_DEPTH {
        return Err(GeometryError::BehindCamera(p.z));
    }
    Ok(Point2::new(
        k.f_u * p.x / p.z + k.c_u,
        k.f_v * p.y / p.z + k.c_v,
    ))
}

/// Pinhole back-projection of pixel `(u, v)` at depth `z`:
/// `x = (u - c_u)·z / f_u`, `y = (v - c_v)·z / f_v`.
#[inline]
pub fn backproject(u: f64, v: f64, z: f64, k: &Intrinsics) -> Result<Point3, GeometryError> {
    if !(z.is_finite() && z > 0.0) {
        return Err(GeometryError::InvalidDepth(z));
    }
    Ok(Point3::new(
        (u - k.c_u) * z / k.f_u,
        (v - k.c_v) * z / k.f_v,
        z,
    ))
}

/// Ordered point list with optional per-point reflectance in `[0, 1]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub reflectance: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Back-projects every valid pixel (finite, `0 < z <= max_depth`) of `depth`
/// in row-major order. Returns the cloud and the number of skipped pixels.
pub fn depth_to_pointcloud(
    depth: &DepthMap,
    k: &Intrinsics,
    max_depth: f64,
) -> Result<(PointCloud, usize), GeometryError> {
    crate::raster::check_dims((k.width, k.height), depth.dims())?;
    let w = depth.width();
    let mut points = Vec::with_capacity(depth.data().len());
    for (i, &z) in depth.data().iter().enumerate() {
        if z.is_finite() && z > 0.0 && z <= max_depth {
            let (row, col) = (i / w, i % w);
            points.push(Point3::new(
                (col as f64 - k.c_u) * z / k.f_u,
                (row as f64 - k.c_v) * z / k.f_v,
                z,
            ));
        }
    }
    let skipped = depth.data().len() - points.len();
    Ok((
        PointCloud {
            points,
            reflectance: None,
        },
        skipped,
    ))
}

/// Skip-time consistency residual between two chained relative poses and the
/// direct pose over the same span.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyResidual {
    pub twist: Twist,
    pub magnitude: f64,
}

/// `log(t_skip⁻¹ ∘ t1 ∘ t2)` and its Euclidean norm. Zero exactly when
/// `t1 ∘ t2 == t_skip`.
pub fn pose_consistency_residual(
    t1: &Se3Pose,
    t2: &Se3Pose,
    t_skip: &Se3Pose,
) -> Result<ConsistencyResidual, GeometryError> {
    pose_consistency_residual_weighted(t1, t2, t_skip, 1.0)
}

/// As [`pose_consistency_residual`], scaling the rotational block by
/// `rot_weight` before taking the norm.
pub fn pose_consistency_residual_weighted(
    t1: &Se3Pose,
    t2: &Se3Pose,
    t_skip: &Se3Pose,
    rot_weight: f64,
) -> Result<ConsistencyResidual, GeometryError> {
    let discrepancy = t_skip.inverse().compose(&t1.compose(t2));
    let twist = discrepancy.log()?;
    Ok(ConsistencyResidual {
        twist,
        magnitude: twist.weighted_norm(rot_weight),
    })
}
