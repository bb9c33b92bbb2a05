//! Spherical camera geometry.
//!
//! An omnidirectional observation is a unit bearing vector
//! `u = (sin θ cos φ, sin φ, cos θ cos φ)` with longitude `θ ∈ [-π, π]` and
//! latitude `φ ∈ [-π/2, π/2]`. Equirectangular (ERP) pixel columns map
//! linearly to `θ` and rows to `φ`; row 0 is the top of the image
//! (`φ = +π/2`, world up along `+y`), column `W/2` looks along `+z`.
//!
//! Continuous pixel coordinates run over `c ∈ [0, W]`, `r ∈ [0, H]`; the
//! center of integer pixel `i` is `i + 0.5`. `bearing_to_pixel` returns
//! `c ∈ [0, W)` so the `θ = ±π` seam maps to column 0.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("pixel ({0}, {1}) outside image domain {2}x{3}")]
    PixelOutOfRange(f64, f64, u32, u32),
    #[error("vector norm {0} is not unit within 1e-6")]
    NotUnit(f64),
    #[error("ERP dims {0}x{1} invalid: need width = 2*height and width >= 4")]
    BadDims(u32, u32),
    #[error("point projects from the camera center (norm {0:.3e})")]
    ProjectionUndefined(f64),
    #[error("matrix is not a rotation (orthonormality error {0:.3e})")]
    NotRotation(f64),
}

/// Minimum camera-frame norm below which spherical projection is undefined.
pub const EPS_CENTER: f64 = 1e-9;

/// Unit direction on the sphere; the universal observation type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bearing(Vec3);

impl Bearing {
    /// Wraps a vector that is already unit within 1e-6, renormalizing to
    /// machine precision.
    pub fn new(v: Vec3) -> Result<Self, GeomError> {
        let n = v.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(GeomError::NotUnit(n));
        }
        Ok(Bearing(v / n))
    }

    /// Normalizes an arbitrary nonzero vector onto the sphere.
    pub fn from_dir(v: Vec3) -> Result<Self, GeomError> {
        let n = v.norm();
        if n <= EPS_CENTER {
            return Err(GeomError::ProjectionUndefined(n));
        }
        Ok(Bearing(v / n))
    }

    #[inline]
    pub fn as_vec(&self) -> &Vec3 {
        &self.0
    }

    #[inline]
    pub fn dot(&self, other: &Bearing) -> f64 {
        self.0.dot(&other.0)
    }
}

impl std::ops::Deref for Bearing {
    type Target = Vec3;
    fn deref(&self) -> &Vec3 {
        &self.0
    }
}

/// Longitude/latitude pair in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalCoord {
    /// Longitude in `[-π, π]`.
    pub theta: f64,
    /// Latitude in `[-π/2, π/2]`.
    pub phi: f64,
}

impl SphericalCoord {
    pub fn to_bearing(&self) -> Bearing {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        Bearing(Vec3::new(st * cp, sp, ct * cp))
    }

    pub fn from_bearing(u: &Bearing) -> Self {
        let phi = u.y.clamp(-1.0, 1.0).asin();
        let theta = if u.x == 0.0 && u.z == 0.0 {
            0.0
        } else {
            u.x.atan2(u.z)
        };
        SphericalCoord { theta, phi }
    }
}

/// Equirectangular image dimensions; always a full 360°x180° panorama, so
/// `width = 2 * height`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErpDims {
    width: u32,
    height: u32,
}

impl ErpDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeomError> {
        if width < 4 || width != 2 * height {
            return Err(GeomError::BadDims(width, height));
        }
        Ok(ErpDims { width, height })
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.height
    }
}

/// World-to-camera rigid transform: `x_cam = R * x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Validates orthonormality and positive determinant within 1e-9.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeomError> {
        let err = (rotation.transpose() * rotation - Mat3::identity()).norm();
        let det_err = (rotation.determinant() - 1.0).abs();
        if err > 1e-9 || det_err > 1e-9 {
            return Err(GeomError::NotRotation(err.max(det_err)));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    /// Skips validation; for internal use where the inputs are constructed
    /// on the manifold.
    pub fn from_parts(rotation: Mat3, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    #[inline]
    pub fn transform(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// Camera center in world coordinates: `-Rᵀ t`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Relative transform mapping this camera's frame into `other`'s:
    /// `x_other = R_rel x_self + t_rel` with `R_rel = R_o R_sᵀ` and
    /// `t_rel = t_o - R_rel t_s`.
    pub fn relative_to(&self, other: &Pose) -> Pose {
        let r_rel = other.rotation * self.rotation.transpose();
        let t_rel = other.translation - r_rel * self.translation;
        Pose {
            rotation: r_rel,
            translation: t_rel,
        }
    }

    /// Rotation angle + unit translation mismatch against another pose,
    /// in radians; translation compared as a direction.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        rotation_angle(&(self.rotation * other.rotation.transpose()))
    }
}

/// Skew-symmetric cross-product matrix `[w]ₓ`.
pub fn skew(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues exponential map from an axis-angle vector to a rotation.
pub fn so3_exp(w: &Vec3) -> Mat3 {
    let angle = w.norm();
    if angle < 1e-12 {
        return Mat3::identity() + skew(w);
    }
    let k = skew(&(w / angle));
    Mat3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

/// Rotation angle of `r` in `[0, π]`.
///
/// Uses `atan2(‖skew part‖, (tr - 1)/2)`, which stays accurate for tiny
/// angles where the pure-trace form loses ~8 digits to `acos` conditioning.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let v = Vec3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    ) / 2.0;
    v.norm().atan2((r.trace() - 1.0) / 2.0)
}

/// Angle between two nonzero vectors in `[0, π]`, accurate near 0 and π.
pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Projects `r` onto SO(3) (nearest rotation in the Frobenius sense).
pub fn orthonormalize(r: &Mat3) -> Mat3 {
    let svd = r.svd(true, true);
    let u = svd.u.expect("3x3 svd");
    let vt = svd.v_t.expect("3x3 svd");
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// Continuous ERP pixel to bearing vector.
///
/// `θ = 2πc/W - π`, `φ = π/2 - πr/H`.
pub fn pixel_to_bearing(c: f64, r: f64, dims: ErpDims) -> Result<Bearing, GeomError> {
    let (w, h) = (dims.width() as f64, dims.height() as f64);
    if !(0.0..=w).contains(&c) || !(0.0..=h).contains(&r) {
        return Err(GeomError::PixelOutOfRange(c, r, dims.width(), dims.height()));
    }
    let theta = std::f64::consts::TAU * c / w - std::f64::consts::PI;
    let phi = std::f64::consts::FRAC_PI_2 - std::f64::consts::PI * r / h;
    Ok(SphericalCoord { theta, phi }.to_bearing())
}

/// Bearing vector to continuous ERP pixel; inverse of [`pixel_to_bearing`].
///
/// Returns `c ∈ [0, W)`; at the poles (`|u_y| = 1`) the column is 0 by
/// convention.
pub fn bearing_to_pixel(u: &Bearing, dims: ErpDims) -> Result<(f64, f64), GeomError> {
    let n = u.as_vec().norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(GeomError::NotUnit(n));
    }
    let (w, h) = (dims.width() as f64, dims.height() as f64);
    let sc = SphericalCoord::from_bearing(u);
    let r = (std::f64::consts::FRAC_PI_2 - sc.phi) * h / std::f64::consts::PI;
    let mut c = if u.x == 0.0 && u.z == 0.0 {
        0.0
    } else {
        (sc.theta + std::f64::consts::PI) * w / std::f64::consts::TAU
    };
    if c >= w {
        c -= w;
    }
    if c < 0.0 {
        c = 0.0;
    }
    Ok((c, r.clamp(0.0, h)))
}

/// Spherical projection `Π: ℝ³ → S²` of a world point through a pose.
pub fn project_point(x: &Vec3, pose: &Pose) -> Result<Bearing, GeomError> {
    let p = pose.transform(x);
    let n = p.norm();
    if n <= EPS_CENTER {
        return Err(GeomError::ProjectionUndefined(n));
    }
    Ok(Bearing(p / n))
}

/// Angle between two bearings in `[0, π]`.
pub fn angular_residual(u_obs: &Bearing, u_proj: &Bearing) -> f64 {
    u_obs.dot(u_proj).clamp(-1.0, 1.0).acos()
}
