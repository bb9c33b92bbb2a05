//! Multiview midpoint triangulation on bearing vectors.
//!
//! The point estimate minimizes the sum of squared perpendicular distances
//! to the observation rays, `Σᵢ ‖(I - uᵢuᵢᵀ)(Rᵢ X + tᵢ)‖²`, which has the
//! closed-form normal equations `(Σ RᵢᵀAᵢRᵢ) X = -Σ RᵢᵀAᵢtᵢ` with
//! `Aᵢ = I - uᵢuᵢᵀ`.

use nalgebra::SymmetricEigen;
use thiserror::Error;

use crate::geom::{angular_residual, project_point, Bearing, Mat3, Pose, Vec3};

/// Why a candidate point was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TriangulationReject {
    #[error("fewer than two observations")]
    TooFewViews,
    #[error("rays nearly parallel; normal matrix singular")]
    LowParallax,
    #[error("triangulation angle below threshold")]
    SmallAngle,
    #[error("negative depth in at least one view")]
    NegativeDepth,
    #[error("angular reprojection above threshold")]
    HighReprojection,
}

/// Acceptance gates applied after the linear solve.
#[derive(Debug, Clone, Copy)]
pub struct TriangulationGates {
    /// Minimum of the maximum pairwise triangulation angle, radians.
    pub min_angle_rad: f64,
    /// Maximum angular reprojection over all views, radians.
    pub max_reproj_rad: f64,
}

impl Default for TriangulationGates {
    fn default() -> Self {
        TriangulationGates {
            min_angle_rad: 1.5f64.to_radians(),
            max_reproj_rad: 0.02,
        }
    }
}

/// An accepted triangulation.
#[derive(Debug, Clone, Copy)]
pub struct TriangulatedPoint {
    pub position: Vec3,
    /// Mean angular reprojection over the supporting views, radians.
    pub mean_reproj_rad: f64,
    /// Largest pairwise triangulation angle, radians.
    pub max_angle_rad: f64,
}

/// Closed-form midpoint solve without acceptance gates.
pub fn midpoint_position(views: &[(&Pose, Bearing)]) -> Result<Vec3, TriangulationReject> {
    if views.len() < 2 {
        return Err(TriangulationReject::TooFewViews);
    }
    let mut m = Mat3::zeros();
    let mut b = Vec3::zeros();
    for (pose, u) in views {
        let a = Mat3::identity() - u.as_vec() * u.as_vec().transpose();
        let rt_a = pose.rotation.transpose() * a;
        m += rt_a * pose.rotation;
        b -= rt_a * pose.translation;
    }
    let eig = SymmetricEigen::new(m);
    let max_ev = eig.eigenvalues.max();
    let min_ev = eig.eigenvalues.min();
    if !(max_ev > 0.0) || min_ev / max_ev < 1e-10 {
        return Err(TriangulationReject::LowParallax);
    }
    // X = Q Λ⁻¹ Qᵀ b
    let qt_b = eig.eigenvectors.transpose() * b;
    let scaled = Vec3::new(
        qt_b.x / eig.eigenvalues[0],
        qt_b.y / eig.eigenvalues[1],
        qt_b.z / eig.eigenvalues[2],
    );
    Ok(eig.eigenvectors * scaled)
}

/// Midpoint solve plus the track acceptance tests: maximum pairwise
/// triangulation angle, positive depth in every view, and bounded angular
/// reprojection.
pub fn triangulate(
    views: &[(&Pose, Bearing)],
    gates: &TriangulationGates,
) -> Result<TriangulatedPoint, TriangulationReject> {
    let x = midpoint_position(views)?;

    let mut max_angle: f64 = 0.0;
    let centers: Vec<Vec3> = views.iter().map(|(p, _)| p.center()).collect();
    for i in 0..centers.len() {
        for j in (i + 1)..centers.len() {
            let a = x - centers[i];
            let b = x - centers[j];
            if a.norm() > 0.0 && b.norm() > 0.0 {
                max_angle = max_angle.max(crate::geom::angle_between(&a, &b));
            }
        }
    }
    if max_angle < gates.min_angle_rad {
        return Err(TriangulationReject::SmallAngle);
    }

    let mut reproj_sum = 0.0;
    let mut reproj_max: f64 = 0.0;
    for (pose, u) in views {
        let p = pose.transform(&x);
        if p.dot(u.as_vec()) <= 0.0 {
            return Err(TriangulationReject::NegativeDepth);
        }
        let proj = project_point(&x, pose).map_err(|_| TriangulationReject::NegativeDepth)?;
        let r = angular_residual(u, &proj);
        reproj_sum += r;
        reproj_max = reproj_max.max(r);
    }
    if reproj_max > gates.max_reproj_rad {
        return Err(TriangulationReject::HighReprojection);
    }

    Ok(TriangulatedPoint {
        position: x,
        mean_reproj_rad: reproj_sum / views.len() as f64,
        max_angle_rad: max_angle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    #[test]
    fn exact_two_ray_intersection() {
        let p1 = Pose::identity();
        let p2 = Pose::from_parts(Mat3::identity(), Vec3::new(-1.0, 0.0, 0.0));
        let u1 = Bearing::from_dir(Vector3::new(0.5, 0.0, 1.0)).unwrap();
        let u2 = Bearing::from_dir(Vector3::new(-0.5, 0.0, 1.0)).unwrap();
        let x = midpoint_position(&[(&p1, u1), (&p2, u2)]).unwrap();
        assert_relative_eq!(x, Vec3::new(0.5, 0.0, 1.0), epsilon = 1e-9);

        let pt = triangulate(&[(&p1, u1), (&p2, u2)], &TriangulationGates::default()).unwrap();
        assert_relative_eq!(pt.position, Vec3::new(0.5, 0.0, 1.0), epsilon = 1e-9);
        assert!(pt.mean_reproj_rad < 1e-7);
    }

    #[test]
    fn identical_poses_reject_low_parallax() {
        let p = Pose::identity();
        let u = Bearing::from_dir(Vector3::new(0.1, 0.2, 1.0)).unwrap();
        assert_eq!(
            midpoint_position(&[(&p, u), (&p, u)]),
            Err(TriangulationReject::LowParallax)
        );
    }

    #[test]
    fn too_few_views() {
        let p = Pose::identity();
        let u = Bearing::from_dir(Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(
            midpoint_position(&[(&p, u)]),
            Err(TriangulationReject::TooFewViews)
        );
    }

    #[test]
    fn small_angle_gate() {
        // Long thin baseline, far point: parallax below 1.5 degrees.
        let p1 = Pose::identity();
        let p2 = Pose::from_parts(Mat3::identity(), Vec3::new(-0.01, 0.0, 0.0));
        let x_true = Vec3::new(0.0, 0.0, 10.0);
        let u1 = Bearing::from_dir(x_true).unwrap();
        let u2 = Bearing::from_dir(p2.transform(&x_true)).unwrap();
        assert!(matches!(
            triangulate(&[(&p1, u1), (&p2, u2)], &TriangulationGates::default()),
            Err(TriangulationReject::SmallAngle)
        ));
    }
}
