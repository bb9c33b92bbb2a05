//! Absolute pose from 2D-3D correspondences on the sphere.
//!
//! The minimal solver is Grunert's P3P formulated on inter-ray angles, so it
//! applies to bearing vectors of any field of view: the three depth
//! equations are reduced to a quartic whose coefficients are recovered by
//! exact polynomial interpolation, depths are polished by a few Gauss-Newton
//! steps, and the pose follows from absolute orientation (Kabsch). A seeded
//! RANSAC loop scores candidates by angular residual and the winner is
//! refined by Levenberg-Marquardt on the summed squared angles.

use nalgebra::{Matrix4, SMatrix, SVector};
use thiserror::Error;

use crate::geom::{
    angular_residual, orthonormalize, project_point, skew, so3_exp, Bearing, Mat3, Pose, Vec3,
};
use crate::rng::Stream;

#[derive(Debug, Error)]
pub enum ResectionError {
    #[error("need at least 4 correspondences, got {0}")]
    Insufficient(usize),
    #[error("registration rejected: best consensus {inliers} below minimum {min_inliers}")]
    Rejected { inliers: usize, min_inliers: usize },
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
}

/// Quartic roots via the companion-matrix eigenvalues. Returns real roots.
fn quartic_roots(coeffs: &[f64; 5]) -> Vec<f64> {
    let a4 = coeffs[4];
    if a4.abs() < 1e-14 * coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs())) {
        // Degenerate leading coefficient: fall back to the cubic/quadratic.
        let mut c = [coeffs[0], coeffs[1], coeffs[2], coeffs[3], 0.0];
        c[4] = 0.0;
        return cubic_roots(&[c[0], c[1], c[2], c[3]]);
    }
    let m = Matrix4::new(
        0.0, 0.0, 0.0, -coeffs[0] / a4,
        1.0, 0.0, 0.0, -coeffs[1] / a4,
        0.0, 1.0, 0.0, -coeffs[2] / a4,
        0.0, 0.0, 1.0, -coeffs[3] / a4,
    );
    m.complex_eigenvalues()
        .iter()
        .filter(|e| e.im.abs() < 1e-8 * (1.0 + e.re.abs()))
        .map(|e| e.re)
        .collect()
}

fn cubic_roots(coeffs: &[f64; 4]) -> Vec<f64> {
    let a3 = coeffs[3];
    if a3.abs() < 1e-14 {
        let (c, b, a) = (coeffs[0], coeffs[1], coeffs[2]);
        if a.abs() < 1e-14 {
            if b.abs() < 1e-14 {
                return Vec::new();
            }
            return vec![-c / b];
        }
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return Vec::new();
        }
        let s = disc.sqrt();
        return vec![(-b + s) / (2.0 * a), (-b - s) / (2.0 * a)];
    }
    let m = nalgebra::Matrix3::new(
        0.0, 0.0, -coeffs[0] / a3,
        1.0, 0.0, -coeffs[1] / a3,
        0.0, 1.0, -coeffs[2] / a3,
    );
    m.complex_eigenvalues()
        .iter()
        .filter(|e| e.im.abs() < 1e-8 * (1.0 + e.re.abs()))
        .map(|e| e.re)
        .collect()
}

/// Fits the degree-4 coefficients of a function known to be a quartic by
/// evaluating it at 5 nodes. Avoids hand-expanded algebra.
fn quartic_from_samples(f: impl Fn(f64) -> f64) -> [f64; 5] {
    let nodes = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let mut vand = SMatrix::<f64, 5, 5>::zeros();
    let mut rhs = SVector::<f64, 5>::zeros();
    for (i, &x) in nodes.iter().enumerate() {
        let mut p = 1.0;
        for j in 0..5 {
            vand[(i, j)] = p;
            p *= x;
        }
        rhs[i] = f(x);
    }
    let sol = vand.lu().solve(&rhs).expect("fixed Vandermonde is invertible");
    [sol[0], sol[1], sol[2], sol[3], sol[4]]
}

/// Gauss-Newton polish of the three Grunert depth equations.
fn polish_depths(s: &mut [f64; 3], cos: &[f64; 3], sq: &[f64; 3]) {
    // cos = [cos α(2,3), cos β(1,3), cos γ(1,2)], sq = [a², b², c²].
    for _ in 0..3 {
        let g = SVector::<f64, 3>::new(
            s[1] * s[1] + s[2] * s[2] - 2.0 * s[1] * s[2] * cos[0] - sq[0],
            s[0] * s[0] + s[2] * s[2] - 2.0 * s[0] * s[2] * cos[1] - sq[1],
            s[0] * s[0] + s[1] * s[1] - 2.0 * s[0] * s[1] * cos[2] - sq[2],
        );
        let j = SMatrix::<f64, 3, 3>::new(
            0.0,
            2.0 * s[1] - 2.0 * s[2] * cos[0],
            2.0 * s[2] - 2.0 * s[1] * cos[0],
            2.0 * s[0] - 2.0 * s[2] * cos[1],
            0.0,
            2.0 * s[2] - 2.0 * s[0] * cos[1],
            2.0 * s[0] - 2.0 * s[1] * cos[2],
            2.0 * s[1] - 2.0 * s[0] * cos[2],
            0.0,
        );
        let Some(delta) = j.lu().solve(&g) else { return };
        s[0] -= delta[0];
        s[1] -= delta[1];
        s[2] -= delta[2];
    }
}

/// Absolute orientation: the rigid transform with `R X_i + t ≈ Y_i`.
fn kabsch(world: &[Vec3; 3], camera: &[Vec3; 3]) -> Option<Pose> {
    let xm = (world[0] + world[1] + world[2]) / 3.0;
    let ym = (camera[0] + camera[1] + camera[2]) / 3.0;
    let mut h = Mat3::zeros();
    for i in 0..3 {
        h += (world[i] - xm) * (camera[i] - ym).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let v = v_t.transpose();
    let mut d = Mat3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    Some(Pose::from_parts(orthonormalize(&r), ym - orthonormalize(&r) * xm))
}

/// Grunert P3P: up to four world-to-camera poses mapping three world points
/// onto three observed bearings.
pub fn p3p_candidates(world: &[Vec3; 3], bearings: &[Bearing; 3]) -> Vec<Pose> {
    let side = |i: usize, j: usize| (world[i] - world[j]).norm();
    let (a, b, c) = (side(1, 2), side(0, 2), side(0, 1));
    if a < 1e-12 || b < 1e-12 || c < 1e-12 {
        return Vec::new();
    }
    // Collinear world points are degenerate for absolute orientation.
    if (world[1] - world[0]).cross(&(world[2] - world[0])).norm() < 1e-12 * b * c {
        return Vec::new();
    }
    let cos_a = bearings[1].dot(&bearings[2]);
    let cos_b = bearings[0].dot(&bearings[2]);
    let cos_g = bearings[0].dot(&bearings[1]);

    let (a2, b2, c2) = (a * a, b * b, c * c);
    let q = |v: f64| 1.0 + v * v - 2.0 * v * cos_b;
    let n = |v: f64| 1.0 - v * v + q(v) * (a2 - c2) / b2;
    let d = |v: f64| 2.0 * (cos_g - v * cos_a);
    // (ii)·D²: quartic in v = s3/s1.
    let poly = |v: f64| {
        let nn = n(v);
        let dd = d(v);
        nn * nn - 2.0 * cos_g * nn * dd + (1.0 - (c2 / b2) * q(v)) * dd * dd
    };
    let coeffs = quartic_from_samples(poly);

    let mut poses = Vec::new();
    for v in quartic_roots(&coeffs) {
        if !(v > 0.0) {
            continue;
        }
        let qv = q(v);
        if !(qv > 0.0) {
            continue;
        }
        let dd = d(v);
        let u = if dd.abs() > 1e-10 {
            n(v) / dd
        } else {
            continue;
        };
        if !(u > 0.0) {
            continue;
        }
        let s1 = b / qv.sqrt();
        let mut depths = [s1, u * s1, v * s1];
        polish_depths(&mut depths, &[cos_a, cos_b, cos_g], &[a2, b2, c2]);
        if depths.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            continue;
        }
        let camera = [
            *bearings[0].as_vec() * depths[0],
            *bearings[1].as_vec() * depths[1],
            *bearings[2].as_vec() * depths[2],
        ];
        if let Some(pose) = kabsch(world, &camera) {
            poses.push(pose);
        }
    }
    poses
}

#[derive(Debug, Clone, Copy)]
pub struct ResectionParams {
    pub threshold_rad: f64,
    pub max_iters: usize,
    pub confidence: f64,
    pub min_inliers: usize,
}

impl Default for ResectionParams {
    fn default() -> Self {
        ResectionParams {
            threshold_rad: 0.01,
            max_iters: 10_000,
            confidence: 0.9999,
            min_inliers: 12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResectionResult {
    pub pose: Pose,
    pub inlier_mask: Vec<bool>,
    /// Angular residual (radians) per correspondence under the final pose.
    pub residuals: Vec<f64>,
}

fn score_pose(pose: &Pose, corrs: &[(Bearing, Vec3)], threshold: f64) -> (usize, f64, Vec<bool>, Vec<f64>) {
    let mut mask = vec![false; corrs.len()];
    let mut residuals = vec![std::f64::consts::PI; corrs.len()];
    let mut count = 0;
    let mut sum = 0.0;
    for (i, (u, x)) in corrs.iter().enumerate() {
        if let Ok(proj) = project_point(x, pose) {
            let r = angular_residual(u, &proj);
            residuals[i] = r;
            if r < threshold {
                mask[i] = true;
                count += 1;
                sum += r;
            }
        }
    }
    (count, sum, mask, residuals)
}

/// LM refinement of a pose over the summed squared angular residuals.
///
/// The Jacobian row of the angle `acos(u·Π)` is `-û_tᵀ·JΠ` with `û_t` the
/// unit tangential part of `u` at `Π`; at zero residual the row vanishes,
/// which is the correct subgradient for the squared objective.
pub fn refine_pose(pose: &Pose, corrs: &[(Bearing, Vec3)]) -> Pose {
    let mut cur = *pose;
    let mut lambda = 1e-6;
    let cost_of = |p: &Pose| -> f64 {
        corrs
            .iter()
            .map(|(u, x)| match project_point(x, p) {
                Ok(proj) => angular_residual(u, &proj).powi(2),
                Err(_) => std::f64::consts::PI * std::f64::consts::PI,
            })
            .sum()
    };
    let mut cost = cost_of(&cur);
    for _ in 0..30 {
        let mut jtj = SMatrix::<f64, 6, 6>::zeros();
        let mut jtr = SVector::<f64, 6>::zeros();
        for (u, x) in corrs {
            let p = cur.transform(x);
            let n = p.norm();
            if n <= crate::geom::EPS_CENTER {
                continue;
            }
            let pi = p / n;
            let r = angular_residual(u, &Bearing::new(pi).unwrap());
            let tang = u.as_vec() - pi * u.as_vec().dot(&pi);
            let tn = tang.norm();
            if tn < 1e-12 {
                continue;
            }
            let d_pi = (Mat3::identity() - pi * pi.transpose()) / n;
            let mut row = SVector::<f64, 6>::zeros();
            let g_rot = -(tang / tn).transpose() * d_pi * (-skew(&(p - cur.translation)));
            let g_t = -(tang / tn).transpose() * d_pi;
            for k in 0..3 {
                row[k] = g_rot[k];
                row[3 + k] = g_t[k];
            }
            jtj += row * row.transpose();
            jtr += row * r;
        }
        let mut stepped = false;
        for _try in 0..8 {
            let mut damped = jtj;
            for k in 0..6 {
                damped[(k, k)] = jtj[(k, k)] * (1.0 + lambda) + 1e-15;
            }
            let Some(delta) = damped.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let dth = Vec3::new(delta[0], delta[1], delta[2]);
            let dt = Vec3::new(delta[3], delta[4], delta[5]);
            let trial = Pose::from_parts(
                orthonormalize(&(so3_exp(&dth) * cur.rotation)),
                cur.translation + dt,
            );
            let trial_cost = cost_of(&trial);
            if trial_cost < cost {
                cur = trial;
                let drop = cost - trial_cost;
                cost = trial_cost;
                lambda = (lambda / 10.0).max(1e-12);
                stepped = true;
                if drop < 1e-16 * cost.max(1e-30) {
                    return cur;
                }
                break;
            }
            lambda = (lambda * 10.0).min(1e8);
        }
        if !stepped {
            break;
        }
    }
    cur
}

/// P3P inside RANSAC with an angular threshold, followed by LM refinement
/// on the consensus set. Deterministic given the stream.
pub fn register_ransac(
    corrs: &[(Bearing, Vec3)],
    params: &ResectionParams,
    stream: Stream,
) -> Result<ResectionResult, ResectionError> {
    let n = corrs.len();
    if n < 4 {
        return Err(ResectionError::Insufficient(n));
    }
    let mut rng = stream;
    let mut best: Option<(usize, f64, usize, Pose, Vec<bool>)> = None;
    let mut target = params.max_iters;
    let mut iter = 0usize;
    while iter < target {
        let sample = rng.sample_indices(n, 3);
        let world = [corrs[sample[0]].1, corrs[sample[1]].1, corrs[sample[2]].1];
        let bearings = [corrs[sample[0]].0, corrs[sample[1]].0, corrs[sample[2]].0];
        for pose in p3p_candidates(&world, &bearings) {
            let (count, sum, mask, _res) = score_pose(&pose, corrs, params.threshold_rad);
            let is_better = match &best {
                None => count > 0,
                Some((bc, bs, bi, _, _)) => {
                    (count, -sum, -(iter as f64)) > (*bc, -*bs, -(*bi as f64))
                }
            };
            if is_better {
                best = Some((count, sum, iter, pose, mask));
                let w = count as f64 / n as f64;
                let p_all = w.powi(3);
                target = if p_all >= 1.0 - 1e-12 {
                    1
                } else if p_all <= 1e-12 {
                    params.max_iters
                } else {
                    let t = ((1.0 - params.confidence).ln() / (1.0 - p_all).ln()).ceil();
                    (t as usize).clamp(1, params.max_iters)
                };
            }
        }
        iter += 1;
    }
    let (count, _, _, pose, mask) = best.ok_or(ResectionError::Degenerate("no P3P solution"))?;
    if count < params.min_inliers.min(n) {
        return Err(ResectionError::Rejected {
            inliers: count,
            min_inliers: params.min_inliers,
        });
    }
    let inliers: Vec<(Bearing, Vec3)> = corrs
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(c, _)| *c)
        .collect();
    let refined = refine_pose(&pose, &inliers);
    let (count, _, mask, residuals) = score_pose(&refined, corrs, params.threshold_rad);
    if count < params.min_inliers.min(n) {
        return Err(ResectionError::Rejected {
            inliers: count,
            min_inliers: params.min_inliers,
        });
    }
    Ok(ResectionResult {
        pose: refined,
        inlier_mask: mask,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::rotation_angle;
    use crate::rng::tag;
    use crate::synth::{generate_scene, SceneSpec};

    fn scene_2d3d(seed: u64, n_points: usize) -> (Vec<(Bearing, Vec3)>, Pose) {
        let scene = generate_scene(&SceneSpec {
            n_cams: 2,
            n_points,
            room: (8.0, 6.0, 3.0),
            seed,
        })
        .unwrap();
        let pose = scene.poses[1];
        let corrs = scene
            .points
            .iter()
            .map(|x| (project_point(x, &pose).unwrap(), *x))
            .collect();
        (corrs, pose)
    }

    #[test]
    fn p3p_contains_ground_truth() {
        for seed in 0..10 {
            let (corrs, pose) = scene_2d3d(seed, 8);
            let world = [corrs[0].1, corrs[1].1, corrs[2].1];
            let bearings = [corrs[0].0, corrs[1].0, corrs[2].0];
            let cands = p3p_candidates(&world, &bearings);
            assert!(!cands.is_empty(), "seed {seed}: no candidates");
            let hit = cands.iter().any(|c| {
                rotation_angle(&(c.rotation * pose.rotation.transpose())) < 1e-6
                    && (c.translation - pose.translation).norm() < 1e-6
            });
            assert!(hit, "seed {seed}: ground truth not among candidates");
        }
    }

    #[test]
    fn register_noiseless_is_exact() {
        let (corrs, pose) = scene_2d3d(50, 40);
        let res = register_ransac(
            &corrs,
            &ResectionParams::default(),
            Stream::root(1).derive(&[tag::RANSAC, 3]),
        )
        .unwrap();
        assert!(res.inlier_mask.iter().all(|&b| b));
        assert!(rotation_angle(&(res.pose.rotation * pose.rotation.transpose())) < 1e-6);
        assert!((res.pose.translation - pose.translation).norm() < 1e-6);
    }

    #[test]
    fn too_few_correspondences() {
        let (corrs, _) = scene_2d3d(51, 8);
        assert!(matches!(
            register_ransac(&corrs[..3], &ResectionParams::default(), Stream::root(0)),
            Err(ResectionError::Insufficient(3))
        ));
    }

    #[test]
    fn half_outliers_exact_mask() {
        let (mut corrs, pose) = scene_2d3d(52, 60);
        // Corrupt half the bearings deterministically.
        let mut s = Stream::root(9).derive(&[tag::RANSAC, 4]);
        let mut expect = vec![true; corrs.len()];
        for i in 0..30 {
            let z = 1.0 - 2.0 * s.next_f64();
            let a = std::f64::consts::TAU * s.next_f64();
            let rad = (1.0 - z * z).max(0.0).sqrt();
            let dir = Vec3::new(rad * a.cos(), z, rad * a.sin());
            // Reject corruptions that land within 3x threshold of the truth.
            let true_u = corrs[i].0;
            if crate::geom::angle_between(&dir, true_u.as_vec()) < 0.03 {
                continue;
            }
            corrs[i].0 = Bearing::new(dir).unwrap();
            expect[i] = false;
        }
        let res = register_ransac(
            &corrs,
            &ResectionParams::default(),
            Stream::root(2).derive(&[tag::RANSAC, 5]),
        )
        .unwrap();
        assert_eq!(res.inlier_mask, expect);
        assert!(rotation_angle(&(res.pose.rotation * pose.rotation.transpose())) < 1e-6);
        assert!((res.pose.translation - pose.translation).norm() < 1e-6);
    }

    #[test]
    fn collinear_points_yield_no_candidates() {
        let world = [
            Vec3::new(0.0, 0.0, 2.0),
            Vec3::new(0.5, 0.0, 2.0),
            Vec3::new(1.0, 0.0, 2.0),
        ];
        let bearings = [
            Bearing::from_dir(world[0]).unwrap(),
            Bearing::from_dir(world[1]).unwrap(),
            Bearing::from_dir(world[2]).unwrap(),
        ];
        assert!(p3p_candidates(&world, &bearings).is_empty());
    }
}
