//! Spherical bundle adjustment.
//!
//! Minimizes the sum over observations of `ρ(‖Π(R X + t) - u‖²)` by
//! Levenberg-Marquardt: the residual is the 3-vector chord between the
//! spherical projection and the observed bearing, rotations are updated
//! through 3-parameter tangent increments composed onto the manifold, and
//! the point blocks are eliminated with a Schur complement so the linear
//! solve is only over the free poses.
//!
//! `ρ` is the soft-L1 loss `2(√(1+s) - 1)` at a configurable scale when
//! `robustify` is set (local bundles); global bundles run with the plain
//! squared norm.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Matrix6x3, Vector6};
use thiserror::Error;

use crate::geom::{orthonormalize, skew, so3_exp, Bearing, Mat3, Pose, Vec3, EPS_CENTER};

#[derive(Debug, Error)]
pub enum BAError {
    #[error("initial cost is not finite")]
    NonFiniteCost,
    #[error("no fully fixed pose block; the gauge is free")]
    NoGauge,
    #[error("residual block {0} references pose {1} / point {2} out of range")]
    BadBlockRef(usize, usize, usize),
}

/// One observation: point `point` seen from pose `pose` at bearing
/// `observed`.
#[derive(Debug, Clone, Copy)]
pub struct ResidualBlock {
    pub pose: usize,
    pub point: usize,
    pub observed: Bearing,
}

/// The adjustable problem. Fixed blocks are never written.
#[derive(Debug, Clone)]
pub struct BAProblem {
    pub poses: Vec<Pose>,
    pub pose_fixed: Vec<bool>,
    pub points: Vec<Vec3>,
    pub point_fixed: Vec<bool>,
    pub blocks: Vec<ResidualBlock>,
    pub robustify: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct BAOptions {
    pub max_iters: usize,
    /// Relative cost decrease below which an accepted step terminates.
    pub f_tol: f64,
    /// Infinity norm of the cost gradient below which the solve terminates.
    pub g_tol: f64,
    /// Soft-L1 scale `c`; cost per block is `c²·ρ(s/c²)` when robustified.
    pub robust_scale: f64,
}

impl Default for BAOptions {
    fn default() -> Self {
        BAOptions {
            max_iters: 100,
            f_tol: 1e-10,
            g_tol: 1e-10,
            robust_scale: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    FunctionTolerance,
    MaxIterations,
    Stalled,
}

#[derive(Debug, Clone)]
pub struct BAReport {
    /// Accepted LM iterations.
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after each accepted step; non-increasing by construction.
    pub cost_history: Vec<f64>,
    pub termination: Termination,
    pub stalled: bool,
    /// Blocks skipped this solve because the point sat on a camera center.
    pub deactivated_blocks: usize,
}

/// Soft-L1 robustifier `ρ(s) = 2(√(1+s) - 1)`.
pub fn soft_l1(s: f64) -> f64 {
    2.0 * ((1.0 + s).sqrt() - 1.0)
}

/// The chord residual `Π(R X + t) - u_obs`, or `None` when the point sits
/// on the camera center and the block is deactivated for the iteration.
pub fn residual(pose: &Pose, point: &Vec3, u_obs: &Bearing) -> Option<Vec3> {
    let p = pose.transform(point);
    let n = p.norm();
    if n <= EPS_CENTER {
        return None;
    }
    Some(p / n - u_obs.as_vec())
}

/// Per-block cost under the options' loss configuration.
fn block_cost(s: f64, robustify: bool, c: f64) -> f64 {
    if robustify {
        c * c * soft_l1(s / (c * c))
    } else {
        s
    }
}

/// IRLS weight `ρ'(s/c²)` of the robustified loss.
fn block_weight(s: f64, robustify: bool, c: f64) -> f64 {
    if robustify {
        1.0 / (1.0 + s / (c * c)).sqrt()
    } else {
        1.0
    }
}

struct Evaluation {
    cost: f64,
    deactivated: usize,
}

fn evaluate(problem: &BAProblem, opts: &BAOptions) -> Evaluation {
    let mut cost = 0.0;
    let mut deactivated = 0;
    for b in &problem.blocks {
        match residual(&problem.poses[b.pose], &problem.points[b.point], &b.observed) {
            Some(r) => cost += block_cost(r.norm_squared(), problem.robustify, opts.robust_scale),
            None => deactivated += 1,
        }
    }
    Evaluation { cost, deactivated }
}

/// Jacobians of the chord residual w.r.t. the local pose increment
/// `[δθ, δt]` (rotation applied as `Exp(δθ)·R`) and the point.
fn jacobians(pose: &Pose, point: &Vec3) -> Option<(Vec3, Matrix6x3<f64>, Mat3)> {
    let p = pose.transform(point);
    let n = p.norm();
    if n <= EPS_CENTER {
        return None;
    }
    let pi = p / n;
    let d_pi = (Mat3::identity() - pi * pi.transpose()) / n;
    let d_rot = d_pi * (-skew(&(p - pose.translation)));
    let d_t = d_pi;
    let mut j_pose = Matrix6x3::zeros(); // stored transposed: 6 params x 3 residual rows
    j_pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&d_rot.transpose());
    j_pose.fixed_view_mut::<3, 3>(3, 0).copy_from(&d_t.transpose());
    let j_point = d_pi * pose.rotation;
    Some((p, j_pose, j_point))
}

/// Levenberg-Marquardt with Schur elimination of the point blocks.
pub fn optimize(problem: &mut BAProblem, opts: &BAOptions) -> Result<BAReport, BAError> {
    let n_poses = problem.poses.len();
    let n_points = problem.points.len();
    for (k, b) in problem.blocks.iter().enumerate() {
        if b.pose >= n_poses || b.point >= n_points {
            return Err(BAError::BadBlockRef(k, b.pose, b.point));
        }
    }
    if !problem.pose_fixed.iter().any(|&f| f) {
        return Err(BAError::NoGauge);
    }

    // Slot maps for free blocks.
    let pose_slot: Vec<Option<usize>> = {
        let mut next = 0;
        problem
            .pose_fixed
            .iter()
            .map(|&fixed| {
                if fixed {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            })
            .collect()
    };
    let point_slot: Vec<Option<usize>> = {
        let mut next = 0;
        problem
            .point_fixed
            .iter()
            .map(|&fixed| {
                if fixed {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            })
            .collect()
    };
    let n_free_poses = pose_slot.iter().flatten().count();
    let n_free_points = point_slot.iter().flatten().count();

    let eval0 = evaluate(problem, opts);
    if !eval0.cost.is_finite() {
        return Err(BAError::NonFiniteCost);
    }
    let mut report = BAReport {
        iterations: 0,
        initial_cost: eval0.cost,
        final_cost: eval0.cost,
        cost_history: Vec::new(),
        termination: Termination::MaxIterations,
        stalled: false,
        deactivated_blocks: eval0.deactivated,
    };
    if n_free_poses == 0 && n_free_points == 0 {
        report.termination = Termination::GradientTolerance;
        return Ok(report);
    }

    let c = opts.robust_scale;
    let mut lambda = 1e-4;
    let mut cost = eval0.cost;

    for _outer in 0..opts.max_iters {
        // Accumulate the normal equations at the current state.
        let mut b_blocks = vec![Matrix6::<f64>::zeros(); n_free_poses];
        let mut c_blocks = vec![Matrix3::<f64>::zeros(); n_free_points];
        let mut g_pose = vec![Vector6::<f64>::zeros(); n_free_poses];
        let mut g_point = vec![Vec3::zeros(); n_free_points];
        // Per free point: couplings to free poses.
        let mut couplings: Vec<Vec<(usize, Matrix6x3<f64>)>> = vec![Vec::new(); n_free_points];

        for blk in &problem.blocks {
            let Some((p, j_pose_t, j_point)) =
                jacobians(&problem.poses[blk.pose], &problem.points[blk.point])
            else {
                continue;
            };
            let r = p / p.norm() - blk.observed.as_vec();
            let w = block_weight(r.norm_squared(), problem.robustify, c);
            let ps = pose_slot[blk.pose];
            let ts = point_slot[blk.point];
            if let Some(i) = ps {
                // j_pose_t is 6x3 (params x residual): JᵀJ = j_pose_t j_pose_tᵀ.
                b_blocks[i] += j_pose_t * j_pose_t.transpose() * w;
                g_pose[i] += j_pose_t * r * w;
            }
            if let Some(j) = ts {
                c_blocks[j] += j_point.transpose() * j_point * w;
                g_point[j] += j_point.transpose() * r * w;
            }
            if let (Some(i), Some(j)) = (ps, ts) {
                couplings[j].push((i, j_pose_t * j_point * w));
            }
        }

        let grad_inf = g_pose
            .iter()
            .flat_map(|g| g.iter())
            .chain(g_point.iter().flat_map(|g| g.iter()))
            .fold(0.0f64, |m, &v| m.max((2.0 * v).abs()));
        if grad_inf < opts.g_tol {
            report.termination = Termination::GradientTolerance;
            break;
        }

        // Damping attempts.
        let mut rejects = 0;
        let accepted = loop {
            let step = solve_step(
                &b_blocks,
                &c_blocks,
                &g_pose,
                &g_point,
                &couplings,
                lambda,
                n_free_poses,
            );
            if let Some((d_pose, d_point)) = step {
                // Trial state.
                let saved_poses = problem.poses.clone();
                let saved_points = problem.points.clone();
                for (idx, slot) in pose_slot.iter().enumerate() {
                    if let Some(i) = *slot {
                        let dth = Vec3::new(d_pose[6 * i], d_pose[6 * i + 1], d_pose[6 * i + 2]);
                        let dt = Vec3::new(d_pose[6 * i + 3], d_pose[6 * i + 4], d_pose[6 * i + 5]);
                        let p = &mut problem.poses[idx];
                        p.rotation = orthonormalize(&(so3_exp(&dth) * p.rotation));
                        p.translation += dt;
                    }
                }
                for (idx, slot) in point_slot.iter().enumerate() {
                    if let Some(j) = *slot {
                        problem.points[idx] += d_point[j];
                    }
                }
                let eval = evaluate(problem, opts);
                report.deactivated_blocks += eval.deactivated;
                if eval.cost.is_finite() && eval.cost < cost {
                    let drop = cost - eval.cost;
                    cost = eval.cost;
                    lambda = (lambda / 10.0).max(1e-12);
                    report.iterations += 1;
                    report.cost_history.push(cost);
                    if drop < opts.f_tol * cost.max(1e-30) {
                        report.termination = Termination::FunctionTolerance;
                        break true;
                    }
                    break false;
                }
                problem.poses = saved_poses;
                problem.points = saved_points;
            }
            lambda = (lambda * 10.0).min(1e6);
            rejects += 1;
            if rejects >= 10 {
                report.termination = Termination::Stalled;
                report.stalled = true;
                break true;
            }
        };
        if accepted {
            break;
        }
    }

    report.final_cost = cost;
    Ok(report)
}

/// One damped Schur-complement solve. Returns pose and point increments, or
/// `None` when the reduced system is not positive definite.
#[allow(clippy::too_many_arguments)]
fn solve_step(
    b_blocks: &[Matrix6<f64>],
    c_blocks: &[Matrix3<f64>],
    g_pose: &[Vector6<f64>],
    g_point: &[Vec3],
    couplings: &[Vec<(usize, Matrix6x3<f64>)>],
    lambda: f64,
    n_free_poses: usize,
) -> Option<(DVector<f64>, Vec<Vec3>)> {
    let damp6 = |m: &Matrix6<f64>| {
        let mut d = *m;
        for k in 0..6 {
            d[(k, k)] = m[(k, k)] * (1.0 + lambda) + 1e-15;
        }
        d
    };
    let damp3 = |m: &Matrix3<f64>| {
        let mut d = *m;
        for k in 0..3 {
            d[(k, k)] = m[(k, k)] * (1.0 + lambda) + 1e-15;
        }
        d
    };

    let c_inv: Vec<Matrix3<f64>> = c_blocks
        .iter()
        .map(|cb| damp3(cb).try_inverse())
        .collect::<Option<Vec<_>>>()?;

    let n = 6 * n_free_poses;
    let mut s = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for (i, bb) in b_blocks.iter().enumerate() {
        s.view_mut((6 * i, 6 * i), (6, 6)).copy_from(&damp6(bb));
        rhs.rows_mut(6 * i, 6).copy_from(&(-g_pose[i]));
    }
    for (j, coup) in couplings.iter().enumerate() {
        for &(i1, e1) in coup {
            let e1c = e1 * c_inv[j];
            let contrib = e1c * g_point[j];
            let mut rview = rhs.rows_mut(6 * i1, 6);
            rview += contrib;
            for &(i2, e2) in coup {
                let delta = e1c * e2.transpose();
                let mut view = s.view_mut((6 * i1, 6 * i2), (6, 6));
                view -= delta;
            }
        }
    }

    let chol = s.cholesky()?;
    let d_pose = chol.solve(&rhs);

    let mut d_point = vec![Vec3::zeros(); c_blocks.len()];
    for (j, coup) in couplings.iter().enumerate() {
        let mut acc = -g_point[j];
        for &(i, e) in coup {
            let dc = d_pose.rows(6 * i, 6);
            acc -= e.transpose() * Vector6::from_iterator(dc.iter().copied());
        }
        d_point[j] = c_inv[j] * acc;
    }
    // Free points with no free-pose coupling still take their own step.
    for (j, dp) in d_point.iter_mut().enumerate() {
        if couplings[j].is_empty() {
            *dp = c_inv[j] * (-g_point[j]);
        }
    }
    Some((d_pose, d_point))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{project_point, rotation_angle};
    use crate::synth::{generate_scene, perturb_poses, SceneSpec};

    fn scene_problem(seed: u64, robustify: bool) -> (BAProblem, crate::synth::GroundTruthScene) {
        let scene = generate_scene(&SceneSpec {
            n_cams: 6,
            n_points: 60,
            room: (8.0, 6.0, 3.0),
            seed,
        })
        .unwrap();
        let blocks = (0..scene.poses.len())
            .flat_map(|i| {
                let scene = &scene;
                (0..scene.points.len()).map(move |j| ResidualBlock {
                    pose: i,
                    point: j,
                    observed: project_point(&scene.points[j], &scene.poses[i]).unwrap(),
                })
            })
            .collect();
        let problem = BAProblem {
            poses: scene.poses.clone(),
            pose_fixed: {
                let mut f = vec![false; scene.poses.len()];
                f[0] = true;
                f
            },
            points: scene.points.clone(),
            point_fixed: vec![false; scene.points.len()],
            blocks,
            robustify,
        };
        (problem, scene)
    }

    #[test]
    fn soft_l1_values() {
        assert_eq!(soft_l1(0.0), 0.0);
        assert_eq!(soft_l1(3.0), 2.0);
        assert_eq!(soft_l1(8.0), 4.0);
        // ρ'(0) = 1 by finite difference.
        let d = (soft_l1(1e-9) - soft_l1(0.0)) / 1e-9;
        assert!((d - 1.0).abs() < 1e-6);
    }

    #[test]
    fn residual_examples() {
        let pose = Pose::identity();
        let u = Bearing::new(Vec3::new(0.0, 0.0, 1.0)).unwrap();
        // Point on the observed ray.
        let r = residual(&pose, &Vec3::new(0.0, 0.0, 3.0), &u).unwrap();
        assert!(r.norm() < 1e-15);
        // Π = (1,0,0) against u = (0,0,1).
        let r = residual(&pose, &Vec3::new(2.0, 0.0, 0.0), &u).unwrap();
        assert_eq!(r, Vec3::new(1.0, 0.0, -1.0));
        // Camera center: deactivated.
        assert!(residual(&pose, &Vec3::zeros(), &u).is_none());
    }

    #[test]
    fn chord_identity_holds() {
        // ‖r‖² = 2(1 - Π·u) for unit vectors.
        let mut s = crate::rng::Stream::root(3).derive(&[55]);
        let pose = Pose::from_parts(so3_exp(&Vec3::new(0.1, -0.3, 0.2)), Vec3::new(0.5, 0.0, -1.0));
        for _ in 0..100 {
            let x = Vec3::new(s.uniform(-4.0, 4.0), s.uniform(-4.0, 4.0), s.uniform(-4.0, 4.0));
            let z = 1.0 - 2.0 * s.next_f64();
            let a = std::f64::consts::TAU * s.next_f64();
            let rad = (1.0 - z * z).max(0.0).sqrt();
            let u = Bearing::new(Vec3::new(rad * a.cos(), z, rad * a.sin())).unwrap();
            let Some(r) = residual(&pose, &x, &u) else {
                continue;
            };
            let pi = project_point(&x, &pose).unwrap();
            let lhs = r.norm_squared();
            let rhs = 2.0 * (1.0 - pi.dot(&u));
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn converged_problem_terminates_immediately() {
        let (mut problem, _) = scene_problem(1, false);
        let report = optimize(&mut problem, &BAOptions::default()).unwrap();
        assert!(report.final_cost < 1e-20, "cost {:.3e}", report.final_cost);
        assert!(report.iterations <= 1);
    }

    #[test]
    fn recovers_perturbed_poses() {
        let (mut problem, scene) = scene_problem(5, false);
        let noisy = perturb_poses(&scene, 2.0, 0.05);
        problem.poses = noisy;
        // Perturb the points too so nothing is anchored at truth.
        let mut s = crate::rng::Stream::root(8).derive(&[56]);
        for p in &mut problem.points {
            *p += Vec3::new(s.normal(), s.normal(), s.normal()) * 0.05;
        }
        let report = optimize(&mut problem, &BAOptions::default()).unwrap();
        assert!(report.final_cost < 1e-18, "cost {:.3e}", report.final_cost);

        // Re-anchor the scale gauge. With pose 0 fixed the only null
        // direction left is scale about camera 0's center; undo it by
        // matching the cam0-cam1 center distance.
        let c0 = problem.poses[0].center();
        let d_est = (problem.poses[1].center() - c0).norm();
        let d_gt = (scene.poses[1].center() - scene.poses[0].center()).norm();
        let k = d_gt / d_est;
        for p in &mut problem.poses {
            let c_new = c0 + (p.center() - c0) * k;
            p.translation = -(p.rotation * c_new);
        }
        for (est, gt) in problem.poses.iter().zip(&scene.poses) {
            assert!(rotation_angle(&(est.rotation * gt.rotation.transpose())) < 1e-6);
            assert!((est.translation - gt.translation).norm() < 1e-6);
        }
        // Cost history is non-increasing.
        for w in report.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        // Rotations stay on the manifold.
        for p in &problem.poses {
            assert!((p.rotation * p.rotation.transpose() - Mat3::identity()).norm() < 1e-9);
        }
    }

    #[test]
    fn fixed_blocks_are_bit_identical() {
        let (mut problem, scene) = scene_problem(9, false);
        problem.poses = perturb_poses(&scene, 1.0, 0.02);
        problem.point_fixed[7] = true;
        let pt_before = problem.points[7];
        let pose_before = problem.poses[0];
        optimize(&mut problem, &BAOptions::default()).unwrap();
        assert_eq!(problem.points[7], pt_before);
        assert_eq!(problem.poses[0].rotation, pose_before.rotation);
        assert_eq!(problem.poses[0].translation, pose_before.translation);
    }

    #[test]
    fn robust_cost_matches_loss_definition() {
        let (mut problem, _) = scene_problem(13, true);
        // Random state so residuals are nonzero.
        let mut s = crate::rng::Stream::root(10).derive(&[57]);
        for p in &mut problem.points {
            *p += Vec3::new(s.normal(), s.normal(), s.normal()) * 0.2;
        }
        let opts = BAOptions::default();
        let direct: f64 = problem
            .blocks
            .iter()
            .filter_map(|b| residual(&problem.poses[b.pose], &problem.points[b.point], &b.observed))
            .map(|r| {
                let c = opts.robust_scale;
                c * c * soft_l1(r.norm_squared() / (c * c))
            })
            .sum();
        let eval = evaluate(&problem, &opts);
        assert!((eval.cost - direct).abs() < 1e-12 * direct.max(1.0));

        problem.robustify = false;
        let plain: f64 = problem
            .blocks
            .iter()
            .filter_map(|b| residual(&problem.poses[b.pose], &problem.points[b.point], &b.observed))
            .map(|r| r.norm_squared())
            .sum();
        let eval = evaluate(&problem, &opts);
        assert!((eval.cost - plain).abs() < 1e-12 * plain.max(1.0));
    }

    #[test]
    fn gauge_required() {
        let (mut problem, _) = scene_problem(2, false);
        problem.pose_fixed = vec![false; problem.poses.len()];
        assert!(matches!(
            optimize(&mut problem, &BAOptions::default()),
            Err(BAError::NoGauge)
        ));
    }

    #[test]
    fn non_finite_start_is_input_error() {
        let (mut problem, _) = scene_problem(2, false);
        problem.points[0] = Vec3::new(f64::NAN, 0.0, 0.0);
        assert!(matches!(
            optimize(&mut problem, &BAOptions::default()),
            Err(BAError::NonFiniteCost)
        ));
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let mut s = crate::rng::Stream::root(44).derive(&[58]);
        let step = 1e-6;
        let mut max_rel: f64 = 0.0;
        for _ in 0..100 {
            let pose = Pose::from_parts(
                so3_exp(&Vec3::new(s.normal(), s.normal(), s.normal())),
                Vec3::new(s.normal(), s.normal(), s.normal()),
            );
            let x = Vec3::new(s.uniform(-3.0, 3.0), s.uniform(-3.0, 3.0), s.uniform(-3.0, 3.0));
            if pose.transform(&x).norm() < 0.3 {
                continue; // keep away from the projection singularity
            }
            let z = 1.0 - 2.0 * s.next_f64();
            let a = std::f64::consts::TAU * s.next_f64();
            let rad = (1.0 - z * z).max(0.0).sqrt();
            let u = Bearing::new(Vec3::new(rad * a.cos(), z, rad * a.sin())).unwrap();

            let (_, j_pose_t, j_point) = jacobians(&pose, &x).unwrap();

            // Finite differences over the 9 local parameters.
            let eval = |dp: &Vector6<f64>, dx: &Vec3| -> Vec3 {
                let dth = Vec3::new(dp[0], dp[1], dp[2]);
                let dt = Vec3::new(dp[3], dp[4], dp[5]);
                let p2 = Pose::from_parts(so3_exp(&dth) * pose.rotation, pose.translation + dt);
                residual(&p2, &(x + dx), &u).unwrap()
            };
            for k in 0..9 {
                let mut dp = Vector6::zeros();
                let mut dx = Vec3::zeros();
                if k < 6 {
                    dp[k] = step;
                } else {
                    dx[k - 6] = step;
                }
                let plus = eval(&dp, &dx);
                if k < 6 {
                    dp[k] = -step;
                } else {
                    dx[k - 6] = -step;
                }
                let minus = eval(&dp, &dx);
                let fd = (plus - minus) / (2.0 * step);
                let analytic: Vec3 = if k < 6 {
                    j_pose_t.row(k).transpose()
                } else {
                    j_point.column(k - 6).into()
                };
                let denom = fd.norm().max(1e-8);
                max_rel = max_rel.max((fd - analytic).norm() / denom);
            }
        }
        assert!(max_rel < 1e-4, "max relative jacobian error {max_rel:.3e}");
    }
}
