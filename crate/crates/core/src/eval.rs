//! Pose-accuracy metrics: pairwise relative errors and AUC of the
//! error-recall curve at fixed thresholds.
//!
//! Errors are pairwise-relative, so no global alignment step is needed and
//! the numbers are invariant to the reconstruction's gauge. Pairs touching
//! an unregistered image enter with infinite error, so registration
//! failures pull the AUC down alongside the reported registration count.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::geom::{angle_between, rotation_angle, Pose};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground truth is missing image {0}")]
    MissingImage(String),
    #[error("no image pairs to evaluate")]
    NoPairs,
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("empty sample set")]
    EmptySamples,
}

/// Relative pose error of one image pair.
#[derive(Debug, Clone, Copy)]
pub struct PoseErrorSample {
    pub rot_err_deg: f64,
    pub trans_dir_err_deg: f64,
    /// `max(rot, trans)`; `+∞` when either image is unregistered.
    pub combined_deg: f64,
    pub registered: bool,
}

/// Pairwise relative-pose errors of an estimate against ground truth.
///
/// Iterates every unordered pair of ground-truth images. Pairs with both
/// images registered compare relative rotations and translation directions;
/// all other pairs contribute `+∞` samples.
pub fn relative_pose_errors(
    est: &BTreeMap<String, Pose>,
    gt: &BTreeMap<String, Pose>,
) -> Result<Vec<PoseErrorSample>, EvalError> {
    for name in est.keys() {
        if !gt.contains_key(name) {
            return Err(EvalError::MissingImage(name.clone()));
        }
    }
    let names: Vec<&String> = gt.keys().collect();
    if names.len() < 2 {
        return Err(EvalError::NoPairs);
    }
    let mut samples = Vec::with_capacity(names.len() * (names.len() - 1) / 2);
    for i in 0..names.len() {
        for j in (i + 1)..names.len() {
            let (Some(ei), Some(ej)) = (est.get(names[i]), est.get(names[j])) else {
                samples.push(PoseErrorSample {
                    rot_err_deg: f64::INFINITY,
                    trans_dir_err_deg: f64::INFINITY,
                    combined_deg: f64::INFINITY,
                    registered: false,
                });
                continue;
            };
            let gi = &gt[names[i]];
            let gj = &gt[names[j]];
            let rel_e = ei.relative_to(ej);
            let rel_g = gi.relative_to(gj);
            let rot_err_deg =
                rotation_angle(&(rel_e.rotation * rel_g.rotation.transpose())).to_degrees();
            let gt_baseline = rel_g.translation.norm();
            let trans_dir_err_deg = if gt_baseline < 1e-9 {
                // Translation direction undefined for near-zero baselines.
                0.0
            } else if rel_e.translation.norm() < 1e-9 {
                180.0
            } else {
                angle_between(&rel_e.translation, &rel_g.translation).to_degrees()
            };
            samples.push(PoseErrorSample {
                rot_err_deg,
                trans_dir_err_deg,
                combined_deg: rot_err_deg.max(trans_dir_err_deg),
                registered: true,
            });
        }
    }
    Ok(samples)
}

/// Normalized area under the recall curve up to `tau`, in percent.
///
/// With recall `r(t) = |{e ≤ t}|/n`, the exact integral of the step
/// function is `Σᵢ max(0, τ - eᵢ) / (n·τ)`; infinite samples contribute
/// zero area.
pub fn auc(errors_deg: &[f64], tau: f64) -> Result<f64, EvalError> {
    if !(tau > 0.0) {
        return Err(EvalError::BadThreshold(tau));
    }
    if errors_deg.is_empty() {
        return Err(EvalError::EmptySamples);
    }
    let area: f64 = errors_deg
        .iter()
        .map(|&e| if e.is_finite() { (tau - e).max(0.0) } else { 0.0 })
        .sum();
    Ok(100.0 * area / (tau * errors_deg.len() as f64))
}

/// Registration count, AUC at each threshold, and finite-error statistics.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub registered: usize,
    pub total: usize,
    pub auc_at: Vec<(f64, f64)>,
    pub mean_err_deg: f64,
    pub median_err_deg: f64,
    pub samples: Vec<PoseErrorSample>,
}

impl EvalReport {
    /// Machine-readable `key = value` lines.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("registered = {} / {}\n", self.registered, self.total));
        for (tau, v) in &self.auc_at {
            if (tau.round() - tau).abs() < 1e-12 {
                out.push_str(&format!("auc@{} = {:.4}\n", *tau as i64, v));
            } else {
                out.push_str(&format!("auc@{tau} = {v:.4}\n"));
            }
        }
        out.push_str(&format!("mean_err_deg = {:.6}\n", self.mean_err_deg));
        out.push_str(&format!("median_err_deg = {:.6}\n", self.median_err_deg));
        out
    }

    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str("metric           value\n");
        out.push_str("---------------  ----------\n");
        out.push_str(&format!("registered       {} / {}\n", self.registered, self.total));
        for (tau, v) in &self.auc_at {
            out.push_str(&format!("AUC @{:<4}        {:>8.4}\n", format!("{tau}°"), v));
        }
        out.push_str(&format!("mean err (°)     {:>10.6}\n", self.mean_err_deg));
        out.push_str(&format!("median err (°)   {:>10.6}\n", self.median_err_deg));
        out
    }
}

/// Full evaluation of an estimate against ground truth.
pub fn report(
    est: &BTreeMap<String, Pose>,
    gt: &BTreeMap<String, Pose>,
    taus: &[f64],
) -> Result<EvalReport, EvalError> {
    let samples = relative_pose_errors(est, gt)?;
    let errors: Vec<f64> = samples.iter().map(|s| s.combined_deg).collect();
    let mut auc_at = Vec::new();
    for &tau in taus {
        auc_at.push((tau, auc(&errors, tau)?));
    }
    let mut finite: Vec<f64> = errors.iter().copied().filter(|e| e.is_finite()).collect();
    finite.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (mean, median) = if finite.is_empty() {
        (f64::INFINITY, f64::INFINITY)
    } else {
        (
            finite.iter().sum::<f64>() / finite.len() as f64,
            finite[finite.len() / 2],
        )
    };
    Ok(EvalReport {
        registered: est.len(),
        total: gt.len(),
        auc_at,
        mean_err_deg: mean,
        median_err_deg: median,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{so3_exp, Vec3};
    use crate::synth::{generate_scene, SceneSpec};

    fn gt_map(n: usize, seed: u64) -> BTreeMap<String, Pose> {
        let scene = generate_scene(&SceneSpec {
            n_cams: n,
            n_points: 8,
            room: (8.0, 6.0, 3.0),
            seed,
        })
        .unwrap();
        scene
            .camera_names()
            .into_iter()
            .zip(scene.poses.iter().copied())
            .collect()
    }

    #[test]
    fn identical_poses_give_zero_errors() {
        let gt = gt_map(5, 1);
        let samples = relative_pose_errors(&gt, &gt).unwrap();
        assert_eq!(samples.len(), 10);
        for s in &samples {
            assert!(s.combined_deg < 1e-9);
            assert!(s.registered);
        }
    }

    #[test]
    fn invariant_under_global_similarity() {
        let gt = gt_map(6, 2);
        let mut s = crate::rng::Stream::root(14).derive(&[60]);
        for _ in 0..20 {
            let q = so3_exp(&Vec3::new(s.normal(), s.normal(), s.normal()));
            let b = Vec3::new(s.normal(), s.normal(), s.normal()) * 3.0;
            let scale = s.uniform(0.2, 5.0);
            let est: BTreeMap<String, Pose> = gt
                .iter()
                .map(|(name, p)| {
                    let c = p.center();
                    let c2 = q * c * scale + b;
                    let r2 = p.rotation * q.transpose();
                    (name.clone(), Pose::from_parts(r2, -(r2 * c2)))
                })
                .collect();
            let samples = relative_pose_errors(&est, &gt).unwrap();
            for smp in &samples {
                assert!(smp.combined_deg < 1e-7, "err {}", smp.combined_deg);
            }
        }
    }

    #[test]
    fn single_rotated_pose_shows_in_touching_pairs() {
        let gt = gt_map(3, 3);
        let mut est = gt.clone();
        let name = est.keys().next().unwrap().clone();
        let p = est[&name];
        let axis = Vec3::new(0.0, 1.0, 0.0);
        est.insert(
            name.clone(),
            Pose::from_parts(so3_exp(&(axis * 5.0f64.to_radians())) * p.rotation, p.translation),
        );
        let samples = relative_pose_errors(&est, &gt).unwrap();
        let touched: Vec<f64> = samples.iter().map(|s| s.rot_err_deg).collect();
        // cam000 participates in pairs (0,1) and (0,2); pair (1,2) is clean.
        assert!((touched[0] - 5.0).abs() < 1e-9);
        assert!((touched[1] - 5.0).abs() < 1e-9);
        assert!(touched[2] < 1e-9);
    }

    #[test]
    fn unregistered_images_become_infinite_samples() {
        let gt = gt_map(4, 4);
        let mut est = gt.clone();
        let last = est.keys().last().unwrap().clone();
        est.remove(&last);
        let samples = relative_pose_errors(&est, &gt).unwrap();
        assert_eq!(samples.len(), 6);
        assert_eq!(samples.iter().filter(|s| !s.registered).count(), 3);
        assert_eq!(
            samples.iter().filter(|s| s.combined_deg.is_infinite()).count(),
            3
        );
    }

    #[test]
    fn missing_gt_image_is_an_error() {
        let gt = gt_map(3, 5);
        let mut est = gt.clone();
        est.insert("zz_not_in_gt".into(), Pose::identity());
        assert!(matches!(
            relative_pose_errors(&est, &gt),
            Err(EvalError::MissingImage(_))
        ));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.0, 0.0, 0.0], 3.0).unwrap(), 100.0);
        assert_eq!(auc(&[1.5, 1.5], 3.0).unwrap(), 50.0);
        assert_eq!(auc(&[0.0, f64::INFINITY], 3.0).unwrap(), 50.0);
        assert!(auc(&[], 3.0).is_err());
        assert!(auc(&[1.0], 0.0).is_err());
    }

    #[test]
    fn auc_monotone_and_permutation_invariant() {
        let mut s = crate::rng::Stream::root(15).derive(&[61]);
        for _ in 0..50 {
            let mut e: Vec<f64> = (0..20).map(|_| s.uniform(0.0, 6.0)).collect();
            let base = auc(&e, 3.0).unwrap();
            // Pointwise increase can only lower the AUC.
            let worse: Vec<f64> = e.iter().map(|&v| v + s.uniform(0.0, 2.0)).collect();
            assert!(auc(&worse, 3.0).unwrap() <= base + 1e-12);
            // Permutation leaves it unchanged.
            e.reverse();
            assert!((auc(&e, 3.0).unwrap() - base).abs() < 1e-12);
            // Exact formula for constant samples.
            let v = s.uniform(0.0, 3.0);
            let all = vec![v; 7];
            assert!((auc(&all, 3.0).unwrap() - 100.0 * (3.0 - v) / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn report_single_camera_errors() {
        let mut gt = BTreeMap::new();
        gt.insert("cam000".to_string(), Pose::identity());
        assert!(matches!(
            report(&gt, &gt, &[3.0]),
            Err(EvalError::NoPairs)
        ));
    }

    #[test]
    fn report_shape() {
        let gt = gt_map(4, 6);
        let rep = report(&gt, &gt, &[3.0, 5.0, 10.0]).unwrap();
        assert_eq!(rep.registered, 4);
        assert_eq!(rep.total, 4);
        for (_, v) in &rep.auc_at {
            assert!((v - 100.0).abs() < 1e-9);
        }
        let kv = rep.to_key_values();
        assert!(kv.contains("registered = 4 / 4"));
        assert!(kv.contains("auc@3 = 100.0000"));
        assert!(kv.contains("auc@10 = 100.0000"));
    }
}
