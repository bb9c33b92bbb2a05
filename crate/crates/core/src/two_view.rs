//! Spherical two-view geometry: essential matrix estimation from bearing
//! correspondences, robust verification, and relative pose recovery.
//!
//! The epipolar constraint for calibrated perspective views carries over to
//! unit bearing vectors unchanged. With world-to-camera poses and the
//! relative transform `x₂ = R x₁ + t`, the constraint used throughout this
//! crate is `u₂ᵀ [t]ₓ R u₁ = 0`; the essential matrix is estimated by the
//! 8-point DLT on Kronecker-product rows with a per-side second-moment
//! whitening of the bearing sets for SVD conditioning, then projected onto
//! the essential manifold (`σ, σ, 0`).

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::geom::{skew, Bearing, Mat3, Pose, Vec3};
use crate::rng::Stream;
use crate::triangulate::midpoint_position;

#[derive(Debug, Error)]
pub enum TwoViewError {
    #[error("need at least 8 correspondences, got {0}")]
    InsufficientData(usize),
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("no decomposition candidate wins the cheirality vote")]
    CheiralityAmbiguous,
    #[error("pair rejected: best consensus {inliers} below minimum {min_inliers}")]
    PairRejected { inliers: usize, min_inliers: usize },
}

/// Essential matrix, Frobenius norm 1, singular values `(σ, σ, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(Mat3);

impl EssentialMatrix {
    /// Projects an arbitrary 3x3 matrix onto the essential manifold by
    /// replacing its singular values with `(σ, σ, 0)`, `σ` the mean of the
    /// two largest, then Frobenius-normalizing.
    pub fn project(m: &Mat3) -> Result<Self, TwoViewError> {
        let (u, s, v_t) = sorted_svd3(m)?;
        let sigma = (s[0] + s[1]) / 2.0;
        if !(sigma > 0.0) {
            return Err(TwoViewError::Degenerate("zero matrix"));
        }
        let e = u * Mat3::from_diagonal(&Vec3::new(sigma, sigma, 0.0)) * v_t;
        Ok(EssentialMatrix(e / e.norm()))
    }

    /// The essential matrix `[t]ₓ R` of a relative pose.
    pub fn from_relative(rel: &Pose) -> Result<Self, TwoViewError> {
        Self::project(&(skew(&rel.translation) * rel.rotation))
    }

    #[inline]
    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    /// `u₂ᵀ E u₁`, the raw algebraic constraint value.
    #[inline]
    pub fn constraint(&self, u1: &Bearing, u2: &Bearing) -> f64 {
        (u2.as_vec().transpose() * self.0 * u1.as_vec())[0]
    }
}

/// SVD of a 3x3 with singular values sorted descending.
fn sorted_svd3(m: &Mat3) -> Result<(Mat3, Vec3, Mat3), TwoViewError> {
    let svd = m.svd(true, true);
    let u = svd.u.ok_or(TwoViewError::Degenerate("svd failed"))?;
    let v_t = svd.v_t.ok_or(TwoViewError::Degenerate("svd failed"))?;
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
    let mut us = Mat3::zeros();
    let mut vts = Mat3::zeros();
    let mut ss = Vec3::zeros();
    for (k, &i) in order.iter().enumerate() {
        us.set_column(k, &u.column(i));
        vts.set_row(k, &v_t.row(i));
        ss[k] = s[i];
    }
    Ok((us, ss, vts))
}

/// Result of the linear solve: the estimate plus a flag raised when the
/// design matrix's two smallest singular values are nearly equal, i.e. the
/// solution direction is not unique (typical of pure rotation).
#[derive(Debug, Clone, Copy)]
pub struct EightPointEstimate {
    pub essential: EssentialMatrix,
    pub ambiguous: bool,
}

/// Inverse square root of a symmetric positive-definite 3x3; eigenvalues
/// clamped at 1e-12 so nearly-planar bearing sets stay solvable.
fn inv_sqrt_spd(m: &Mat3) -> Mat3 {
    let eig = SymmetricEigen::new(*m);
    let mut d = Mat3::zeros();
    for i in 0..3 {
        d[(i, i)] = 1.0 / eig.eigenvalues[i].max(1e-12).sqrt();
    }
    eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Second-moment whitening transform of a bearing set: `T = M^(-1/2)` with
/// `M = (1/n) Σ u uᵀ`.
fn whitener(us: &[Bearing]) -> Mat3 {
    let mut m = Mat3::zeros();
    for u in us {
        m += u.as_vec() * u.as_vec().transpose();
    }
    inv_sqrt_spd(&(m / us.len() as f64))
}

/// Spherical 8-point DLT.
///
/// Builds the `n x 9` design matrix with rows `u₂ ⊗ u₁` from whitened,
/// renormalized bearings, takes the smallest-eigenvector solution of the
/// normal matrix, undoes the whitening, and projects onto the essential
/// manifold.
pub fn estimate_essential_8pt(
    u1s: &[Bearing],
    u2s: &[Bearing],
) -> Result<EightPointEstimate, TwoViewError> {
    let n = u1s.len();
    if n < 8 || u2s.len() != n {
        return Err(TwoViewError::InsufficientData(n.min(u2s.len())));
    }

    let t1 = whitener(u1s);
    let t2 = whitener(u2s);
    let mut a = DMatrix::<f64>::zeros(n, 9);
    for i in 0..n {
        let v1 = (t1 * u1s[i].as_vec()).normalize();
        let v2 = (t2 * u2s[i].as_vec()).normalize();
        for r in 0..3 {
            for c in 0..3 {
                a[(i, 3 * r + c)] = v2[r] * v1[c];
            }
        }
    }

    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    // Nearly-equal smallest singular values mean the nullspace direction is
    // not unique. Both are numerical noise when A is rank-deficient, so
    // floor them at 1e-12 of the largest before taking the ratio.
    let sv = |k: usize| eig.eigenvalues[order[k]].max(0.0).sqrt();
    let floor = 1e-6 * sv(8);
    let ambiguous = (sv(0) + floor) / (sv(1) + floor) > 0.99;
    let ev = eig.eigenvectors.column(order[0]);

    let mut e_w = Mat3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            e_w[(r, c)] = ev[3 * r + c];
        }
    }
    // v₂ᵀ E' v₁ = 0 with v = T u  =>  E = T₂ᵀ E' T₁ (T symmetric).
    let e = t2.transpose() * e_w * t1;
    Ok(EightPointEstimate {
        essential: EssentialMatrix::project(&e)?,
        ambiguous,
    })
}

/// Symmetric angular distance (radians) of a correspondence to its epipolar
/// great circles: `½·(asin|n̂₂·u₂| + asin|n̂₁·u₁|)` with `n₂ = E u₁`,
/// `n₁ = Eᵀ u₂`. Degenerate normals (bearing on the epipole axis) yield 0
/// with the flag set.
pub fn epipolar_residual_checked(e: &EssentialMatrix, u1: &Bearing, u2: &Bearing) -> (f64, bool) {
    let n2 = e.matrix() * u1.as_vec();
    let n1 = e.matrix().transpose() * u2.as_vec();
    let (l2, l1) = (n2.norm(), n1.norm());
    if l2 < 1e-12 || l1 < 1e-12 {
        return (0.0, true);
    }
    let d2 = (n2.dot(u2.as_vec()).abs() / l2).clamp(0.0, 1.0).asin();
    let d1 = (n1.dot(u1.as_vec()).abs() / l1).clamp(0.0, 1.0).asin();
    (0.5 * (d2 + d1), false)
}

/// [`epipolar_residual_checked`] without the degeneracy flag.
pub fn epipolar_residual(e: &EssentialMatrix, u1: &Bearing, u2: &Bearing) -> f64 {
    epipolar_residual_checked(e, u1, u2).0
}

/// Recovers `(R, t)` from an essential matrix by enumerating the four SVD
/// candidates and keeping the one with a strict majority of positive-depth
/// midpoint triangulations over the inlier pairs.
pub fn decompose_essential(
    e: &EssentialMatrix,
    inliers: &[(Bearing, Bearing)],
) -> Result<(Mat3, Vec3), TwoViewError> {
    if inliers.is_empty() {
        return Err(TwoViewError::InsufficientData(0));
    }
    let (mut u, _s, mut v_t) = sorted_svd3(e.matrix())?;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r_a = u * w * v_t;
    let r_b = u * w.transpose() * v_t;
    let t: Vec3 = u.column(2).into();

    let candidates = [(r_a, t), (r_a, -t), (r_b, t), (r_b, -t)];
    let mut votes = [0usize; 4];
    for (k, (r, t)) in candidates.iter().enumerate() {
        let p1 = Pose::identity();
        let p2 = Pose::from_parts(*r, *t);
        for (u1, u2) in inliers {
            let Ok(x) = midpoint_position(&[(&p1, *u1), (&p2, *u2)]) else {
                continue;
            };
            let d1 = x.dot(u1.as_vec());
            let d2 = p2.transform(&x).dot(u2.as_vec());
            if d1 > 0.0 && d2 > 0.0 {
                votes[k] += 1;
            }
        }
    }
    let best = (0..4).max_by_key(|&k| votes[k]).unwrap();
    let unique = (0..4).filter(|&k| votes[k] == votes[best]).count() == 1;
    if !unique || 2 * votes[best] <= inliers.len() {
        return Err(TwoViewError::CheiralityAmbiguous);
    }
    let (r, t) = candidates[best];
    Ok((r, t.normalize()))
}

/// RANSAC configuration. The angular threshold defaults to about one pixel
/// at a 640-wide ERP.
#[derive(Debug, Clone, Copy)]
pub struct RansacParams {
    pub threshold_rad: f64,
    pub max_iters: usize,
    pub confidence: f64,
    pub min_inliers: usize,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            threshold_rad: 0.01,
            max_iters: 10_000,
            confidence: 0.9999,
            min_inliers: 15,
        }
    }
}

/// Verified two-view geometry of an image pair.
#[derive(Debug, Clone)]
pub struct TwoViewGeometry {
    pub essential: EssentialMatrix,
    /// Relative rotation, camera-1 frame to camera-2 frame.
    pub rotation: Mat3,
    /// Unit relative translation (direction only).
    pub translation: Vec3,
    pub inlier_mask: Vec<bool>,
    /// Epipolar residual (radians) per correspondence.
    pub residuals: Vec<f64>,
}

impl TwoViewGeometry {
    pub fn num_inliers(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }

    pub fn relative_pose(&self) -> Pose {
        Pose::from_parts(self.rotation, self.translation)
    }
}

fn score(
    e: &EssentialMatrix,
    corrs: &[(Bearing, Bearing)],
    threshold: f64,
) -> (usize, f64, Vec<bool>, Vec<f64>) {
    let mut mask = vec![false; corrs.len()];
    let mut residuals = vec![0.0; corrs.len()];
    let mut count = 0;
    let mut sum = 0.0;
    for (i, (u1, u2)) in corrs.iter().enumerate() {
        let r = epipolar_residual(e, u1, u2);
        residuals[i] = r;
        if r < threshold {
            mask[i] = true;
            count += 1;
            sum += r;
        }
    }
    (count, sum, mask, residuals)
}

fn better(
    a: (usize, f64, usize), // (count, residual sum, hypothesis index)
    b: (usize, f64, usize),
) -> bool {
    (a.0, std::cmp::Reverse(ordered(a.1)), std::cmp::Reverse(a.2))
        > (b.0, std::cmp::Reverse(ordered(b.1)), std::cmp::Reverse(b.2))
}

fn ordered(x: f64) -> ordered_key::F64Key {
    ordered_key::F64Key(x)
}

mod ordered_key {
    #[derive(PartialEq, PartialOrd)]
    pub struct F64Key(pub f64);
    impl Eq for F64Key {}
    #[allow(clippy::derive_ord_xor_partial_ord)]
    impl Ord for F64Key {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.partial_cmp(other).unwrap_or(std::cmp::Ordering::Equal)
        }
    }
}

fn estimate_on(
    corrs: &[(Bearing, Bearing)],
    idx: &[usize],
) -> Result<EightPointEstimate, TwoViewError> {
    let u1: Vec<Bearing> = idx.iter().map(|&i| corrs[i].0).collect();
    let u2: Vec<Bearing> = idx.iter().map(|&i| corrs[i].1).collect();
    estimate_essential_8pt(&u1, &u2)
}

/// Locally-iterated RANSAC over the 8-point solver.
///
/// Hypotheses are drawn from a seeded stream; the winner is selected by
/// `(inlier count, lower inlier residual sum, lower hypothesis index)`, so
/// the result is a pure function of `(stream, corrs, params)`. Each new
/// best hypothesis is refined once by re-estimating on its inliers. The
/// final model is re-estimated on all inliers and decomposed with the
/// cheirality vote.
pub fn ransac_two_view(
    corrs: &[(Bearing, Bearing)],
    params: &RansacParams,
    stream: Stream,
) -> Result<TwoViewGeometry, TwoViewError> {
    let n = corrs.len();
    if n < 8 {
        return Err(TwoViewError::InsufficientData(n));
    }
    let mut rng = stream;
    let mut best: Option<(usize, f64, usize, EssentialMatrix, Vec<bool>)> = None;
    let mut target = params.max_iters;
    let mut iter = 0usize;
    while iter < target {
        let sample = rng.sample_indices(n, 8);
        if let Ok(est) = estimate_on(corrs, &sample) {
            let (count, sum, mask, _res) = score(&est.essential, corrs, params.threshold_rad);
            let challenger = (count, sum, iter);
            let incumbent = best.as_ref().map(|b| (b.0, b.1, b.2));
            if incumbent.is_none_or(|inc| better(challenger, inc)) {
                let mut chosen = (count, sum, iter, est.essential, mask);
                // Local refinement: re-estimate on the consensus set.
                if count >= 8 {
                    let inl: Vec<usize> =
                        (0..n).filter(|&i| chosen.4[i]).collect();
                    if let Ok(refit) = estimate_on(corrs, &inl) {
                        let (c2, s2, m2, _r2) =
                            score(&refit.essential, corrs, params.threshold_rad);
                        if better((c2, s2, iter), (chosen.0, chosen.1, chosen.2)) {
                            chosen = (c2, s2, iter, refit.essential, m2);
                        }
                    }
                }
                best = Some(chosen);
                // Adaptive iteration count from the inlier ratio.
                let w = best.as_ref().unwrap().0 as f64 / n as f64;
                let p_all = w.powi(8);
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

    let (best_count, _, _, _, best_mask) = best.ok_or(TwoViewError::Degenerate("no hypothesis"))?;
    if best_count < params.min_inliers {
        return Err(TwoViewError::PairRejected {
            inliers: best_count,
            min_inliers: params.min_inliers,
        });
    }

    // Final re-estimation on all inliers.
    let inl: Vec<usize> = (0..n).filter(|&i| best_mask[i]).collect();
    let refit = estimate_on(corrs, &inl)?;
    let (count, _sum, mask, residuals) = score(&refit.essential, corrs, params.threshold_rad);
    if count < params.min_inliers {
        return Err(TwoViewError::PairRejected {
            inliers: count,
            min_inliers: params.min_inliers,
        });
    }
    let pairs: Vec<(Bearing, Bearing)> = (0..n).filter(|&i| mask[i]).map(|i| corrs[i]).collect();
    let (rotation, translation) = decompose_essential(&refit.essential, &pairs)?;
    Ok(TwoViewGeometry {
        essential: refit.essential,
        rotation,
        translation,
        inlier_mask: mask,
        residuals,
    })
}
