//! Incremental reconstruction driver.
//!
//! Initializes from the verified pair with the best angle-gated inlier
//! support, then alternates next-image resection, triangulation of newly
//! completable tracks, robust local bundles around the new image, and a
//! periodic non-robust global bundle followed by point filtering and one
//! retriangulation pass. The gauge is pinned by keeping the first
//! registered pose at the identity and rescaling the model so the
//! initial pair's baseline stays at one scene unit.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ba::{optimize, BAOptions, BAProblem, ResidualBlock};
use crate::geom::{pixel_to_bearing, project_point, Bearing, ErpDims, Pose, Vec3};
use crate::resection::{register_ransac, ResectionParams};
use crate::rng::{tag, Stream};
use crate::tracks::Track;
use crate::triangulate::{midpoint_position, triangulate, TriangulationGates};
use crate::two_view::{RansacParams, TwoViewGeometry};

#[derive(Debug, Error)]
pub enum SfmError {
    #[error("cannot initialize: {0}")]
    CannotInitialize(String),
    #[error("track observation in unknown image {0}")]
    UnknownImage(String),
    #[error("audit failed: {0}")]
    AuditFailed(String),
}

/// All knobs of the incremental pipeline, with the defaults used by the CLI.
#[derive(Debug, Clone, Copy)]
pub struct SfmConfig {
    pub ransac: RansacParams,
    pub resection: ResectionParams,
    pub gates: TriangulationGates,
    /// Minimum median triangulation angle for an initial pair.
    pub init_min_median_angle_rad: f64,
    /// Images sharing at least this many points join the local bundle.
    pub local_ba_min_shared: usize,
    /// Global bundle every this many registrations (and at the end).
    pub global_ba_cadence: usize,
    pub ba: BAOptions,
    pub seed: u64,
}

impl Default for SfmConfig {
    fn default() -> Self {
        SfmConfig {
            ransac: RansacParams::default(),
            resection: ResectionParams::default(),
            gates: TriangulationGates::default(),
            init_min_median_angle_rad: 2.0f64.to_radians(),
            local_ba_min_shared: 20,
            global_ba_cadence: 5,
            ba: BAOptions::default(),
            seed: 0,
        }
    }
}

/// A geometrically verified image pair.
#[derive(Debug, Clone)]
pub struct VerifiedPair {
    pub image_a: String,
    pub image_b: String,
    pub geometry: TwoViewGeometry,
    /// The correspondences the geometry was scored on.
    pub corrs: Vec<(Bearing, Bearing)>,
}

/// Reconstruction input: track observations plus per-image ERP dims needed
/// to lift pixels onto the sphere.
#[derive(Debug, Clone)]
pub struct SfmInput {
    pub images: Vec<String>,
    pub dims: BTreeMap<String, ErpDims>,
    pub tracks: Vec<Track>,
    pub pairs: Vec<VerifiedPair>,
}

/// A triangulated track.
#[derive(Debug, Clone, Copy)]
pub struct ScenePoint {
    pub position: Vec3,
    /// Index of the originating track.
    pub track: usize,
    /// Mean angular reprojection over supporting views, radians.
    pub error_rad: f64,
}

/// Registered poses plus triangulated points.
#[derive(Debug, Clone, Default)]
pub struct Reconstruction {
    pub poses: BTreeMap<String, Pose>,
    pub registration_order: Vec<String>,
    /// track index -> point.
    pub points: BTreeMap<usize, ScenePoint>,
}

impl Reconstruction {
    pub fn num_registered(&self) -> usize {
        self.poses.len()
    }
}

/// Reconstruction plus its run log and bookkeeping counters.
#[derive(Debug, Clone)]
pub struct SfmOutcome {
    pub recon: Reconstruction,
    pub unregistered: Vec<String>,
    pub log: Vec<String>,
    pub filtered_points: usize,
}

/// Median of the per-inlier triangulation angles of a verified pair.
pub fn pair_median_angle(pair: &VerifiedPair) -> f64 {
    let p1 = Pose::identity();
    let p2 = pair.geometry.relative_pose();
    let c2 = p2.center();
    let mut angles: Vec<f64> = pair
        .corrs
        .iter()
        .zip(&pair.geometry.inlier_mask)
        .filter(|(_, &m)| m)
        .filter_map(|((u1, u2), _)| {
            let x = midpoint_position(&[(&p1, *u1), (&p2, *u2)]).ok()?;
            Some(crate::geom::angle_between(&x, &(x - c2)))
        })
        .collect();
    if angles.is_empty() {
        return 0.0;
    }
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    angles[angles.len() / 2]
}

/// Picks the initial pair: most inliers among pairs whose median
/// triangulation angle clears the gate, falling back to the widest pair.
pub fn select_init_pair(pairs: &[VerifiedPair], min_median_angle_rad: f64) -> Result<usize, SfmError> {
    if pairs.is_empty() {
        return Err(SfmError::CannotInitialize("no verified pairs".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&i, &j| {
        (&pairs[i].image_a, &pairs[i].image_b).cmp(&(&pairs[j].image_a, &pairs[j].image_b))
    });
    let mut best_gated: Option<(usize, usize)> = None; // (inliers, idx)
    let mut best_any: Option<(f64, usize)> = None; // (median angle, idx)
    for &i in &order {
        let med = pair_median_angle(&pairs[i]);
        let inl = pairs[i].geometry.num_inliers();
        if med >= min_median_angle_rad && best_gated.is_none_or(|(b, _)| inl > b) {
            best_gated = Some((inl, i));
        }
        if best_any.is_none_or(|(b, _)| med > b) {
            best_any = Some((med, i));
        }
    }
    Ok(best_gated.map(|(_, i)| i).unwrap_or(best_any.unwrap().1))
}

struct Engine<'a> {
    cfg: &'a SfmConfig,
    images: Vec<String>,
    image_idx: BTreeMap<String, usize>,
    /// Per track, sorted (image index, bearing) observations.
    track_obs: Vec<Vec<(usize, Bearing)>>,
    /// Per image, the tracks observing it.
    tracks_of_image: Vec<Vec<usize>>,
    poses: Vec<Option<Pose>>,
    order: Vec<usize>,
    points: Vec<Option<ScenePoint>>,
    init_pair: (usize, usize),
    filtered_total: usize,
    log: Vec<String>,
}

impl<'a> Engine<'a> {
    fn new(input: &SfmInput, cfg: &'a SfmConfig) -> Result<Self, SfmError> {
        let images = input.images.clone();
        let image_idx: BTreeMap<String, usize> =
            images.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let mut track_obs = Vec::with_capacity(input.tracks.len());
        let mut tracks_of_image = vec![Vec::new(); images.len()];
        for (t, track) in input.tracks.iter().enumerate() {
            let mut obs = Vec::with_capacity(track.observations.len());
            for (image, (_, coord)) in &track.observations {
                let &idx = image_idx
                    .get(image)
                    .ok_or_else(|| SfmError::UnknownImage(image.clone()))?;
                let dims = input
                    .dims
                    .get(image)
                    .ok_or_else(|| SfmError::UnknownImage(image.clone()))?;
                let u = pixel_to_bearing(coord.0.clamp(0.0, dims.width() as f64), coord.1, *dims)
                    .map_err(|e| SfmError::CannotInitialize(format!("bad observation: {e}")))?;
                obs.push((idx, u));
                tracks_of_image[idx].push(t);
            }
            obs.sort_by_key(|&(i, _)| i);
            track_obs.push(obs);
        }
        Ok(Engine {
            cfg,
            poses: vec![None; images.len()],
            order: Vec::new(),
            points: vec![None; input.tracks.len()],
            images,
            image_idx,
            track_obs,
            tracks_of_image,
            init_pair: (0, 0),
            filtered_total: 0,
            log: Vec::new(),
        })
    }

    fn registered(&self, image: usize) -> bool {
        self.poses[image].is_some()
    }

    /// Tracks with >= 2 registered observations that are not yet points.
    fn triangulate_candidates(&self, require_image: Option<usize>) -> Vec<usize> {
        (0..self.track_obs.len())
            .filter(|&t| self.points[t].is_none())
            .filter(|&t| {
                let obs = &self.track_obs[t];
                if let Some(img) = require_image {
                    if !obs.iter().any(|&(i, _)| i == img) {
                        return false;
                    }
                }
                obs.iter().filter(|&&(i, _)| self.registered(i)).count() >= 2
            })
            .collect()
    }

    fn try_triangulate(&mut self, t: usize) -> bool {
        let views: Vec<(&Pose, Bearing)> = self.track_obs[t]
            .iter()
            .filter_map(|&(i, u)| self.poses[i].as_ref().map(|p| (p, u)))
            .collect();
        if views.len() < 2 {
            return false;
        }
        match triangulate(&views, &self.cfg.gates) {
            Ok(pt) => {
                self.points[t] = Some(ScenePoint {
                    position: pt.position,
                    track: t,
                    error_rad: pt.mean_reproj_rad,
                });
                true
            }
            Err(_) => false,
        }
    }

    fn triangulate_pass(&mut self, require_image: Option<usize>) -> usize {
        let mut added = 0;
        for t in self.triangulate_candidates(require_image) {
            if self.try_triangulate(t) {
                added += 1;
            }
        }
        added
    }

    /// A newly registered image appends observations to existing points;
    /// re-validate those points so no out-of-gate residual reaches the
    /// bundle. Failures get one fresh triangulation attempt, then drop.
    fn revalidate_points_seen_by(&mut self, image: usize) -> usize {
        let mut dropped = 0;
        for k in 0..self.tracks_of_image[image].len() {
            let t = self.tracks_of_image[image][k];
            let Some(pt) = self.points[t] else { continue };
            let views: Vec<(&Pose, Bearing)> = self.track_obs[t]
                .iter()
                .filter_map(|&(i, u)| self.poses[i].as_ref().map(|p| (p, u)))
                .collect();
            if point_passes_gates(&pt.position, &views, &self.cfg.gates) {
                continue;
            }
            self.points[t] = None;
            if !self.try_triangulate(t) {
                dropped += 1;
            }
        }
        self.filtered_total += dropped;
        dropped
    }

    /// Bundle over `free` poses (all registered observations of the free
    /// points participate; other registered poses join as fixed blocks).
    fn bundle(&mut self, free: &[usize], robustify: bool) {
        let mut pose_ids: Vec<usize> = Vec::new();
        let mut free_points: Vec<usize> = Vec::new();
        for (t, pt) in self.points.iter().enumerate() {
            if pt.is_none() {
                continue;
            }
            if self.track_obs[t]
                .iter()
                .any(|&(i, _)| free.contains(&i) && self.registered(i))
            {
                free_points.push(t);
            }
        }
        for &t in &free_points {
            for &(i, _) in &self.track_obs[t] {
                if self.registered(i) && !pose_ids.contains(&i) {
                    pose_ids.push(i);
                }
            }
        }
        pose_ids.sort_unstable();
        let mut pose_fixed: Vec<bool> = pose_ids.iter().map(|i| !free.contains(i)).collect();
        if pose_fixed.iter().all(|&f| !f) {
            // Nothing anchors the gauge; pin the earliest-registered pose.
            let earliest = self
                .order
                .iter()
                .find(|i| pose_ids.contains(i))
                .copied()
                .expect("free set is registered");
            let slot = pose_ids.iter().position(|&i| i == earliest).unwrap();
            pose_fixed[slot] = true;
        }

        let pose_slot: BTreeMap<usize, usize> =
            pose_ids.iter().enumerate().map(|(s, &i)| (i, s)).collect();
        let point_slot: BTreeMap<usize, usize> =
            free_points.iter().enumerate().map(|(s, &t)| (t, s)).collect();

        let mut blocks = Vec::new();
        for &t in &free_points {
            for &(i, u) in &self.track_obs[t] {
                if let Some(&ps) = pose_slot.get(&i) {
                    blocks.push(ResidualBlock {
                        pose: ps,
                        point: point_slot[&t],
                        observed: u,
                    });
                }
            }
        }

        let mut problem = BAProblem {
            poses: pose_ids.iter().map(|&i| self.poses[i].unwrap()).collect(),
            pose_fixed,
            points: free_points
                .iter()
                .map(|&t| self.points[t].unwrap().position)
                .collect(),
            point_fixed: vec![false; free_points.len()],
            blocks,
            robustify,
        };
        match optimize(&mut problem, &self.cfg.ba) {
            Ok(rep) => {
                for (slot, &i) in pose_ids.iter().enumerate() {
                    self.poses[i] = Some(problem.poses[slot]);
                }
                for (slot, &t) in free_points.iter().enumerate() {
                    if let Some(pt) = &mut self.points[t] {
                        pt.position = problem.points[slot];
                    }
                }
                self.log.push(format!(
                    "ba {} poses={} points={} blocks={} cost {:.3e} -> {:.3e} iters={}",
                    if robustify { "local" } else { "global" },
                    pose_ids.len(),
                    free_points.len(),
                    problem.blocks.len(),
                    rep.initial_cost,
                    rep.final_cost,
                    rep.iterations,
                ));
            }
            Err(e) => self.log.push(format!("ba skipped: {e}")),
        }
        self.refresh_point_errors();
    }

    fn refresh_point_errors(&mut self) {
        for t in 0..self.points.len() {
            let Some(pt) = self.points[t] else { continue };
            let mut sum = 0.0;
            let mut n = 0;
            for &(i, u) in &self.track_obs[t] {
                if let Some(pose) = &self.poses[i] {
                    if let Ok(proj) = project_point(&pt.position, pose) {
                        sum += crate::geom::angular_residual(&u, &proj);
                        n += 1;
                    }
                }
            }
            if n > 0 {
                self.points[t].as_mut().unwrap().error_rad = sum / n as f64;
            }
        }
    }

    /// Restores the gauge: init-pair baseline back to unit length. The
    /// first pose is fixed in every global bundle, so it is already the
    /// exact identity and scaling about the origin preserves it.
    fn restore_scale(&mut self) {
        let (a, b) = self.init_pair;
        let (Some(pa), Some(pb)) = (self.poses[a], self.poses[b]) else {
            return;
        };
        let baseline = (pb.center() - pa.center()).norm();
        if baseline <= 1e-12 {
            return;
        }
        let k = 1.0 / baseline;
        for pose in self.poses.iter_mut().flatten() {
            pose.translation *= k;
        }
        for pt in self.points.iter_mut().flatten() {
            pt.position *= k;
        }
    }

    /// Re-applies the triangulation acceptance tests to every live point,
    /// removing failures, then runs one retriangulation pass over all
    /// currently unreconstructed tracks.
    fn filter_and_retriangulate(&mut self) {
        let mut removed = 0;
        for t in 0..self.points.len() {
            let Some(pt) = self.points[t] else { continue };
            let views: Vec<(&Pose, Bearing)> = self.track_obs[t]
                .iter()
                .filter_map(|&(i, u)| self.poses[i].as_ref().map(|p| (p, u)))
                .collect();
            if !point_passes_gates(&pt.position, &views, &self.cfg.gates) {
                self.points[t] = None;
                removed += 1;
            }
        }
        self.filtered_total += removed;
        let readded = self.triangulate_pass(None);
        self.log
            .push(format!("filter removed={removed} retriangulated={readded}"));
    }

    fn global_adjust(&mut self) {
        let free: Vec<usize> = self
            .order
            .iter()
            .copied()
            .filter(|&i| i != self.order[0])
            .collect();
        self.bundle(&free, false);
        self.restore_scale();
        self.filter_and_retriangulate();
    }

    /// Count of triangulated points visible in an unregistered image.
    fn visible_points(&self, image: usize) -> usize {
        self.tracks_of_image[image]
            .iter()
            .filter(|&&t| self.points[t].is_some())
            .count()
    }

    fn correspondences_2d3d(&self, image: usize) -> Vec<(Bearing, Vec3)> {
        self.tracks_of_image[image]
            .iter()
            .filter_map(|&t| {
                let pt = self.points[t]?;
                let (_, u) = self.track_obs[t].iter().find(|&&(i, _)| i == image)?;
                Some((*u, pt.position))
            })
            .collect()
    }

    fn audit(&self, strict_errors: bool) -> Result<(), SfmError> {
        if let Some(&first) = self.order.first() {
            let p = self.poses[first].ok_or_else(|| {
                SfmError::AuditFailed("first registered image has no pose".into())
            })?;
            if p.rotation != crate::geom::Mat3::identity() || p.translation != Vec3::zeros() {
                return Err(SfmError::AuditFailed("first pose drifted off identity".into()));
            }
        }
        for (i, pose) in self.poses.iter().enumerate() {
            if pose.is_some() != self.order.contains(&i) {
                return Err(SfmError::AuditFailed(format!(
                    "pose/order mismatch for image {i}"
                )));
            }
        }
        for (t, pt) in self.points.iter().enumerate() {
            let Some(pt) = pt else { continue };
            let mut supporting = 0;
            for &(i, u) in &self.track_obs[t] {
                let Some(pose) = &self.poses[i] else { continue };
                supporting += 1;
                if strict_errors && pose.transform(&pt.position).dot(u.as_vec()) <= 0.0 {
                    return Err(SfmError::AuditFailed(format!(
                        "point {t} behind camera {i}"
                    )));
                }
            }
            if supporting < 2 {
                return Err(SfmError::AuditFailed(format!(
                    "point {t} has {supporting} registered observations"
                )));
            }
            if strict_errors && pt.error_rad > self.cfg.gates.max_reproj_rad {
                return Err(SfmError::AuditFailed(format!(
                    "point {t} error {:.4} exceeds gate",
                    pt.error_rad
                )));
            }
        }
        Ok(())
    }

    fn into_outcome(self) -> SfmOutcome {
        let mut recon = Reconstruction::default();
        for &i in &self.order {
            recon.poses.insert(self.images[i].clone(), self.poses[i].unwrap());
            recon.registration_order.push(self.images[i].clone());
        }
        for (t, pt) in self.points.iter().enumerate() {
            if let Some(pt) = pt {
                recon.points.insert(t, *pt);
            }
        }
        let unregistered = self
            .images
            .iter()
            .enumerate()
            .filter(|(i, _)| self.poses[*i].is_none())
            .map(|(_, n)| n.clone())
            .collect();
        SfmOutcome {
            recon,
            unregistered,
            log: self.log,
            filtered_points: self.filtered_total,
        }
    }
}

fn point_passes_gates(x: &Vec3, views: &[(&Pose, Bearing)], gates: &TriangulationGates) -> bool {
    if views.len() < 2 {
        return false;
    }
    let centers: Vec<Vec3> = views.iter().map(|(p, _)| p.center()).collect();
    let mut max_angle: f64 = 0.0;
    for i in 0..centers.len() {
        for j in (i + 1)..centers.len() {
            max_angle = max_angle
                .max(crate::geom::angle_between(&(x - centers[i]), &(x - centers[j])));
        }
    }
    if max_angle < gates.min_angle_rad {
        return false;
    }
    for (pose, u) in views {
        let p = pose.transform(x);
        if p.dot(u.as_vec()) <= 0.0 {
            return false;
        }
        match project_point(x, pose) {
            Ok(proj) => {
                if crate::geom::angular_residual(u, &proj) > gates.max_reproj_rad {
                    return false;
                }
            }
            Err(_) => return false,
        }
    }
    true
}

/// Runs the full incremental pipeline.
pub fn reconstruct(input: &SfmInput, cfg: &SfmConfig) -> Result<SfmOutcome, SfmError> {
    let mut engine = Engine::new(input, cfg)?;

    let init_idx = select_init_pair(&input.pairs, cfg.init_min_median_angle_rad)?;
    let init = &input.pairs[init_idx];
    let a = *engine
        .image_idx
        .get(&init.image_a)
        .ok_or_else(|| SfmError::UnknownImage(init.image_a.clone()))?;
    let b = *engine
        .image_idx
        .get(&init.image_b)
        .ok_or_else(|| SfmError::UnknownImage(init.image_b.clone()))?;
    engine.poses[a] = Some(Pose::identity());
    engine.poses[b] = Some(init.geometry.relative_pose());
    engine.order.push(a);
    engine.order.push(b);
    engine.init_pair = (a, b);
    engine.log.push(format!(
        "init pair {} - {} with {} inliers",
        init.image_a,
        init.image_b,
        init.geometry.num_inliers()
    ));

    let seeded = engine.triangulate_pass(None);
    engine.log.push(format!("init triangulated {seeded} points"));
    if seeded < 2 {
        return Err(SfmError::CannotInitialize(format!(
            "initial pair produced only {seeded} points"
        )));
    }
    engine.audit(false)?;

    let stream = Stream::root(cfg.seed);
    let mut since_global = 0usize;
    loop {
        // Candidates by visible triangulated points, ties by image id.
        let mut candidates: Vec<usize> = (0..engine.images.len())
            .filter(|&i| !engine.registered(i))
            .filter(|&i| engine.visible_points(i) > 0)
            .collect();
        candidates.sort_by(|&i, &j| {
            engine
                .visible_points(j)
                .cmp(&engine.visible_points(i))
                .then(engine.images[i].cmp(&engine.images[j]))
        });
        let mut registered_image = None;
        for image in candidates {
            let corrs = engine.correspondences_2d3d(image);
            if corrs.len() < 4 {
                continue;
            }
            match register_ransac(
                &corrs,
                &cfg.resection,
                stream.derive(&[tag::RANSAC, 1000 + image as u64]),
            ) {
                Ok(res) => {
                    engine.poses[image] = Some(res.pose);
                    engine.order.push(image);
                    engine.log.push(format!(
                        "registered {} with {}/{} resection inliers",
                        engine.images[image],
                        res.inlier_mask.iter().filter(|&&m| m).count(),
                        corrs.len()
                    ));
                    registered_image = Some(image);
                    break;
                }
                Err(e) => {
                    engine
                        .log
                        .push(format!("candidate {} rejected: {e}", engine.images[image]));
                }
            }
        }
        let Some(image) = registered_image else {
            break;
        };

        let dropped = engine.revalidate_points_seen_by(image);
        let new_pts = engine.triangulate_pass(None);
        engine.log.push(format!(
            "triangulated {new_pts} new points, revalidation dropped {dropped}, after {}",
            engine.images[image]
        ));

        // Local bundle: the new image plus well-connected neighbors.
        let mut shared: BTreeMap<usize, usize> = BTreeMap::new();
        for &t in &engine.tracks_of_image[image] {
            if engine.points[t].is_none() {
                continue;
            }
            for &(i, _) in &engine.track_obs[t] {
                if i != image && engine.registered(i) {
                    *shared.entry(i).or_insert(0) += 1;
                }
            }
        }
        let mut free: Vec<usize> = shared
            .iter()
            .filter(|(_, &n)| n >= cfg.local_ba_min_shared)
            .map(|(&i, _)| i)
            .collect();
        free.push(image);
        engine.bundle(&free, true);
        engine.audit(false)?;

        since_global += 1;
        if since_global >= cfg.global_ba_cadence {
            engine.global_adjust();
            engine.audit(true)?;
            since_global = 0;
        }
    }

    engine.global_adjust();
    engine.audit(true)?;
    Ok(engine.into_outcome())
}
