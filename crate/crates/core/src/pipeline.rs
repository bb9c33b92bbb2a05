//! End-to-end reconstruction from parsed input files: quantize, build
//! tracks, verify pairs, run the incremental driver. Shared by the CLI and
//! the C API.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use thiserror::Error;

use crate::config::Config;
use crate::geom::{pixel_to_bearing, Bearing, ErpDims};
use crate::io::{MatchesFile, TracksFile};
use crate::rng::{tag, Stream};
use crate::sfm::{reconstruct, SfmError, SfmInput, SfmOutcome, VerifiedPair};
use crate::tracks::{build_tracks, quantize_matches, QuantizedPair, Track};
use crate::two_view::ransac_two_view;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Sfm(#[from] SfmError),
}

/// Reconstruction outcome plus ingest bookkeeping.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub outcome: SfmOutcome,
    /// Supporting track length per reconstructed point (track index keyed).
    pub track_lengths: BTreeMap<usize, usize>,
    pub n_images: usize,
    pub dropped_conflicts: usize,
    pub verified_pairs: usize,
    pub total_pairs: usize,
    pub log: Vec<String>,
}

struct PairCorrs {
    image_a: String,
    image_b: String,
    corrs: Vec<(Bearing, Bearing)>,
}

fn lift(
    image_a: &str,
    image_b: &str,
    coords: impl Iterator<Item = ((f64, f64), (f64, f64))>,
    dims: &BTreeMap<String, ErpDims>,
) -> Result<PairCorrs, PipelineError> {
    let da = *dims
        .get(image_a)
        .ok_or_else(|| PipelineError::Input(format!("missing dims for {image_a}")))?;
    let db = *dims
        .get(image_b)
        .ok_or_else(|| PipelineError::Input(format!("missing dims for {image_b}")))?;
    let mut corrs = Vec::new();
    for (pa, pb) in coords {
        let ua = pixel_to_bearing(pa.0, pa.1, da)
            .map_err(|e| PipelineError::Input(e.to_string()))?;
        let ub = pixel_to_bearing(pb.0, pb.1, db)
            .map_err(|e| PipelineError::Input(e.to_string()))?;
        corrs.push((ua, ub));
    }
    Ok(PairCorrs {
        image_a: image_a.to_string(),
        image_b: image_b.to_string(),
        corrs,
    })
}

fn verify_and_reconstruct(
    dims: BTreeMap<String, ErpDims>,
    tracks: Vec<Track>,
    mut pair_corrs: Vec<PairCorrs>,
    allow_pairs: Option<&BTreeSet<(String, String)>>,
    cfg: &Config,
    mut log: Vec<String>,
    dropped_conflicts: usize,
) -> Result<PipelineOutput, PipelineError> {
    if let Some(allow) = allow_pairs {
        pair_corrs.retain(|p| {
            allow.contains(&(p.image_a.clone(), p.image_b.clone()))
                || allow.contains(&(p.image_b.clone(), p.image_a.clone()))
        });
    }
    let total_pairs = pair_corrs.len();
    let sfm_cfg = cfg.to_sfm_config();
    let root = Stream::root(cfg.seed);
    // Per-pair seeded streams keep the result identical under any thread
    // count.
    let verified: Vec<Option<VerifiedPair>> = pair_corrs
        .par_iter()
        .enumerate()
        .map(|(k, pc)| {
            if pc.corrs.len() < 8 {
                return None;
            }
            ransac_two_view(&pc.corrs, &sfm_cfg.ransac, root.derive(&[tag::RANSAC, k as u64]))
                .ok()
                .map(|geometry| VerifiedPair {
                    image_a: pc.image_a.clone(),
                    image_b: pc.image_b.clone(),
                    geometry,
                    corrs: pc.corrs.clone(),
                })
        })
        .collect();
    let pairs: Vec<VerifiedPair> = verified.into_iter().flatten().collect();
    let verified_pairs = pairs.len();
    log.push(format!("verified {verified_pairs} / {total_pairs} pairs"));

    let images: Vec<String> = dims.keys().cloned().collect();
    let n_images = images.len();
    let input = SfmInput {
        images,
        dims,
        tracks,
        pairs,
    };
    let outcome = reconstruct(&input, &sfm_cfg)?;
    log.extend(outcome.log.iter().cloned());
    let track_lengths = outcome
        .recon
        .points
        .keys()
        .map(|&t| (t, input.tracks[t].observations.len()))
        .collect();
    Ok(PipelineOutput {
        outcome,
        track_lengths,
        n_images,
        dropped_conflicts,
        verified_pairs,
        total_pairs,
        log,
    })
}

/// Full pipeline from a dense matches file.
pub fn reconstruct_from_matches(
    mf: &MatchesFile,
    allow_pairs: Option<&BTreeSet<(String, String)>>,
    cfg: &Config,
) -> Result<PipelineOutput, PipelineError> {
    let quantized: Vec<QuantizedPair> = mf
        .pairs
        .iter()
        .map(|pm| quantize_matches(pm, cfg.grid_cell_px))
        .collect::<Result<_, _>>()
        .map_err(|e| PipelineError::Input(e.to_string()))?;
    let built = build_tracks(&quantized);
    let log = vec![format!(
        "tracks: {} built, {} conflicts dropped",
        built.tracks.len(),
        built.dropped_conflicts
    )];
    let mut pair_corrs = Vec::new();
    for qp in &quantized {
        pair_corrs.push(lift(
            &qp.image_a,
            &qp.image_b,
            qp.matches.iter().map(|m| (m.rep_a, m.rep_b)),
            &mf.dims,
        )?);
    }
    verify_and_reconstruct(
        mf.dims.clone(),
        built.tracks,
        pair_corrs,
        allow_pairs,
        cfg,
        log,
        built.dropped_conflicts,
    )
}

/// Full pipeline from a prebuilt tracks file; pairwise correspondences are
/// rebuilt from track co-observations.
pub fn reconstruct_from_tracks(
    tf: &TracksFile,
    allow_pairs: Option<&BTreeSet<(String, String)>>,
    cfg: &Config,
) -> Result<PipelineOutput, PipelineError> {
    let mut by_pair: BTreeMap<(String, String), Vec<((f64, f64), (f64, f64))>> = BTreeMap::new();
    for t in &tf.tracks {
        let obs: Vec<_> = t.observations.iter().collect();
        for i in 0..obs.len() {
            for j in (i + 1)..obs.len() {
                let (na, (_, ca)) = obs[i];
                let (nb, (_, cb)) = obs[j];
                by_pair
                    .entry((na.clone(), nb.clone()))
                    .or_default()
                    .push((*ca, *cb));
            }
        }
    }
    let mut pair_corrs = Vec::new();
    for ((a, b), coords) in &by_pair {
        pair_corrs.push(lift(a, b, coords.iter().copied(), &tf.dims)?);
    }
    verify_and_reconstruct(
        tf.dims.clone(),
        tf.tracks.clone(),
        pair_corrs,
        allow_pairs,
        cfg,
        Vec::new(),
        0,
    )
}
