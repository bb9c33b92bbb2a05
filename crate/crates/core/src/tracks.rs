//! Match ingestion, grid quantization, and multiview track building.
//!
//! Dense matchers emit pixel-level correspondences with no repeatable
//! keypoint identity, so nearby matches never chain across views. Snapping
//! every endpoint to a coarse grid (`⌊x/r⌉·r`) gives coincident matches a
//! shared identity; union-find over the quantized keypoints then links
//! two-view matches into multiview tracks.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("grid cell size must be positive, got {0}")]
    NonPositiveGrid(f64),
    #[error("pair references the same image twice: {0}")]
    SelfPair(String),
}

/// One dense correspondence between two images, continuous ERP pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub px_a: (f64, f64),
    pub px_b: (f64, f64),
    /// Matcher confidence in `[0, 1]`.
    pub confidence: f64,
}

/// All matches between one image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMatches {
    pub image_a: String,
    pub image_b: String,
    pub matches: Vec<Correspondence>,
}

impl PairMatches {
    pub fn new(image_a: String, image_b: String, matches: Vec<Correspondence>) -> Result<Self, MatchError> {
        if image_a == image_b {
            return Err(MatchError::SelfPair(image_a));
        }
        Ok(PairMatches {
            image_a,
            image_b,
            matches,
        })
    }
}

/// Integer grid cell coordinates of a quantized location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub x: i64,
    pub y: i64,
}

/// A quantized keypoint: one occupied grid cell of one image.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeypointId {
    pub image: String,
    pub cell: Cell,
}

/// A merged correspondence between two grid cells, carrying the kept
/// member's original coordinates as the representative location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizedMatch {
    pub cell_a: Cell,
    pub cell_b: Cell,
    pub rep_a: (f64, f64),
    pub rep_b: (f64, f64),
    pub confidence: f64,
}

/// Pair matches after quantization and in-cell merging.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPair {
    pub image_a: String,
    pub image_b: String,
    pub matches: Vec<QuantizedMatch>,
}

/// Snaps a coordinate to the grid: `⌊x/r⌉·r`, ties rounding half away
/// from zero. Idempotent.
pub fn quantize(x: f64, r: f64) -> Result<f64, MatchError> {
    if !(r > 0.0) {
        return Err(MatchError::NonPositiveGrid(r));
    }
    Ok((x / r).round() * r)
}

fn cell_of(x: f64, r: f64) -> i64 {
    (x / r).round() as i64
}

/// Quantizes both endpoints of every match and merges matches that collapse
/// onto the same `(cell_a, cell_b)` pair, keeping the highest-confidence
/// member (first one on ties).
pub fn quantize_matches(pm: &PairMatches, r: f64) -> Result<QuantizedPair, MatchError> {
    if !(r > 0.0) {
        return Err(MatchError::NonPositiveGrid(r));
    }
    let mut merged: BTreeMap<(Cell, Cell), QuantizedMatch> = BTreeMap::new();
    for m in &pm.matches {
        let ca = Cell {
            x: cell_of(m.px_a.0, r),
            y: cell_of(m.px_a.1, r),
        };
        let cb = Cell {
            x: cell_of(m.px_b.0, r),
            y: cell_of(m.px_b.1, r),
        };
        let cand = QuantizedMatch {
            cell_a: ca,
            cell_b: cb,
            rep_a: m.px_a,
            rep_b: m.px_b,
            confidence: m.confidence,
        };
        merged
            .entry((ca, cb))
            .and_modify(|kept| {
                if cand.confidence > kept.confidence {
                    *kept = cand;
                }
            })
            .or_insert(cand);
    }
    Ok(QuantizedPair {
        image_a: pm.image_a.clone(),
        image_b: pm.image_b.clone(),
        matches: merged.into_values().collect(),
    })
}

/// One multiview track: at most one observation per image, length >= 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    /// image -> (quantized cell, representative continuous coordinate).
    pub observations: BTreeMap<String, (Cell, (f64, f64))>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Output of track building, with enough bookkeeping to audit the
/// quantize/merge pipeline.
#[derive(Debug, Clone)]
pub struct TrackBuildResult {
    pub tracks: Vec<Track>,
    /// Matches dropped because their union would put two different cells of
    /// one image into the same track.
    pub dropped_conflicts: usize,
    /// Quantized matches that survived merging and were fed to union-find.
    pub surviving_matches: usize,
}

#[derive(Default)]
struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn add(&mut self) -> usize {
        let id = self.parent.len();
        self.parent.push(id);
        self.rank.push(0);
        id
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn link(&mut self, a: usize, b: usize) -> usize {
        if self.rank[a] < self.rank[b] {
            self.parent[a] = b;
            b
        } else if self.rank[a] > self.rank[b] {
            self.parent[b] = a;
            a
        } else {
            self.parent[b] = a;
            self.rank[a] += 1;
            a
        }
    }
}

#[derive(Default)]
struct TrackBuilder {
    node_of: BTreeMap<KeypointId, usize>,
    dsu: DisjointSet,
    /// Representative coordinate and its confidence, per node.
    reps: Vec<((f64, f64), f64)>,
    /// Per root: image -> cell, merged small-into-large on union.
    members: Vec<Option<BTreeMap<String, Cell>>>,
}

impl TrackBuilder {
    fn intern(&mut self, image: &str, cell: Cell, rep: (f64, f64), conf: f64) -> usize {
        let key = KeypointId {
            image: image.to_string(),
            cell,
        };
        if let Some(&id) = self.node_of.get(&key) {
            if conf > self.reps[id].1 {
                self.reps[id] = (rep, conf);
            }
            return id;
        }
        let id = self.dsu.add();
        self.node_of.insert(key, id);
        self.reps.push((rep, conf));
        let mut m = BTreeMap::new();
        m.insert(image.to_string(), cell);
        self.members.push(Some(m));
        id
    }

    /// Returns false when the union would merge two cells of one image.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let ra = self.dsu.find(a);
        let rb = self.dsu.find(b);
        if ra == rb {
            return true;
        }
        let (la, lb) = (
            self.members[ra].as_ref().unwrap().len(),
            self.members[rb].as_ref().unwrap().len(),
        );
        let (small, large) = if la <= lb { (ra, rb) } else { (rb, ra) };
        let conflict = self.members[small].as_ref().unwrap().iter().any(|(img, cell)| {
            self.members[large]
                .as_ref()
                .unwrap()
                .get(img)
                .is_some_and(|c| c != cell)
        });
        if conflict {
            return false;
        }
        let moved = self.members[small].take().unwrap();
        let root = self.dsu.link(ra, rb);
        if root == small {
            let large_map = self.members[large].take().unwrap();
            self.members[root] = Some(large_map);
        }
        self.members[root].as_mut().unwrap().extend(moved);
        true
    }
}

/// Links quantized keypoints into tracks by union-find.
///
/// Pairs are processed in lexicographic `(image_a, image_b)` order so the
/// output is deterministic. A union that would place two distinct cells of
/// the same image in one track is skipped and the match counted as dropped.
pub fn build_tracks(all_pairs: &[QuantizedPair]) -> TrackBuildResult {
    let mut order: Vec<usize> = (0..all_pairs.len()).collect();
    order.sort_by(|&i, &j| {
        (&all_pairs[i].image_a, &all_pairs[i].image_b)
            .cmp(&(&all_pairs[j].image_a, &all_pairs[j].image_b))
    });

    let mut tb = TrackBuilder::default();
    let mut dropped = 0usize;
    let mut surviving = 0usize;

    for &pi in &order {
        let pair = &all_pairs[pi];
        for m in &pair.matches {
            let a = tb.intern(&pair.image_a, m.cell_a, m.rep_a, m.confidence);
            let b = tb.intern(&pair.image_b, m.cell_b, m.rep_b, m.confidence);
            if tb.union(a, b) {
                surviving += 1;
            } else {
                dropped += 1;
            }
        }
    }

    let mut tracks = Vec::new();
    for id in 0..tb.members.len() {
        if tb.dsu.find(id) != id {
            continue;
        }
        let group = match &tb.members[id] {
            Some(g) if g.len() >= 2 => g,
            _ => continue,
        };
        let mut observations = BTreeMap::new();
        for (img, cell) in group {
            let node = tb.node_of[&KeypointId {
                image: img.clone(),
                cell: *cell,
            }];
            observations.insert(img.clone(), (*cell, tb.reps[node].0));
        }
        tracks.push(Track { observations });
    }
    tracks.sort_by(|a, b| {
        let ka = a.observations.iter().next().map(|(img, (cell, _))| (img, *cell));
        let kb = b.observations.iter().next().map(|(img, (cell, _))| (img, *cell));
        ka.cmp(&kb)
    });

    TrackBuildResult {
        tracks,
        dropped_conflicts: dropped,
        surviving_matches: surviving,
    }
}
