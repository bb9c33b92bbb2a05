//! Line-oriented text formats for matches, scenes/poses, and tracks, plus
//! ASCII PLY export and PNG raster I/O.
//!
//! Floats are written with Rust's shortest round-trip formatting, so
//! emitting the same data twice is byte-identical.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};
use thiserror::Error;

use crate::geom::{ErpDims, Mat3, Pose, Vec3};
use crate::raster::ImageBuf;
use crate::tracks::{Cell, Correspondence, PairMatches, Track};

pub const MATCHES_MAGIC: &str = "im360-matches v1";
pub const TRACKS_MAGIC: &str = "im360-tracks v1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("image error: {0}")]
    Image(String),
}

fn parse_err(line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_f64(line: usize, tok: &str, what: &str) -> Result<f64, IoError> {
    tok.parse::<f64>()
        .map_err(|_| parse_err(line, format!("invalid {what} `{tok}`")))
}

/// Dense pairwise matches plus per-image ERP dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchesFile {
    pub dims: BTreeMap<String, ErpDims>,
    pub pairs: Vec<PairMatches>,
}

pub fn parse_matches(text: &str) -> Result<MatchesFile, IoError> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    if first.trim() != MATCHES_MAGIC {
        return Err(parse_err(1, format!("expected `{MATCHES_MAGIC}`")));
    }
    let mut dims: BTreeMap<String, ErpDims> = BTreeMap::new();
    let mut pairs: Vec<PairMatches> = Vec::new();
    let mut current: Option<PairMatches> = None;
    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "dims" => {
                if toks.len() != 4 {
                    return Err(parse_err(lineno, "dims needs `dims <image> <width> <height>`"));
                }
                let w: u32 = toks[2]
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("invalid width `{}`", toks[2])))?;
                let h: u32 = toks[3]
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("invalid height `{}`", toks[3])))?;
                let d = ErpDims::new(w, h).map_err(|e| parse_err(lineno, e.to_string()))?;
                dims.insert(toks[1].to_string(), d);
            }
            "pair" => {
                if toks.len() != 3 {
                    return Err(parse_err(lineno, "pair needs `pair <image_a> <image_b>`"));
                }
                for img in &toks[1..=2] {
                    if !dims.contains_key(*img) {
                        return Err(parse_err(
                            lineno,
                            format!("image `{img}` used before its dims line"),
                        ));
                    }
                }
                if let Some(p) = current.take() {
                    pairs.push(p);
                }
                current = Some(
                    PairMatches::new(toks[1].to_string(), toks[2].to_string(), Vec::new())
                        .map_err(|e| parse_err(lineno, e.to_string()))?,
                );
            }
            _ => {
                if toks.len() != 5 {
                    return Err(parse_err(
                        lineno,
                        format!("expected `x_a y_a x_b y_b conf`, got {} fields", toks.len()),
                    ));
                }
                let pair = current
                    .as_mut()
                    .ok_or_else(|| parse_err(lineno, "match line before any `pair` line"))?;
                let v: Vec<f64> = toks
                    .iter()
                    .map(|t| parse_f64(lineno, t, "coordinate"))
                    .collect::<Result<_, _>>()?;
                if !(0.0..=1.0).contains(&v[4]) {
                    return Err(parse_err(lineno, format!("confidence {} not in [0,1]", v[4])));
                }
                let check = |img: &str, x: f64, y: f64| -> Result<(), IoError> {
                    let d = dims[img];
                    if !(0.0..=d.width() as f64).contains(&x)
                        || !(0.0..=d.height() as f64).contains(&y)
                    {
                        return Err(parse_err(
                            lineno,
                            format!("coordinate ({x}, {y}) outside {img} dims"),
                        ));
                    }
                    Ok(())
                };
                check(&pair.image_a.clone(), v[0], v[1])?;
                check(&pair.image_b.clone(), v[2], v[3])?;
                pair.matches.push(Correspondence {
                    px_a: (v[0], v[1]),
                    px_b: (v[2], v[3]),
                    confidence: v[4],
                });
            }
        }
    }
    if let Some(p) = current.take() {
        pairs.push(p);
    }
    Ok(MatchesFile { dims, pairs })
}

pub fn write_matches<W: Write>(w: &mut W, mf: &MatchesFile) -> Result<(), IoError> {
    writeln!(w, "{MATCHES_MAGIC}")?;
    for (img, d) in &mf.dims {
        writeln!(w, "dims {img} {} {}", d.width(), d.height())?;
    }
    for pair in &mf.pairs {
        writeln!(w, "pair {} {}", pair.image_a, pair.image_b)?;
        for m in &pair.matches {
            writeln!(
                w,
                "{} {} {} {} {}",
                m.px_a.0, m.px_a.1, m.px_b.0, m.px_b.1, m.confidence
            )?;
        }
    }
    Ok(())
}

/// Poses (world-to-camera unit quaternion + translation) and optional
/// labelled points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneFile {
    pub poses: BTreeMap<String, Pose>,
    pub points: Vec<(String, Vec3)>,
}

/// Pose as `[qw, qx, qy, qz, tx, ty, tz]` with a sign-canonical unit
/// quaternion; the exact representation written by `write_scene`.
pub fn pose_to_quat(pose: &Pose) -> [f64; 7] {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(pose.rotation);
    let q = UnitQuaternion::from_rotation_matrix(&rot);
    let mut q = q.into_inner();
    // Canonical sign so output is deterministic.
    if q.w < 0.0 || (q.w == 0.0 && (q.i < 0.0 || (q.i == 0.0 && (q.j < 0.0 || (q.j == 0.0 && q.k < 0.0))))) {
        q = -q;
    }
    [
        q.w,
        q.i,
        q.j,
        q.k,
        pose.translation.x,
        pose.translation.y,
        pose.translation.z,
    ]
}

fn quat_to_pose(v: &[f64; 7]) -> Pose {
    let q = UnitQuaternion::from_quaternion(Quaternion::new(v[0], v[1], v[2], v[3]));
    Pose::from_parts(
        q.to_rotation_matrix().into_inner(),
        Vec3::new(v[4], v[5], v[6]),
    )
}

pub fn parse_scene(text: &str) -> Result<SceneFile, IoError> {
    let mut out = SceneFile::default();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "pose" => {
                if toks.len() != 9 {
                    return Err(parse_err(
                        lineno,
                        "pose needs `pose <cam> qw qx qy qz tx ty tz`",
                    ));
                }
                let mut v = [0.0; 7];
                for (k, tok) in toks[2..].iter().enumerate() {
                    v[k] = parse_f64(lineno, tok, "pose value")?;
                }
                let qn = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
                if (qn - 1.0).abs() > 1e-6 {
                    return Err(parse_err(lineno, format!("quaternion norm {qn} is not 1")));
                }
                out.poses.insert(toks[1].to_string(), quat_to_pose(&v));
            }
            "point" => {
                if toks.len() != 5 {
                    return Err(parse_err(lineno, "point needs `point <id> x y z`"));
                }
                let x = parse_f64(lineno, toks[2], "coordinate")?;
                let y = parse_f64(lineno, toks[3], "coordinate")?;
                let z = parse_f64(lineno, toks[4], "coordinate")?;
                out.points.push((toks[1].to_string(), Vec3::new(x, y, z)));
            }
            other => {
                return Err(parse_err(lineno, format!("unknown record `{other}`")));
            }
        }
    }
    Ok(out)
}

pub fn write_scene<W: Write>(w: &mut W, scene: &SceneFile) -> Result<(), IoError> {
    for (name, pose) in &scene.poses {
        let v = pose_to_quat(pose);
        writeln!(
            w,
            "pose {name} {} {} {} {} {} {} {}",
            v[0], v[1], v[2], v[3], v[4], v[5], v[6]
        )?;
    }
    for (id, p) in &scene.points {
        writeln!(w, "point {id} {} {} {}", p.x, p.y, p.z)?;
    }
    Ok(())
}

/// Tracks plus the grid size and image dims they were built with.
#[derive(Debug, Clone, PartialEq)]
pub struct TracksFile {
    pub grid: f64,
    pub dims: BTreeMap<String, ErpDims>,
    pub tracks: Vec<Track>,
}

pub fn parse_tracks(text: &str) -> Result<TracksFile, IoError> {
    let mut lines = text.lines().enumerate().peekable();
    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    if first.trim() != TRACKS_MAGIC {
        return Err(parse_err(1, format!("expected `{TRACKS_MAGIC}`")));
    }
    let mut grid = None;
    let mut dims: BTreeMap<String, ErpDims> = BTreeMap::new();
    let mut tracks: Vec<Track> = Vec::new();
    let mut pending: Option<(usize, Track)> = None; // (remaining obs, track)
    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "grid" if toks.len() == 2 => {
                let g = parse_f64(lineno, toks[1], "grid size")?;
                if !(g > 0.0) {
                    return Err(parse_err(lineno, "grid size must be positive"));
                }
                grid = Some(g);
            }
            "dims" if toks.len() == 4 => {
                let w: u32 = toks[2]
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("invalid width `{}`", toks[2])))?;
                let h: u32 = toks[3]
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("invalid height `{}`", toks[3])))?;
                let d = ErpDims::new(w, h).map_err(|e| parse_err(lineno, e.to_string()))?;
                dims.insert(toks[1].to_string(), d);
            }
            "track" if toks.len() == 2 => {
                if let Some((left, _)) = &pending {
                    return Err(parse_err(
                        lineno,
                        format!("previous track still expects {left} observations"),
                    ));
                }
                let len: usize = toks[1]
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("invalid track length `{}`", toks[1])))?;
                if len < 2 {
                    return Err(parse_err(lineno, "track length must be >= 2"));
                }
                pending = Some((
                    len,
                    Track {
                        observations: BTreeMap::new(),
                    },
                ));
            }
            "obs" if toks.len() == 4 => {
                let g = grid.ok_or_else(|| parse_err(lineno, "obs before `grid` line"))?;
                let (left, track) = pending
                    .as_mut()
                    .ok_or_else(|| parse_err(lineno, "obs outside a track block"))?;
                let x = parse_f64(lineno, toks[2], "coordinate")?;
                let y = parse_f64(lineno, toks[3], "coordinate")?;
                let cell = Cell {
                    x: (x / g).round() as i64,
                    y: (y / g).round() as i64,
                };
                if track
                    .observations
                    .insert(toks[1].to_string(), (cell, (x, y)))
                    .is_some()
                {
                    return Err(parse_err(
                        lineno,
                        format!("duplicate observation of image `{}` in one track", toks[1]),
                    ));
                }
                *left -= 1;
                if *left == 0 {
                    tracks.push(pending.take().unwrap().1);
                }
            }
            other => {
                return Err(parse_err(lineno, format!("unknown or malformed record `{other}`")));
            }
        }
    }
    if let Some((left, _)) = pending {
        return Err(parse_err(
            text.lines().count(),
            format!("file ends inside a track block ({left} observations missing)"),
        ));
    }
    let grid = grid.ok_or_else(|| parse_err(1, "missing `grid` line"))?;
    Ok(TracksFile {
        grid,
        dims,
        tracks,
    })
}

pub fn write_tracks<W: Write>(w: &mut W, tf: &TracksFile) -> Result<(), IoError> {
    writeln!(w, "{TRACKS_MAGIC}")?;
    writeln!(w, "grid {}", tf.grid)?;
    for (img, d) in &tf.dims {
        writeln!(w, "dims {img} {} {}", d.width(), d.height())?;
    }
    for t in &tf.tracks {
        writeln!(w, "track {}", t.observations.len())?;
        for (img, (_, coord)) in &t.observations {
            writeln!(w, "obs {img} {} {}", coord.0, coord.1)?;
        }
    }
    Ok(())
}

/// One PLY vertex: position, optional color, and the supporting track
/// length exported as a scalar property.
#[derive(Debug, Clone, Copy)]
pub struct PlyPoint {
    pub position: Vec3,
    pub color: Option<[u8; 3]>,
    pub track_length: usize,
}

/// ASCII PLY with `x y z [red green blue] track_length`.
pub fn write_ply<W: Write>(w: &mut W, points: &[PlyPoint]) -> Result<(), IoError> {
    let with_color = !points.is_empty() && points.iter().all(|p| p.color.is_some());
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", points.len())?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    if with_color {
        writeln!(w, "property uchar red")?;
        writeln!(w, "property uchar green")?;
        writeln!(w, "property uchar blue")?;
    }
    writeln!(w, "property int track_length")?;
    writeln!(w, "end_header")?;
    for p in points {
        let (x, y, z) = (p.position.x as f32, p.position.y as f32, p.position.z as f32);
        if with_color {
            let c = p.color.unwrap();
            writeln!(w, "{x} {y} {z} {} {} {} {}", c[0], c[1], c[2], p.track_length)?;
        } else {
            writeln!(w, "{x} {y} {z} {}", p.track_length)?;
        }
    }
    Ok(())
}

/// Loads a PNG into a float RGB raster in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<ImageBuf, IoError> {
    let img = image::open(path)
        .map_err(|e| IoError::Image(e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok(ImageBuf::from_data(w as usize, h as usize, 3, data))
}

/// Writes a float raster (clamped to `[0, 1]`) as an 8-bit PNG.
pub fn write_png(path: &Path, img: &ImageBuf) -> Result<(), IoError> {
    assert_eq!(img.channels(), 3, "PNG export expects RGB");
    let data: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(img.width() as u32, img.height() as u32, data)
            .expect("raster size matches");
    buf.save(path).map_err(|e| IoError::Image(e.to_string()))?;
    Ok(())
}

/// Pose map in the scene-file `pose` format.
pub fn write_poses<W: Write>(w: &mut W, poses: &BTreeMap<String, Pose>) -> Result<(), IoError> {
    write_scene(
        w,
        &SceneFile {
            poses: poses.clone(),
            points: Vec::new(),
        },
    )
}

/// Rotation part sanity check used by parsers of externally produced files.
pub fn is_rotation(m: &Mat3) -> bool {
    (m.transpose() * m - Mat3::identity()).norm() < 1e-9 && (m.determinant() - 1.0).abs() < 1e-9
}
