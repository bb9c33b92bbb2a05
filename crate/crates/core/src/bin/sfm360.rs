//! Command-line front end for the spherical SfM toolkit.
//!
//! Exit codes: 0 success (including partial registration), 2 input error,
//! 3 pipeline failure.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use sfm360::config::Config;
use sfm360::cubemap::{cubemap_to_erp, erp_to_cubemap};
use sfm360::geom::ErpDims;
use sfm360::io::{
    self, parse_matches, parse_scene, parse_tracks, write_matches, write_png, write_poses,
    write_scene, write_tracks, MatchesFile, PlyPoint, SceneFile, TracksFile, MATCHES_MAGIC,
    TRACKS_MAGIC,
};
use sfm360::pipeline::{reconstruct_from_matches, reconstruct_from_tracks, PipelineError};
use sfm360::synth::{generate_scene, observe, SceneSpec};
use sfm360::tracks::{build_tracks, quantize_matches, QuantizedPair};

#[derive(Parser)]
#[command(name = "sfm360", version, about = "Spherical structure-from-motion for ERP panoramas")]
struct Cli {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap (0 = all cores). Does not change results.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: ground-truth poses/points plus matches.
    Synth {
        #[arg(long)]
        cams: usize,
        #[arg(long)]
        points: usize,
        /// Room dimensions as WxHxD, e.g. 8x6x3.
        #[arg(long)]
        room: String,
        /// ERP dimensions as WxH, e.g. 640x320.
        #[arg(long, default_value = "640x320")]
        dims: String,
        /// Isotropic pixel noise sigma.
        #[arg(long, default_value_t = 0.0)]
        noise_px: f64,
        /// Fraction of matches replaced by uniform-random outliers.
        #[arg(long, default_value_t = 0.0)]
        outlier_frac: f64,
        #[arg(long)]
        out_scene: PathBuf,
        #[arg(long)]
        out_matches: PathBuf,
    },
    /// Quantize matches, merge, and build multiview tracks.
    Tracks {
        #[arg(long)]
        matches: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run two-view verification and incremental reconstruction.
    Reconstruct {
        /// Matches file or tracks file (detected by header).
        #[arg(long)]
        input: PathBuf,
        /// Optional pair list (`<image_a> <image_b>` lines) restricting
        /// which pairs are verified.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out_poses: PathBuf,
        #[arg(long)]
        out_ply: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Project an ERP panorama onto six cube faces.
    Cubemap {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        face_size: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also reproject the faces back to ERP (fidelity check output).
        #[arg(long)]
        roundtrip: bool,
    },
    /// Compare estimated poses against ground truth.
    Evaluate {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// AUC thresholds in degrees.
        #[arg(long, default_value = "3,5,10")]
        taus: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum CliError {
    Input(String),
    Pipeline(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Pipeline(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Pipeline(m) => m,
        }
    }
}

fn input_err(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, CliError> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn parse_pair_of<T: std::str::FromStr>(s: &str, sep: char, what: &str) -> Result<Vec<T>, CliError> {
    let parts: Vec<&str> = s.split(sep).collect();
    parts
        .iter()
        .map(|p| p.trim().parse::<T>().map_err(|_| CliError::Input(format!("invalid {what}: `{s}`"))))
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => match Config::parse(&text) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {}: {e}", path.display());
                    return ExitCode::from(2);
                }
            },
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                return ExitCode::from(2);
            }
        },
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if cfg.threads > 0 {
        // Ignore failure if a pool already exists (e.g. repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }

    let result = match cli.command {
        Command::Synth {
            cams,
            points,
            room,
            dims,
            noise_px,
            outlier_frac,
            out_scene,
            out_matches,
        } => cmd_synth(
            &cfg, cams, points, &room, &dims, noise_px, outlier_frac, &out_scene, &out_matches,
        ),
        Command::Tracks { matches, out } => cmd_tracks(&cfg, &matches, &out),
        Command::Reconstruct {
            input,
            pairs,
            out_poses,
            out_ply,
            log,
        } => cmd_reconstruct(&cfg, &input, pairs.as_deref(), &out_poses, &out_ply, log.as_deref()),
        Command::Cubemap {
            image,
            face_size,
            out_dir,
            roundtrip,
        } => cmd_cubemap(&image, face_size, &out_dir, roundtrip),
        Command::Evaluate { est, gt, taus, out } => cmd_evaluate(&est, &gt, &taus, out.as_deref()),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    cfg: &Config,
    cams: usize,
    points: usize,
    room: &str,
    dims: &str,
    noise_px: f64,
    outlier_frac: f64,
    out_scene: &Path,
    out_matches: &Path,
) -> Result<(), CliError> {
    let r: Vec<f64> = parse_pair_of(room, 'x', "room dimensions")?;
    if r.len() != 3 {
        return Err(CliError::Input(format!("room needs WxHxD, got `{room}`")));
    }
    let d: Vec<u32> = parse_pair_of(dims, 'x', "ERP dimensions")?;
    if d.len() != 2 {
        return Err(CliError::Input(format!("dims needs WxH, got `{dims}`")));
    }
    let erp = ErpDims::new(d[0], d[1]).map_err(input_err)?;
    if !(0.0..1.0).contains(&outlier_frac) {
        return Err(CliError::Input(format!(
            "outlier fraction {outlier_frac} not in [0, 1)"
        )));
    }
    let scene = generate_scene(&SceneSpec {
        n_cams: cams,
        n_points: points,
        room: (r[0], r[1], r[2]),
        seed: cfg.seed,
    })
    .map_err(input_err)?;
    let obs = observe(&scene, erp, noise_px, outlier_frac);

    let mut scene_file = SceneFile::default();
    for (name, pose) in scene.camera_names().into_iter().zip(scene.poses.iter()) {
        scene_file.poses.insert(name, *pose);
    }
    for (i, p) in scene.points.iter().enumerate() {
        scene_file.points.push((i.to_string(), *p));
    }
    let mut w = create(out_scene)?;
    write_scene(&mut w, &scene_file).map_err(input_err)?;

    let mf = MatchesFile {
        dims: scene.camera_names().into_iter().map(|n| (n, erp)).collect(),
        pairs: obs.pairs,
    };
    let mut w = create(out_matches)?;
    write_matches(&mut w, &mf).map_err(input_err)?;
    println!(
        "synth: {} cameras, {} points, {} pairs -> {} + {}",
        cams,
        points,
        mf.pairs.len(),
        out_scene.display(),
        out_matches.display()
    );
    Ok(())
}

fn quantize_all(mf: &MatchesFile, grid: f64) -> Result<Vec<QuantizedPair>, CliError> {
    mf.pairs
        .iter()
        .map(|pm| quantize_matches(pm, grid).map_err(input_err))
        .collect()
}

fn cmd_tracks(cfg: &Config, matches: &Path, out: &Path) -> Result<(), CliError> {
    let mf = parse_matches(&read_file(matches)?).map_err(input_err)?;
    let quantized = quantize_all(&mf, cfg.grid_cell_px)?;
    let built = build_tracks(&quantized);
    let tf = TracksFile {
        grid: cfg.grid_cell_px,
        dims: mf.dims,
        tracks: built.tracks,
    };
    let mut w = create(out)?;
    write_tracks(&mut w, &tf).map_err(input_err)?;
    if tf.tracks.is_empty() {
        println!("warning: no tracks built (empty or disconnected matches)");
    }
    println!(
        "tracks: {} tracks from {} surviving matches, {} conflicting matches dropped",
        tf.tracks.len(),
        built.surviving_matches,
        built.dropped_conflicts
    );
    Ok(())
}

fn cmd_reconstruct(
    cfg: &Config,
    input: &Path,
    pairs_file: Option<&Path>,
    out_poses: &Path,
    out_ply: &Path,
    log_path: Option<&Path>,
) -> Result<(), CliError> {
    let text = read_file(input)?;
    let first_line = text.lines().next().unwrap_or("").trim();

    let allow = match pairs_file {
        Some(pf) => {
            let mut set = std::collections::BTreeSet::new();
            for l in read_file(pf)?.lines().filter(|l| !l.trim().is_empty()) {
                let mut it = l.split_whitespace();
                match (it.next(), it.next()) {
                    (Some(a), Some(b)) => {
                        set.insert((a.to_string(), b.to_string()));
                    }
                    _ => return Err(CliError::Input(format!("bad pair line `{l}`"))),
                }
            }
            Some(set)
        }
        None => None,
    };

    let t0 = Instant::now();
    let result = if first_line == MATCHES_MAGIC {
        let mf = parse_matches(&text).map_err(input_err)?;
        reconstruct_from_matches(&mf, allow.as_ref(), cfg)
    } else if first_line == TRACKS_MAGIC {
        let tf = parse_tracks(&text).map_err(input_err)?;
        reconstruct_from_tracks(&tf, allow.as_ref(), cfg)
    } else {
        return Err(CliError::Input(format!(
            "{}: unrecognized header `{first_line}`",
            input.display()
        )));
    };
    let out = match result {
        Ok(out) => out,
        Err(PipelineError::Input(m)) => return Err(CliError::Input(m)),
        Err(PipelineError::Sfm(e)) => return Err(CliError::Pipeline(e.to_string())),
    };

    let mut w = create(out_poses)?;
    write_poses(&mut w, &out.outcome.recon.poses).map_err(input_err)?;
    w.flush().map_err(input_err)?;

    let ply_points: Vec<PlyPoint> = out
        .outcome
        .recon
        .points
        .values()
        .map(|pt| PlyPoint {
            position: pt.position,
            color: None,
            track_length: out.track_lengths[&pt.track],
        })
        .collect();
    let mut w = create(out_ply)?;
    io::write_ply(&mut w, &ply_points).map_err(input_err)?;
    w.flush().map_err(input_err)?;

    println!(
        "registered {} / {} images, {} points",
        out.outcome.recon.num_registered(),
        out.n_images,
        ply_points.len()
    );
    if !out.outcome.unregistered.is_empty() {
        println!("unregistered: {}", out.outcome.unregistered.join(" "));
    }
    if let Some(lp) = log_path {
        let mut w = create(lp)?;
        for line in &out.log {
            writeln!(w, "{line}").map_err(input_err)?;
        }
        writeln!(w, "stage total {:.3}s", t0.elapsed().as_secs_f64()).map_err(input_err)?;
    }
    Ok(())
}

fn cmd_cubemap(image: &Path, face_size: usize, out_dir: &Path, roundtrip: bool) -> Result<(), CliError> {
    let erp = io::read_png(image).map_err(input_err)?;
    let faces = erp_to_cubemap(&erp, face_size).map_err(input_err)?;
    std::fs::create_dir_all(out_dir).map_err(input_err)?;
    let mut poses = BTreeMap::new();
    for f in &faces {
        let name = f.face_id.name();
        write_png(&out_dir.join(format!("{name}.png")), &f.image).map_err(input_err)?;
        poses.insert(name.to_string(), f.virtual_pose);
    }
    let mut w = create(&out_dir.join("faces.txt"))?;
    write_poses(&mut w, &poses).map_err(input_err)?;
    if roundtrip {
        let dims = ErpDims::new(erp.width() as u32, erp.height() as u32).map_err(input_err)?;
        let back = cubemap_to_erp(&faces, dims).map_err(input_err)?;
        write_png(&out_dir.join("roundtrip.png"), &back).map_err(input_err)?;
    }
    println!("cubemap: 6 faces of {face_size}x{face_size} written to {}", out_dir.display());
    Ok(())
}

fn cmd_evaluate(est: &Path, gt: &Path, taus: &str, out: Option<&Path>) -> Result<(), CliError> {
    let est_poses = parse_scene(&read_file(est)?).map_err(input_err)?.poses;
    let gt_poses = parse_scene(&read_file(gt)?).map_err(input_err)?.poses;
    let taus: Vec<f64> = parse_pair_of(taus, ',', "threshold list")?;
    let report = sfm360::eval::report(&est_poses, &gt_poses, &taus)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    print!("{}", report.to_table());
    if let Some(path) = out {
        let mut w = create(path)?;
        w.write_all(report.to_key_values().as_bytes()).map_err(input_err)?;
    }
    Ok(())
}
