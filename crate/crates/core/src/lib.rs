//! Spherical incremental structure-from-motion for equirectangular
//! panoramas.
//!
//! Given dense pairwise 2D correspondences between 360° images, the
//! pipeline quantizes matches into multiview tracks, estimates two-view
//! geometry on the unit sphere with a robustified 8-point solver,
//! incrementally registers cameras by bearing-vector resection, and refines
//! everything with a spherical bundle adjustment. A deterministic synthetic
//! scene generator and pose-accuracy metrics close the loop for testing and
//! evaluation.

pub mod ba;
pub mod config;
pub mod cubemap;
pub mod eval;
pub mod geom;
pub mod io;
pub mod pipeline;
pub mod raster;
pub mod resection;
pub mod rng;
pub mod sfm;
pub mod synth;
pub mod tracks;
pub mod triangulate;
pub mod two_view;

pub use geom::{Bearing, ErpDims, Pose};
