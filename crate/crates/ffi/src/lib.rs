//! C ABI for the spherical SfM toolkit.
//!
//! All functions are `extern "C"`, never unwind, and report failures
//! through [`sfm360_status`] codes; the per-thread detail message is
//! available from [`sfm360_last_error`]. Reconstructions are returned as
//! opaque handles owned by the caller and released with
//! [`sfm360_reconstruction_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sfm360::config::Config;
use sfm360::io::{self, parse_matches, parse_scene, parse_tracks, PlyPoint};
use sfm360::pipeline::{reconstruct_from_matches, reconstruct_from_tracks, PipelineError, PipelineOutput};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[allow(non_camel_case_types)]
pub enum sfm360_status {
    SFM360_OK = 0,
    SFM360_INVALID_ARGUMENT = 1,
    SFM360_IO_ERROR = 2,
    SFM360_PARSE_ERROR = 3,
    SFM360_PIPELINE_ERROR = 4,
    SFM360_BUFFER_TOO_SMALL = 5,
    SFM360_PANIC = 6,
}

use sfm360_status::*;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: Vec<u8> = msg.bytes().filter(|&b| b != 0).collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: sfm360_status, msg: &str) -> sfm360_status {
    set_error(msg);
    status
}

fn guarded(f: impl FnOnce() -> sfm360_status) -> sfm360_status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(SFM360_PANIC, "internal panic"),
    }
}

/// Opaque reconstruction handle.
#[allow(non_camel_case_types)]
pub struct sfm360_reconstruction {
    output: PipelineOutput,
    /// Registered image names in registration order.
    names: Vec<CString>,
}

unsafe fn cstr<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, sfm360_status> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        return Err(SFM360_INVALID_ARGUMENT);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        SFM360_INVALID_ARGUMENT
    })
}

/// Library version string; static storage.
#[no_mangle]
pub extern "C" fn sfm360_version() -> *const c_char {
    static VERSION: &[u8] = concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes();
    VERSION.as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sfm360_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

fn load_config(config_path: *const c_char, seed: u64) -> Result<Config, sfm360_status> {
    let mut cfg = if config_path.is_null() {
        Config::default()
    } else {
        let path = unsafe { cstr(config_path, "config path") }?;
        let text = std::fs::read_to_string(path).map_err(|e| {
            set_error(&format!("{path}: {e}"));
            SFM360_IO_ERROR
        })?;
        Config::parse(&text).map_err(|e| {
            set_error(&e.to_string());
            SFM360_PARSE_ERROR
        })?
    };
    cfg.seed = seed;
    Ok(cfg)
}

/// Runs the full pipeline on a matches or tracks file (detected by its
/// header line) and returns an opaque reconstruction handle in `out`.
///
/// `config_path` may be null for defaults. The caller owns the handle.
///
/// # Safety
/// `input_path` (and `config_path` when non-null) must be valid
/// NUL-terminated strings; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sfm360_reconstruct_file(
    input_path: *const c_char,
    config_path: *const c_char,
    seed: u64,
    out: *mut *mut sfm360_reconstruction,
) -> sfm360_status {
    guarded(|| {
        if out.is_null() {
            return fail(SFM360_INVALID_ARGUMENT, "out handle pointer is null");
        }
        let path = match unsafe { cstr(input_path, "input path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        let cfg = match load_config(config_path, seed) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return fail(SFM360_IO_ERROR, &format!("{path}: {e}")),
        };
        let first = text.lines().next().unwrap_or("").trim();
        let result = if first == io::MATCHES_MAGIC {
            match parse_matches(&text) {
                Ok(mf) => reconstruct_from_matches(&mf, None, &cfg),
                Err(e) => return fail(SFM360_PARSE_ERROR, &e.to_string()),
            }
        } else if first == io::TRACKS_MAGIC {
            match parse_tracks(&text) {
                Ok(tf) => reconstruct_from_tracks(&tf, None, &cfg),
                Err(e) => return fail(SFM360_PARSE_ERROR, &e.to_string()),
            }
        } else {
            return fail(
                SFM360_PARSE_ERROR,
                &format!("{path}: unrecognized header `{first}`"),
            );
        };
        match result {
            Ok(output) => {
                let names = output
                    .outcome
                    .recon
                    .registration_order
                    .iter()
                    .map(|n| CString::new(n.as_str()).unwrap_or_default())
                    .collect();
                let handle = Box::new(sfm360_reconstruction { output, names });
                unsafe { *out = Box::into_raw(handle) };
                SFM360_OK
            }
            Err(PipelineError::Input(m)) => fail(SFM360_INVALID_ARGUMENT, &m),
            Err(PipelineError::Sfm(e)) => fail(SFM360_PIPELINE_ERROR, &e.to_string()),
        }
    })
}

/// Number of registered images.
///
/// # Safety
/// `r` must be a live handle from `sfm360_reconstruct_file`.
#[no_mangle]
pub unsafe extern "C" fn sfm360_registered_count(r: *const sfm360_reconstruction) -> usize {
    if r.is_null() {
        return 0;
    }
    unsafe { &*r }.output.outcome.recon.num_registered()
}

/// Number of triangulated points.
///
/// # Safety
/// `r` must be a live handle from `sfm360_reconstruct_file`.
#[no_mangle]
pub unsafe extern "C" fn sfm360_point_count(r: *const sfm360_reconstruction) -> usize {
    if r.is_null() {
        return 0;
    }
    unsafe { &*r }.output.outcome.recon.points.len()
}

/// Name of the `index`-th registered image (registration order), copied
/// into `buf`.
///
/// # Safety
/// `r` must be a live handle; `buf` must point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sfm360_image_name(
    r: *const sfm360_reconstruction,
    index: usize,
    buf: *mut c_char,
    cap: usize,
) -> sfm360_status {
    guarded(|| {
        if r.is_null() || buf.is_null() {
            return fail(SFM360_INVALID_ARGUMENT, "null argument");
        }
        let handle = unsafe { &*r };
        let Some(name) = handle.names.get(index) else {
            return fail(SFM360_INVALID_ARGUMENT, &format!("index {index} out of range"));
        };
        let bytes = name.as_bytes_with_nul();
        if bytes.len() > cap {
            return fail(
                SFM360_BUFFER_TOO_SMALL,
                &format!("need {} bytes, have {cap}", bytes.len()),
            );
        }
        unsafe { std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, bytes.len()) };
        SFM360_OK
    })
}

/// World-to-camera pose of a registered image as
/// `[qw, qx, qy, qz, tx, ty, tz]`.
///
/// # Safety
/// `r` must be a live handle; `image` a valid C string; `pose_qt` an array
/// of at least 7 doubles.
#[no_mangle]
pub unsafe extern "C" fn sfm360_image_pose(
    r: *const sfm360_reconstruction,
    image: *const c_char,
    pose_qt: *mut f64,
) -> sfm360_status {
    guarded(|| {
        if r.is_null() || pose_qt.is_null() {
            return fail(SFM360_INVALID_ARGUMENT, "null argument");
        }
        let name = match unsafe { cstr(image, "image name") } {
            Ok(n) => n,
            Err(s) => return s,
        };
        let handle = unsafe { &*r };
        let Some(pose) = handle.output.outcome.recon.poses.get(name) else {
            return fail(SFM360_INVALID_ARGUMENT, &format!("image `{name}` not registered"));
        };
        let vals = io::pose_to_quat(pose);
        unsafe { std::ptr::copy_nonoverlapping(vals.as_ptr(), pose_qt, 7) };
        SFM360_OK
    })
}

/// Writes the registered poses in the `pose <cam> qw qx qy qz tx ty tz`
/// text format.
///
/// # Safety
/// `r` must be a live handle; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn sfm360_write_pose_file(
    r: *const sfm360_reconstruction,
    path: *const c_char,
) -> sfm360_status {
    guarded(|| {
        if r.is_null() {
            return fail(SFM360_INVALID_ARGUMENT, "null handle");
        }
        let path = match unsafe { cstr(path, "output path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        let handle = unsafe { &*r };
        let mut buf = Vec::new();
        if let Err(e) = io::write_poses(&mut buf, &handle.output.outcome.recon.poses) {
            return fail(SFM360_IO_ERROR, &e.to_string());
        }
        match std::fs::write(Path::new(path), buf) {
            Ok(()) => SFM360_OK,
            Err(e) => fail(SFM360_IO_ERROR, &format!("{path}: {e}")),
        }
    })
}

/// Writes the triangulated points as ASCII PLY.
///
/// # Safety
/// `r` must be a live handle; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn sfm360_write_ply_file(
    r: *const sfm360_reconstruction,
    path: *const c_char,
) -> sfm360_status {
    guarded(|| {
        if r.is_null() {
            return fail(SFM360_INVALID_ARGUMENT, "null handle");
        }
        let path = match unsafe { cstr(path, "output path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        let handle = unsafe { &*r };
        let points: Vec<PlyPoint> = handle
            .output
            .outcome
            .recon
            .points
            .values()
            .map(|pt| PlyPoint {
                position: pt.position,
                color: None,
                track_length: handle.output.track_lengths[&pt.track],
            })
            .collect();
        let mut buf = Vec::new();
        if let Err(e) = io::write_ply(&mut buf, &points) {
            return fail(SFM360_IO_ERROR, &e.to_string());
        }
        match std::fs::write(Path::new(path), buf) {
            Ok(()) => SFM360_OK,
            Err(e) => fail(SFM360_IO_ERROR, &format!("{path}: {e}")),
        }
    })
}

/// Releases a reconstruction handle. Null is a no-op.
///
/// # Safety
/// `r` must be a handle from `sfm360_reconstruct_file`, released once.
#[no_mangle]
pub unsafe extern "C" fn sfm360_reconstruction_free(r: *mut sfm360_reconstruction) {
    if !r.is_null() {
        drop(unsafe { Box::from_raw(r) });
    }
}

/// Evaluates estimated poses against ground truth and copies the
/// `key = value` report into `buf`.
///
/// # Safety
/// Paths must be valid C strings; `buf` must point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sfm360_evaluate_files(
    est_path: *const c_char,
    gt_path: *const c_char,
    buf: *mut c_char,
    cap: usize,
) -> sfm360_status {
    guarded(|| {
        let est_path = match unsafe { cstr(est_path, "estimate path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        let gt_path = match unsafe { cstr(gt_path, "ground truth path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        let read = |p: &str| -> Result<String, sfm360_status> {
            std::fs::read_to_string(p).map_err(|e| {
                set_error(&format!("{p}: {e}"));
                SFM360_IO_ERROR
            })
        };
        let est = match read(est_path).and_then(|t| {
            parse_scene(&t).map_err(|e| {
                set_error(&e.to_string());
                SFM360_PARSE_ERROR
            })
        }) {
            Ok(s) => s.poses,
            Err(s) => return s,
        };
        let gt = match read(gt_path).and_then(|t| {
            parse_scene(&t).map_err(|e| {
                set_error(&e.to_string());
                SFM360_PARSE_ERROR
            })
        }) {
            Ok(s) => s.poses,
            Err(s) => return s,
        };
        let report = match sfm360::eval::report(&est, &gt, &[3.0, 5.0, 10.0]) {
            Ok(r) => r,
            Err(e) => return fail(SFM360_PIPELINE_ERROR, &e.to_string()),
        };
        let text = report.to_key_values();
        let bytes = text.as_bytes();
        if bytes.len() + 1 > cap {
            return fail(
                SFM360_BUFFER_TOO_SMALL,
                &format!("need {} bytes, have {cap}", bytes.len() + 1),
            );
        }
        if !buf.is_null() {
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, bytes.len());
                *buf.add(bytes.len()) = 0;
            }
        }
        SFM360_OK
    })
}
