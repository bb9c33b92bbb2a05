//! Equirectangular panorama to cubemap conversion.
//!
//! Each face is a 90°-FoV pinhole render. Face camera frames share the
//! panorama convention (x right, y up, z forward); the `virtual_pose` of a
//! face rotates panorama coordinates into that face's frame. Horizontal
//! faces keep `+y` up; the up face uses `-z` as its image up, the down face
//! `+z`.

use crate::geom::{bearing_to_pixel, pixel_to_bearing, Bearing, ErpDims, GeomError, Mat3, Pose, Vec3};
use crate::raster::ImageBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaceId {
    Front,
    Back,
    Left,
    Right,
    Up,
    Down,
}

impl FaceId {
    pub const ALL: [FaceId; 6] = [
        FaceId::Front,
        FaceId::Back,
        FaceId::Left,
        FaceId::Right,
        FaceId::Up,
        FaceId::Down,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FaceId::Front => "front",
            FaceId::Back => "back",
            FaceId::Left => "left",
            FaceId::Right => "right",
            FaceId::Up => "up",
            FaceId::Down => "down",
        }
    }

    /// Rotation mapping panorama coordinates into this face's camera frame.
    pub fn rotation(&self) -> Mat3 {
        // Rows are the face axes (right, up, forward) in panorama coords.
        match self {
            FaceId::Front => Mat3::identity(),
            FaceId::Back => Mat3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0),
            FaceId::Left => Mat3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0),
            FaceId::Right => Mat3::new(0.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0),
            FaceId::Up => Mat3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0),
            FaceId::Down => Mat3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0),
        }
    }
}

/// One rendered cube face plus the virtual pinhole pose it was rendered with.
#[derive(Debug, Clone)]
pub struct CubemapFace {
    pub face_id: FaceId,
    pub image: ImageBuf,
    pub virtual_pose: Pose,
}

/// Ray through continuous face coordinate `(x, y)` (pixel `i` centered at
/// `i + 0.5`), expressed in the face camera frame.
fn face_coord_ray(x: f64, y: f64, face_size: usize) -> Vec3 {
    let s = face_size as f64;
    let nx = 2.0 * x / s - 1.0;
    let ny = 1.0 - 2.0 * y / s;
    Vec3::new(nx, ny, 1.0)
}

/// Renders the six cube faces of an ERP panorama by bilinear resampling.
pub fn erp_to_cubemap(image: &ImageBuf, face_size: usize) -> Result<Vec<CubemapFace>, GeomError> {
    let dims = ErpDims::new(image.width() as u32, image.height() as u32)?;
    if face_size < 2 {
        return Err(GeomError::BadDims(face_size as u32, face_size as u32));
    }
    let mut faces = Vec::with_capacity(6);
    let mut px = vec![0.0f32; image.channels()];
    for id in FaceId::ALL {
        let rot = id.rotation();
        let rot_t = rot.transpose();
        let mut buf = ImageBuf::new(face_size, face_size, image.channels());
        for y in 0..face_size {
            for x in 0..face_size {
                let ray = face_coord_ray(x as f64 + 0.5, y as f64 + 0.5, face_size);
                let u = Bearing::from_dir(rot_t * ray).expect("face ray is nonzero");
                let (c, r) = bearing_to_pixel(&u, dims)?;
                image.sample_wrap_clamp(c, r, &mut px);
                for (ch, &v) in px.iter().enumerate() {
                    buf.set(x, y, ch, v);
                }
            }
        }
        faces.push(CubemapFace {
            face_id: id,
            image: buf,
            virtual_pose: Pose::from_parts(rot, Vec3::zeros()),
        });
    }
    Ok(faces)
}

/// Face and continuous face coordinates hit by a panorama-frame bearing.
pub fn bearing_to_face_coord(u: &Bearing, face_size: usize) -> (FaceId, f64, f64) {
    let mut best = FaceId::Front;
    let mut best_fwd = f64::NEG_INFINITY;
    for id in FaceId::ALL {
        let fwd = (id.rotation() * u.as_vec()).z;
        if fwd > best_fwd {
            best_fwd = fwd;
            best = id;
        }
    }
    let d = best.rotation() * u.as_vec();
    let s = face_size as f64;
    let x = (d.x / d.z + 1.0) * s / 2.0;
    let y = (1.0 - d.y / d.z) * s / 2.0;
    (best, x, y)
}

/// Resamples a cubemap back onto an ERP grid; the validation inverse of
/// [`erp_to_cubemap`].
pub fn cubemap_to_erp(faces: &[CubemapFace], dims: ErpDims) -> Result<ImageBuf, GeomError> {
    let channels = faces.first().map(|f| f.image.channels()).unwrap_or(0);
    let face_size = faces.first().map(|f| f.image.width()).unwrap_or(0);
    let by_id = |id: FaceId| faces.iter().find(|f| f.face_id == id).expect("six faces");
    let mut out = ImageBuf::new(dims.width() as usize, dims.height() as usize, channels);
    let mut px = vec![0.0f32; channels];
    for r in 0..dims.height() as usize {
        for c in 0..dims.width() as usize {
            let u = pixel_to_bearing(c as f64 + 0.5, r as f64 + 0.5, dims)?;
            let (id, x, y) = bearing_to_face_coord(&u, face_size);
            by_id(id).image.sample_clamp(x, y, &mut px);
            for (ch, &v) in px.iter().enumerate() {
                out.set(c, r, ch, v);
            }
        }
    }
    Ok(out)
}
