//! Readers and writers for every on-disk format: Gaussian PLY checkpoints,
//! camera JSON, PNG images and masks, PFM depth, OBJ/PLY meshes.

pub mod cameras;
pub mod image;
pub mod ply;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{Camera, GaussianCloud, ImageBuffer, Vec3};
use crate::surface::TriangleMesh;

pub use cameras::{encode_cameras, load_cameras, parse_cameras, save_cameras};
pub use image::{
    decode_color, decode_mask, encode_pfm, encode_png, load_color, load_mask, load_pfm, parse_pfm, save_pfm, save_png,
};
pub use ply::{
    encode_gaussian_ply, encode_mesh_ply, load_gaussian_ply, load_sky_ply, parse_gaussian_ply, parse_mesh_ply,
    parse_sky_ply, save_gaussian_ply, save_sky_ply,
};

/// ASCII OBJ: `v x y z [r g b]` lines then 1-based `f a b c` lines.
pub fn encode_obj(mesh: &TriangleMesh) -> String {
    let mut s = String::with_capacity(mesh.vertices.len() * 40 + mesh.triangles.len() * 24);
    for (i, v) in mesh.vertices.iter().enumerate() {
        match &mesh.colors {
            Some(c) => {
                let c = c[i];
                writeln!(s, "v {} {} {} {:.4} {:.4} {:.4}", v.x, v.y, v.z, c[0], c[1], c[2])
            }
            None => writeln!(s, "v {} {} {}", v.x, v.y, v.z),
        }
        .expect("write to String");
    }
    for t in &mesh.triangles {
        writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).expect("write to String");
    }
    s
}

/// Parse the `v` and triangular `f` records of an OBJ file; other records are
/// ignored. Face entries may carry `/vt/vn` suffixes.
pub fn parse_obj(text: &str) -> Result<TriangleMesh> {
    let mut mesh = TriangleMesh::default();
    let mut colors = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let bad = || Error::format(format!("OBJ line {}: `{line}`", n + 1));
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let vals: Vec<f64> = tok.map(|t| t.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("OBJ line {}", n + 1)));
                }
                match vals.len() {
                    3 => {}
                    6 => colors.push([vals[3], vals[4], vals[5]]),
                    _ => return Err(bad()),
                }
                mesh.vertices.push(Vec3::new(vals[0], vals[1], vals[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = tok
                    .map(|t| {
                        t.split('/')
                            .next()
                            .and_then(|i| i.parse::<u32>().ok())
                            .filter(|&i| i >= 1)
                            .map(|i| i - 1)
                            .ok_or_else(bad)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(bad());
                }
                mesh.triangles.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    let n = mesh.vertices.len() as u32;
    if mesh.triangles.iter().flatten().any(|&i| i >= n) {
        return Err(Error::format("OBJ face index out of range"));
    }
    if !colors.is_empty() {
        if colors.len() != mesh.vertices.len() {
            return Err(Error::format("OBJ colors given for only some vertices"));
        }
        mesh.colors = Some(colors);
    }
    Ok(mesh)
}

/// Write a mesh as binary PLY when the extension is `.ply`, else ASCII OBJ.
pub fn write_mesh(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if mesh.is_empty() {
        log::warn!("writing empty mesh to {}", path.display());
    }
    let is_ply = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    let bytes = if is_ply {
        encode_mesh_ply(mesh)
    } else {
        encode_obj(mesh).into_bytes()
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_mesh(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
        parse_mesh_ply(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::format("OBJ is not UTF-8"))?;
        parse_obj(&text)
    }
}

/// Depth map as PFM with invalid pixels zeroed.
pub fn write_depth(depth: &ImageBuffer, valid: Option<&[bool]>, path: impl AsRef<Path>) -> Result<()> {
    save_pfm(depth, valid, path)
}

/// A cloud together with its cameras and, optionally, one image and one sky
/// mask per camera.
#[derive(Clone, Debug)]
pub struct SceneBundle {
    pub cloud: GaussianCloud,
    pub cameras: Vec<Camera>,
    pub images: Option<Vec<ImageBuffer>>,
    pub sky_masks: Option<Vec<ImageBuffer>>,
}

impl SceneBundle {
    pub fn validate(&self) -> Result<()> {
        for (what, list, channels) in [("image", &self.images, 3), ("sky mask", &self.sky_masks, 1)] {
            let Some(list) = list else { continue };
            if list.len() != self.cameras.len() {
                return Err(Error::SizeMismatch {
                    expected: format!("{} {what}s", self.cameras.len()),
                    found: list.len().to_string(),
                });
            }
            for (img, cam) in list.iter().zip(&self.cameras) {
                if img.width != cam.width as usize || img.height != cam.height as usize || img.channels != channels {
                    return Err(Error::SizeMismatch {
                        expected: format!("{}x{}x{channels} {what} for camera {}", cam.width, cam.height, cam.id),
                        found: format!("{}x{}x{}", img.width, img.height, img.channels),
                    });
                }
            }
        }
        Ok(())
    }
}

/// `<dir>/<camera id>.png` for every camera.
pub fn per_camera_paths(dir: &Path, cameras: &[Camera]) -> Vec<PathBuf> {
    cameras.iter().map(|c| dir.join(format!("{}.png", c.id))).collect()
}

pub fn load_images(dir: &Path, cameras: &[Camera]) -> Result<Vec<ImageBuffer>> {
    per_camera_paths(dir, cameras).iter().map(load_color).collect()
}

pub fn load_masks(dir: &Path, cameras: &[Camera]) -> Result<Vec<ImageBuffer>> {
    per_camera_paths(dir, cameras).iter().map(load_mask).collect()
}
