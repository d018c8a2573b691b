//! Projective truncated signed distance fusion on sparse voxel blocks.
//!
//! Only blocks within the truncation band of some observed depth are
//! allocated; the logical grid is `dims` voxels with voxel `(i, j, k)` centred
//! at `origin + voxel_size * (i, j, k)`.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Camera, ImageBuffer, Vec3};
use crate::surface::mcubes::{case_table, cell_case, edge_t, CORNERS, EDGES};
use crate::surface::mesh::TriangleMesh;

pub const BLOCK: usize = 8;
const BLOCK_VOXELS: usize = BLOCK * BLOCK * BLOCK;
pub const DEFAULT_DEPTH_CLIP: f64 = 10.0;

type Key = [i32; 3];

#[derive(Clone, Debug, PartialEq)]
struct Block {
    key: Key,
    tsdf: Vec<f32>,
    weight: Vec<f32>,
    color: Option<Vec<[f32; 3]>>,
}

impl Block {
    fn new(key: Key, color: bool) -> Self {
        Block {
            key,
            tsdf: vec![0.0; BLOCK_VOXELS],
            weight: vec![0.0; BLOCK_VOXELS],
            color: color.then(|| vec![[0.0; 3]; BLOCK_VOXELS]),
        }
    }
}

/// One voxel's stored state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Voxel {
    /// Signed distance divided by the truncation, in [-1, 1].
    pub tsdf: f64,
    pub weight: f64,
    pub color: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsdfVolume {
    pub origin: Vec3,
    pub voxel_size: f64,
    pub truncation: f64,
    pub dims: [usize; 3],
    /// Measured depths beyond this are ignored.
    pub depth_clip: f64,
    index: HashMap<Key, usize>,
    blocks: Vec<Block>,
}

fn local_index(l: [usize; 3]) -> usize {
    (l[2] * BLOCK + l[1]) * BLOCK + l[0]
}

fn split(v: [i64; 3]) -> (Key, [usize; 3]) {
    let b = BLOCK as i64;
    (
        v.map(|c| c.div_euclid(b) as i32),
        v.map(|c| c.rem_euclid(b) as usize),
    )
}

impl TsdfVolume {
    pub fn new(origin: Vec3, voxel_size: f64, truncation: f64, dims: [usize; 3]) -> Result<Self> {
        if !(voxel_size > 0.0 && truncation > 0.0) || dims.contains(&0) || !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "invalid volume: voxel {voxel_size}, truncation {truncation}, dims {dims:?}"
            )));
        }
        Ok(TsdfVolume {
            origin,
            voxel_size,
            truncation,
            dims,
            depth_clip: DEFAULT_DEPTH_CLIP,
            index: HashMap::new(),
            blocks: Vec::new(),
        })
    }

    /// Cube grid covering a sphere with 5% padding.
    pub fn covering(center: Vec3, radius: f64, voxel_size: f64, truncation: f64) -> Result<Self> {
        let half = 1.05 * radius;
        let n = (2.0 * half / voxel_size).ceil() as usize + 1;
        Self::new(center - Vec3::repeat(half), voxel_size, truncation, [n; 3])
    }

    pub fn voxel_center(&self, v: [usize; 3]) -> Vec3 {
        self.origin + self.voxel_size * Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64)
    }

    pub fn allocated_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn observed_voxels(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.weight.iter().filter(|w| **w > 0.0).count())
            .sum()
    }

    pub fn voxel(&self, v: [usize; 3]) -> Option<Voxel> {
        self.voxel_signed(v.map(|c| c as i64))
    }

    fn voxel_signed(&self, v: [i64; 3]) -> Option<Voxel> {
        let (key, l) = split(v);
        let b = &self.blocks[*self.index.get(&key)?];
        let i = local_index(l);
        let w = b.weight[i];
        (w > 0.0).then(|| Voxel {
            tsdf: f64::from(b.tsdf[i]),
            weight: f64::from(w),
            color: b.color.as_ref().map(|c| c[i].map(f64::from)),
        })
    }

    /// Visit every observed voxel.
    pub fn for_each_observed<F: FnMut([usize; 3], Voxel)>(&self, mut f: F) {
        for b in &self.blocks {
            for (i, &w) in b.weight.iter().enumerate() {
                if w > 0.0 {
                    let l = [i % BLOCK, (i / BLOCK) % BLOCK, i / (BLOCK * BLOCK)];
                    let v = [0, 1, 2].map(|a| b.key[a] as usize * BLOCK + l[a]);
                    f(
                        v,
                        Voxel {
                            tsdf: f64::from(b.tsdf[i]),
                            weight: f64::from(w),
                            color: b.color.as_ref().map(|c| c[i].map(f64::from)),
                        },
                    );
                }
            }
        }
    }

    fn depth_ok(&self, d: f64) -> bool {
        d > 0.0 && d.is_finite() && d <= self.depth_clip
    }

    /// Blocks that may hold a voxel within the truncation band of some pixel.
    fn touched_blocks(&self, depth: &ImageBuffer, valid: Option<&[bool]>, cam: &Camera) -> Vec<Key> {
        let (w, h) = (cam.width as usize, cam.height as usize);
        let rt = cam.rotation.transpose();
        let centre = cam.center();
        let (nb, max_key) = (BLOCK as f64, self.dims.map(|d| ((d - 1) / BLOCK) as i32));
        let rows: Vec<Vec<Key>> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut keys = Vec::new();
                for x in 0..w {
                    let i = y * w + x;
                    let d = depth.data[i];
                    if !self.depth_ok(d) || valid.is_some_and(|v| !v[i]) {
                        continue;
                    }
                    let dir = rt * Vec3::new(
                        (x as f64 + 0.5 - cam.cx) / cam.fx,
                        (y as f64 + 0.5 - cam.cy) / cam.fy,
                        1.0,
                    );
                    let (z0, z1) = ((d - self.truncation).max(cam.z_near), d + self.truncation);
                    if z1 <= z0 {
                        continue;
                    }
                    let footprint = z1 * (1.0 / cam.fx).max(1.0 / cam.fy);
                    let margin = footprint + self.voxel_size;
                    let (a, b) = (centre + dir * z0, centre + dir * z1);
                    let lo = a.inf(&b).add_scalar(-margin) - self.origin;
                    let hi = a.sup(&b).add_scalar(margin) - self.origin;
                    let to_key = |v: f64| ((v / self.voxel_size) / nb).floor() as i32;
                    let klo = [0, 1, 2].map(|k| to_key(lo[k]).max(0));
                    let khi = [0, 1, 2].map(|k| to_key(hi[k]).min(max_key[k]));
                    for kz in klo[2]..=khi[2] {
                        for ky in klo[1]..=khi[1] {
                            for kx in klo[0]..=khi[0] {
                                let k = [kx, ky, kz];
                                if keys.last() != Some(&k) {
                                    keys.push(k);
                                }
                            }
                        }
                    }
                }
                keys.sort_unstable();
                keys.dedup();
                keys
            })
            .collect();
        let mut all: Vec<Key> = rows.into_iter().flatten().collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    /// Fuse one depth map (camera z-depth per pixel). Pixels with zero,
    /// non-finite, clipped, or `valid == false` depth are skipped, as are
    /// voxels more than one truncation behind the surface. Blocks are only
    /// allocated within the truncation band of some observed depth, so free
    /// space far from every surface stays unobserved.
    pub fn integrate(
        &mut self,
        depth: &ImageBuffer,
        valid: Option<&[bool]>,
        cam: &Camera,
        color: Option<&ImageBuffer>,
    ) -> Result<()> {
        let (w, h) = (cam.width as usize, cam.height as usize);
        if depth.width != w || depth.height != h || depth.channels != 1 {
            return Err(Error::SizeMismatch {
                expected: format!("{w}x{h}x1 depth for camera {}", cam.id),
                found: format!("{}x{}x{}", depth.width, depth.height, depth.channels),
            });
        }
        if let Some(v) = valid {
            if v.len() != w * h {
                return Err(Error::SizeMismatch {
                    expected: format!("{} validity flags", w * h),
                    found: v.len().to_string(),
                });
            }
        }
        if let Some(c) = color {
            if c.width != w || c.height != h || c.channels != 3 {
                return Err(Error::SizeMismatch {
                    expected: format!("{w}x{h}x3 color"),
                    found: format!("{}x{}x{}", c.width, c.height, c.channels),
                });
            }
        }
        let colored = color.is_some() && (self.blocks.is_empty() || self.blocks[0].color.is_some());

        for k in self.touched_blocks(depth, valid, cam) {
            if !self.index.contains_key(&k) {
                self.index.insert(k, self.blocks.len());
                self.blocks.push(Block::new(k, colored));
            }
        }

        let (origin, vs, tau, dims, clip) = (self.origin, self.voxel_size, self.truncation, self.dims, self.depth_clip);
        self.blocks.par_iter_mut().for_each(|b| {
                for i in 0..BLOCK_VOXELS {
                    let l = [i % BLOCK, (i / BLOCK) % BLOCK, i / (BLOCK * BLOCK)];
                    let v = [0, 1, 2].map(|a| b.key[a] as usize * BLOCK + l[a]);
                    if (0..3).any(|a| v[a] >= dims[a]) {
                        continue;
                    }
                    let p = origin + vs * Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64);
                    let pc = cam.world_to_camera(&p);
                    if !(pc.z > 0.0) {
                        continue;
                    }
                    let (u, vv) = cam.project(&pc);
                    if !(u >= 0.0 && vv >= 0.0 && u < w as f64 && vv < h as f64) {
                        continue;
                    }
                    let px = vv as usize * w + u as usize;
                    let d = depth.data[px];
                    if !(d > 0.0 && d.is_finite() && d <= clip) || valid.is_some_and(|f| !f[px]) {
                        continue;
                    }
                    let sdf = d - pc.z;
                    if sdf < -tau {
                        continue;
                    }
                    let x = (sdf / tau).clamp(-1.0, 1.0);
                    let w0 = f64::from(b.weight[i]);
                    let w1 = w0 + 1.0;
                    b.tsdf[i] = ((f64::from(b.tsdf[i]) * w0 + x) / w1) as f32;
                    b.weight[i] = w1 as f32;
                    if let (Some(cs), Some(img)) = (b.color.as_mut(), color) {
                        for ch in 0..3 {
                            let c = img.data[3 * px + ch];
                            cs[i][ch] = ((f64::from(cs[i][ch]) * w0 + c) / w1) as f32;
                        }
                    }
                }
            });
        Ok(())
    }

    /// Iso-surface of the fused field. Only cells whose eight corners are all
    /// observed are polygonized; vertices on shared edges are merged.
    pub fn marching_cubes(&self, iso: f64) -> TriangleMesh {
        let table = case_table();
        let mut keys: Vec<(Key, usize)> = self.index.iter().map(|(k, i)| (*k, *i)).collect();
        keys.sort_unstable();
        let colored = self.blocks.first().is_some_and(|b| b.color.is_some());
        let mut mesh = TriangleMesh {
            colors: colored.then(Vec::new),
            ..TriangleMesh::default()
        };
        let mut vertex_of: HashMap<([i64; 3], u8), u32> = HashMap::new();
        for (key, bi) in keys {
            let b = &self.blocks[bi];
            for i in 0..BLOCK_VOXELS {
                if b.weight[i] <= 0.0 {
                    continue;
                }
                let l = [i % BLOCK, (i / BLOCK) % BLOCK, i / (BLOCK * BLOCK)];
                let base = [0, 1, 2].map(|a| i64::from(key[a]) * BLOCK as i64 + l[a] as i64);
                let mut corners = [None; 8];
                for (c, off) in CORNERS.iter().enumerate() {
                    let v = [0, 1, 2].map(|a| base[a] + off[a] as i64);
                    corners[c] = if (0..3).all(|a| v[a] < self.dims[a] as i64) {
                        self.voxel_signed(v)
                    } else {
                        None
                    };
                    if corners[c].is_none() {
                        break;
                    }
                }
                if corners.iter().any(Option::is_none) {
                    continue;
                }
                let corners = corners.map(|c| c.expect("checked"));
                let values = corners.map(|c| c.tsdf);
                let case = cell_case(&values, iso);
                let tris = &table[case];
                if tris.is_empty() {
                    continue;
                }
                let mut edge_vertex = [u32::MAX; 12];
                for t in tris {
                    for &e in t {
                        let e = e as usize;
                        if edge_vertex[e] != u32::MAX {
                            continue;
                        }
                        let [a, bb] = EDGES[e];
                        let (pa, pb) = (CORNERS[a], CORNERS[bb]);
                        let lo = [0, 1, 2].map(|k| base[k] + pa[k].min(pb[k]) as i64);
                        let axis = (0..3).find(|&k| pa[k] != pb[k]).expect("edge spans one axis") as u8;
                        let id = *vertex_of.entry((lo, axis)).or_insert_with(|| {
                            let t = edge_t(values[a], values[bb], iso);
                            let ca = Vec3::new(pa[0] as f64, pa[1] as f64, pa[2] as f64);
                            let cb = Vec3::new(pb[0] as f64, pb[1] as f64, pb[2] as f64);
                            let local = ca + (cb - ca) * t;
                            let origin = Vec3::new(base[0] as f64, base[1] as f64, base[2] as f64);
                            mesh.vertices.push(self.origin + self.voxel_size * (origin + local));
                            if let Some(cs) = mesh.colors.as_mut() {
                                let (x, y) = (corners[a].color.unwrap_or_default(), corners[bb].color.unwrap_or_default());
                                cs.push([0, 1, 2].map(|ch| x[ch] + (y[ch] - x[ch]) * t));
                            }
                            (mesh.vertices.len() - 1) as u32
                        });
                        edge_vertex[e] = id;
                    }
                }
                for t in tris {
                    let tri = t.map(|e| edge_vertex[e as usize]);
                    if tri[0] != tri[1] && tri[1] != tri[2] && tri[0] != tri[2] && mesh.triangle_area(&tri) > 0.0 {
                        mesh.triangles.push(tri);
                    }
                }
            }
        }
        if mesh.is_empty() {
            log::warn!("marching cubes found no iso-surface crossings");
        }
        mesh
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn front_camera(z: f64) -> Camera {
        Camera::look_at(Vec3::new(0.0, 0.0, -z), Vec3::zeros(), -Vec3::y(), 20.0, 20.0, 16, 16)
    }

    #[test]
    fn voxel_on_surface_gets_zero() {
        let cam = front_camera(2.0);
        let mut vol = TsdfVolume::new(Vec3::new(-0.5, -0.5, -0.5), 0.125, 0.25, [9, 9, 9]).unwrap();
        let depth = ImageBuffer::filled(16, 16, 1, 2.0);
        vol.integrate(&depth, None, &cam, None).unwrap();
        // voxel (4, 4, 4) is the origin, exactly at depth 2
        let v = vol.voxel([4, 4, 4]).unwrap();
        assert_eq!(v.tsdf, 0.0);
        assert_eq!(v.weight, 1.0);
        // half a truncation in front
        let v = vol.voxel([4, 4, 3]).unwrap();
        assert!((v.tsdf - 0.5).abs() < 1e-6);
        // far in front: clamped; behind the band: untouched
        assert_eq!(vol.voxel([4, 4, 0]).unwrap().tsdf, 1.0);
        assert!(vol.voxel([4, 4, 8]).is_none());
    }

    #[test]
    fn clipped_and_invalid_pixels_skipped() {
        let cam = front_camera(2.0);
        let mut vol = TsdfVolume::new(Vec3::new(-0.5, -0.5, -0.5), 0.125, 0.25, [9, 9, 9]).unwrap();
        vol.depth_clip = 1.5;
        let depth = ImageBuffer::filled(16, 16, 1, 2.0);
        vol.integrate(&depth, None, &cam, None).unwrap();
        assert_eq!(vol.observed_voxels(), 0);
        vol.depth_clip = 10.0;
        vol.integrate(&depth, Some(&vec![false; 256]), &cam, None).unwrap();
        assert_eq!(vol.observed_voxels(), 0);
        assert!(vol.integrate(&ImageBuffer::new(8, 8, 1), None, &cam, None).is_err());
    }

    #[test]
    fn plane_fusion_yields_flat_mesh() {
        let cam = front_camera(2.0);
        let mut vol = TsdfVolume::new(Vec3::new(-0.5, -0.5, -0.5), 0.0625, 0.25, [17, 17, 17]).unwrap();
        let depth = ImageBuffer::filled(16, 16, 1, 2.03);
        let color = ImageBuffer::filled(16, 16, 3, 0.25);
        vol.integrate(&depth, None, &cam, Some(&color)).unwrap();
        let mesh = vol.marching_cubes(0.0);
        assert!(!mesh.is_empty() && mesh.is_valid());
        for v in &mesh.vertices {
            assert!((v.z - 0.03).abs() < 1e-6, "{v}");
        }
        for c in mesh.colors.as_ref().unwrap() {
            assert!((c[0] - 0.25).abs() < 1e-6);
        }
        // normals face the camera (towards -z, the observed free side)
        for t in &mesh.triangles {
            let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
            assert!((b - a).cross(&(c - a)).z < 0.0);
        }
    }

    #[test]
    fn all_positive_volume_has_no_surface() {
        let cam = front_camera(2.0);
        let mut vol = TsdfVolume::new(Vec3::new(-0.5, -0.5, -0.5), 0.125, 0.25, [9, 9, 9]).unwrap();
        // surface just behind the grid: only positive values inside the band
        let depth = ImageBuffer::filled(16, 16, 1, 2.6);
        vol.integrate(&depth, None, &cam, None).unwrap();
        assert!(vol.observed_voxels() > 0);
        assert!(vol.marching_cubes(0.0).is_empty());
    }
}
