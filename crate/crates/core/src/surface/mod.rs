//! Surface extraction from any Gaussian cloud: render median depth over a set
//! of cameras, fuse into a TSDF and polygonize with marching cubes.

pub mod mcubes;
pub mod mesh;
pub mod tsdf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Camera, GaussianCloud, Vec3};
use crate::raster::Frame;
use crate::sky::HybridScene;

pub use mesh::{Topology, TriangleMesh};
pub use tsdf::{TsdfVolume, Voxel, DEFAULT_DEPTH_CLIP};

pub const FALLBACK_RADIUS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingSphere {
    pub center: Vec3,
    pub radius: f64,
}

/// Centroid of the kernel means and 1.1 times the 99th-percentile distance.
pub fn bounding_sphere(cloud: &GaussianCloud) -> Result<BoundingSphere> {
    if cloud.is_empty() {
        return Err(Error::InvalidArgument("bounding sphere of an empty cloud".into()));
    }
    let n = cloud.len() as f64;
    let center = cloud.iter().fold(Vec3::zeros(), |s, g| s + g.mean) / n;
    let mut d: Vec<f64> = cloud.iter().map(|g| (g.mean - center).norm()).collect();
    d.sort_by(f64::total_cmp);
    let k = ((0.99 * n).ceil() as usize).clamp(1, d.len()) - 1;
    let mut radius = 1.1 * d[k];
    if !(radius > FALLBACK_RADIUS) {
        log::warn!("degenerate bounding sphere (radius {radius:e}); using {FALLBACK_RADIUS:e}");
        radius = FALLBACK_RADIUS;
    }
    Ok(BoundingSphere { center, radius })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrbitParams {
    /// Cameras per ring.
    pub views: usize,
    /// One ring per elevation, in degrees above the plane normal to `up`.
    pub elevations: Vec<f64>,
    /// Camera distance as a multiple of the sphere radius.
    pub distance: f64,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub up: [f64; 3],
}

impl Default for OrbitParams {
    fn default() -> Self {
        OrbitParams {
            views: 20,
            elevations: vec![0.0, 60.0, -60.0],
            distance: 2.0,
            width: 512,
            height: 512,
            fx: 500.0,
            fy: 500.0,
            up: [0.0, 0.0, 1.0],
        }
    }
}

/// Cameras evenly spaced in azimuth on each elevation ring, looking at the
/// sphere center.
pub fn orbit_trajectory(sphere: &BoundingSphere, params: &OrbitParams) -> Result<Vec<Camera>> {
    let up = Vec3::from(params.up);
    if params.views == 0 || params.elevations.is_empty() || !(up.norm() > 0.0) || !(params.distance > 0.0) {
        return Err(Error::InvalidArgument("orbit needs views, elevations, a distance and an up axis".into()));
    }
    let up = up.normalize();
    let helper = if up.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = (helper - up * up.dot(&helper)).normalize();
    let e2 = up.cross(&e1);
    let dist = params.distance * sphere.radius;
    let mut cams = Vec::new();
    for (ring, &elev) in params.elevations.iter().enumerate() {
        if !(elev.abs() < 90.0) {
            return Err(Error::InvalidArgument(format!("orbit elevation must be within (-90, 90), got {elev}")));
        }
        let el = elev.to_radians();
        for i in 0..params.views {
            let az = std::f64::consts::TAU * i as f64 / params.views as f64;
            let dir = (e1 * az.cos() + e2 * az.sin()) * el.cos() + up * el.sin();
            let mut cam = Camera::look_at(
                sphere.center + dir * dist,
                sphere.center,
                up,
                params.fx,
                params.fy,
                params.width,
                params.height,
            );
            cam.id = format!("orbit_{ring}_{i:03}");
            cam.z_far = cam.z_far.max(4.0 * dist);
            cams.push(cam);
        }
    }
    Ok(cams)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractParams {
    /// Voxel size is `radius / voxel_div`.
    pub voxel_div: f64,
    /// Truncation is `radius / trunc_div`.
    pub trunc_div: f64,
    pub depth_clip: f64,
    /// Upper bound on the logical voxel count; the voxel size grows to fit.
    pub max_voxels: u64,
    pub orbit: OrbitParams,
    pub colors: bool,
}

impl Default for ExtractParams {
    fn default() -> Self {
        ExtractParams {
            voxel_div: 256.0,
            trunc_div: 64.0,
            depth_clip: DEFAULT_DEPTH_CLIP,
            max_voxels: 512 * 512 * 512,
            orbit: OrbitParams::default(),
            colors: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    pub mesh: TriangleMesh,
    pub sphere: Option<BoundingSphere>,
    pub voxel_size: f64,
    pub truncation: f64,
    pub views: usize,
}

/// Fuse median-depth renders of the foreground into a mesh. The sky model is
/// never rendered. Without `cameras` an orbit around the bounding sphere is
/// used.
pub fn extract_mesh(scene: &HybridScene, cameras: Option<&[Camera]>, params: &ExtractParams) -> Result<Extraction> {
    if !(params.voxel_div > 0.0 && params.trunc_div > 0.0 && params.depth_clip > 0.0 && params.max_voxels > 0) {
        return Err(Error::InvalidArgument("voxel/truncation divisors, depth clip and voxel cap must be positive".into()));
    }
    let cloud = &scene.foreground;
    if cloud.is_empty() {
        log::warn!("empty cloud: writing an empty mesh");
        return Ok(Extraction {
            mesh: TriangleMesh::default(),
            sphere: None,
            voxel_size: 0.0,
            truncation: 0.0,
            views: 0,
        });
    }
    let sphere = bounding_sphere(cloud)?;
    let mut voxel = sphere.radius / params.voxel_div;
    let truncation = sphere.radius / params.trunc_div;
    log::info!(
        "bounding sphere center {:?} radius {:.6}; voxel {voxel:.6}, truncation {truncation:.6}",
        sphere.center.as_slice(),
        sphere.radius
    );
    let mut vol = TsdfVolume::covering(sphere.center, sphere.radius, voxel, truncation)?;
    let count = vol.dims.iter().map(|&d| d as f64).product::<f64>();
    if count > params.max_voxels as f64 {
        voxel *= (count / params.max_voxels as f64).cbrt() * 1.0001;
        vol = TsdfVolume::covering(sphere.center, sphere.radius, voxel, truncation)?;
        log::warn!(
            "volume exceeds {} voxels; voxel size raised to {voxel:.6} ({:?})",
            params.max_voxels,
            vol.dims
        );
    }
    vol.depth_clip = params.depth_clip;

    let orbit;
    let cams = match cameras {
        Some(c) => c,
        None => {
            orbit = orbit_trajectory(&sphere, &params.orbit)?;
            &orbit[..]
        }
    };
    for cam in cams {
        cam.validate()?;
        let out = Frame::new(cloud, cam).render([0.0; 3]);
        let color = params.colors.then(|| {
            let mut c = out.color.clone();
            for (i, px) in c.data.chunks_mut(3).enumerate() {
                let o = out.opacity.data[i];
                if o > 0.0 {
                    px.iter_mut().for_each(|v| *v = (*v / o).clamp(0.0, 1.0));
                }
            }
            c
        });
        vol.integrate(&out.median_depth, Some(&out.valid), cam, color.as_ref())?;
        log::debug!("fused view {} ({} blocks)", cam.id, vol.allocated_blocks());
    }
    let mesh = vol.marching_cubes(0.0);
    Ok(Extraction {
        mesh,
        sphere: Some(sphere),
        voxel_size: voxel,
        truncation,
        views: cams.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Gaussian, ImageBuffer};
    use crate::sky::fibonacci_sphere;

    fn cloud_at(points: &[Vec3]) -> GaussianCloud {
        GaussianCloud::from_gaussians(
            0,
            points.iter().map(|p| Gaussian::isotropic(*p, 0.01, 0.9, [0.5; 3], 0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn degenerate_sphere_falls_back() {
        let s = bounding_sphere(&cloud_at(&[Vec3::new(1.0, 2.0, 3.0); 5])).unwrap();
        assert_eq!(s.radius, FALLBACK_RADIUS);
        assert_eq!(s.center, Vec3::new(1.0, 2.0, 3.0));
        assert!(bounding_sphere(&GaussianCloud::new(0).unwrap()).is_err());
    }

    #[test]
    fn unit_sphere_points_give_radius_1_1() {
        let pts = fibonacci_sphere(2000, Vec3::zeros(), 1.0).unwrap();
        let s = bounding_sphere(&cloud_at(&pts)).unwrap();
        assert!((s.radius - 1.1).abs() < 0.01, "{}", s.radius);
        let shifted: Vec<Vec3> = pts.iter().map(|p| p + Vec3::new(5.0, -1.0, 2.0)).collect();
        let t = bounding_sphere(&cloud_at(&shifted)).unwrap();
        assert!((t.center - s.center - Vec3::new(5.0, -1.0, 2.0)).norm() < 1e-9);
        assert!((t.radius - s.radius).abs() < 1e-9);
    }

    #[test]
    fn orbit_geometry() {
        let sphere = BoundingSphere {
            center: Vec3::new(1.0, 2.0, 3.0),
            radius: 0.5,
        };
        let params = OrbitParams::default();
        let cams = orbit_trajectory(&sphere, &params).unwrap();
        let n = params.views;
        assert_eq!(cams.len(), n * params.elevations.len());
        for (i, c) in cams.iter().enumerate() {
            c.validate().unwrap();
            let to_center = sphere.center - c.center();
            assert!((to_center.norm() - 1.0).abs() < 1e-9);
            assert!((c.forward() - to_center.normalize()).norm() < 1e-6);
            let (ring, k) = (i / n, i % n);
            let next = cams[ring * n + (k + 1) % n].center() - sphere.center;
            let cur = c.center() - sphere.center;
            let flat = |v: Vec3| Vec3::new(v.x, v.y, 0.0).normalize();
            let gap = flat(cur).dot(&flat(next)).clamp(-1.0, 1.0).acos().to_degrees();
            assert!((gap - 360.0 / n as f64).abs() < 1e-6);
            let elev = (cur.z / cur.norm()).asin().to_degrees();
            assert!((elev - params.elevations[ring]).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_cloud_empty_mesh() {
        let scene = HybridScene::foreground_only(GaussianCloud::new(0).unwrap());
        let e = extract_mesh(&scene, None, &ExtractParams::default()).unwrap();
        assert!(e.mesh.is_empty());
    }

    #[test]
    fn voxel_and_truncation_from_radius() {
        // a ring of points whose bounding radius comes out at 256
        let pts: Vec<Vec3> = (0..100)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / 100.0;
                Vec3::new(a.cos(), a.sin(), 0.0) * (256.0 / 1.1)
            })
            .collect();
        let scene = HybridScene::foreground_only(cloud_at(&pts));
        let cam = top_camera();
        let params = ExtractParams {
            max_voxels: u64::MAX,
            ..ExtractParams::default()
        };
        let e = extract_mesh(&scene, Some(&[cam]), &params).unwrap();
        assert!((e.voxel_size - 1.0).abs() < 1e-9);
        assert!((e.truncation - 4.0).abs() < 1e-9);
        let capped = extract_mesh(&scene, Some(&[top_camera()]), &ExtractParams::default()).unwrap();
        assert!(capped.voxel_size > 1.0);
    }

    fn top_camera() -> Camera {
        Camera::look_at(Vec3::new(0.0, 0.0, 600.0), Vec3::zeros(), Vec3::y(), 20.0, 20.0, 8, 8)
    }

    /// Camera z-depth of the unit sphere at the origin per pixel, 0 on miss.
    fn sphere_depth(cam: &Camera) -> ImageBuffer {
        let mut d = ImageBuffer::new(cam.width as usize, cam.height as usize, 1);
        let c = cam.center();
        for y in 0..cam.height as usize {
            for x in 0..cam.width as usize {
                let dir = cam.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
                let b = c.dot(&dir);
                let disc = b * b - (c.norm_squared() - 1.0);
                if disc > 0.0 {
                    let t = -b - disc.sqrt();
                    let p = c + dir * t;
                    d.set(x, y, 0, cam.world_to_camera(&p).z);
                }
            }
        }
        d
    }

    #[test]
    fn fused_sphere_is_closed() {
        let sphere = BoundingSphere {
            center: Vec3::zeros(),
            radius: 1.0,
        };
        let orbit = OrbitParams {
            views: 8,
            elevations: vec![0.0, 60.0, -60.0],
            width: 96,
            height: 96,
            fx: 80.0,
            fy: 80.0,
            ..OrbitParams::default()
        };
        let cams = orbit_trajectory(&sphere, &orbit).unwrap();
        let voxel = 1.0 / 16.0;
        let mut vol = TsdfVolume::covering(Vec3::zeros(), 1.0, voxel, 4.0 * voxel).unwrap();
        for cam in &cams {
            vol.integrate(&sphere_depth(cam), None, cam, None).unwrap();
        }
        let mesh = vol.marching_cubes(0.0);
        let topo = mesh.topology();
        assert!(topo.is_closed_manifold(), "{topo:?}");
        assert_eq!(topo.euler_characteristic(), 2);
        assert!(mesh.is_valid());
        let err = mesh.vertices.iter().map(|v| (v.norm() - 1.0).abs()).sum::<f64>() / mesh.vertices.len() as f64;
        assert!(err < 0.5 * voxel, "{err}");
        for t in &mesh.triangles {
            let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
            assert!((b - a).cross(&(c - a)).dot(&(a + b + c)) > 0.0);
        }
    }
}
