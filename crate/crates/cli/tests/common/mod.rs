#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatkit::io;
use splatkit::model::{logit, Camera, Gaussian, GaussianCloud, ImageBuffer, Vec3};
use splatkit::raster::composite;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_splatkit"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Ring of cameras around the origin, alternating above and below the equator.
pub fn ring_cameras(n: usize, distance: f64, size: u32, focal: f64) -> Vec<Camera> {
    (0..n)
        .map(|i| {
            let az = std::f64::consts::TAU * i as f64 / n as f64;
            let el: f64 = if i % 2 == 0 { 0.35 } else { -0.35 };
            let eye = distance * Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let mut c = Camera::look_at(eye, Vec3::zeros(), Vec3::z(), focal, focal, size, size);
            c.id = format!("view_{i:02}");
            c
        })
        .collect()
}

/// Random colored kernels inside a ball of radius 0.8.
pub fn blob_scene(n: usize, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::new(0).unwrap();
    while cloud.len() < n {
        let p = Vec3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8));
        if p.norm() > 0.8 {
            continue;
        }
        let mut g = Gaussian::isotropic(
            p,
            rng.random_range(0.08..0.16),
            rng.random_range(0.5..0.95),
            [rng.random(), rng.random(), rng.random()],
            0,
        );
        g.log_scale += Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        let q: [f64; 4] = [rng.random_range(0.5..1.0), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        g.rot = splatkit::model::normalize_quat(&q);
        cloud.push(g).unwrap();
    }
    cloud
}

/// Perturb every parameter of `cloud` by a small seeded amount.
pub fn jitter(cloud: &GaussianCloud, seed: u64, amount: f64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = cloud.clone();
    for g in &mut out.gaussians {
        g.mean += amount * Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        g.log_scale += amount * 2.0 * Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        g.opacity_logit += amount * 4.0 * rng.random_range(-1.0..1.0);
        for c in &mut g.sh[0] {
            *c += amount * 4.0 * rng.random_range(-1.0..1.0);
        }
    }
    out
}

pub fn render_targets(cloud: &GaussianCloud, cams: &[Camera]) -> Vec<ImageBuffer> {
    cams.iter().map(|c| composite(cloud, c).color).collect()
}

pub struct Dataset {
    pub root: PathBuf,
    pub cameras: PathBuf,
    pub images: PathBuf,
}

/// Write `cameras.json` and `images/<id>.png` under `root`.
pub fn write_dataset(root: &Path, cams: &[Camera], images: &[ImageBuffer]) -> Dataset {
    let cameras = root.join("cameras.json");
    io::save_cameras(cams, &cameras).unwrap();
    let dir = root.join("images");
    std::fs::create_dir_all(&dir).unwrap();
    for (c, img) in cams.iter().zip(images) {
        io::save_png(img, dir.join(format!("{}.png", c.id))).unwrap();
    }
    Dataset {
        root: root.to_path_buf(),
        cameras,
        images: dir,
    }
}

pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    splatkit::losses::psnr(a, b).unwrap()
}

pub fn opaque_logit() -> f64 {
    logit(0.99)
}
