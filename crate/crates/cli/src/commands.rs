use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use splatkit::io::{self, SceneBundle};
use splatkit::model::{Camera, GaussianCloud, ImageBuffer, Mat3, Vec3};
use splatkit::optim::{density, random_init, prune, PruneCriterion, StepRecord, TrainView, Trainer, ViewMap};
use splatkit::raster::Frame;
use splatkit::sky::{self, init_sky, render_hybrid, HybridScene, MID_GRAY};
use splatkit::surface::{bounding_sphere, extract_mesh, Extraction};

use crate::config::{existing, optional_existing, RunConfig};
use crate::{usage, CliError};

fn output_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg
        .paths
        .output
        .clone()
        .ok_or_else(|| CliError::Usage("missing output path (--out)".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn check_files(paths: &[PathBuf], what: &str) -> Result<(), CliError> {
    match paths.iter().find(|p| !p.is_file()) {
        Some(p) => Err(CliError::Usage(format!("{what} {} does not exist", p.display()))),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RenderSummary {
    pub views: usize,
    pub files: Vec<PathBuf>,
}

/// Per camera: `<id>.png` color, `<id>_depth.pfm` median depth and
/// `<id>_opacity.png` accumulated opacity.
pub fn cmd_render(cfg: &RunConfig) -> Result<RenderSummary, CliError> {
    let model = existing(&cfg.paths.model, "model")?;
    let cams_path = existing(&cfg.paths.cameras, "cameras")?;
    let sky_path = optional_existing(&cfg.paths.sky, "sky checkpoint")?;
    let out = output_dir(cfg)?;
    let cameras = io::load_cameras(&cams_path).map_err(usage)?;

    let scene = HybridScene {
        foreground: io::load_gaussian_ply(&model)?,
        sky: sky_path.as_deref().map(io::load_sky_ply).transpose()?,
    };
    log::info!(
        "rendering {} kernels{} from {} cameras",
        scene.foreground.len(),
        if scene.sky.is_some() { " with sky" } else { "" },
        cameras.len()
    );
    let mut files = Vec::new();
    for cam in &cameras {
        let output = if scene.sky.is_some() {
            render_hybrid(&scene, cam).output
        } else {
            Frame::new(&scene.foreground, cam).render(cfg.render.background)
        };
        let color = out.join(format!("{}.png", cam.id));
        let depth = out.join(format!("{}_depth.pfm", cam.id));
        let opacity = out.join(format!("{}_opacity.png", cam.id));
        io::save_png(&output.color, &color)?;
        io::write_depth(&output.median_depth, Some(&output.valid), &depth)?;
        io::save_png(&output.opacity, &opacity)?;
        files.extend([color, depth, opacity]);
    }
    Ok(RenderSummary {
        views: cameras.len(),
        files,
    })
}

/// Point nearest (least squares) to every optical axis, with half the mean
/// camera distance to it.
fn look_center(cameras: &[Camera]) -> (Vec3, f64) {
    let mut a = Mat3::zeros();
    let mut b = Vec3::zeros();
    for c in cameras {
        let d = c.forward();
        let p = Mat3::identity() - d * d.transpose();
        a += p;
        b += p * c.center();
    }
    let center = a
        .try_inverse()
        .filter(|_| a.determinant().abs() > 1e-9)
        .map(|inv| inv * b)
        .unwrap_or_else(|| {
            let n = cameras.len() as f64;
            cameras.iter().fold(Vec3::zeros(), |s, c| s + c.center() + c.forward()) / n
        });
    let dist = cameras.iter().map(|c| (c.center() - center).norm()).sum::<f64>() / cameras.len() as f64;
    (center, 0.5 * dist)
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimizeSummary {
    pub steps: u64,
    pub kernels: usize,
    pub last: Option<StepRecord>,
    pub metrics: PathBuf,
    pub model: PathBuf,
}

fn checkpoint(dir: &Path, step: u64, scene: &HybridScene) -> Result<(), CliError> {
    io::save_gaussian_ply(&scene.foreground, dir.join(format!("step_{step:06}.ply")))?;
    Ok(())
}

/// Writes `metrics.jsonl`, `checkpoints/step_NNNNNN.ply`, `point_cloud.ply`
/// and, with a sky ball, `sky.ply` into the output directory.
pub fn cmd_optimize(cfg: &RunConfig) -> Result<OptimizeSummary, CliError> {
    let cams_path = existing(&cfg.paths.cameras, "cameras")?;
    let images_dir = existing(&cfg.paths.images, "images")?;
    let masks_dir = optional_existing(&cfg.paths.masks, "masks")?;
    let model = optional_existing(&cfg.paths.model, "initial model")?;
    if model.is_none() && cfg.init.random_kernels == 0 {
        return Err(CliError::Usage("give an initial model (--init) or --init-random N".into()));
    }
    let mut train = cfg.train.clone();
    train.seed = cfg.seed;
    train.validate().map_err(usage)?;

    let cameras = io::load_cameras(&cams_path).map_err(usage)?;
    let image_paths = io::per_camera_paths(&images_dir, &cameras);
    check_files(&image_paths, "image")?;
    let mask_paths = masks_dir.as_ref().map(|d| io::per_camera_paths(d, &cameras));
    if let Some(m) = &mask_paths {
        check_files(m, "mask")?;
    }
    let out = output_dir(cfg)?;

    let images = image_paths.iter().map(io::load_color).collect::<Result<Vec<_>, _>>()?;
    let masks = mask_paths
        .map(|ps| ps.iter().map(io::load_mask).collect::<Result<Vec<_>, _>>())
        .transpose()?;
    let bundle = SceneBundle {
        cloud: match &model {
            Some(p) => io::load_gaussian_ply(p)?,
            None => {
                let (center, radius) = look_center(&cameras);
                let radius = cfg.init.radius.unwrap_or(radius);
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                random_init(cfg.init.random_kernels, center, radius, cfg.init.sh_degree, &mut rng)?
            }
        },
        cameras,
        images: Some(images),
        sky_masks: masks,
    };
    bundle.validate().map_err(usage)?;

    let sky_model = if cfg.init.sky {
        let sphere = bounding_sphere(&bundle.cloud)?;
        let color = match &bundle.sky_masks {
            Some(m) => sky::masked_mean_color(bundle.images.as_deref().unwrap_or_default(), m),
            None => MID_GRAY,
        };
        Some(init_sky(sphere.center, sphere.radius, cfg.init.sky_points, color)?)
    } else {
        None
    };
    let SceneBundle {
        cloud,
        cameras,
        images,
        sky_masks,
    } = bundle;
    let views: Vec<TrainView> = cameras
        .into_iter()
        .zip(images.unwrap_or_default())
        .enumerate()
        .map(|(i, (camera, image))| TrainView {
            camera,
            image,
            sky_mask: sky_masks.as_ref().map(|m| m[i].clone()),
        })
        .collect();
    let scene = HybridScene {
        foreground: cloud,
        sky: sky_model,
    };

    let ckpt = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", ckpt.display())))?;
    checkpoint(&ckpt, 0, &scene)?;
    let metrics_path = out.join("metrics.jsonl");
    let file = File::create(&metrics_path)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", metrics_path.display())))?;
    let mut metrics = BufWriter::new(file);

    log::info!(
        "optimizing {} kernels over {} views for {} steps",
        scene.foreground.len(),
        views.len(),
        train.steps
    );
    let mut trainer = Trainer::new(scene, views, train)?;
    let interval = cfg.checkpoint_interval;
    let mut last = None;
    let mut write_err = None;
    trainer.run(|t, rec| {
        if t.should_log(rec.step) {
            let line = serde_json::to_string(rec).expect("records serialize");
            if let Err(e) = writeln!(metrics, "{line}") {
                write_err = Some(e);
            }
            log::info!("step {} l1 {:.5} psnr {:.2} kernels {}", rec.step, rec.loss.l1, rec.psnr, rec.kernels);
        }
        if interval > 0 && rec.step % interval == 0 {
            io::save_gaussian_ply(&t.scene.foreground, ckpt.join(format!("step_{:06}.ply", rec.step)))?;
        }
        last = Some(rec.clone());
        Ok(())
    })?;
    metrics
        .flush()
        .ok()
        .and(write_err.map_or(Some(()), |_| None))
        .ok_or_else(|| CliError::Runtime(format!("cannot write {}", metrics_path.display())))?;

    let steps = trainer.state.step;
    let scene = trainer.into_scene();
    let model_path = out.join("point_cloud.ply");
    io::save_gaussian_ply(&scene.foreground, &model_path)?;
    if let Some(s) = &scene.sky {
        io::save_sky_ply(s, out.join("sky.ply"))?;
    }
    Ok(OptimizeSummary {
        steps,
        kernels: scene.foreground.len(),
        last,
        metrics: metrics_path,
        model: model_path,
    })
}

/// Mesh from the foreground cloud, written as OBJ or PLY by extension.
pub fn cmd_extract_mesh(cfg: &RunConfig) -> Result<Extraction, CliError> {
    let model = existing(&cfg.paths.model, "model")?;
    let cams_path = optional_existing(&cfg.paths.cameras, "cameras")?;
    let m = &cfg.mesh;
    if !(m.voxel_div > 0.0 && m.trunc_div > 0.0 && m.depth_clip > 0.0 && m.max_voxels > 0) {
        return Err(CliError::Usage("--voxel-div, --trunc-div, --depth-clip and --max-voxels must be positive".into()));
    }
    if cams_path.is_none() && (m.orbit.views == 0 || m.orbit.elevations.iter().any(|e| !(e.abs() < 90.0))) {
        return Err(CliError::Usage("orbit needs at least one view and elevations within (-90, 90)".into()));
    }
    let out = cfg.paths.output.clone().unwrap_or_else(|| PathBuf::from("mesh.obj"));
    let cameras = cams_path.as_deref().map(io::load_cameras).transpose().map_err(usage)?;
    let cloud = io::load_gaussian_ply(&model)?;
    let scene = HybridScene::foreground_only(cloud);
    let result = extract_mesh(&scene, cameras.as_deref(), m)?;
    let topo = result.mesh.topology();
    log::info!(
        "mesh: {} vertices, {} triangles, closed 2-manifold: {}, euler characteristic {}",
        result.mesh.vertices.len(),
        result.mesh.triangles.len(),
        topo.is_closed_manifold(),
        topo.euler_characteristic()
    );
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    io::write_mesh(&result.mesh, &out)?;
    Ok(result)
}

#[derive(Clone, Debug, Serialize)]
pub struct PruneSummary {
    pub before: usize,
    pub after: usize,
}

fn views<'a>(cameras: &'a [Camera], maps: &'a [ImageBuffer]) -> Vec<ViewMap<'a>> {
    cameras.iter().zip(maps).map(|(camera, map)| ViewMap { camera, map }).collect()
}

fn load_depths(dir: &Path, cameras: &[Camera]) -> Result<Vec<ImageBuffer>, CliError> {
    let paths: Vec<PathBuf> = cameras.iter().map(|c| dir.join(format!("{}_depth.pfm", c.id))).collect();
    check_files(&paths, "depth map")?;
    Ok(paths.iter().map(io::load_pfm).collect::<Result<Vec<_>, _>>()?)
}

/// Apply the opacity, mask and free-space criteria that are configured, in
/// that order. Without any criterion the default opacity threshold is used.
pub fn cmd_prune(cfg: &RunConfig) -> Result<PruneSummary, CliError> {
    let model = existing(&cfg.paths.model, "model")?;
    let out = cfg
        .paths
        .output
        .clone()
        .ok_or_else(|| CliError::Usage("missing output path (--out)".into()))?;
    let masks_dir = optional_existing(&cfg.paths.masks, "masks")?;
    let depths_dir = optional_existing(&cfg.paths.depths, "depths")?;
    let p = &cfg.prune;
    let cameras = if masks_dir.is_some() || depths_dir.is_some() {
        let path = existing(&cfg.paths.cameras, "cameras")?;
        io::load_cameras(&path).map_err(usage)?
    } else {
        Vec::new()
    };
    if depths_dir.is_some() && p.margin.is_none() {
        return Err(CliError::Usage("free-space pruning needs --margin".into()));
    }
    if !(p.mask_fraction > 0.0 && p.mask_fraction <= 1.0) {
        return Err(CliError::Usage("--mask-fraction must be in (0, 1]".into()));
    }
    let opacity = match (p.opacity, masks_dir.is_some() || depths_dir.is_some()) {
        (Some(t), _) => Some(t),
        (None, false) => Some(density::DensifyConfig::default().opacity_prune_threshold),
        (None, true) => None,
    };
    if opacity.is_some_and(|t| !(t >= 0.0)) {
        return Err(CliError::Usage("--opacity must be >= 0".into()));
    }
    let masks = masks_dir
        .as_deref()
        .map(|d| {
            check_files(&io::per_camera_paths(d, &cameras), "mask")?;
            io::load_masks(d, &cameras).map_err(CliError::from)
        })
        .transpose()?;
    let depths = depths_dir.as_deref().map(|d| load_depths(d, &cameras)).transpose()?;

    let mut cloud: GaussianCloud = io::load_gaussian_ply(&model)?;
    let before = cloud.len();
    if let Some(t) = opacity {
        cloud = prune(&cloud, &PruneCriterion::Opacity(t))?.cloud;
        log::info!("opacity < {t}: {} kernels left", cloud.len());
    }
    if let Some(m) = &masks {
        let crit = PruneCriterion::Mask {
            views: views(&cameras, m),
            fraction: p.mask_fraction,
        };
        cloud = prune(&cloud, &crit)?.cloud;
        log::info!("sky mask: {} kernels left", cloud.len());
    }
    if let Some(d) = &depths {
        let crit = PruneCriterion::FreeSpace {
            views: views(&cameras, d),
            margin: p.margin.unwrap_or_default(),
        };
        cloud = prune(&cloud, &crit)?.cloud;
        log::info!("free space: {} kernels left", cloud.len());
    }
    io::save_gaussian_ply(&cloud, &out)?;
    Ok(PruneSummary {
        before,
        after: cloud.len(),
    })
}
