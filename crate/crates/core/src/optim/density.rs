//! Rule-based density control: clone/split under high screen-space gradient,
//! and pruning by opacity, sky mask, or free-space depth.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{logit, Camera, GaussianCloud, ImageBuffer, Vec3};
use crate::optim::adam::OptimState;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    /// Mean screen-space gradient (NDC units) above which kernels densify.
    pub grad_threshold: f64,
    /// Steps between densification passes.
    pub interval: u64,
    pub from_step: u64,
    pub until_step: u64,
    /// Kernels whose largest scale exceeds this fraction of the scene extent
    /// are split rather than cloned.
    pub split_scale_threshold: f64,
    pub split_factor: f64,
    pub max_kernels: usize,
    pub opacity_prune_threshold: f64,
    /// Steps between opacity resets; 0 disables.
    pub opacity_reset_interval: u64,
    pub enabled: bool,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            grad_threshold: 2e-4,
            interval: 100,
            from_step: 500,
            until_step: 15_000,
            split_scale_threshold: 0.01,
            split_factor: 1.6,
            max_kernels: 1_000_000,
            opacity_prune_threshold: 0.005,
            opacity_reset_interval: 3_000,
            enabled: true,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.grad_threshold > 0.0
            && self.interval > 0
            && self.split_scale_threshold > 0.0
            && self.split_factor > 0.0
            && self.max_kernels > 0
            && self.opacity_prune_threshold >= 0.0;
        if positive {
            Ok(())
        } else {
            Err(Error::InvalidArgument("densify parameters must be positive".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
}

/// Clone or split kernels whose mean accumulated screen-space gradient is
/// above the threshold, then reset the statistics. Never grows the cloud past
/// `max_kernels`; optimizer rows stay aligned with the cloud.
pub fn densify<R: Rng>(
    state: &mut OptimState,
    cloud: &mut GaussianCloud,
    config: &DensifyConfig,
    scene_extent: f64,
    rng: &mut R,
) -> DensifyReport {
    let n = cloud.len();
    debug_assert_eq!(state.rows(), n);
    let mut report = DensifyReport::default();
    let mut keep = vec![true; n];
    let mut added = Vec::new();
    let mut size = n;
    let limit = scene_extent * config.split_scale_threshold;
    for i in 0..n {
        if state.grad_count[i] == 0 {
            continue;
        }
        let mean_grad = state.grad_accum[i] / f64::from(state.grad_count[i]);
        if !(mean_grad > config.grad_threshold) || size >= config.max_kernels {
            continue;
        }
        let g = &cloud.gaussians[i];
        let scales = g.scales();
        if scales.max() <= limit {
            added.push((i, g.clone()));
            report.cloned += 1;
        } else {
            let Ok(act) = g.activate() else { continue };
            let shrink = config.split_factor.ln();
            for _ in 0..2 {
                let local = Vec3::new(
                    rng.sample::<f64, _>(StandardNormal) * scales.x,
                    rng.sample::<f64, _>(StandardNormal) * scales.y,
                    rng.sample::<f64, _>(StandardNormal) * scales.z,
                );
                let mut child = g.clone();
                child.mean = g.mean + act.rotation * local;
                child.log_scale = g.log_scale.map(|s| s - shrink);
                added.push((i, child));
            }
            keep[i] = false;
            report.split += 1;
        }
        size += 1;
    }
    let mask_init: Vec<f64> = added
        .iter()
        .map(|(src, _)| state.mask.as_ref().map_or(0.0, |m| m.logits[*src]))
        .collect();
    cloud.gaussians.extend(added.into_iter().map(|(_, g)| g));
    state.push_rows(&mask_init);
    let mut keep_all = keep;
    keep_all.resize(cloud.len(), true);
    cloud.retain_mask(&keep_all);
    state.retain(&keep_all);
    state.reset_densify_stats();
    report
}

/// Clamp every opacity to at most 0.01 and clear the opacity moments.
pub fn reset_opacity(state: &mut OptimState, cloud: &mut GaussianCloud) {
    let cap = logit(0.01);
    for g in &mut cloud.gaussians {
        g.opacity_logit = g.opacity_logit.min(cap);
    }
    state.foreground.reset_column(crate::optim::backward::OPACITY);
}

/// One view with a per-pixel map used by pruning.
#[derive(Clone, Debug)]
pub struct ViewMap<'a> {
    pub camera: &'a Camera,
    pub map: &'a ImageBuffer,
}

#[derive(Clone, Debug)]
pub enum PruneCriterion<'a> {
    /// Remove kernels with activated opacity below the threshold.
    Opacity(f64),
    /// Remove kernels whose center lands on a masked pixel in at least
    /// `fraction` of the views that observe it.
    Mask { views: Vec<ViewMap<'a>>, fraction: f64 },
    /// Remove kernels lying more than `margin` in front of the reference
    /// depth in a majority of the views with valid depth at their pixel.
    FreeSpace { views: Vec<ViewMap<'a>>, margin: f64 },
}

pub const DEFAULT_MASK_FRACTION: f64 = 0.6;

#[derive(Clone, Debug, PartialEq)]
pub struct PruneResult {
    pub cloud: GaussianCloud,
    /// Per input kernel, whether it survived.
    pub keep: Vec<bool>,
}

impl PruneResult {
    pub fn removed(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }
}

fn pixel_of(cam: &Camera, p: &Vec3) -> Option<(usize, f64)> {
    let pc = cam.world_to_camera(p);
    if !(pc.z > cam.z_near) {
        return None;
    }
    let (u, v) = cam.project(&pc);
    if !(u >= 0.0 && v >= 0.0 && u < f64::from(cam.width) && v < f64::from(cam.height)) {
        return None;
    }
    Some(((v as usize) * cam.width as usize + u as usize, pc.z))
}

fn check_views(views: &[ViewMap]) -> Result<()> {
    for v in views {
        if v.map.width != v.camera.width as usize || v.map.height != v.camera.height as usize || v.map.channels != 1 {
            return Err(Error::SizeMismatch {
                expected: format!("{}x{}x1 map for camera {}", v.camera.width, v.camera.height, v.camera.id),
                found: format!("{}x{}x{}", v.map.width, v.map.height, v.map.channels),
            });
        }
    }
    Ok(())
}

pub fn prune(cloud: &GaussianCloud, criterion: &PruneCriterion) -> Result<PruneResult> {
    let keep: Vec<bool> = match criterion {
        PruneCriterion::Opacity(tau) => cloud.iter().map(|g| g.opacity() >= *tau).collect(),
        PruneCriterion::Mask { views, fraction } => {
            check_views(views)?;
            cloud
                .iter()
                .map(|g| {
                    let (mut seen, mut masked) = (0usize, 0usize);
                    for v in views {
                        if let Some((pix, _)) = pixel_of(v.camera, &g.mean) {
                            seen += 1;
                            if v.map.data[pix] > 0.5 {
                                masked += 1;
                            }
                        }
                    }
                    seen == 0 || (masked as f64) < fraction * seen as f64
                })
                .collect()
        }
        PruneCriterion::FreeSpace { views, margin } => {
            check_views(views)?;
            cloud
                .iter()
                .map(|g| {
                    let (mut seen, mut free) = (0usize, 0usize);
                    for v in views {
                        if let Some((pix, z)) = pixel_of(v.camera, &g.mean) {
                            let d = v.map.data[pix];
                            if d > 0.0 {
                                seen += 1;
                                if z < d - margin {
                                    free += 1;
                                }
                            }
                        }
                    }
                    2 * free <= seen
                })
                .collect()
        }
    };
    let mut out = cloud.clone();
    out.retain_mask(&keep);
    Ok(PruneResult { cloud: out, keep })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Gaussian;
    use crate::optim::adam::{LearningRates, OptimState};
    use crate::sky::HybridScene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(scales: &[f64]) -> GaussianCloud {
        GaussianCloud::from_gaussians(
            0,
            scales
                .iter()
                .enumerate()
                .map(|(i, &s)| Gaussian::isotropic(Vec3::new(i as f64, 0.0, 5.0), s, 0.5, [0.5; 3], 0))
                .collect(),
        )
        .unwrap()
    }

    fn state_for(c: &GaussianCloud) -> OptimState {
        OptimState::new(&HybridScene::foreground_only(c.clone()), LearningRates::default(), 1.0, 100)
    }

    #[test]
    fn no_gradient_no_change() {
        let mut c = cloud(&[0.001, 0.5]);
        let before = c.clone();
        let mut s = state_for(&c);
        s.grad_count = vec![3, 3];
        let r = densify(&mut s, &mut c, &DensifyConfig::default(), 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(r, DensifyReport::default());
        assert_eq!(c, before);
    }

    #[test]
    fn large_kernel_splits_small_clones() {
        let mut c = cloud(&[0.001, 0.5]);
        let mut s = state_for(&c);
        s.grad_accum = vec![1.0, 1.0];
        s.grad_count = vec![1, 1];
        let cfg = DensifyConfig::default();
        let r = densify(&mut s, &mut c, &cfg, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(r, DensifyReport { cloned: 1, split: 1 });
        assert_eq!(c.len(), 4);
        assert_eq!(s.rows(), 4);
        assert_eq!(s.grad_accum, vec![0.0; 4]);
        // small kernel kept plus its clone, then two children of the large one
        assert!((c.gaussians[0].scales().x - 0.001).abs() < 1e-12);
        assert_eq!(c.gaussians[0], c.gaussians[1]);
        for child in &c.gaussians[2..] {
            assert!((child.scales().x - 0.5 / 1.6).abs() < 1e-12);
        }
    }

    #[test]
    fn capped_growth() {
        let mut c = cloud(&[0.001, 0.001, 0.001]);
        let mut s = state_for(&c);
        s.grad_accum = vec![1.0; 3];
        s.grad_count = vec![1; 3];
        let cfg = DensifyConfig { max_kernels: 3, ..DensifyConfig::default() };
        densify(&mut s, &mut c, &cfg, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(c.len(), 3);
        let cfg = DensifyConfig { max_kernels: 4, ..DensifyConfig::default() };
        s.grad_accum = vec![1.0; 3];
        s.grad_count = vec![1; 3];
        densify(&mut s, &mut c, &cfg, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(c.len(), 4);
    }

    #[test]
    fn opacity_prune() {
        let mut c = cloud(&[0.1, 0.1, 0.1]);
        c.gaussians[1].opacity_logit = logit(0.001);
        assert_eq!(prune(&c, &PruneCriterion::Opacity(0.0)).unwrap().cloud.len(), 3);
        let r = prune(&c, &PruneCriterion::Opacity(0.005)).unwrap();
        assert_eq!(r.keep, vec![true, false, true]);
        assert_eq!(r.removed(), 1);
    }

    #[test]
    fn mask_and_freespace_prune() {
        let cams: Vec<Camera> = (0..3)
            .map(|i| {
                Camera::look_at(Vec3::new(i as f64 * 0.1, 0.0, 0.0), Vec3::new(0.0, 0.0, 5.0), -Vec3::y(), 10.0, 10.0, 8, 8)
            })
            .collect();
        let c = cloud(&[0.1]);
        let full = ImageBuffer::filled(8, 8, 1, 1.0);
        let views: Vec<ViewMap> = cams.iter().map(|c| ViewMap { camera: c, map: &full }).collect();
        let r = prune(&c, &PruneCriterion::Mask { views: views.clone(), fraction: 0.6 }).unwrap();
        assert_eq!(r.cloud.len(), 0);
        let empty = ImageBuffer::new(8, 8, 1);
        let none: Vec<ViewMap> = cams.iter().map(|c| ViewMap { camera: c, map: &empty }).collect();
        assert_eq!(prune(&c, &PruneCriterion::Mask { views: none, fraction: 0.6 }).unwrap().cloud.len(), 1);

        let far = ImageBuffer::filled(8, 8, 1, 9.0);
        let depth: Vec<ViewMap> = cams.iter().map(|c| ViewMap { camera: c, map: &far }).collect();
        let r = prune(&c, &PruneCriterion::FreeSpace { views: depth, margin: 0.5 }).unwrap();
        assert_eq!(r.cloud.len(), 0);
        let near = ImageBuffer::filled(8, 8, 1, 5.0);
        let depth: Vec<ViewMap> = cams.iter().map(|c| ViewMap { camera: c, map: &near }).collect();
        assert_eq!(prune(&c, &PruneCriterion::FreeSpace { views: depth, margin: 0.5 }).unwrap().cloud.len(), 1);
    }
}
