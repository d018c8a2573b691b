//! Full training loop: photometric + regularizer descent with interleaved
//! density control and pruning.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::model::{Camera, Gaussian, GaussianCloud, ImageBuffer, Vec3};
use crate::optim::adam::{step, LearningRates, MaskParams, OptimState, StepGradients};
use crate::optim::backward::{add_regularizers, view_backward, CloudGrad, LossTerms, LOG_SCALE, OPACITY};
use crate::optim::density::{densify, prune, reset_opacity, DensifyConfig, PruneCriterion};
use crate::sky::{HybridScene, SKY_LOSS_STEPS};
use crate::surface::bounding_sphere;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub rates: LearningRates,
    pub weights: LossWeights,
    pub densify: DensifyConfig,
    /// Number of initial steps during which the sky opacity penalty is applied.
    pub sky_loss_steps: u64,
    /// Views rendered per step; 0 uses every view.
    pub views_per_step: usize,
    pub log_interval: u64,
    /// Initial logit of the learnable masks when `weights.mask > 0`.
    pub mask_init: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 30_000,
            rates: LearningRates::default(),
            weights: LossWeights::default(),
            densify: DensifyConfig::default(),
            sky_loss_steps: SKY_LOSS_STEPS,
            views_per_step: 1,
            log_interval: 100,
            mask_init: 2.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.densify.enabled {
            self.densify.validate()?;
        }
        if self.log_interval == 0 {
            return Err(Error::InvalidArgument("log_interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainView {
    pub camera: Camera,
    pub image: ImageBuffer,
    pub sky_mask: Option<ImageBuffer>,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub psnr: f64,
    pub kernels: usize,
    #[serde(flatten)]
    pub loss: LossTerms,
}

pub struct Trainer {
    pub scene: HybridScene,
    pub state: OptimState,
    pub config: TrainConfig,
    views: Vec<TrainView>,
    rng: ChaCha8Rng,
}

/// `n` gray isotropic kernels sampled uniformly inside a ball.
pub fn random_init<R: Rng>(n: usize, center: Vec3, radius: f64, degree: usize, rng: &mut R) -> Result<GaussianCloud> {
    let scale = radius / (n.max(1) as f64).cbrt();
    let gaussians = (0..n)
        .map(|_| loop {
            let p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if p.norm_squared() <= 1.0 {
                break Gaussian::isotropic(center + p * radius, scale, 0.1, [0.5; 3], degree);
            }
        })
        .collect();
    GaussianCloud::from_gaussians(degree, gaussians)
}

impl Trainer {
    pub fn new(scene: HybridScene, views: Vec<TrainView>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if views.is_empty() {
            return Err(Error::InvalidArgument("training needs at least one view".into()));
        }
        let extent = if scene.foreground.is_empty() {
            1.0
        } else {
            bounding_sphere(&scene.foreground)?.radius
        };
        let mut state = OptimState::new(&scene, config.rates, extent, config.steps);
        if config.weights.mask > 0.0 {
            state.mask = Some(MaskParams::new(scene.foreground.len(), config.mask_init));
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            scene,
            state,
            config,
            views,
            rng,
        })
    }

    pub fn views(&self) -> &[TrainView] {
        &self.views
    }

    pub fn done(&self) -> bool {
        self.state.step >= self.config.steps
    }

    /// Whether the record of `step` belongs in the metrics log.
    pub fn should_log(&self, step: u64) -> bool {
        step % self.config.log_interval == 0 || step == self.config.steps
    }

    fn pick_views(&mut self) -> Vec<usize> {
        let n = self.views.len();
        let k = self.config.views_per_step;
        if k == 0 || k >= n {
            (0..n).collect()
        } else {
            let mut idx = sample(&mut self.rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
    }

    fn hard_masks(&self) -> Option<Vec<bool>> {
        self.state.mask.as_ref().map(|m| losses::mask_loss(&m.logits).masks)
    }

    /// One optimization step, followed by any scheduled density control.
    pub fn step(&mut self) -> Result<StepRecord> {
        let picked = self.pick_views();
        let next = self.state.step + 1;
        let sky_weight = if next <= self.config.sky_loss_steps {
            self.config.weights.sky
        } else {
            0.0
        };

        let hard = self.hard_masks();
        let (effective, kept) = match &hard {
            Some(h) => {
                let (c, k) = losses::apply_masks(&self.scene.foreground, h);
                (
                    HybridScene {
                        foreground: c,
                        sky: self.scene.sky.clone(),
                    },
                    Some(k),
                )
            }
            None => (self.scene.clone(), None),
        };

        let n = self.scene.foreground.len();
        let mut fg = CloudGrad::zeros(n, self.scene.foreground.sh_degree);
        let mut sky_grad = self.scene.sky.as_ref().map(|s| CloudGrad::zeros(s.cloud.len(), s.cloud.sh_degree));
        let mut loss = LossTerms::default();
        let mut mse = 0.0;
        let inv = 1.0 / picked.len() as f64;
        for &vi in &picked {
            let view = &self.views[vi];
            let g = view_backward(&effective, &view.camera, &view.image, view.sky_mask.as_ref(), sky_weight)?;
            loss.l1 += inv * g.loss.l1;
            loss.sky += inv * g.loss.sky;
            mse += inv * losses::mse(&g.render.color, &view.image)?;
            let mut screen = vec![None; n];
            for (j, sg) in g.screen_grad.iter().enumerate() {
                let src = kept.as_ref().map_or(j, |k| k[j]);
                screen[src] = *sg;
                let row = g.foreground.row(j);
                fg.row_mut(src).iter_mut().zip(row).for_each(|(a, b)| *a += inv * b);
            }
            self.state.accumulate_screen_grads(&screen);
            if let (Some(acc), Some(s)) = (sky_grad.as_mut(), g.sky.as_ref()) {
                acc.add_scaled(s, inv);
            }
        }

        let mut mask_grad = None;
        if let Some(mask) = &self.state.mask {
            let lambda = self.config.weights.mask;
            loss.mask = lambda * losses::mask_loss(&mask.logits).loss;
            let count = n.max(1) as f64;
            let grads = (0..n)
                .map(|i| {
                    let row = fg.row(i);
                    let o = self.scene.foreground.gaussians[i].opacity();
                    let through = row[OPACITY] / (1.0 - o).max(1e-12) + row[LOG_SCALE..LOG_SCALE + 3].iter().sum::<f64>();
                    losses::mask_surrogate_grad(mask.logits[i]) * (through + lambda / count)
                })
                .collect();
            mask_grad = Some(grads);
        }

        add_regularizers(&self.scene.foreground, &self.config.weights, &mut loss, &mut fg);
        fg.check_finite()?;
        if let Some(s) = &sky_grad {
            s.check_finite()?;
        }
        let grads = StepGradients {
            foreground: fg,
            sky: sky_grad,
            mask: mask_grad,
        };
        step(&mut self.state, &mut self.scene, &grads);
        self.density_control();

        Ok(StepRecord {
            step: self.state.step,
            psnr: losses::psnr_from_mse(mse),
            kernels: self.scene.foreground.len(),
            loss,
        })
    }

    fn density_control(&mut self) {
        let cfg = self.config.densify;
        let s = self.state.step;
        if !cfg.enabled || s > cfg.until_step {
            return;
        }
        if s >= cfg.from_step && s % cfg.interval == 0 {
            let extent = self.state.scene_extent;
            densify(&mut self.state, &mut self.scene.foreground, &cfg, extent, &mut self.rng);
            let mut keep = prune(&self.scene.foreground, &PruneCriterion::Opacity(cfg.opacity_prune_threshold))
                .map(|r| r.keep)
                .unwrap_or_else(|_| vec![true; self.scene.foreground.len()]);
            if let Some(h) = self.hard_masks() {
                keep.iter_mut().zip(h).for_each(|(k, m)| *k &= m);
            }
            self.scene.foreground.retain_mask(&keep);
            self.state.retain(&keep);
        }
        if cfg.opacity_reset_interval > 0 && s % cfg.opacity_reset_interval == 0 {
            reset_opacity(&mut self.state, &mut self.scene.foreground);
        }
    }

    /// Run every remaining step, passing each record to `on_step`.
    pub fn run<F: FnMut(&Trainer, &StepRecord) -> Result<()>>(&mut self, mut on_step: F) -> Result<()> {
        while !self.done() {
            let rec = self.step()?;
            on_step(self, &rec)?;
        }
        Ok(())
    }

    /// The trained scene with masked-out kernels removed.
    pub fn into_scene(self) -> HybridScene {
        let mut scene = self.scene;
        if let Some(m) = &self.state.mask {
            let hard = losses::mask_loss(&m.logits).masks;
            scene.foreground.retain_mask(&hard);
        }
        scene
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::composite;

    fn views_of(cloud: &GaussianCloud) -> Vec<TrainView> {
        (0..4)
            .map(|i| {
                let a = i as f64 * 0.4;
                let cam = Camera::look_at(
                    Vec3::new(3.0 * a.sin(), 0.0, -3.0 * a.cos()),
                    Vec3::zeros(),
                    -Vec3::y(),
                    20.0,
                    20.0,
                    16,
                    16,
                );
                let image = composite(cloud, &cam).color;
                TrainView {
                    camera: cam,
                    image,
                    sky_mask: None,
                }
            })
            .collect()
    }

    fn truth() -> GaussianCloud {
        GaussianCloud::from_gaussians(
            0,
            vec![
                Gaussian::isotropic(Vec3::new(-0.3, 0.0, 0.0), 0.3, 0.8, [0.9, 0.2, 0.1], 0),
                Gaussian::isotropic(Vec3::new(0.3, 0.1, 0.0), 0.25, 0.7, [0.1, 0.3, 0.9], 0),
            ],
        )
        .unwrap()
    }

    fn perturbed(gt: &GaussianCloud) -> GaussianCloud {
        let mut init = gt.clone();
        for g in &mut init.gaussians {
            g.sh[0] = [0.0; 3];
            g.mean.x += 0.05;
        }
        init
    }

    fn config(steps: u64) -> TrainConfig {
        let mut rates = LearningRates::default();
        rates.sh_dc = 0.02;
        TrainConfig {
            steps,
            rates,
            views_per_step: 0,
            log_interval: 10,
            densify: DensifyConfig {
                enabled: false,
                ..DensifyConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_drops_from_perturbed_start() {
        let gt = truth();
        let mut t = Trainer::new(HybridScene::foreground_only(perturbed(&gt)), views_of(&gt), config(200)).unwrap();
        let first = t.step().unwrap().loss.total;
        let mut last = first;
        t.run(|_, r| {
            last = r.loss.total;
            Ok(())
        })
        .unwrap();
        assert!(last < 0.3 * first, "{first} -> {last}");
    }

    #[test]
    fn sky_penalty_only_in_initial_steps() {
        let gt = truth();
        let mut views = views_of(&gt);
        for v in &mut views {
            v.sky_mask = Some(ImageBuffer::filled(16, 16, 1, 1.0));
        }
        let mut cfg = config(4);
        cfg.sky_loss_steps = 2;
        let mut t = Trainer::new(HybridScene::foreground_only(perturbed(&gt)), views, cfg).unwrap();
        let sky: Vec<f64> = (0..4).map(|_| t.step().unwrap().loss.sky).collect();
        assert!(sky[0] > 0.0 && sky[1] > 0.0, "{sky:?}");
        assert_eq!(&sky[2..], &[0.0, 0.0]);
    }

    #[test]
    fn seeded_runs_agree() {
        let gt = truth();
        let run = || {
            let mut cfg = config(30);
            cfg.views_per_step = 2;
            cfg.densify = DensifyConfig {
                from_step: 0,
                interval: 10,
                grad_threshold: 1e-6,
                ..DensifyConfig::default()
            };
            let mut t = Trainer::new(HybridScene::foreground_only(perturbed(&gt)), views_of(&gt), cfg).unwrap();
            let mut log = Vec::new();
            t.run(|_, r| {
                log.push(serde_json::to_string(r).unwrap());
                Ok(())
            })
            .unwrap();
            (log, t.into_scene())
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(sa.foreground.len() > 2);
    }

    #[test]
    fn masks_shrink_redundant_kernels() {
        let gt = truth();
        let mut init = perturbed(&gt);
        init.push(Gaussian::isotropic(Vec3::new(0.0, 5.0, 0.0), 0.01, 0.5, [0.5; 3], 0)).unwrap();
        let mut cfg = config(300);
        cfg.weights.mask = 1e-3;
        cfg.rates.mask = 0.05;
        let t = {
            let mut t = Trainer::new(HybridScene::foreground_only(init), views_of(&gt), cfg).unwrap();
            t.run(|_, _| Ok(())).unwrap();
            t
        };
        let scene = t.into_scene();
        assert_eq!(scene.foreground.len(), 2);
    }
}
