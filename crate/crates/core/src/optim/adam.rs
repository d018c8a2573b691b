use serde::{Deserialize, Serialize};

use crate::model::{normalize_quat, GaussianCloud, Vec3};
use crate::optim::backward::{pack, param_stride, unpack, CloudGrad, LOG_SCALE, MEAN, OPACITY, ROT, SH};
use crate::sky::{HybridScene, SkyModel};

/// Per-group learning rates. Position rates are multiplied by the scene
/// extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position: f64,
    /// Position rate reached at the final step (log-linear decay).
    pub position_final: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub mask: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            position_final: 1.6e-6,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity: 0.05,
            sh_dc: 2.5e-3,
            sh_rest: 2.5e-3 / 20.0,
            mask: 0.01,
        }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        LearningRates {
            position: 0.0,
            position_final: 0.0,
            log_scale: 0.0,
            rotation: 0.0,
            opacity: 0.0,
            sh_dc: 0.0,
            sh_rest: 0.0,
            mask: 0.0,
        }
    }

    /// Position rate at `step` of `total`, decaying log-linearly.
    pub fn position_at(&self, step: u64, total: u64) -> f64 {
        if total == 0 || self.position_final <= 0.0 || self.position <= 0.0 {
            return self.position;
        }
        let t = (step as f64 / total as f64).clamp(0.0, 1.0);
        (self.position.ln() * (1.0 - t) + self.position_final.ln() * t).exp()
    }

    fn column_rates(&self, degree: usize, position: f64) -> Vec<f64> {
        let mut rates = vec![0.0; param_stride(degree)];
        rates[MEAN..MEAN + 3].fill(position);
        rates[LOG_SCALE..LOG_SCALE + 3].fill(self.log_scale);
        rates[ROT..ROT + 4].fill(self.rotation);
        rates[OPACITY] = self.opacity;
        rates[SH..SH + 3].fill(self.sh_dc);
        rates[SH + 3..].fill(self.sh_rest);
        rates
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// First and second moments for a row-major parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub stride: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(rows: usize, stride: usize) -> Self {
        Moments {
            stride,
            m: vec![0.0; rows * stride],
            v: vec![0.0; rows * stride],
        }
    }

    pub fn rows(&self) -> usize {
        self.m.len() / self.stride
    }

    pub fn retain(&mut self, keep: &[bool]) {
        let stride = self.stride;
        let filter = |data: &mut Vec<f64>| {
            let mut out = Vec::with_capacity(data.len());
            for (row, &k) in data.chunks(stride).zip(keep) {
                if k {
                    out.extend_from_slice(row);
                }
            }
            *data = out;
        };
        filter(&mut self.m);
        filter(&mut self.v);
    }

    pub fn push_zero_rows(&mut self, n: usize) {
        self.m.resize(self.m.len() + n * self.stride, 0.0);
        self.v.resize(self.v.len() + n * self.stride, 0.0);
    }

    pub fn reset_column(&mut self, col: usize) {
        for r in 0..self.rows() {
            self.m[r * self.stride + col] = 0.0;
            self.v[r * self.stride + col] = 0.0;
        }
    }

    /// One bias-corrected Adam update of `params` (same layout) in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], rates: &[f64], step: u64) {
        let t = step.max(1) as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            let m = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            let v = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            let lr = rates[i % self.stride];
            if lr != 0.0 {
                params[i] -= lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Learnable masking parameters with their moments.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskParams {
    pub logits: Vec<f64>,
    pub moments: Moments,
}

impl MaskParams {
    pub fn new(rows: usize, init: f64) -> Self {
        MaskParams {
            logits: vec![init; rows],
            moments: Moments::zeros(rows, 1),
        }
    }
}

/// Optimizer state tracking the foreground (and optional sky) rows.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub total_steps: u64,
    pub rates: LearningRates,
    pub scene_extent: f64,
    pub foreground: Moments,
    pub sky: Option<Moments>,
    pub mask: Option<MaskParams>,
    /// Accumulated screen-space mean-gradient norm per foreground kernel.
    pub grad_accum: Vec<f64>,
    /// Number of views in which each foreground kernel was visible.
    pub grad_count: Vec<u32>,
}

impl OptimState {
    pub fn new(scene: &HybridScene, rates: LearningRates, scene_extent: f64, total_steps: u64) -> Self {
        let n = scene.foreground.len();
        OptimState {
            step: 0,
            total_steps,
            rates,
            scene_extent,
            foreground: Moments::zeros(n, param_stride(scene.foreground.sh_degree)),
            sky: scene
                .sky
                .as_ref()
                .map(|s| Moments::zeros(s.cloud.len(), param_stride(s.cloud.sh_degree))),
            mask: None,
            grad_accum: vec![0.0; n],
            grad_count: vec![0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.foreground.rows()
    }

    /// Drop foreground rows whose flag is false, in lockstep with the cloud.
    pub fn retain(&mut self, keep: &[bool]) {
        self.foreground.retain(keep);
        if let Some(mask) = &mut self.mask {
            mask.moments.retain(keep);
            let mut it = keep.iter();
            mask.logits.retain(|_| *it.next().unwrap_or(&true));
        }
        let mut it = keep.iter();
        self.grad_accum.retain(|_| *it.next().unwrap_or(&true));
        let mut it = keep.iter();
        self.grad_count.retain(|_| *it.next().unwrap_or(&true));
    }

    /// Append zeroed rows for new foreground kernels; `mask_init` gives the
    /// mask logit of each new row when masking is active.
    pub fn push_rows(&mut self, mask_init: &[f64]) {
        let n = mask_init.len();
        self.foreground.push_zero_rows(n);
        if let Some(mask) = &mut self.mask {
            mask.moments.push_zero_rows(n);
            mask.logits.extend_from_slice(mask_init);
        }
        self.grad_accum.resize(self.grad_accum.len() + n, 0.0);
        self.grad_count.resize(self.grad_count.len() + n, 0);
    }

    pub fn reset_densify_stats(&mut self) {
        self.grad_accum.iter_mut().for_each(|v| *v = 0.0);
        self.grad_count.iter_mut().for_each(|v| *v = 0);
    }

    pub fn accumulate_screen_grads(&mut self, screen: &[Option<f64>]) {
        for (i, g) in screen.iter().enumerate() {
            if let Some(g) = g {
                self.grad_accum[i] += g;
                self.grad_count[i] += 1;
            }
        }
    }
}

/// Gradients consumed by [`step`].
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub foreground: CloudGrad,
    pub sky: Option<CloudGrad>,
    pub mask: Option<Vec<f64>>,
}

fn update_cloud(cloud: &mut GaussianCloud, moments: &mut Moments, grad: &CloudGrad, rates: &[f64], step: u64) {
    let stride = moments.stride;
    let mut params = vec![0.0; cloud.len() * stride];
    for (g, row) in cloud.gaussians.iter().zip(params.chunks_mut(stride)) {
        pack(g, row);
    }
    moments.update(&mut params, &grad.data, rates, step);
    for (g, row) in cloud.gaussians.iter_mut().zip(params.chunks(stride)) {
        unpack(row, g);
        g.rot = normalize_quat(&g.rot);
    }
}

fn tangential(sky: &SkyModel, grad: &CloudGrad) -> CloudGrad {
    let mut out = grad.clone();
    for (i, g) in sky.cloud.iter().enumerate() {
        let radial = (g.mean - sky.center).normalize();
        let row = out.row_mut(i);
        let gm = Vec3::from_column_slice(&row[MEAN..MEAN + 3]);
        let t = gm - radial * radial.dot(&gm);
        row[MEAN..MEAN + 3].copy_from_slice(t.as_slice());
    }
    out
}

/// One Adam step over every parameter group. Quaternions are re-normalized
/// and sky kernels are re-projected onto their sphere.
pub fn step(state: &mut OptimState, scene: &mut HybridScene, grads: &StepGradients) {
    state.step += 1;
    let position = state.rates.position_at(state.step, state.total_steps) * state.scene_extent;
    let rates = state.rates.column_rates(scene.foreground.sh_degree, position);
    update_cloud(&mut scene.foreground, &mut state.foreground, &grads.foreground, &rates, state.step);

    if let (Some(sky), Some(moments), Some(g)) = (scene.sky.as_mut(), state.sky.as_mut(), grads.sky.as_ref()) {
        let sky_rates = state.rates.column_rates(sky.cloud.sh_degree, position);
        let g = tangential(sky, g);
        update_cloud(&mut sky.cloud, moments, &g, &sky_rates, state.step);
        sky.reproject();
    }

    if let (Some(mask), Some(g)) = (state.mask.as_mut(), grads.mask.as_ref()) {
        mask.moments.update(&mut mask.logits, g, &[state.rates.mask], state.step);
    }
}
