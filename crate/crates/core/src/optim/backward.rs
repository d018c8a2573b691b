//! Reverse-mode gradients of the training loss through the rasterizer.

use nalgebra::Matrix2;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::model::{sh, sh_coeff_count, Camera, Gaussian, GaussianCloud, ImageBuffer, Mat3, Vec3};
use crate::raster::{kernel_alpha, Frame, ProjectedGaussian, RenderOutput, TRANSMITTANCE_MIN};
use crate::sky::{self, blend_sky, HybridScene};

pub const MEAN: usize = 0;
pub const LOG_SCALE: usize = 3;
pub const ROT: usize = 6;
pub const OPACITY: usize = 10;
pub const SH: usize = 11;

/// Number of scalar parameters per kernel at `degree`.
pub const fn param_stride(degree: usize) -> usize {
    SH + 3 * sh_coeff_count(degree)
}

/// Per-kernel parameter rows: mean (3), log-scale (3), quaternion (4),
/// opacity logit (1), then SH coefficients coefficient-major (3 per coeff).
#[derive(Clone, Debug, PartialEq)]
pub struct CloudGrad {
    pub stride: usize,
    pub data: Vec<f64>,
}

impl CloudGrad {
    pub fn zeros(len: usize, degree: usize) -> Self {
        let stride = param_stride(degree);
        CloudGrad {
            stride,
            data: vec![0.0; len * stride],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.stride
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.stride..(i + 1) * self.stride]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.stride..(i + 1) * self.stride]
    }

    pub fn add_scaled(&mut self, other: &CloudGrad, s: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += s * b);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(p) => Err(Error::NonFiniteGradient { index: p / self.stride }),
            None => Ok(()),
        }
    }
}

/// Flatten a kernel into its parameter row.
pub fn pack(g: &Gaussian, out: &mut [f64]) {
    out[MEAN..MEAN + 3].copy_from_slice(g.mean.as_slice());
    out[LOG_SCALE..LOG_SCALE + 3].copy_from_slice(g.log_scale.as_slice());
    out[ROT..ROT + 4].copy_from_slice(&g.rot);
    out[OPACITY] = g.opacity_logit;
    for (k, c) in g.sh.iter().enumerate() {
        out[SH + 3 * k..SH + 3 * k + 3].copy_from_slice(c);
    }
}

/// Inverse of [`pack`].
pub fn unpack(row: &[f64], g: &mut Gaussian) {
    g.mean = Vec3::from_column_slice(&row[MEAN..MEAN + 3]);
    g.log_scale = Vec3::from_column_slice(&row[LOG_SCALE..LOG_SCALE + 3]);
    g.rot.copy_from_slice(&row[ROT..ROT + 4]);
    g.opacity_logit = row[OPACITY];
    for (k, c) in g.sh.iter_mut().enumerate() {
        c.copy_from_slice(&row[SH + 3 * k..SH + 3 * k + 3]);
    }
}

/// Loss values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub l1: f64,
    pub scale: f64,
    pub entropy: f64,
    pub mask: f64,
    pub sky: f64,
    pub total: f64,
}

/// Screen-space gradient of one projected kernel.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct ScreenGrad {
    pub color: [f64; 3],
    pub opacity: f64,
    pub mean2d: [f64; 2],
    /// With respect to the conic entries `(a, b, c)` of `a dx² + 2b dx dy + c dy²`.
    pub conic: [f64; 3],
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for i in 0..3 {
            self.color[i] += o.color[i];
            self.conic[i] += o.conic[i];
        }
        self.opacity += o.opacity;
        self.mean2d[0] += o.mean2d[0];
        self.mean2d[1] += o.mean2d[1];
    }
}

struct Contribution {
    slot: usize,
    alpha: f64,
    falloff: f64,
    clamped: bool,
    t_before: f64,
}

/// Backpropagate per-pixel color (3 per pixel) and opacity gradients through
/// the compositing of `frame`. Returns one entry per projected kernel.
pub(crate) fn backward_frame(
    frame: &Frame,
    background: [f64; 3],
    grad_color: &[f64],
    grad_opacity: Option<&[f64]>,
) -> Vec<ScreenGrad> {
    let width = frame.camera.width as usize;
    let per_tile: Vec<Vec<ScreenGrad>> = (0..frame.bins.len())
        .into_par_iter()
        .map(|t| {
            let bin = &frame.bins[t];
            let mut local = vec![ScreenGrad::default(); bin.len()];
            let mut contribs: Vec<Contribution> = Vec::new();
            for (x, y) in frame.tile_pixels(t) {
                let pix = y * width + x;
                let gc = [grad_color[3 * pix], grad_color[3 * pix + 1], grad_color[3 * pix + 2]];
                let go = grad_opacity.map_or(0.0, |g| g[pix]);
                if gc == [0.0; 3] && go == 0.0 {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                contribs.clear();
                let mut t = 1.0;
                for (slot, &k) in bin.iter().enumerate() {
                    let p = &frame.projected[k as usize];
                    let Some((alpha, falloff, clamped)) = kernel_alpha(p, px, py) else {
                        continue;
                    };
                    let next_t = t * (1.0 - alpha);
                    if next_t < TRANSMITTANCE_MIN {
                        break;
                    }
                    contribs.push(Contribution {
                        slot,
                        alpha,
                        falloff,
                        clamped,
                        t_before: t,
                    });
                    t = next_t;
                }
                // Suffix sums of everything composited behind the current kernel.
                let mut behind_color = background.map(|b| t * b);
                let mut behind_weight = 0.0;
                for c in contribs.iter().rev() {
                    let p = &frame.projected[bin[c.slot] as usize];
                    let w = c.t_before * c.alpha;
                    let inv = 1.0 / (1.0 - c.alpha);
                    let mut g_alpha = go * (c.t_before - behind_weight * inv);
                    for ch in 0..3 {
                        g_alpha += gc[ch] * (c.t_before * p.color[ch] - behind_color[ch] * inv);
                    }
                    let sg = &mut local[c.slot];
                    for ch in 0..3 {
                        sg.color[ch] += w * gc[ch];
                        behind_color[ch] += w * p.color[ch];
                    }
                    behind_weight += w;
                    if c.clamped {
                        continue;
                    }
                    sg.opacity += g_alpha * c.falloff;
                    let g_power = g_alpha * c.alpha;
                    let dx = px - p.pixel_mean[0];
                    let dy = py - p.pixel_mean[1];
                    let [a, b, cc] = p.conic;
                    sg.mean2d[0] += g_power * (a * dx + b * dy);
                    sg.mean2d[1] += g_power * (b * dx + cc * dy);
                    sg.conic[0] += g_power * (-0.5 * dx * dx);
                    sg.conic[1] += g_power * (-dx * dy);
                    sg.conic[2] += g_power * (-0.5 * dy * dy);
                }
            }
            local
        })
        .collect();

    let mut total = vec![ScreenGrad::default(); frame.projected.len()];
    for (bin, local) in frame.bins.iter().zip(&per_tile) {
        for (&k, g) in bin.iter().zip(local) {
            total[k as usize].add(g);
        }
    }
    total
}

/// Chain one kernel's screen-space gradient into its parameter row.
pub(crate) fn screen_to_params(
    p: &ProjectedGaussian,
    g: &Gaussian,
    sg: &ScreenGrad,
    cam: &Camera,
    degree: usize,
    row: &mut [f64],
) {
    let aux = &p.aux;

    let mut g_color = sg.color;
    for ch in 0..3 {
        if !(0.0..=1.0).contains(&aux.raw_color[ch]) {
            g_color[ch] = 0.0;
        }
    }
    let n_coeffs = sh_coeff_count(degree);
    let (basis, dbasis) = sh::basis_and_gradient(degree, &aux.view_dir, degree > 0);
    for k in 0..n_coeffs {
        for ch in 0..3 {
            row[SH + 3 * k + ch] += basis[k] * g_color[ch];
        }
    }
    let mut g_mean = Vec3::zeros();
    if degree > 0 {
        let mut g_dir = Vec3::zeros();
        for k in 1..n_coeffs {
            let w: f64 = (0..3).map(|ch| g.sh[k][ch] * g_color[ch]).sum();
            g_dir += w * Vec3::from(dbasis[k]);
        }
        let d = aux.view_dir;
        g_mean += (g_dir - d * d.dot(&g_dir)) / aux.view_dist;
    }

    let o = p.alpha_max;
    row[OPACITY] += sg.opacity * o * (1.0 - o);

    let [a, b, c] = p.conic;
    let conic = Matrix2::new(a, b, b, c);
    let g_conic = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
    let g_cov2d = -(conic * g_conic * conic);

    let jac = aux.jacobian;
    let g_cov_cam = jac.transpose() * g_cov2d * jac;
    let g_jac = 2.0 * g_cov2d * jac * aux.cov_cam;

    let w = cam.rotation;
    let g_sigma = w.transpose() * g_cov_cam * w;
    let s = Mat3::from_diagonal(&aux.scales);
    let r = aux.rotation;
    let g_m = 2.0 * g_sigma * (r * s);
    let g_s = r.transpose() * g_m;
    for i in 0..3 {
        row[LOG_SCALE + i] += g_s[(i, i)] * aux.scales[i];
    }
    let g_unit = quat_grad(&aux.rot_unit, &(g_m * s));
    let q = aux.rot_unit;
    let dot: f64 = (0..4).map(|i| q[i] * g_unit[i]).sum();
    for i in 0..4 {
        row[ROT + i] += (g_unit[i] - q[i] * dot) / aux.rot_norm;
    }

    let (tx, ty, tz) = (aux.p_cam.x, aux.p_cam.y, aux.p_cam.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let tz2 = tz * tz;
    let tz3 = tz2 * tz;
    let [gmx, gmy] = sg.mean2d;
    let mut g_t = Vec3::new(
        gmx * fx / tz,
        gmy * fy / tz,
        -gmx * fx * tx / tz2 - gmy * fy * ty / tz2,
    );
    g_t.x += g_jac[(0, 2)] * (-fx / tz2);
    g_t.y += g_jac[(1, 2)] * (-fy / tz2);
    g_t.z += g_jac[(0, 0)] * (-fx / tz2)
        + g_jac[(0, 2)] * (2.0 * fx * tx / tz3)
        + g_jac[(1, 1)] * (-fy / tz2)
        + g_jac[(1, 2)] * (2.0 * fy * ty / tz3);
    g_mean += w.transpose() * g_t;
    for i in 0..3 {
        row[MEAN + i] += g_mean[i];
    }
}

/// Gradient with respect to a unit quaternion `(w, x, y, z)` given the
/// gradient of its rotation matrix.
fn quat_grad(q: &[f64; 4], g: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let gr = |i, j| g[(i, j)];
    [
        2.0 * (-z * gr(0, 1) + y * gr(0, 2) + z * gr(1, 0) - x * gr(1, 2) - y * gr(2, 0) + x * gr(2, 1)),
        2.0 * (y * gr(0, 1) + z * gr(0, 2) + y * gr(1, 0) - 2.0 * x * gr(1, 1) - w * gr(1, 2) + z * gr(2, 0)
            + w * gr(2, 1)
            - 2.0 * x * gr(2, 2)),
        2.0 * (-2.0 * y * gr(0, 0) + x * gr(0, 1) + w * gr(0, 2) + x * gr(1, 0) + z * gr(1, 2) - w * gr(2, 0)
            + z * gr(2, 1)
            - 2.0 * y * gr(2, 2)),
        2.0 * (-2.0 * z * gr(0, 0) - w * gr(0, 1) + x * gr(0, 2) + w * gr(1, 0) - 2.0 * z * gr(1, 1)
            + y * gr(1, 2)
            + x * gr(2, 0)
            + y * gr(2, 1)),
    ]
}

/// Parameter gradients for one cloud rendered in `frame`, given its screen
/// gradients. Also returns each visible kernel's screen-space mean gradient
/// in normalized device units, indexed by cloud position.
pub(crate) fn frame_param_grads(
    frame: &Frame,
    cloud: &GaussianCloud,
    screen: &[ScreenGrad],
    out: &mut CloudGrad,
    ndc_grad: Option<&mut [Option<f64>]>,
) {
    let cam = frame.camera;
    let rows: Vec<(usize, Vec<f64>)> = frame
        .projected
        .par_iter()
        .zip(screen)
        .map(|(p, sg)| {
            let mut row = vec![0.0; out.stride];
            screen_to_params(p, &cloud.gaussians[p.index], sg, cam, cloud.sh_degree, &mut row);
            (p.index, row)
        })
        .collect();
    for (index, row) in rows {
        out.row_mut(index).iter_mut().zip(&row).for_each(|(a, b)| *a += b);
    }
    if let Some(ndc) = ndc_grad {
        let (hw, hh) = (0.5 * f64::from(cam.width), 0.5 * f64::from(cam.height));
        for (p, sg) in frame.projected.iter().zip(screen) {
            ndc[p.index] = Some((sg.mean2d[0] * hw).hypot(sg.mean2d[1] * hh));
        }
    }
}

/// Result of [`backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: LossTerms,
    pub foreground: CloudGrad,
    pub sky: Option<CloudGrad>,
    /// Screen-space mean gradient norm (NDC units) of each foreground kernel
    /// visible in this view; `None` for kernels that were culled.
    pub screen_grad: Vec<Option<f64>>,
    pub render: RenderOutput,
}

fn check_inputs(cam: &Camera, target: &ImageBuffer, sky_mask: Option<&ImageBuffer>) -> Result<()> {
    cam.validate()?;
    let (w, h) = (cam.width as usize, cam.height as usize);
    if target.width != w || target.height != h || target.channels != 3 {
        return Err(Error::SizeMismatch {
            expected: format!("{w}x{h}x3 target"),
            found: format!("{}x{}x{}", target.width, target.height, target.channels),
        });
    }
    if let Some(m) = sky_mask {
        if m.width != w || m.height != h || m.channels != 1 {
            return Err(Error::SizeMismatch {
                expected: format!("{w}x{h}x1 mask"),
                found: format!("{}x{}x{}", m.width, m.height, m.channels),
            });
        }
    }
    Ok(())
}

/// Photometric and sky terms for one view, with gradients. Regularizers are
/// not included; see [`add_regularizers`].
pub fn view_backward(
    scene: &HybridScene,
    cam: &Camera,
    target: &ImageBuffer,
    sky_mask: Option<&ImageBuffer>,
    sky_weight: f64,
) -> Result<Gradients> {
    check_inputs(cam, target, sky_mask)?;
    let fg_frame = Frame::new(&scene.foreground, cam);
    let mut render = fg_frame.render([0.0; 3]);
    let sky_pass = scene.sky.as_ref().map(|s| {
        let frame = Frame::new(&s.cloud, cam);
        let out = frame.render(s.fallback_color);
        (frame, out)
    });
    if let Some((_, pass)) = &sky_pass {
        render.color = blend_sky(&render, &pass.color);
    }

    let l1 = losses::l1_loss(&render.color, target)?;
    let g_color = losses::l1_loss_grad(&render.color, target)?;
    let mut g_opacity = vec![0.0; cam.pixel_count()];
    let mut sky_term = 0.0;
    if let Some(mask) = sky_mask {
        if sky_weight > 0.0 {
            sky_term = sky::sky_loss(&render, mask, sky_weight)?;
            g_opacity = sky::sky_loss_grad(&render, mask, sky_weight)?;
        }
    }

    let mut sky_grad = None;
    if let (Some(sky_model), Some((frame, pass))) = (scene.sky.as_ref(), sky_pass.as_ref()) {
        let mut g_sky_color = vec![0.0; g_color.len()];
        for (i, go) in g_opacity.iter_mut().enumerate() {
            let rest = 1.0 - render.opacity.data[i];
            for ch in 0..3 {
                let gc = g_color[3 * i + ch];
                *go -= gc * pass.color.data[3 * i + ch];
                g_sky_color[3 * i + ch] = rest * gc;
            }
        }
        let screen = backward_frame(frame, sky_model.fallback_color, &g_sky_color, None);
        let mut grad = CloudGrad::zeros(sky_model.cloud.len(), sky_model.cloud.sh_degree);
        frame_param_grads(frame, &sky_model.cloud, &screen, &mut grad, None);
        sky_grad = Some(grad);
    }

    let screen = backward_frame(&fg_frame, [0.0; 3], &g_color, Some(&g_opacity));
    let mut foreground = CloudGrad::zeros(scene.foreground.len(), scene.foreground.sh_degree);
    let mut screen_grad = vec![None; scene.foreground.len()];
    frame_param_grads(&fg_frame, &scene.foreground, &screen, &mut foreground, Some(&mut screen_grad));

    Ok(Gradients {
        loss: LossTerms {
            l1,
            sky: sky_term,
            total: l1 + sky_term,
            ..LossTerms::default()
        },
        foreground,
        sky: sky_grad,
        screen_grad,
        render,
    })
}

/// Add the scale and entropy regularizers (values and gradients).
pub fn add_regularizers(cloud: &GaussianCloud, weights: &LossWeights, loss: &mut LossTerms, grad: &mut CloudGrad) {
    if cloud.is_empty() {
        return;
    }
    if weights.scale > 0.0 {
        loss.scale = weights.scale * losses::scaling_loss(cloud).unwrap_or(0.0);
        for (i, g) in losses::scaling_loss_grad(cloud).iter().enumerate() {
            let row = grad.row_mut(i);
            for k in 0..3 {
                row[LOG_SCALE + k] += weights.scale * g[k];
            }
        }
    }
    if weights.entropy > 0.0 {
        loss.entropy = weights.entropy * losses::entropy_loss(cloud).unwrap_or(0.0);
        for (i, g) in losses::entropy_loss_grad(cloud).iter().enumerate() {
            grad.row_mut(i)[OPACITY] += weights.entropy * g;
        }
    }
    loss.total = loss.l1 + loss.sky + loss.scale + loss.entropy + loss.mask;
}

/// Total loss for one view and analytic gradients for every foreground and
/// sky parameter.
pub fn backward(
    scene: &HybridScene,
    cam: &Camera,
    target: &ImageBuffer,
    sky_mask: Option<&ImageBuffer>,
    weights: &LossWeights,
) -> Result<Gradients> {
    weights.validate()?;
    let mut out = view_backward(scene, cam, target, sky_mask, weights.sky)?;
    add_regularizers(&scene.foreground, weights, &mut out.loss, &mut out.foreground);
    out.foreground.check_finite()?;
    if let Some(s) = &out.sky {
        s.check_finite()?;
    }
    Ok(out)
}

/// Forward-only evaluation of the same total loss as [`backward`].
pub fn evaluate_loss(
    scene: &HybridScene,
    cam: &Camera,
    target: &ImageBuffer,
    sky_mask: Option<&ImageBuffer>,
    weights: &LossWeights,
) -> Result<LossTerms> {
    check_inputs(cam, target, sky_mask)?;
    let render = sky::composite_hybrid(scene, cam);
    let mut loss = LossTerms {
        l1: losses::l1_loss(&render.color, target)?,
        ..LossTerms::default()
    };
    if let Some(mask) = sky_mask {
        if weights.sky > 0.0 {
            loss.sky = sky::sky_loss(&render, mask, weights.sky)?;
        }
    }
    if !scene.foreground.is_empty() {
        if weights.scale > 0.0 {
            loss.scale = weights.scale * losses::scaling_loss(&scene.foreground)?;
        }
        if weights.entropy > 0.0 {
            loss.entropy = weights.entropy * losses::entropy_loss(&scene.foreground)?;
        }
    }
    loss.total = loss.l1 + loss.sky + loss.scale + loss.entropy;
    Ok(loss)
}
