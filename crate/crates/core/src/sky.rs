//! Gaussian sky ball.
//!
//! The background is a separate cloud of kernels constrained to a large
//! sphere around the scene. It is rendered in its own pass and blended behind
//! the foreground as `C = sum T_i a_i c_i + (1 - O) * C_sky`.

use crate::error::{Error, Result};
use crate::model::{logit, sh, Camera, Gaussian, GaussianCloud, ImageBuffer, Vec3};
use crate::raster::{composite, composite_with_background, RenderOutput};

/// Sky sphere radius as a multiple of the scene radius.
pub const SKY_RADIUS_FACTOR: f64 = 100.0;
pub const DEFAULT_SKY_POINTS: usize = 100_000;
pub const DEFAULT_SKY_WEIGHT: f64 = 10.0;
/// Steps during which the sky opacity penalty is active.
pub const SKY_LOSS_STEPS: u64 = 7_000;
pub const MID_GRAY: [f64; 3] = [0.5; 3];

/// `n` points on the Fibonacci lattice of a sphere.
pub fn fibonacci_sphere(n: usize, center: Vec3, radius: f64) -> Result<Vec<Vec3>> {
    if n == 0 {
        return Err(Error::InvalidArgument("fibonacci_sphere needs at least one point".into()));
    }
    let golden_angle = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    Ok((0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = i as f64 * golden_angle;
            center + radius * Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkyModel {
    pub cloud: GaussianCloud,
    pub center: Vec3,
    pub radius: f64,
    /// Color behind the sky kernels where they leave transmittance.
    pub fallback_color: [f64; 3],
}

impl SkyModel {
    /// Move every kernel mean back onto the sphere along its radial direction.
    pub fn reproject(&mut self) {
        for g in &mut self.cloud.gaussians {
            let d = g.mean - self.center;
            let n = d.norm();
            g.mean = if n > 0.0 {
                self.center + d * (self.radius / n)
            } else {
                self.center + Vec3::z() * self.radius
            };
        }
    }

    pub fn max_radial_error(&self) -> f64 {
        self.cloud
            .iter()
            .map(|g| ((g.mean - self.center).norm() - self.radius).abs())
            .fold(0.0, f64::max)
    }
}

/// Sky ball of `n` kernels at `100 * scene_radius`, each with isotropic scale
/// `2 R sqrt(pi / n)` so neighbours overlap at one sigma.
pub fn init_sky(scene_center: Vec3, scene_radius: f64, n: usize, color: [f64; 3]) -> Result<SkyModel> {
    if !(scene_radius > 0.0) {
        return Err(Error::InvalidArgument(format!("scene radius must be positive, got {scene_radius}")));
    }
    let radius = SKY_RADIUS_FACTOR * scene_radius;
    let scale = 2.0 * radius * (std::f64::consts::PI / n.max(1) as f64).sqrt();
    let dc = color.map(sh::rgb_to_dc);
    let gaussians = fibonacci_sphere(n, scene_center, radius)?
        .into_iter()
        .map(|mean| Gaussian {
            mean,
            rot: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vec3::repeat(scale.ln()),
            opacity_logit: logit(0.5),
            sh: vec![dc],
        })
        .collect();
    Ok(SkyModel {
        cloud: GaussianCloud {
            gaussians,
            sh_degree: 0,
        },
        center: scene_center,
        radius,
        fallback_color: color,
    })
}

/// Foreground cloud with an optional sky ball.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridScene {
    pub foreground: GaussianCloud,
    pub sky: Option<SkyModel>,
}

impl HybridScene {
    pub fn foreground_only(foreground: GaussianCloud) -> Self {
        HybridScene { foreground, sky: None }
    }
}

/// Combined render plus the separate sky pass.
#[derive(Clone, Debug)]
pub struct HybridRender {
    /// Foreground opacity, median depth and validity; blended color.
    pub output: RenderOutput,
    /// Foreground-only accumulated color.
    pub foreground_color: ImageBuffer,
    pub sky_color: Option<ImageBuffer>,
}

/// Blend a sky pass behind a foreground pass.
pub fn blend_sky(foreground: &RenderOutput, sky_color: &ImageBuffer) -> ImageBuffer {
    let mut color = foreground.color.clone();
    for (i, o) in foreground.opacity.data.iter().enumerate() {
        let rest = 1.0 - o;
        for ch in 0..3 {
            color.data[3 * i + ch] += rest * sky_color.data[3 * i + ch];
        }
    }
    color
}

pub fn render_hybrid(scene: &HybridScene, cam: &Camera) -> HybridRender {
    let mut output = composite(&scene.foreground, cam);
    let foreground_color = output.color.clone();
    let sky_color = scene.sky.as_ref().map(|sky| {
        let pass = composite_with_background(&sky.cloud, cam, sky.fallback_color);
        output.color = blend_sky(&output, &pass.color);
        pass.color
    });
    HybridRender {
        output,
        foreground_color,
        sky_color,
    }
}

/// Render color by blending the sky pass behind the foreground; opacity and
/// median depth come from the foreground only.
pub fn composite_hybrid(scene: &HybridScene, cam: &Camera) -> RenderOutput {
    render_hybrid(scene, cam).output
}

fn masked_pixels(output: &RenderOutput, mask: &ImageBuffer) -> Result<usize> {
    if mask.width != output.width() || mask.height != output.height() || mask.channels != 1 {
        return Err(Error::SizeMismatch {
            expected: format!("{}x{}x1 mask", output.width(), output.height()),
            found: format!("{}x{}x{}", mask.width, mask.height, mask.channels),
        });
    }
    Ok(mask.data.iter().filter(|&&m| m > 0.5).count())
}

/// `weight * mean(O(p))` over sky-mask pixels; 0 for an empty mask.
///
/// The mean keeps the weight independent of resolution; multiply by the
/// masked pixel count to obtain the plain sum.
pub fn sky_loss(output: &RenderOutput, mask: &ImageBuffer, weight: f64) -> Result<f64> {
    let count = masked_pixels(output, mask)?;
    if count == 0 {
        return Ok(0.0);
    }
    let sum: f64 = output
        .opacity
        .data
        .iter()
        .zip(&mask.data)
        .filter(|(_, &m)| m > 0.5)
        .map(|(o, _)| o)
        .sum();
    Ok(weight * sum / count as f64)
}

/// Per-pixel derivative of [`sky_loss`] with respect to `O(p)`.
pub fn sky_loss_grad(output: &RenderOutput, mask: &ImageBuffer, weight: f64) -> Result<Vec<f64>> {
    let count = masked_pixels(output, mask)?;
    let g = if count == 0 { 0.0 } else { weight / count as f64 };
    Ok(mask.data.iter().map(|&m| if m > 0.5 { g } else { 0.0 }).collect())
}

/// Mean color of sky-masked pixels over a set of images, or mid-gray when
/// there are none.
pub fn masked_mean_color(images: &[ImageBuffer], masks: &[ImageBuffer]) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    for (img, mask) in images.iter().zip(masks) {
        if img.channels != 3 || !(img.width == mask.width && img.height == mask.height) {
            continue;
        }
        for (i, &m) in mask.data.iter().enumerate() {
            if m > 0.5 {
                for ch in 0..3 {
                    sum[ch] += img.data[3 * i + ch];
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        MID_GRAY
    } else {
        sum.map(|s| s / count as f64)
    }
}
