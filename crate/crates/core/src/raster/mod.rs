//! Forward tile-based splatting.
//!
//! Kernels are projected with the EWA approximation, sorted once per image by
//! view depth (ties broken by input index) and alpha-composited front to back
//! inside 16×16 pixel tiles.

mod project;
mod reference;

pub use project::{project, ProjectedGaussian, ALPHA_MAX, ALPHA_MIN, COV2D_DILATION, TRANSMITTANCE_MIN};
pub use reference::composite_reference;

use rayon::prelude::*;

use crate::model::{Camera, GaussianCloud, ImageBuffer};

pub const TILE_SIZE: usize = 16;
/// Accumulated opacity at which a pixel's median depth is taken.
pub const MEDIAN_THRESHOLD: f64 = 0.5;

/// Output of one render.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    /// `sum_i T_i alpha_i c_i`, plus `T_final * background` when a background
    /// color is given.
    pub color: ImageBuffer,
    /// Accumulated opacity `O(p) = sum_i T_i alpha_i`.
    pub opacity: ImageBuffer,
    /// Depth of the kernel at which `O` first reaches 0.5; 0 where never reached.
    pub median_depth: ImageBuffer,
    pub valid: Vec<bool>,
    /// Transmittance left after the last composited kernel.
    pub transmittance: ImageBuffer,
}

impl RenderOutput {
    pub(crate) fn empty(width: usize, height: usize) -> Self {
        RenderOutput {
            color: ImageBuffer::new(width, height, 3),
            opacity: ImageBuffer::new(width, height, 1),
            median_depth: ImageBuffer::new(width, height, 1),
            valid: vec![false; width * height],
            transmittance: ImageBuffer::filled(width, height, 1, 1.0),
        }
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }
}

/// Projected, depth-sorted and tile-binned kernels for one camera.
pub struct Frame<'a> {
    pub camera: &'a Camera,
    /// Visible kernels in compositing order.
    pub projected: Vec<ProjectedGaussian>,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Per tile, indices into `projected` in compositing order.
    pub(crate) bins: Vec<Vec<u32>>,
}

impl<'a> Frame<'a> {
    pub fn new(cloud: &GaussianCloud, camera: &'a Camera) -> Self {
        let width = camera.width as usize;
        let height = camera.height as usize;
        let mut projected: Vec<ProjectedGaussian> = cloud
            .gaussians
            .par_iter()
            .enumerate()
            .filter_map(|(i, g)| project(g, i, camera, cloud.sh_degree))
            .collect();
        projected.sort_by(|a, b| a.view_z.total_cmp(&b.view_z).then(a.index.cmp(&b.index)));

        let tiles_x = width.div_ceil(TILE_SIZE);
        let tiles_y = height.div_ceil(TILE_SIZE);
        let mut bins = vec![Vec::new(); tiles_x * tiles_y];
        for (k, p) in projected.iter().enumerate() {
            let Some((x0, x1, y0, y1)) = tile_range(p, tiles_x, tiles_y) else {
                continue;
            };
            for ty in y0..y1 {
                for tx in x0..x1 {
                    bins[ty * tiles_x + tx].push(k as u32);
                }
            }
        }
        Frame {
            camera,
            projected,
            tiles_x,
            tiles_y,
            bins,
        }
    }

    pub(crate) fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (usize, usize)> {
        let width = self.camera.width as usize;
        let height = self.camera.height as usize;
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let (x0, y0) = (tx * TILE_SIZE, ty * TILE_SIZE);
        let (x1, y1) = ((x0 + TILE_SIZE).min(width), (y0 + TILE_SIZE).min(height));
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }

    pub fn render(&self, background: [f64; 3]) -> RenderOutput {
        let width = self.camera.width as usize;
        let height = self.camera.height as usize;
        let tiles: Vec<Vec<(usize, PixelResult)>> = (0..self.bins.len())
            .into_par_iter()
            .map(|t| {
                let bin = &self.bins[t];
                self.tile_pixels(t)
                    .map(|(x, y)| {
                        let r = shade_pixel(
                            x as f64 + 0.5,
                            y as f64 + 0.5,
                            bin.iter().map(|&k| &self.projected[k as usize]),
                            background,
                        );
                        (y * width + x, r)
                    })
                    .collect()
            })
            .collect();
        let mut out = RenderOutput::empty(width, height);
        for (i, r) in tiles.into_iter().flatten() {
            out.color.data[3 * i..3 * i + 3].copy_from_slice(&r.color);
            out.opacity.data[i] = r.opacity;
            out.median_depth.data[i] = r.median_depth;
            out.valid[i] = r.valid;
            out.transmittance.data[i] = r.transmittance;
        }
        out
    }
}

fn tile_range(p: &ProjectedGaussian, tiles_x: usize, tiles_y: usize) -> Option<(usize, usize, usize, usize)> {
    let [u, v] = p.pixel_mean;
    let r = p.radius_px;
    let ts = TILE_SIZE as f64;
    let clamp = |val: f64, hi: usize| (val.max(0.0) as usize).min(hi);
    let x0 = clamp(((u - r) / ts).floor(), tiles_x);
    let x1 = clamp(((u + r) / ts).floor() + 1.0, tiles_x);
    let y0 = clamp(((v - r) / ts).floor(), tiles_y);
    let y1 = clamp(((v + r) / ts).floor() + 1.0, tiles_y);
    (x0 < x1 && y0 < y1).then_some((x0, x1, y0, y1))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PixelResult {
    pub color: [f64; 3],
    pub opacity: f64,
    pub median_depth: f64,
    pub valid: bool,
    pub transmittance: f64,
}

/// Alpha of kernel `p` at pixel `(x, y)`, or `None` below the cutoff.
/// Also returns whether the 0.99 clamp was active.
#[inline]
pub(crate) fn kernel_alpha(p: &ProjectedGaussian, x: f64, y: f64) -> Option<(f64, f64, bool)> {
    let power = p.power_at(x, y);
    if power > 0.0 {
        return None;
    }
    let falloff = power.exp();
    let raw = p.alpha_max * falloff;
    let alpha = raw.min(ALPHA_MAX);
    if alpha < ALPHA_MIN {
        return None;
    }
    Some((alpha, falloff, raw > ALPHA_MAX))
}

#[inline]
pub(crate) fn shade_pixel<'p>(
    x: f64,
    y: f64,
    kernels: impl Iterator<Item = &'p ProjectedGaussian>,
    background: [f64; 3],
) -> PixelResult {
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut acc = 0.0;
    let mut median = None;
    for p in kernels {
        let Some((alpha, _, _)) = kernel_alpha(p, x, y) else {
            continue;
        };
        let next_t = t * (1.0 - alpha);
        if next_t < TRANSMITTANCE_MIN {
            break;
        }
        let w = t * alpha;
        for ch in 0..3 {
            color[ch] += w * p.color[ch];
        }
        acc += w;
        if median.is_none() && acc >= MEDIAN_THRESHOLD {
            median = Some(p.view_z);
        }
        t = next_t;
    }
    for ch in 0..3 {
        color[ch] += t * background[ch];
    }
    PixelResult {
        color,
        opacity: acc,
        median_depth: median.unwrap_or(0.0),
        valid: median.is_some(),
        transmittance: t,
    }
}

/// Render `cloud` from `camera` with a black background.
pub fn composite(cloud: &GaussianCloud, camera: &Camera) -> RenderOutput {
    Frame::new(cloud, camera).render([0.0; 3])
}

/// Render with `background` blended in by the remaining transmittance.
pub fn composite_with_background(cloud: &GaussianCloud, camera: &Camera, background: [f64; 3]) -> RenderOutput {
    Frame::new(cloud, camera).render(background)
}
