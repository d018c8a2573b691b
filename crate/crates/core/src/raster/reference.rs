use crate::model::{Camera, GaussianCloud};
use crate::raster::{project, RenderOutput, ALPHA_MAX, ALPHA_MIN, MEDIAN_THRESHOLD, TRANSMITTANCE_MIN};

/// Brute-force renderer: every pixel walks every visible kernel in global
/// depth order, without tiles. Same contract as [`crate::raster::composite`].
pub fn composite_reference(cloud: &GaussianCloud, camera: &Camera) -> RenderOutput {
    let width = camera.width as usize;
    let height = camera.height as usize;
    let mut kernels: Vec<_> = cloud
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project(g, i, camera, cloud.sh_degree))
        .collect();
    kernels.sort_by(|a, b| a.view_z.total_cmp(&b.view_z).then(a.index.cmp(&b.index)));

    let mut out = RenderOutput::empty(width, height);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut transmittance = 1.0;
            let mut weight_sum = 0.0;
            let mut rgb = [0.0f64; 3];
            let mut median = None;
            for k in &kernels {
                let dx = px - k.pixel_mean[0];
                let dy = py - k.pixel_mean[1];
                let power = -0.5 * (k.conic[0] * dx * dx + k.conic[2] * dy * dy) - k.conic[1] * dx * dy;
                if power > 0.0 {
                    continue;
                }
                let alpha = (k.alpha_max * power.exp()).min(ALPHA_MAX);
                if alpha < ALPHA_MIN {
                    continue;
                }
                if transmittance * (1.0 - alpha) < TRANSMITTANCE_MIN {
                    break;
                }
                let w = transmittance * alpha;
                rgb.iter_mut().zip(k.color).for_each(|(c, kc)| *c += w * kc);
                weight_sum += w;
                if median.is_none() && weight_sum >= MEDIAN_THRESHOLD {
                    median = Some(k.view_z);
                }
                transmittance *= 1.0 - alpha;
            }
            let i = y * width + x;
            out.color.data[3 * i..3 * i + 3].copy_from_slice(&rgb);
            out.opacity.data[i] = weight_sum;
            out.median_depth.data[i] = median.unwrap_or(0.0);
            out.valid[i] = median.is_some();
            out.transmittance.data[i] = transmittance;
        }
    }
    out
}
