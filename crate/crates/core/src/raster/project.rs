use nalgebra::{Matrix2x3, Matrix3};

use crate::model::{sh, Camera, Gaussian, Mat3, Vec3};

/// Screen-space dilation added to every projected covariance, in pixels².
pub const COV2D_DILATION: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;

/// A kernel projected into one view.
#[derive(Clone, Debug)]
pub struct ProjectedGaussian {
    /// Index of the source kernel in its cloud.
    pub index: usize,
    pub pixel_mean: [f64; 2],
    /// Symmetric 2×2 covariance `(xx, xy, yy)` after dilation.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d`, same layout.
    pub conic: [f64; 3],
    pub view_z: f64,
    /// SH color clamped to `[0, 1]`.
    pub color: [f64; 3],
    pub alpha_max: f64,
    pub radius_px: f64,
    pub(crate) aux: ProjectionAux,
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct ProjectionAux {
    pub p_cam: Vec3,
    pub jacobian: Matrix2x3<f64>,
    pub cov_cam: Mat3,
    pub rotation: Mat3,
    pub rot_unit: [f64; 4],
    pub rot_norm: f64,
    pub scales: Vec3,
    pub raw_color: [f64; 3],
    pub view_dir: Vec3,
    pub view_dist: f64,
}

/// Project one kernel; `None` when it is behind the near plane, past the far
/// plane, cannot reach the alpha cutoff, or its footprint misses the image.
pub fn project(g: &Gaussian, index: usize, cam: &Camera, sh_degree: usize) -> Option<ProjectedGaussian> {
    let p_cam = cam.world_to_camera(&g.mean);
    if !(p_cam.z > cam.z_near) || p_cam.z > cam.z_far {
        return None;
    }
    let opacity = g.opacity();
    if opacity < ALPHA_MIN {
        return None;
    }
    let act = g.activate().ok()?;

    let (tx, ty, tz) = (p_cam.x, p_cam.y, p_cam.z);
    let jacobian = Matrix2x3::new(
        cam.fx / tz,
        0.0,
        -cam.fx * tx / (tz * tz),
        0.0,
        cam.fy / tz,
        -cam.fy * ty / (tz * tz),
    );
    let cov_cam: Matrix3<f64> = cam.rotation * act.covariance * cam.rotation.transpose();
    let c2 = jacobian * cov_cam * jacobian.transpose();
    let cov2d = [c2[(0, 0)] + COV2D_DILATION, 0.5 * (c2[(0, 1)] + c2[(1, 0)]), c2[(1, 1)] + COV2D_DILATION];
    let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [cov2d[2] / det, -cov2d[1] / det, cov2d[0] / det];

    // Beyond this radius the kernel's alpha is below the cutoff in every
    // direction, so binning by it never drops a contribution.
    let mid = 0.5 * (cov2d[0] + cov2d[2]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let reach = (2.0 * (opacity.min(ALPHA_MAX) / ALPHA_MIN).ln()).max(0.0);
    let radius_px = (reach * lambda_max).sqrt().ceil().max(1.0);

    let (u, v) = cam.project(&p_cam);
    if u + radius_px < 0.0
        || u - radius_px > f64::from(cam.width)
        || v + radius_px < 0.0
        || v - radius_px > f64::from(cam.height)
    {
        return None;
    }

    let offset = g.mean - cam.center();
    let view_dist = offset.norm();
    let view_dir = if view_dist > 0.0 { offset / view_dist } else { Vec3::z() };
    let raw_color = sh::eval_unchecked(sh_degree, &g.sh, &view_dir);

    Some(ProjectedGaussian {
        index,
        pixel_mean: [u, v],
        cov2d,
        conic,
        view_z: tz,
        color: raw_color.map(|c| c.clamp(0.0, 1.0)),
        alpha_max: opacity,
        radius_px,
        aux: ProjectionAux {
            p_cam,
            jacobian,
            cov_cam,
            rotation: act.rotation,
            rot_unit: act.rot,
            rot_norm: g.rot.iter().map(|q| q * q).sum::<f64>().sqrt(),
            scales: act.scales,
            raw_color,
            view_dir,
            view_dist,
        },
    })
}

impl ProjectedGaussian {
    /// Gaussian falloff exponent at continuous pixel position `(x, y)`.
    #[inline]
    pub fn power_at(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.pixel_mean[0];
        let dy = y - self.pixel_mean[1];
        -0.5 * (self.conic[0] * dx * dx + self.conic[2] * dy * dy) - self.conic[1] * dx * dy
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Gaussian;

    fn axis_camera(fx: f64) -> Camera {
        Camera::look_at(Vec3::zeros(), Vec3::z(), -Vec3::y(), fx, fx, 64, 64)
    }

    #[test]
    fn on_axis_isotropic_covariance() {
        let (d, s, fx) = (4.0, 0.1, 80.0);
        let g = Gaussian::isotropic(Vec3::new(0.0, 0.0, d), s, 0.8, [0.5; 3], 0);
        let p = project(&g, 0, &axis_camera(fx), 0).unwrap();
        let expected = (fx * s / d).powi(2) + COV2D_DILATION;
        assert!((p.cov2d[0] - expected).abs() < 1e-12);
        assert!((p.cov2d[2] - expected).abs() < 1e-12);
        assert!(p.cov2d[1].abs() < 1e-12);
        assert_eq!(p.pixel_mean, [32.0, 32.0]);
        assert!(p.radius_px >= 1.0);
    }

    #[test]
    fn behind_camera_culled() {
        let g = Gaussian::isotropic(Vec3::new(0.0, 0.0, -2.0), 0.1, 0.8, [0.5; 3], 0);
        assert!(project(&g, 0, &axis_camera(50.0), 0).is_none());
        let near = Gaussian::isotropic(Vec3::new(0.0, 0.0, 0.005), 0.1, 0.8, [0.5; 3], 0);
        assert!(project(&near, 0, &axis_camera(50.0), 0).is_none());
    }

    #[test]
    fn off_screen_culled() {
        let g = Gaussian::isotropic(Vec3::new(50.0, 0.0, 1.0), 0.01, 0.8, [0.5; 3], 0);
        assert!(project(&g, 0, &axis_camera(50.0), 0).is_none());
    }

    #[test]
    fn focal_length_scales_offset_linearly() {
        let g = Gaussian::isotropic(Vec3::new(0.3, -0.2, 3.0), 0.05, 0.8, [0.5; 3], 0);
        let a = project(&g, 0, &axis_camera(40.0), 0).unwrap();
        let b = project(&g, 0, &axis_camera(80.0), 0).unwrap();
        for k in 0..2 {
            let da = a.pixel_mean[k] - 32.0;
            let db = b.pixel_mean[k] - 32.0;
            assert!((db - 2.0 * da).abs() < 1e-12);
        }
    }
}
