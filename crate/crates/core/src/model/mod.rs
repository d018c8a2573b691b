//! Core scene types and parameter activations.

pub mod sh;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

pub const MAX_SH_DEGREE: usize = 3;
pub const DEFAULT_Z_NEAR: f64 = 0.01;
/// Largest accepted deviation of `RᵀR` from the identity.
pub const ROTATION_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_Z_FAR: f64 = 100.0;

/// Number of SH coefficients per channel for `degree`.
pub const fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`].
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of a unit quaternion stored as `(w, x, y, z)`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Mat3 {
    let [w, x, y, z] = *q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn normalize_quat(q: &[f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return [1.0, 0.0, 0.0, 0.0];
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// One Gaussian kernel in storage (pre-activation) form.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: Vec3,
    /// Quaternion `(w, x, y, z)`; normalized before use.
    pub rot: [f64; 4],
    /// Natural log of per-axis standard deviation.
    pub log_scale: Vec3,
    pub opacity_logit: f64,
    /// `(degree + 1)²` RGB coefficient triples, coefficient-major.
    pub sh: Vec<[f64; 3]>,
}

/// Activated parameters of a [`Gaussian`].
#[derive(Clone, Debug, PartialEq)]
pub struct Activated {
    pub mean: Vec3,
    pub rot: [f64; 4],
    pub scales: Vec3,
    pub opacity: f64,
    pub rotation: Mat3,
    pub covariance: Mat3,
}

impl Gaussian {
    /// Isotropic kernel with a view-independent color, at SH degree `degree`.
    pub fn isotropic(mean: Vec3, scale: f64, opacity: f64, rgb: [f64; 3], degree: usize) -> Self {
        let mut sh = vec![[0.0; 3]; sh_coeff_count(degree)];
        sh[0] = rgb.map(sh::rgb_to_dc);
        Gaussian {
            mean,
            rot: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vec3::repeat(scale.ln()),
            opacity_logit: logit(opacity),
            sh,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn sh_degree(&self) -> Result<usize> {
        sh::stored_degree(self.sh.len())
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite())
            && self.rot.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh.iter().flatten().all(|v| v.is_finite())
    }

    pub fn activate(&self) -> Result<Activated> {
        if !self.is_finite() {
            return Err(Error::NonFinite("gaussian parameters".into()));
        }
        let scales = self.scales();
        if !scales.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::NonFinite(format!("activated scales {scales:?}")));
        }
        let qn = self.rot.iter().map(|v| v * v).sum::<f64>().sqrt();
        if qn == 0.0 {
            return Err(Error::InvalidArgument("zero-length rotation quaternion".into()));
        }
        let rot = normalize_quat(&self.rot);
        let rotation = quat_to_matrix(&rot);
        let m = rotation * Mat3::from_diagonal(&scales);
        Ok(Activated {
            mean: self.mean,
            rot,
            scales,
            opacity: self.opacity(),
            rotation,
            covariance: m * m.transpose(),
        })
    }
}

impl Activated {
    /// Storage-form parameters that activate back to `self` (SH left empty).
    pub fn deactivate(&self, sh: Vec<[f64; 3]>) -> Gaussian {
        Gaussian {
            mean: self.mean,
            rot: self.rot,
            log_scale: self.scales.map(f64::ln),
            opacity_logit: logit(self.opacity),
            sh,
        }
    }
}

/// Ordered Gaussian kernels sharing one SH degree.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    pub sh_degree: usize,
}

impl GaussianCloud {
    pub fn new(sh_degree: usize) -> Result<Self> {
        if sh_degree > MAX_SH_DEGREE {
            return Err(Error::UnsupportedShDegree(sh_degree));
        }
        Ok(GaussianCloud {
            gaussians: Vec::new(),
            sh_degree,
        })
    }

    pub fn from_gaussians(sh_degree: usize, gaussians: Vec<Gaussian>) -> Result<Self> {
        let mut cloud = Self::new(sh_degree)?;
        for g in gaussians {
            cloud.push(g)?;
        }
        Ok(cloud)
    }

    pub fn push(&mut self, g: Gaussian) -> Result<()> {
        if g.sh.len() != sh_coeff_count(self.sh_degree) {
            return Err(Error::ShDegree {
                requested: self.sh_degree,
                stored: g.sh_degree().unwrap_or(usize::MAX),
            });
        }
        self.gaussians.push(g);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Gaussian> {
        self.gaussians.iter()
    }

    /// Keep only kernels whose flag is set.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        debug_assert_eq!(keep.len(), self.gaussians.len());
        let mut it = keep.iter();
        self.gaussians.retain(|_| *it.next().unwrap_or(&true));
    }
}

/// Pinhole camera. World points map to camera space as `R x + T`; the camera
/// looks down `+z`, `+x` right and `+y` down in the image. Pixel `(i, j)` has
/// its center at `(i + 0.5, j + 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub id: String,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub z_near: f64,
    pub z_far: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`; `up` is the world direction that
    /// should appear towards the top of the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fx: f64, fy: f64, width: u32, height: u32) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-12 {
            let alt = if forward.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            right = forward.cross(&alt);
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Camera {
            id: String::new(),
            rotation,
            translation: -(rotation * eye),
            fx,
            fy,
            cx: f64::from(width) / 2.0,
            cy: f64::from(height) / 2.0,
            width,
            height,
            z_near: DEFAULT_Z_NEAR,
            z_far: DEFAULT_Z_FAR,
        }
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// World-space optical axis.
    pub fn forward(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Continuous pixel coordinates of a camera-space point.
    pub fn project(&self, p_cam: &Vec3) -> (f64, f64) {
        (
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }

    /// Unit world-space ray direction through continuous pixel `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vec3 {
        let d_cam = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * d_cam).normalize()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Checks with the loader tolerance [`ROTATION_TOLERANCE`].
    pub fn validate(&self) -> Result<()> {
        self.validate_with_tolerance(ROTATION_TOLERANCE)
    }

    pub fn validate_with_tolerance(&self, tol: f64) -> Result<()> {
        let invalid = |reason: String| Error::InvalidCamera {
            id: self.id.clone(),
            reason,
        };
        let finite = self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
            && [self.fx, self.fy, self.cx, self.cy, self.z_near, self.z_far]
                .iter()
                .all(|v| v.is_finite());
        if !finite {
            return Err(invalid("non-finite parameter".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max();
        if err > tol {
            return Err(invalid(format!("rotation not orthonormal (error {err:.3e})")));
        }
        if self.rotation.determinant() < 0.0 {
            return Err(invalid("rotation has determinant -1 (reflection)".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(invalid("focal lengths must be positive".into()));
        }
        if !(self.z_near > 0.0 && self.z_near < self.z_far) {
            return Err(invalid("require 0 < z_near < z_far".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("image size must be non-zero".into()));
        }
        Ok(())
    }
}

/// Row-major image with 1 or 3 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        ImageBuffer {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::SizeMismatch {
                expected: format!("{} values", width * height * channels),
                found: format!("{}", data.len()),
            });
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn ensure_same_shape(&self, other: &ImageBuffer) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::SizeMismatch {
                expected: format!("{}x{}x{}", self.width, self.height, self.channels),
                found: format!("{}x{}x{}", other.width, other.height, other.channels),
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
