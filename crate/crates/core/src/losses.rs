//! Photometric loss, PSNR, and per-kernel regularizers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sigmoid, GaussianCloud, ImageBuffer};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const ENTROPY_CLAMP: f64 = 1e-6;
/// Kernels whose mask probability is at or below this are dropped.
pub const MASK_THRESHOLD: f64 = 0.01;

/// Regularizer weights; the photometric term always has weight 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub scale: f64,
    pub entropy: f64,
    pub mask: f64,
    /// Only applied to views that carry a sky mask.
    pub sky: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            scale: 0.0,
            entropy: 0.0,
            mask: 0.0,
            sky: crate::sky::DEFAULT_SKY_WEIGHT,
        }
    }
}

impl LossWeights {
    /// All regularizers off.
    pub fn none() -> Self {
        LossWeights {
            sky: 0.0,
            ..LossWeights::default()
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("scale", self.scale),
            ("entropy", self.entropy),
            ("mask", self.mask),
            ("sky", self.sky),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("loss weight `{name}` must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean absolute difference over all pixels and channels.
pub fn l1_loss(rendered: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    rendered.ensure_same_shape(target)?;
    if rendered.data.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = rendered.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / rendered.data.len() as f64)
}

/// Gradient of [`l1_loss`] with respect to each rendered value.
pub fn l1_loss_grad(rendered: &ImageBuffer, target: &ImageBuffer) -> Result<Vec<f64>> {
    rendered.ensure_same_shape(target)?;
    let n = rendered.data.len().max(1) as f64;
    Ok(rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| {
            let d = a - b;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect())
}

pub fn mse(rendered: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    rendered.ensure_same_shape(target)?;
    if rendered.data.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = rendered.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / rendered.data.len() as f64)
}

/// `10 log10(1 / MSE)` in dB, capped at [`PSNR_CAP`].
pub fn psnr(rendered: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    Ok(psnr_from_mse(mse(rendered, target)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

fn require_non_empty(cloud: &GaussianCloud) -> Result<()> {
    if cloud.is_empty() {
        Err(Error::InvalidArgument("regularizer needs a non-empty cloud".into()))
    } else {
        Ok(())
    }
}

/// Mean over kernels of the smallest activated scale.
pub fn scaling_loss(cloud: &GaussianCloud) -> Result<f64> {
    require_non_empty(cloud)?;
    let sum: f64 = cloud.iter().map(|g| g.scales().min()).sum();
    Ok(sum / cloud.len() as f64)
}

/// Gradient of [`scaling_loss`] with respect to each kernel's log-scales.
pub fn scaling_loss_grad(cloud: &GaussianCloud) -> Vec<[f64; 3]> {
    let n = cloud.len().max(1) as f64;
    cloud
        .iter()
        .map(|g| {
            let s = g.scales();
            let k = s.argmin().0;
            let mut out = [0.0; 3];
            out[k] = s[k] / n;
            out
        })
        .collect()
}

pub fn binary_entropy(o: f64) -> f64 {
    let o = o.clamp(ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP);
    -(o * o.ln() + (1.0 - o) * (1.0 - o).ln())
}

/// Mean binary entropy of activated opacities.
pub fn entropy_loss(cloud: &GaussianCloud) -> Result<f64> {
    require_non_empty(cloud)?;
    let sum: f64 = cloud.iter().map(|g| binary_entropy(g.opacity())).sum();
    Ok(sum / cloud.len() as f64)
}

/// Gradient of [`entropy_loss`] with respect to each opacity logit; zero where
/// the opacity sits in the clamp region.
pub fn entropy_loss_grad(cloud: &GaussianCloud) -> Vec<f64> {
    let n = cloud.len().max(1) as f64;
    cloud
        .iter()
        .map(|g| {
            let o = g.opacity();
            if !(ENTROPY_CLAMP..=1.0 - ENTROPY_CLAMP).contains(&o) {
                return 0.0;
            }
            -(o / (1.0 - o)).ln() * o * (1.0 - o) / n
        })
        .collect()
}

/// Learnable per-kernel masking.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskOutput {
    /// Mean mask probability `sigmoid(m_i)`.
    pub loss: f64,
    /// Binary masks `sigmoid(m_i) > MASK_THRESHOLD`.
    pub masks: Vec<bool>,
}

pub fn mask_loss(mask_params: &[f64]) -> MaskOutput {
    let n = mask_params.len().max(1) as f64;
    let probs: Vec<f64> = mask_params.iter().map(|&m| sigmoid(m)).collect();
    MaskOutput {
        loss: probs.iter().sum::<f64>() / n,
        masks: probs.iter().map(|&p| p > MASK_THRESHOLD).collect(),
    }
}

/// Derivative of `sigmoid(m)`; the straight-through estimator routes the hard
/// mask's gradient through it.
pub fn mask_surrogate_grad(m: f64) -> f64 {
    let s = sigmoid(m);
    s * (1.0 - s)
}

/// Cloud with masked-out kernels removed (their scale and opacity are zeroed,
/// so they cannot contribute), plus the surviving source indices.
pub fn apply_masks(cloud: &GaussianCloud, masks: &[bool]) -> (GaussianCloud, Vec<usize>) {
    let mut out = GaussianCloud {
        gaussians: Vec::new(),
        sh_degree: cloud.sh_degree,
    };
    let mut kept = Vec::new();
    for (i, (g, &m)) in cloud.iter().zip(masks).enumerate() {
        if m {
            out.gaussians.push(g.clone());
            kept.push(i);
        }
    }
    (out, kept)
}
