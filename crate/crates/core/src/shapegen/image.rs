//! Intensity images from binary masks: Gaussian foreground/background noise
//! followed by a separable Gaussian blur.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::volume::Volume;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntensityConfig {
    pub foreground_mean: f64,
    pub background_mean: f64,
    /// Shared standard deviation of both intensity classes.
    pub sigma: f64,
    pub allow_zero_contrast: bool,
}

impl Default for IntensityConfig {
    fn default() -> Self {
        Self {
            foreground_mean: 0.8,
            background_mean: 0.2,
            sigma: 0.05,
            allow_zero_contrast: false,
        }
    }
}

/// Draws per-voxel intensities from the class of each mask voxel, then blurs
/// with a Gaussian of standard deviation `blur_size` voxels (reflective
/// boundary). `blur_size == 0` skips the blur.
pub fn synthesize_image<R: Rng + ?Sized>(
    mask: &Volume,
    cfg: &IntensityConfig,
    blur_size: f64,
    rng: &mut R,
) -> Result<Volume> {
    if !mask.is_binary() {
        return Err(Error::Domain("mask volume is not binary".into()));
    }
    if cfg.foreground_mean == cfg.background_mean && !cfg.allow_zero_contrast {
        return Err(Error::Config(
            "foreground and background means are equal (zero contrast)".into(),
        ));
    }
    if !(cfg.sigma >= 0.0 && cfg.sigma.is_finite()) {
        return Err(Error::Config(format!("intensity sigma {} invalid", cfg.sigma)));
    }
    if !(blur_size >= 0.0 && blur_size.is_finite()) {
        return Err(Error::Config(format!("blur size {blur_size} invalid")));
    }
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = mask.clone();
    for v in out.data.iter_mut() {
        let mean = if *v == 1.0 {
            cfg.foreground_mean
        } else {
            cfg.background_mean
        };
        *v = mean + noise.sample(rng);
    }
    if blur_size > 0.0 {
        gaussian_blur(&mut out, blur_size);
    }
    Ok(out)
}

/// Normalized 1D Gaussian taps for offsets -radius..=radius.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Half-sample symmetric reflection: ... c b a | a b c ... | c b a ...
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// In-place separable Gaussian blur with reflective boundaries.
pub fn gaussian_blur(vol: &mut Volume, sigma: f64) {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let dims = vol.dims;
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let n = dims[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let mut line = vec![0.0; n];
        for a in 0..dims[o1] {
            for b in 0..dims[o2] {
                let base = a * strides[o1] + b * strides[o2];
                for (t, slot) in line.iter_mut().enumerate() {
                    *slot = vol.data[base + t * strides[axis]];
                }
                for t in 0..n {
                    let mut acc = 0.0;
                    for (q, w) in kernel.iter().enumerate() {
                        let src = reflect(t as isize + q as isize - radius, n);
                        acc += w * line[src];
                    }
                    vol.data[base + t * strides[axis]] = acc;
                }
            }
        }
    }
}
