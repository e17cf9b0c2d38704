//! Seeded sensor distortions: lidar fog and snow, camera blur and exposure.
//!
//! The weather models are simplified parametric stand-ins, not calibrated
//! physical simulations. Every function is a pure function of its inputs and
//! seed.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{config_err, Result};
use crate::kernels::Padding;
use crate::scene::{mix_seed, LidarPoint, MultimodalSample};
use crate::tensor::Tensor;

/// Returns weaker than this are lost after fog attenuation.
pub const INTENSITY_FLOOR: f32 = 0.01;
/// Nearest range a fog scatter return can appear at.
pub const FOG_MIN_RANGE: f32 = 1.0;
/// Expected snow clutter points per unit snowfall rate.
pub const CLUTTER_RATE: f64 = 40.0;
/// Occlusion probability per unit snowfall rate.
pub const OCCLUSION_RATE: f32 = 0.02;
/// Snow clutter appears within this range of the sensor.
pub const CLUTTER_RANGE: (f32, f32) = (1.0, 12.0);

/// Parameters of one combined distortion.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct DistortionSpec {
    pub fog: f32,
    pub snow: f32,
    pub blur: usize,
    pub gamma: f32,
    pub seed: u64,
}

impl Default for DistortionSpec {
    fn default() -> Self {
        Self { fog: 0.0, snow: 0.0, blur: 1, gamma: 1.0, seed: 0 }
    }
}

impl DistortionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fog >= 0.0 && self.fog.is_finite()) || !(self.snow >= 0.0 && self.snow.is_finite()) {
            return Err(config_err!("fog and snow must be finite and non-negative"));
        }
        if self.blur == 0 {
            return Err(config_err!("blur kernel size must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(config_err!("gamma must be positive, got {}", self.gamma));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.fog == 0.0 && self.snow == 0.0 && self.blur <= 1 && self.gamma == 1.0
    }
}

/// Meteorological optical range implied by fog density `alpha`.
pub fn meteorological_optical_range(alpha: f32) -> f32 {
    libm::logf(20.0) / alpha
}

fn direction(p: &LidarPoint, origin: [f32; 2]) -> [f32; 2] {
    if p.range > 0.0 {
        [(p.x - origin[0]) / p.range, (p.y - origin[1]) / p.range]
    } else {
        [0.0, 0.0]
    }
}

/// Two-way attenuation with transmittance `exp(-2·alpha·R)`: each return is
/// dimmed, and with probability `1 - t` replaced by a weak scatter return at
/// a shorter range along the same ray. Returns under [`INTENSITY_FLOOR`] are
/// dropped.
pub fn fog_lidar(points: &[LidarPoint], alpha: f32, origin: [f32; 2], seed: u64) -> Vec<LidarPoint> {
    if alpha <= 0.0 {
        return points.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mor = meteorological_optical_range(alpha);
    let mut out = Vec::with_capacity(points.len());
    for p in points {
        let t = libm::expf(-2.0 * alpha * p.range);
        let scatter = rng.random::<f32>() < 1.0 - t;
        let u = rng.random::<f32>();
        let weak = 0.1 * rng.random::<f32>();
        if scatter {
            let hi = p.range.min(mor);
            let lo = FOG_MIN_RANGE.min(hi);
            let r = lo + (hi - lo) * u;
            let d = direction(p, origin);
            if weak >= INTENSITY_FLOOR {
                out.push(LidarPoint { x: origin[0] + d[0] * r, y: origin[1] + d[1] * r, range: r, intensity: weak });
            }
        } else {
            let intensity = p.intensity * t;
            if intensity >= INTENSITY_FLOOR {
                out.push(LidarPoint { intensity, ..*p });
            }
        }
    }
    out
}

/// Adds `Poisson(CLUTTER_RATE·beta)` bright near-range clutter returns and
/// occludes each original return with probability `min(1, OCCLUSION_RATE·beta)`.
pub fn snow_lidar(points: &[LidarPoint], beta: f32, origin: [f32; 2], seed: u64) -> Vec<LidarPoint> {
    if beta <= 0.0 {
        return points.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let occlude = (OCCLUSION_RATE * beta).min(1.0);
    let mut out: Vec<LidarPoint> = points.iter().filter(|_| rng.random::<f32>() >= occlude).copied().collect();
    let count = clutter_count(beta, &mut rng);
    for _ in 0..count {
        let theta = rng.random::<f32>() * core::f32::consts::TAU;
        let r = CLUTTER_RANGE.0 + (CLUTTER_RANGE.1 - CLUTTER_RANGE.0) * rng.random::<f32>();
        let intensity = 0.7 + 0.3 * rng.random::<f32>();
        out.push(LidarPoint {
            x: origin[0] + r * libm::cosf(theta),
            y: origin[1] + r * libm::sinf(theta),
            range: r,
            intensity,
        });
    }
    out
}

fn clutter_count<R: Rng>(beta: f32, rng: &mut R) -> usize {
    let lambda = CLUTTER_RATE * beta as f64;
    Poisson::new(lambda).map(|p| p.sample(rng) as usize).unwrap_or(0)
}

/// Odd kernel size actually used for a requested size (even sizes round up).
pub fn blur_kernel_size(s: usize) -> usize {
    if s % 2 == 0 { s + 1 } else { s }
}

/// Normalised `s×s` Gaussian kernel with `sigma = s/3`.
pub fn gaussian_kernel(s: usize) -> Vec<f32> {
    let s = blur_kernel_size(s.max(1));
    let sigma = s as f64 / 3.0;
    let c = (s / 2) as f64;
    let w1: Vec<f64> = (0..s).map(|i| libm::exp(-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma))).collect();
    let total: f64 = libm::pow(w1.iter().sum::<f64>(), 2.0);
    let mut k = Vec::with_capacity(s * s);
    for a in &w1 {
        for b in &w1 {
            k.push((a * b / total) as f32);
        }
    }
    k
}

/// Gaussian blur of an `[H, W]` image with reflect padding.
pub fn motion_blur(image: &Tensor<f32>, s: usize) -> Result<Tensor<f32>> {
    let s = blur_kernel_size(s.max(1));
    if s == 1 {
        return Ok(image.clone());
    }
    let shape = image.shape();
    if shape.len() != 2 {
        return Err(config_err!("blur expects an [H, W] image, got {shape:?}"));
    }
    if s / 2 >= shape[0].min(shape[1]) {
        return Err(config_err!("blur kernel {s} too large for image {shape:?}"));
    }
    let kernel = Tensor::new(&[1, 1, s, s], gaussian_kernel(s))?;
    let x = image.clone().reshape(&[1, shape[0], shape[1]])?;
    let y = x.conv2d(&kernel, Padding::SameReflect)?;
    Ok(y.reshape(shape)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Pixel-wise `in^gamma`.
pub fn gamma_exposure(image: &Tensor<f32>, gamma: f32) -> Result<Tensor<f32>> {
    if !(gamma > 0.0) {
        return Err(config_err!("gamma must be positive, got {gamma}"));
    }
    if gamma == 1.0 {
        return Ok(image.clone());
    }
    Ok(image.map(|v| libm::powf(v.clamp(0.0, 1.0), gamma)))
}

/// Exposure label for a gamma value: below 1 is called under-exposed and
/// above 1 over-exposed, even though `in^gamma` brightens for gamma < 1.
pub fn exposure_label(gamma: f32) -> &'static str {
    if gamma < 1.0 {
        "under-exposed"
    } else if gamma > 1.0 {
        "over-exposed"
    } else {
        "nominal"
    }
}

/// Apply every component of `spec` to one sample; `index` picks the seed stream.
pub fn apply(sample: &MultimodalSample, spec: &DistortionSpec, origin: [f32; 2], index: u64) -> Result<MultimodalSample> {
    spec.validate()?;
    let seed = mix_seed(spec.seed, index);
    let mut out = sample.clone();
    out.points = fog_lidar(&out.points, spec.fog, origin, mix_seed(seed, 1));
    out.points = snow_lidar(&out.points, spec.snow, origin, mix_seed(seed, 2));
    out.image = motion_blur(&out.image, spec.blur)?;
    out.image = gamma_exposure(&out.image, spec.gamma)?;
    Ok(out)
}

pub fn apply_all(samples: &[MultimodalSample], spec: &DistortionSpec, origin: [f32; 2]) -> Result<Vec<MultimodalSample>> {
    samples.iter().enumerate().map(|(i, s)| apply(s, spec, origin, i as u64)).collect()
}
