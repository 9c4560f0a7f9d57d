//! Stochastic view augmentation.
//!
//! Turns one sample into two correlated views for contrastive training.
//! Vector mode (the default for synthetic data) applies, in order:
//! Bernoulli zero-masking, additive Gaussian noise, and a global
//! multiplicative scale. Image mode mirrors the usual crop / flip / jitter /
//! blur family on tiny square images stored row-major.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derived_rng, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AugmentationPolicy {
    pub noise_std: f64,
    pub mask_prob: f64,
    pub scale_range: (f64, f64),
    /// Image-mode knobs; ignored for vector samples.
    #[serde(default)]
    pub image: Option<ImagePolicy>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImagePolicy {
    pub crop_fraction_range: (f64, f64),
    pub flip_prob: f64,
    pub jitter_strength: f64,
    pub blur_sigma_range: (f64, f64),
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            noise_std: 0.1,
            mask_prob: 0.1,
            scale_range: (0.9, 1.1),
            image: None,
        }
    }
}

impl AugmentationPolicy {
    /// Exact identity map.
    pub fn identity() -> Self {
        Self {
            noise_std: 0.0,
            mask_prob: 0.0,
            scale_range: (1.0, 1.0),
            image: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!(
                "augment.mask_prob must be in [0,1], got {}",
                self.mask_prob
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config(format!(
                "augment.noise_std must be nonnegative, got {}",
                self.noise_std
            )));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "augment.scale_range needs 0 < lo <= hi, got [{lo}, {hi}]"
            )));
        }
        if let Some(img) = &self.image {
            if !(0.0..=1.0).contains(&img.flip_prob) {
                return Err(Error::Config("augment.image.flip_prob out of [0,1]".into()));
            }
            let (clo, chi) = img.crop_fraction_range;
            if !(clo > 0.0 && clo <= chi && chi <= 1.0) {
                return Err(Error::Config(
                    "augment.image.crop_fraction_range needs 0 < lo <= hi <= 1".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Per-sample rng so batches can be augmented in any order without changing
/// the stream each sample sees.
pub fn view_rng(global_seed: u64, sample_index: usize, view_index: usize, epoch: usize) -> Rng {
    derived_rng(
        global_seed,
        "augment",
        &[sample_index as u64, view_index as u64, epoch as u64],
    )
}

/// One augmented view; same shape as the input, deterministic given the rng
/// seed.
pub fn augment(sample: &Tensor, policy: &AugmentationPolicy, rng: &mut Rng) -> Tensor {
    match &policy.image {
        None => augment_vector(sample, policy, rng),
        Some(img) => augment_image(sample, policy, img, rng),
    }
}

fn augment_vector(sample: &Tensor, policy: &AugmentationPolicy, rng: &mut Rng) -> Tensor {
    let mut data = sample.data().to_vec();
    if policy.mask_prob > 0.0 {
        for v in data.iter_mut() {
            if rng.gen::<f64>() < policy.mask_prob {
                *v = 0.0;
            }
        }
    }
    if policy.noise_std > 0.0 {
        let normal = Normal::new(0.0, policy.noise_std).unwrap();
        for v in data.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    let (lo, hi) = policy.scale_range;
    if lo != 1.0 || hi != 1.0 {
        let s = if lo == hi { lo } else { rng.gen_range(lo..hi) };
        for v in data.iter_mut() {
            *v *= s;
        }
    }
    Tensor::new(sample.shape().to_vec(), data).unwrap()
}

/// Tiny-image mode: square images, transforms applied in the order crop,
/// flip, jitter, blur. Crop resizes back by nearest neighbour.
fn augment_image(
    sample: &Tensor,
    policy: &AugmentationPolicy,
    img: &ImagePolicy,
    rng: &mut Rng,
) -> Tensor {
    let n = sample.len();
    let side = (n as f64).sqrt() as usize;
    assert_eq!(side * side, n, "image mode needs a square sample");
    let mut px = sample.data().to_vec();

    // random resized crop
    let (clo, chi) = img.crop_fraction_range;
    if chi < 1.0 || clo < 1.0 {
        let frac = if clo == chi { clo } else { rng.gen_range(clo..chi) };
        let cs = ((side as f64 * frac).round() as usize).clamp(1, side);
        let max_off = side - cs;
        let oy = if max_off > 0 { rng.gen_range(0..=max_off) } else { 0 };
        let ox = if max_off > 0 { rng.gen_range(0..=max_off) } else { 0 };
        let mut out = vec![0.0; n];
        for y in 0..side {
            for x in 0..side {
                let sy = oy + (y * cs) / side;
                let sx = ox + (x * cs) / side;
                out[y * side + x] = px[sy * side + sx];
            }
        }
        px = out;
    }

    if rng.gen::<f64>() < img.flip_prob {
        for row in px.chunks_mut(side) {
            row.reverse();
        }
    }

    if img.jitter_strength > 0.0 {
        let b = rng.gen_range(-img.jitter_strength..img.jitter_strength);
        let c = 1.0 + rng.gen_range(-img.jitter_strength..img.jitter_strength);
        for v in px.iter_mut() {
            *v = *v * c + b;
        }
    }

    let (blo, bhi) = img.blur_sigma_range;
    if bhi > 0.0 {
        let sigma = if blo == bhi { blo } else { rng.gen_range(blo..bhi) };
        if sigma > 0.0 {
            px = gaussian_blur(&px, side, sigma);
        }
    }

    // shared vector-mode noise still applies after the image transforms
    let t = Tensor::new(sample.shape().to_vec(), px).unwrap();
    augment_vector(
        &t,
        &AugmentationPolicy {
            image: None,
            ..policy.clone()
        },
        rng,
    )
}

fn gaussian_blur(px: &[f64], side: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let sample = |v: &[f64], y: isize, x: isize| -> f64 {
        let y = y.clamp(0, side as isize - 1) as usize;
        let x = x.clamp(0, side as isize - 1) as usize;
        v[y * side + x]
    };
    let mut tmp = vec![0.0; px.len()];
    for y in 0..side as isize {
        for x in 0..side as isize {
            let mut s = 0.0;
            for (ki, d) in (-radius..=radius).enumerate() {
                s += kernel[ki] * sample(px, y, x + d);
            }
            tmp[y as usize * side + x as usize] = s / ksum;
        }
    }
    let mut out = vec![0.0; px.len()];
    for y in 0..side as isize {
        for x in 0..side as isize {
            let mut s = 0.0;
            for (ki, d) in (-radius..=radius).enumerate() {
                s += kernel[ki] * sample(&tmp, y + d, x);
            }
            out[y as usize * side + x as usize] = s / ksum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn sample() -> Tensor {
        Tensor::vector(vec![1.0, -2.0, 0.5, 3.0])
    }

    #[test]
    fn identity_policy_is_identity() {
        let x = sample();
        let y = augment(&x, &AugmentationPolicy::identity(), &mut rng_from_seed(1));
        assert_eq!(x, y);
    }

    #[test]
    fn full_mask_zeroes_everything() {
        let policy = AugmentationPolicy {
            mask_prob: 1.0,
            noise_std: 0.0,
            scale_range: (1.0, 1.0),
            image: None,
        };
        let y = augment(&sample(), &policy, &mut rng_from_seed(3));
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn deterministic_given_seed() {
        let policy = AugmentationPolicy::default();
        let a = augment(&sample(), &policy, &mut rng_from_seed(9));
        let b = augment(&sample(), &policy, &mut rng_from_seed(9));
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let policy = AugmentationPolicy::default();
        let a = augment(&sample(), &policy, &mut rng_from_seed(1));
        let b = augment(&sample(), &policy, &mut rng_from_seed(2));
        assert_ne!(a, b);
    }

    #[test]
    fn shape_preserved_in_image_mode() {
        let policy = AugmentationPolicy {
            image: Some(ImagePolicy {
                crop_fraction_range: (0.6, 0.9),
                flip_prob: 0.5,
                jitter_strength: 0.2,
                blur_sigma_range: (0.0, 1.0),
            }),
            ..AugmentationPolicy::default()
        };
        let x = Tensor::vector((0..64).map(|i| i as f64 / 64.0).collect());
        let y = augment(&x, &policy, &mut rng_from_seed(5));
        assert_eq!(x.shape(), y.shape());
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let mut p = AugmentationPolicy::default();
        p.mask_prob = 1.5;
        assert!(p.validate().is_err());
        let mut p = AugmentationPolicy::default();
        p.scale_range = (0.0, 1.0);
        assert!(p.validate().is_err());
    }
}
