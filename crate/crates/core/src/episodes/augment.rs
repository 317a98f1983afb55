//! Random crop-resize, horizontal flip and brightness/contrast jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ndkernel::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Smallest crop area as a fraction of the image.
    pub min_area: f64,
    /// Aspect-ratio range of the crop (width / height).
    pub aspect: (f64, f64),
    pub flip_p: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            min_area: 0.6,
            aspect: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            brightness: 0.2,
            contrast: 0.2,
        }
    }
}

impl AugmentConfig {
    /// The identity augmentation.
    pub fn none() -> Self {
        AugmentConfig {
            min_area: 1.0,
            aspect: (1.0, 1.0),
            flip_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }
}

/// A crop window in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

pub fn sample_crop(size: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> CropBox {
    let s = size as f64;
    let area = uniform(rng, cfg.min_area.clamp(0.0, 1.0), 1.0);
    let ratio = uniform(rng, cfg.aspect.0.ln(), cfg.aspect.1.ln()).exp();
    let w = ((area * ratio).sqrt() * s).min(s);
    let h = ((area / ratio).sqrt() * s).min(s);
    let x0 = uniform(rng, 0.0, s - w);
    let y0 = uniform(rng, 0.0, s - h);
    CropBox { x0, y0, w, h }
}

/// Bilinear sample of one channel plane at continuous pixel coordinates.
fn bilinear(plane: &[f64], size: usize, x: f64, y: f64) -> f64 {
    let max = (size - 1) as f64;
    let (x, y) = (x.clamp(0.0, max), y.clamp(0.0, max));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |xx: usize, yy: usize| plane[yy * size + xx];
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// One random view of a 3×S×S image with values in [0, 1].
pub fn augment(image: &Tensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> Tensor {
    let size = image.shape()[1];
    let plane = size * size;
    let crop = sample_crop(size, cfg, rng);
    let flip = rng.gen_bool(cfg.flip_p.clamp(0.0, 1.0));
    let delta = uniform(rng, -cfg.brightness, cfg.brightness);
    let gain = 1.0 + uniform(rng, -cfg.contrast, cfg.contrast);

    let mut out = vec![0.0; 3 * plane];
    let (sx, sy) = (crop.w / size as f64, crop.h / size as f64);
    for c in 0..3 {
        let src = &image.data()[c * plane..(c + 1) * plane];
        for i in 0..size {
            let y = crop.y0 + (i as f64 + 0.5) * sy - 0.5;
            for j in 0..size {
                let jj = if flip { size - 1 - j } else { j };
                let x = crop.x0 + (jj as f64 + 0.5) * sx - 0.5;
                out[c * plane + i * size + j] = bilinear(src, size, x, y);
            }
        }
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    for v in &mut out {
        *v = ((*v - mean) * gain + mean + delta).clamp(0.0, 1.0);
    }
    Tensor::new(image.shape().to_vec(), out).expect("shape preserved")
}

/// Two independent views drawn from one seed.
pub fn augment_pair(image: &Tensor, cfg: &AugmentConfig, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = augment(image, cfg, &mut rng);
    let b = augment(image, cfg, &mut rng);
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_image(seed: u64, size: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(vec![3, size, size], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn zero_strength_is_identity() {
        let img = random_image(1, 8);
        let (a, b) = augment_pair(&img, &AugmentConfig::none(), 5);
        assert!(a.max_abs_diff(&img) < 1e-12);
        assert!(b.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn same_seed_same_pair() {
        let img = random_image(2, 8);
        let cfg = AugmentConfig::default();
        assert_eq!(augment_pair(&img, &cfg, 11), augment_pair(&img, &cfg, 11));
        assert_ne!(augment_pair(&img, &cfg, 11), augment_pair(&img, &cfg, 12));
    }

    #[test]
    fn crops_stay_inside_image() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let c = sample_crop(32, &cfg, &mut rng);
            assert!(c.x0 >= 0.0 && c.y0 >= 0.0);
            assert!(c.x0 + c.w <= 32.0 + 1e-9 && c.y0 + c.h <= 32.0 + 1e-9);
            assert!(c.w * c.h >= 0.6 * 32.0 * 32.0 * (1.0 - 1e-9) || c.w == 32.0 || c.h == 32.0);
        }
    }

    #[test]
    fn flip_only_mirrors() {
        let img = random_image(4, 4);
        let cfg = AugmentConfig {
            flip_p: 1.0,
            ..AugmentConfig::none()
        };
        let out = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    assert!((out.get(&[c, i, j]) - img.get(&[c, i, 3 - j])).abs() < 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn shape_and_range_preserved(seed in 0u64..1000, size in 2usize..12) {
            let img = random_image(seed, size);
            let (a, b) = augment_pair(&img, &AugmentConfig::default(), seed);
            prop_assert_eq!(a.shape(), img.shape());
            prop_assert_eq!(b.shape(), img.shape());
            prop_assert!(a.data().iter().chain(b.data()).all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
