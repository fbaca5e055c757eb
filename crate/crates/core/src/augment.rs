//! Pretext-task corruption operators: pixel drop, Gaussian half-resolution
//! blur, and Sobel edge filtering. The restoration model learns to invert
//! these.

use crate::imaging::{resize_bilinear, Image2D};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("drop fraction {0} outside (0,1)")]
    FractionOutOfRange(f64),
    #[error("image dimensions {0}x{1} must be even")]
    OddDimensions(usize, usize),
    #[error("image {0}x{1} too small for 3x3 filtering")]
    ImageTooSmall(usize, usize),
    #[error("unknown augmentation spec `{0}`")]
    UnknownSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentationSpec {
    PixelDrop { drop_fraction: f64 },
    GaussianBlur,
    Sobel,
}

impl AugmentationSpec {
    /// Parse the run-config form: `pixel-drop:0.25`, `blur`, `sobel`.
    pub fn parse(s: &str) -> Result<Self, AugmentError> {
        match s {
            "blur" => Ok(Self::GaussianBlur),
            "sobel" => Ok(Self::Sobel),
            other => {
                if let Some(frac) = other.strip_prefix("pixel-drop:") {
                    let f: f64 = frac
                        .parse()
                        .map_err(|_| AugmentError::UnknownSpec(other.to_string()))?;
                    if f <= 0.0 || f >= 1.0 {
                        return Err(AugmentError::FractionOutOfRange(f));
                    }
                    Ok(Self::PixelDrop { drop_fraction: f })
                } else {
                    Err(AugmentError::UnknownSpec(other.to_string()))
                }
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::PixelDrop { drop_fraction } => format!("pixel-drop:{drop_fraction}"),
            Self::GaussianBlur => "blur".to_string(),
            Self::Sobel => "sobel".to_string(),
        }
    }

    /// Apply this corruption. `seed` only affects the stochastic operators.
    pub fn apply(&self, img: &Image2D, seed: u64) -> Result<Image2D, AugmentError> {
        match self {
            Self::PixelDrop { drop_fraction } => pixel_drop(img, *drop_fraction, seed),
            Self::GaussianBlur => gaussian_blur_halfres(img),
            Self::Sobel => sobel_filter(img),
        }
    }
}

/// Set exactly `round(fraction * W * H)` distinct pixels to zero, sampled
/// uniformly without replacement from a seeded RNG.
pub fn pixel_drop(img: &Image2D, fraction: f64, seed: u64) -> Result<Image2D, AugmentError> {
    if fraction <= 0.0 || fraction >= 1.0 {
        return Err(AugmentError::FractionOutOfRange(fraction));
    }
    let n = img.data.len();
    let n_drop = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for idx in rand::seq::index::sample(&mut rng, n, n_drop) {
        out.data[idx] = 0.0;
    }
    Ok(out)
}

fn reflect(i: isize, n: usize) -> usize {
    // Reflect-101 style padding: -1 -> 1, n -> n-2.
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * n - 2 - i;
        }
    }
    i as usize
}

fn gaussian_kernel_5(sigma: f64) -> [f64; 5] {
    let mut k = [0.0; 5];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 2.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn separable_blur_5(img: &Image2D, sigma: f64) -> Image2D {
    let k = gaussian_kernel_5(sigma);
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let xi = reflect(x as isize + t as isize - 2, w);
                acc += kv * img.get(xi, y) as f64;
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = Image2D::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let yi = reflect(y as isize + t as isize - 2, h);
                acc += kv * tmp[yi * w + x];
            }
            out.set(x, y, acc.clamp(0.0, 1.0) as f32);
        }
    }
    out
}

/// Half-resolution corruption: 5x5 Gaussian (sigma 1, reflect padding), 2x
/// bilinear downscale, bilinear upscale back to the original size.
pub fn gaussian_blur_halfres(img: &Image2D) -> Result<Image2D, AugmentError> {
    if img.width % 2 != 0 || img.height % 2 != 0 {
        return Err(AugmentError::OddDimensions(img.width, img.height));
    }
    let blurred = separable_blur_5(img, 1.0);
    let half = resize_bilinear(&blurred, img.width / 2, img.height / 2);
    Ok(resize_bilinear(&half, img.width, img.height))
}

/// Sobel gradient magnitude with reflect padding, rescaled to [0,1] by the
/// analytic maximum 4*sqrt(2) for [0,1] inputs.
pub fn sobel_filter(img: &Image2D) -> Result<Image2D, AugmentError> {
    if img.width < 3 || img.height < 3 {
        return Err(AugmentError::ImageTooSmall(img.width, img.height));
    }
    const GX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let norm = 4.0 * std::f64::consts::SQRT_2;
    let (w, h) = (img.width, img.height);
    let mut out = Image2D::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    let xi = reflect(x as isize + dx as isize - 1, w);
                    let yi = reflect(y as isize + dy as isize - 1, h);
                    let v = img.get(xi, yi) as f64;
                    gx += GX[dy][dx] * v;
                    gy += GX[dx][dy] * v;
                }
            }
            let mag = (gx * gx + gy * gy).sqrt() / norm;
            out.set(x, y, mag.clamp(0.0, 1.0) as f32);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect();
        Image2D::new(w, h, data).unwrap()
    }

    #[test]
    fn pixel_drop_exact_count() {
        let img = random_image(10, 10, 1);
        let out = pixel_drop(&img, 0.25, 7).unwrap();
        let changed = img
            .data
            .iter()
            .zip(&out.data)
            .filter(|(a, b)| a != b)
            .count();
        let zeros = out.data.iter().filter(|&&v| v == 0.0).count();
        // Uniform random input has no exact zeros, so 25 become zero.
        assert_eq!(zeros, 25);
        assert_eq!(changed, 25);
    }

    #[test]
    fn pixel_drop_deterministic() {
        let img = random_image(12, 12, 2);
        let a = pixel_drop(&img, 0.4, 99).unwrap();
        let b = pixel_drop(&img, 0.4, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pixel_drop_all_ones_small() {
        let img = Image2D::filled(2, 2, 1.0);
        let out = pixel_drop(&img, 0.75, 5).unwrap();
        let zeros = out.data.iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 3);
        assert_eq!(out.data.iter().filter(|&&v| v == 1.0).count(), 1);
    }

    #[test]
    fn pixel_drop_rejects_bad_fraction() {
        let img = Image2D::filled(4, 4, 0.5);
        assert!(matches!(
            pixel_drop(&img, 0.0, 1),
            Err(AugmentError::FractionOutOfRange(_))
        ));
        assert!(matches!(
            pixel_drop(&img, 1.0, 1),
            Err(AugmentError::FractionOutOfRange(_))
        ));
    }

    #[test]
    fn blur_constant_preserved() {
        let img = Image2D::filled(16, 16, 0.42);
        let out = gaussian_blur_halfres(&img).unwrap();
        for &v in &out.data {
            assert!((v - 0.42).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_spreads_delta() {
        let mut img = Image2D::filled(16, 16, 0.0);
        img.set(8, 8, 1.0);
        let out = gaussian_blur_halfres(&img).unwrap();
        let max = out.data.iter().cloned().fold(0.0f32, f32::max);
        assert!(max < 1.0 && max > 0.0);
    }

    #[test]
    fn blur_keeps_dimensions() {
        let img = random_image(320, 320, 3);
        let out = gaussian_blur_halfres(&img).unwrap();
        assert_eq!((out.width, out.height), (320, 320));
    }

    #[test]
    fn blur_rejects_odd_dims() {
        let img = Image2D::filled(15, 16, 0.5);
        assert!(matches!(
            gaussian_blur_halfres(&img),
            Err(AugmentError::OddDimensions(..))
        ));
    }

    #[test]
    fn sobel_constant_is_zero() {
        let img = Image2D::filled(8, 8, 0.9);
        let out = sobel_filter(&img).unwrap();
        assert!(out.data.iter().all(|&v| v.abs() < 1e-7));
    }

    #[test]
    fn sobel_step_edge_peaks_at_edge() {
        let mut img = Image2D::filled(12, 12, 0.0);
        for y in 0..12 {
            for x in 6..12 {
                img.set(x, y, 1.0);
            }
        }
        let out = sobel_filter(&img).unwrap();
        // Strong response adjacent to the step, none far from it.
        assert!(out.get(5, 6) > 0.3 || out.get(6, 6) > 0.3);
        assert!(out.get(1, 6).abs() < 1e-7);
        assert!(out.get(10, 6).abs() < 1e-7);
    }

    #[test]
    fn sobel_bounded_by_analytic_max() {
        // Oracle: exhaustive max over random images never exceeds 1 after
        // dividing by 4*sqrt(2).
        for seed in 0..20 {
            let out = sobel_filter(&random_image(9, 9, seed)).unwrap();
            for &v in &out.data {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn sobel_rejects_tiny_images() {
        let img = Image2D::filled(2, 5, 0.5);
        assert!(matches!(
            sobel_filter(&img),
            Err(AugmentError::ImageTooSmall(..))
        ));
    }

    #[test]
    fn spec_round_trip() {
        for s in ["pixel-drop:0.25", "pixel-drop:0.5", "blur", "sobel"] {
            assert_eq!(AugmentationSpec::parse(s).unwrap().label(), s);
        }
        assert!(AugmentationSpec::parse("jitter").is_err());
        assert!(AugmentationSpec::parse("pixel-drop:1.5").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prop_operators_preserve_shape_and_range(seed in 0u64..500) {
            let img = random_image(16, 16, seed);
            for spec in [
                AugmentationSpec::PixelDrop { drop_fraction: 0.5 },
                AugmentationSpec::GaussianBlur,
                AugmentationSpec::Sobel,
            ] {
                let out = spec.apply(&img, seed).unwrap();
                prop_assert_eq!((out.width, out.height), (16, 16));
                prop_assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
                // Determinism.
                prop_assert_eq!(out, spec.apply(&img, seed).unwrap());
            }
        }

        #[test]
        fn prop_pixel_drop_changes_exact_count(seed in 0u64..200, frac in 0.05f64..0.95) {
            let img = Image2D::filled(10, 10, 1.0);
            let out = pixel_drop(&img, frac, seed).unwrap();
            let expected = (frac * 100.0).round() as usize;
            let changed = out.data.iter().filter(|&&v| v == 0.0).count();
            prop_assert_eq!(changed, expected);
        }
    }
}
