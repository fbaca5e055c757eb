//! Synthetic organoid-like stacks with exact ground-truth masks.
//!
//! Blobs are filled or ring-shaped ellipses with softened edges over a noisy,
//! gently shaded background. The mask is the exact ellipse interior, so the
//! generator provides perfect labels for desk-scale experiments.

use super::{Image2D, Mask2D, RasterStack};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct SynthParams {
    pub n_stacks: usize,
    pub slices_per_stack: usize,
    pub width: usize,
    pub height: usize,
    pub blob_count_min: usize,
    pub blob_count_max: usize,
    /// Amplitude of the uniform per-pixel background noise.
    pub noise: f64,
    /// Scale on blob intensity; below 1.0 the foreground fades toward the
    /// background and segmentation gets harder.
    pub contrast: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_stacks: 10,
            slices_per_stack: 4,
            width: 640,
            height: 640,
            blob_count_min: 3,
            blob_count_max: 12,
            noise: 0.03,
            contrast: 1.0,
            seed: 26,
        }
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    intensity: f64,
    ring: bool,
}

impl Blob {
    /// Normalized elliptic distance: < 1 inside, 1 on the boundary.
    fn dist(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }
}

fn render_slice(params: &SynthParams, rng: &mut ChaCha8Rng) -> (Image2D, Mask2D) {
    let (w, h) = (params.width, params.height);
    let n_blobs = if params.blob_count_max == 0 {
        0
    } else {
        rng.random_range(params.blob_count_min..=params.blob_count_max)
    };

    // Radii sized so even the max blob count stays well under half coverage.
    let max_r = (w.min(h) as f64 * 0.09).max(4.0);
    let min_r = (w.min(h) as f64 * 0.03).max(2.0);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            cx: rng.random_range(0.0..w as f64),
            cy: rng.random_range(0.0..h as f64),
            rx: rng.random_range(min_r..max_r),
            ry: rng.random_range(min_r..max_r),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            intensity: rng.random_range(0.35..0.75) * params.contrast,
            ring: rng.random_bool(0.5),
        })
        .collect();

    // Gentle illumination gradient across the field of view.
    let (gx, gy) = (
        rng.random_range(-0.04..0.04f64),
        rng.random_range(-0.04..0.04f64),
    );
    let base = rng.random_range(0.10..0.18f64);

    let soft = 2.5; // edge softness in normalized distance units per pixel scale
    let mut img = Vec::with_capacity(w * h);
    let mut mask = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            let mut v = base + gx * fx / w as f64 + gy * fy / h as f64;
            v += rng.random_range(-params.noise..params.noise);
            let mut inside = false;
            for b in &blobs {
                let d = b.dist(fx, fy);
                if d <= 1.0 {
                    inside = true;
                }
                let r = b.rx.min(b.ry);
                let edge = soft / r;
                if b.ring {
                    // Bright rim near the boundary, dimmer lumen.
                    let rim = (1.0 - ((d - 0.9) / edge).abs()).clamp(0.0, 1.0);
                    let lumen = if d < 0.9 { 0.35 } else { 0.0 };
                    v += b.intensity * (rim + lumen).min(1.0);
                } else {
                    let fill = ((1.0 + edge - d) / edge).clamp(0.0, 1.0);
                    v += b.intensity * fill;
                }
            }
            img.push(v.clamp(0.0, 1.0) as f32);
            mask.push(inside as u8);
        }
    }
    (
        Image2D {
            width: w,
            height: h,
            data: img,
        },
        Mask2D {
            width: w,
            height: h,
            data: mask,
        },
    )
}

/// Generate `n_stacks` image stacks plus exactly matching binary mask stacks.
/// Bit-identical output for a given seed.
pub fn synthesize_dataset(params: &SynthParams) -> (Vec<RasterStack>, Vec<RasterStack>) {
    assert!(params.n_stacks > 0 && params.slices_per_stack > 0);
    let mut images = Vec::with_capacity(params.n_stacks);
    let mut masks = Vec::with_capacity(params.n_stacks);
    for stack_idx in 0..params.n_stacks {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(stack_idx as u64 * 7919));
        let mut img_slices = Vec::with_capacity(params.slices_per_stack);
        let mut mask_slices = Vec::with_capacity(params.slices_per_stack);
        for _ in 0..params.slices_per_stack {
            let (img, mask) = render_slice(params, &mut rng);
            img_slices.push(img);
            mask_slices.push(mask.to_image());
        }
        let source_id = format!("synth_{stack_idx:03}");
        images.push(RasterStack::new(source_id.clone(), img_slices).unwrap());
        masks.push(RasterStack::new(source_id, mask_slices).unwrap());
    }
    (images, masks)
}
