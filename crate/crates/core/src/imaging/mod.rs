//! Raster types, sliding-window tiling, rotation enrichment, and resizing.

mod io;
pub mod synth;

pub use io::{
    decode_slice_bytes, load_crops, load_stack, save_crops, save_image_png, save_stack_pair,
    StackFormat,
};
pub use synth::{synthesize_dataset, SynthParams};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("missing file or directory: {0}")]
    MissingFile(String),
    #[error("corrupt raster {path}: {reason}")]
    CorruptRaster { path: String, reason: String },
    #[error("inconsistent slice dimensions: expected {expected_w}x{expected_h}, got {got_w}x{got_h} in {path}")]
    InconsistentDimensions {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
        path: String,
    },
    #[error("window {window} larger than image {width}x{height}")]
    WindowLargerThanImage {
        window: usize,
        width: usize,
        height: usize,
    },
    #[error("masks misaligned with stack: {0}")]
    MisalignedMasks(String),
    #[error("crop is not square: {width}x{height}")]
    NonSquareCrop { width: usize, height: usize },
    #[error("pixel value {0} outside [0,1]")]
    PixelOutOfRange(f32),
    #[error("invalid dimensions {width}x{height}")]
    InvalidDimensions { width: usize, height: usize },
}

/// Single-channel 2-D image with values in `[0,1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image2D {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(ImagingError::InvalidDimensions { width, height });
        }
        if let Some(&v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(ImagingError::PixelOutOfRange(v));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn window(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image2D {
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Image2D {
            width: w,
            height: h,
            data,
        }
    }
}

/// Binary mask; values are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask2D {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask2D {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(ImagingError::InvalidDimensions { width, height });
        }
        debug_assert!(data.iter().all(|&v| v <= 1));
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn object_fraction(&self) -> f64 {
        self.foreground_count() as f64 / self.data.len() as f64
    }

    pub fn window(&self, x0: usize, y0: usize, w: usize, h: usize) -> Mask2D {
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Mask2D {
            width: w,
            height: h,
            data,
        }
    }

    /// View the mask as an image of 0.0/1.0 values.
    pub fn to_image(&self) -> Image2D {
        Image2D {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// A multi-slice single-channel stack; all slices share one geometry.
#[derive(Debug, Clone)]
pub struct RasterStack {
    pub source_id: String,
    pub width: usize,
    pub height: usize,
    pub slices: Vec<Image2D>,
}

impl RasterStack {
    pub fn new(source_id: impl Into<String>, slices: Vec<Image2D>) -> Result<Self, ImagingError> {
        let source_id = source_id.into();
        let first = slices.first().ok_or(ImagingError::InvalidDimensions {
            width: 0,
            height: 0,
        })?;
        let (width, height) = (first.width, first.height);
        for (i, s) in slices.iter().enumerate() {
            if s.width != width || s.height != height {
                return Err(ImagingError::InconsistentDimensions {
                    expected_w: width,
                    expected_h: height,
                    got_w: s.width,
                    got_h: s.height,
                    path: format!("{source_id} slice {i}"),
                });
            }
        }
        Ok(Self {
            source_id,
            width,
            height,
            slices,
        })
    }
}

/// One retained crop: resized image/mask pair plus where it came from.
#[derive(Debug, Clone)]
pub struct CropRecord {
    pub image: Image2D,
    pub mask: Mask2D,
    pub source_id: String,
    pub slice_index: usize,
    pub window_x: usize,
    pub window_y: usize,
    pub rotation_deg: u16,
    pub object_fraction: f64,
}

impl CropRecord {
    /// Stable identifier; rotations of one window differ only in the suffix.
    pub fn crop_id(&self) -> String {
        format!(
            "{}:s{}:x{}:y{}:r{}",
            self.source_id, self.slice_index, self.window_x, self.window_y, self.rotation_deg
        )
    }

    /// Identifier of the un-rotated source window, shared by all rotations.
    pub fn window_id(&self) -> String {
        format!(
            "{}:s{}:x{}:y{}",
            self.source_id, self.slice_index, self.window_x, self.window_y
        )
    }
}

/// Parse a crop id back into (window_id, rotation).
pub fn split_crop_id(id: &str) -> Option<(String, u16)> {
    let (window, rot) = id.rsplit_once(":r")?;
    let rot: u16 = rot.parse().ok()?;
    Some((window.to_string(), rot))
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TileParams {
    pub window: usize,
    pub stride: usize,
    pub resize_to: usize,
    pub min_object_fraction: f64,
}

impl Default for TileParams {
    fn default() -> Self {
        Self {
            window: 636,
            stride: 60,
            resize_to: 320,
            min_object_fraction: 0.05,
        }
    }
}

/// Enumerate full-window origins `(i*stride, j*stride)` with the window inside
/// the image. Partial windows are never emitted.
pub fn window_origins(
    width: usize,
    height: usize,
    window: usize,
    stride: usize,
) -> Vec<(usize, usize)> {
    let mut origins = Vec::new();
    let mut y = 0;
    while y + window <= height {
        let mut x = 0;
        while x + window <= width {
            origins.push((x, y));
            x += stride;
        }
        y += stride;
    }
    origins
}

/// Slide a window over every slice, filter by mask object fraction (computed
/// at window resolution, before resizing), and resize retained crops.
pub fn tile_stack(
    stack: &RasterStack,
    masks: &RasterStack,
    params: &TileParams,
) -> Result<Vec<CropRecord>, ImagingError> {
    if params.window > stack.width || params.window > stack.height {
        return Err(ImagingError::WindowLargerThanImage {
            window: params.window,
            width: stack.width,
            height: stack.height,
        });
    }
    if masks.slices.len() != stack.slices.len()
        || masks.width != stack.width
        || masks.height != stack.height
    {
        return Err(ImagingError::MisalignedMasks(format!(
            "stack {} has {} slices {}x{}, masks {} slices {}x{}",
            stack.source_id,
            stack.slices.len(),
            stack.width,
            stack.height,
            masks.slices.len(),
            masks.width,
            masks.height
        )));
    }

    let origins = window_origins(stack.width, stack.height, params.window, params.stride);
    let mut crops = Vec::new();
    for (slice_index, (img, mask_img)) in stack.slices.iter().zip(&masks.slices).enumerate() {
        let mask = binarize_raster(mask_img);
        for &(x, y) in &origins {
            let mask_win = mask.window(x, y, params.window, params.window);
            let fraction = mask_win.object_fraction();
            if fraction < params.min_object_fraction {
                continue;
            }
            let img_win = img.window(x, y, params.window, params.window);
            crops.push(CropRecord {
                image: resize_bilinear(&img_win, params.resize_to, params.resize_to),
                mask: resize_mask_nearest(&mask_win, params.resize_to, params.resize_to),
                source_id: stack.source_id.clone(),
                slice_index,
                window_x: x,
                window_y: y,
                rotation_deg: 0,
                object_fraction: fraction,
            });
        }
    }
    Ok(crops)
}

/// A mask stored as a raster: anything >= 0.5 is foreground.
pub fn binarize_raster(img: &Image2D) -> Mask2D {
    Mask2D {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| (v >= 0.5) as u8).collect(),
    }
}

/// Exact 90-degree grid rotation (counter-clockwise), lossless.
pub fn rotate_image(img: &Image2D, deg: u16) -> Result<Image2D, ImagingError> {
    if img.width != img.height {
        return Err(ImagingError::NonSquareCrop {
            width: img.width,
            height: img.height,
        });
    }
    let n = img.width;
    let rot90 = |src: &Image2D| {
        let mut out = Image2D::filled(n, n, 0.0);
        for y in 0..n {
            for x in 0..n {
                // (x, y) -> (y, n-1-x): counter-clockwise quarter turn
                out.set(y, n - 1 - x, src.get(x, y));
            }
        }
        out
    };
    let mut out = img.clone();
    for _ in 0..(deg / 90) % 4 {
        out = rot90(&out);
    }
    Ok(out)
}

pub fn rotate_mask(mask: &Mask2D, deg: u16) -> Result<Mask2D, ImagingError> {
    let img = mask.to_image();
    let rotated = rotate_image(&img, deg)?;
    Ok(binarize_raster(&rotated))
}

/// Expand every crop into its four grid rotations (0 kept as-is).
pub fn rotate_enrich(crops: &[CropRecord]) -> Result<Vec<CropRecord>, ImagingError> {
    let mut out = Vec::with_capacity(crops.len() * 4);
    for crop in crops {
        for &deg in &[0u16, 90, 180, 270] {
            let mut c = crop.clone();
            c.image = rotate_image(&crop.image, deg)?;
            c.mask = rotate_mask(&crop.mask, deg)?;
            c.rotation_deg = deg;
            out.push(c);
        }
    }
    Ok(out)
}

/// Corner-aligned bilinear resize.
pub fn resize_bilinear(img: &Image2D, out_w: usize, out_h: usize) -> Image2D {
    assert!(out_w > 0 && out_h > 0);
    let scale = |out: usize, inp: usize| -> f64 {
        if out > 1 {
            (inp - 1) as f64 / (out - 1) as f64
        } else {
            0.0
        }
    };
    let sx = scale(out_w, img.width);
    let sy = scale(out_h, img.height);
    let mut out = Image2D::filled(out_w, out_h, 0.0);
    for oy in 0..out_h {
        let fy = oy as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ox as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            let v = (1.0 - wy) * (1.0 - wx) * img.get(x0, y0) as f64
                + (1.0 - wy) * wx * img.get(x1, y0) as f64
                + wy * (1.0 - wx) * img.get(x0, y1) as f64
                + wy * wx * img.get(x1, y1) as f64;
            out.set(ox, oy, v as f32);
        }
    }
    out
}

/// Nearest-neighbor resize for masks, re-binarized; output only {0,1}.
pub fn resize_mask_nearest(mask: &Mask2D, out_w: usize, out_h: usize) -> Mask2D {
    assert!(out_w > 0 && out_h > 0);
    let scale = |out: usize, inp: usize| -> f64 {
        if out > 1 {
            (inp - 1) as f64 / (out - 1) as f64
        } else {
            0.0
        }
    };
    let sx = scale(out_w, mask.width);
    let sy = scale(out_h, mask.height);
    let mut data = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let y = (oy as f64 * sy).round() as usize;
        let y = y.min(mask.height - 1);
        for ox in 0..out_w {
            let x = (ox as f64 * sx).round() as usize;
            let x = x.min(mask.width - 1);
            data.push(mask.get(x, y));
        }
    }
    Mask2D {
        width: out_w,
        height: out_h,
        data,
    }
}

#[cfg(test)]
mod tests;
