//! Raster reading and writing.
//!
//! A stack on disk is a directory `stacks/<source_id>/slice_<k>.png` with
//! masks mirrored under `masks/<source_id>/`. Rasters are single-channel
//! lossless files, 8- or 16-bit; values are scaled to `[0,1]` by the format's
//! maximum sample value.

use super::{Image2D, ImagingError, RasterStack};
use image::{DynamicImage, ImageReader};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackFormat {
    /// A directory of per-slice raster files, sorted by filename.
    RasterDir,
    /// A single raster file treated as a one-slice stack.
    StackedRaster,
}

/// Decode one slice from raw bytes. Kept separate from file I/O so untrusted
/// input can be exercised directly (see the fuzz targets).
pub fn decode_slice_bytes(bytes: &[u8], label: &str) -> Result<Image2D, ImagingError> {
    let img = image::load_from_memory(bytes).map_err(|e| ImagingError::CorruptRaster {
        path: label.to_string(),
        reason: e.to_string(),
    })?;
    dynamic_to_image(img, label)
}

fn dynamic_to_image(img: DynamicImage, label: &str) -> Result<Image2D, ImagingError> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(ImagingError::CorruptRaster {
            path: label.to_string(),
            reason: "zero-sized raster".into(),
        });
    }
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => {
            buf.into_raw().iter().map(|&v| v as f32 / 65535.0).collect()
        }
        other => other
            .to_luma16()
            .into_raw()
            .iter()
            .map(|&v| v as f32 / 65535.0)
            .collect(),
    };
    Image2D::new(w, h, data)
}

fn load_slice(path: &Path) -> Result<Image2D, ImagingError> {
    let label = path.display().to_string();
    let reader = ImageReader::open(path).map_err(|_| ImagingError::MissingFile(label.clone()))?;
    let img = reader.decode().map_err(|e| ImagingError::CorruptRaster {
        path: label.clone(),
        reason: e.to_string(),
    })?;
    dynamic_to_image(img, &label)
}

/// Load a stack from disk. The directory name becomes the `source_id`.
pub fn load_stack(path: &Path, format: StackFormat) -> Result<RasterStack, ImagingError> {
    let source_id = path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "stack".to_string());
    match format {
        StackFormat::StackedRaster => {
            let slice = load_slice(path)?;
            RasterStack::new(source_id, vec![slice])
        }
        StackFormat::RasterDir => {
            let entries = std::fs::read_dir(path)
                .map_err(|_| ImagingError::MissingFile(path.display().to_string()))?;
            let mut files: Vec<_> = entries
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(ImagingError::MissingFile(format!(
                    "{}: no raster files",
                    path.display()
                )));
            }
            let mut slices = Vec::with_capacity(files.len());
            for f in &files {
                slices.push(load_slice(f)?);
            }
            // RasterStack::new reports InconsistentDimensions, but with the
            // offending file path attached here.
            let (w, h) = (slices[0].width, slices[0].height);
            for (s, f) in slices.iter().zip(&files) {
                if s.width != w || s.height != h {
                    return Err(ImagingError::InconsistentDimensions {
                        expected_w: w,
                        expected_h: h,
                        got_w: s.width,
                        got_h: s.height,
                        path: f.display().to_string(),
                    });
                }
            }
            RasterStack::new(source_id, slices)
        }
    }
}

pub fn save_image_png(img: &Image2D, path: &Path) -> Result<(), ImagingError> {
    let buf: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let out = image::GrayImage::from_raw(img.width as u32, img.height as u32, buf).unwrap();
    out.save(path).map_err(|e| ImagingError::CorruptRaster {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn save_image_png16(img: &Image2D, path: &Path) -> Result<(), ImagingError> {
    let buf: Vec<u16> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let out =
        image::ImageBuffer::<image::Luma<u16>, _>::from_raw(img.width as u32, img.height as u32, buf)
            .unwrap();
    out.save(path).map_err(|e| ImagingError::CorruptRaster {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CropMeta {
    crop_id: String,
    source_id: String,
    slice_index: usize,
    window_x: usize,
    window_y: usize,
    rotation_deg: u16,
    object_fraction: f64,
    image_file: String,
    mask_file: String,
}

fn crop_file_stem(crop_id: &str) -> String {
    crop_id.replace(':', "_")
}

/// Persist prepared crops: 16-bit grayscale PNG per image, 8-bit PNG per
/// mask, plus a `crops.json` index of the record metadata.
pub fn save_crops(crops: &[super::CropRecord], dir: &Path) -> Result<(), ImagingError> {
    let img_dir = dir.join("images");
    let mask_dir = dir.join("masks");
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d)
            .map_err(|_| ImagingError::MissingFile(d.display().to_string()))?;
    }
    let mut meta = Vec::with_capacity(crops.len());
    for c in crops {
        let stem = crop_file_stem(&c.crop_id());
        let image_file = format!("images/{stem}.png");
        let mask_file = format!("masks/{stem}.png");
        save_image_png16(&c.image, &dir.join(&image_file))?;
        save_image_png(&c.mask.to_image(), &dir.join(&mask_file))?;
        meta.push(CropMeta {
            crop_id: c.crop_id(),
            source_id: c.source_id.clone(),
            slice_index: c.slice_index,
            window_x: c.window_x,
            window_y: c.window_y,
            rotation_deg: c.rotation_deg,
            object_fraction: c.object_fraction,
            image_file,
            mask_file,
        });
    }
    meta.sort_by(|a, b| a.crop_id.cmp(&b.crop_id));
    let index = dir.join("crops.json");
    std::fs::write(&index, serde_json::to_vec_pretty(&meta).unwrap())
        .map_err(|_| ImagingError::MissingFile(index.display().to_string()))?;
    Ok(())
}

/// Load crops written by [`save_crops`].
pub fn load_crops(dir: &Path) -> Result<Vec<super::CropRecord>, ImagingError> {
    let index = dir.join("crops.json");
    let bytes = std::fs::read(&index)
        .map_err(|_| ImagingError::MissingFile(index.display().to_string()))?;
    let meta: Vec<CropMeta> =
        serde_json::from_slice(&bytes).map_err(|e| ImagingError::CorruptRaster {
            path: index.display().to_string(),
            reason: e.to_string(),
        })?;
    let mut crops = Vec::with_capacity(meta.len());
    for m in meta {
        let image = load_slice(&dir.join(&m.image_file))?;
        let mask_img = load_slice(&dir.join(&m.mask_file))?;
        let mask = super::binarize_raster(&mask_img);
        crops.push(super::CropRecord {
            image,
            mask,
            source_id: m.source_id,
            slice_index: m.slice_index,
            window_x: m.window_x,
            window_y: m.window_y,
            rotation_deg: m.rotation_deg,
            object_fraction: m.object_fraction,
        });
    }
    Ok(crops)
}

/// Write an image stack and its mask stack in the on-disk layout
/// (`stacks/<source_id>/slice_<k>.png`, `masks/<source_id>/slice_<k>.png`).
pub fn save_stack_pair(
    images: &RasterStack,
    masks: &RasterStack,
    root: &Path,
) -> Result<(), ImagingError> {
    let img_dir = root.join("stacks").join(&images.source_id);
    let mask_dir = root.join("masks").join(&images.source_id);
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|_| ImagingError::MissingFile(d.display().to_string()))?;
    }
    for (k, (img, mask)) in images.slices.iter().zip(&masks.slices).enumerate() {
        save_image_png(img, &img_dir.join(format!("slice_{k:03}.png")))?;
        save_image_png(mask, &mask_dir.join(format!("slice_{k:03}.png")))?;
    }
    Ok(())
}
