//! Self-supervised restoration pretraining versus supervised training for
//! binary segmentation of organoid microscopy images.
//!
//! The pipeline tiles large single-channel rasters into crops, corrupts them
//! with restoration pretext augmentations, trains a U-Net (ResNet-style or
//! plain CNN encoder) on restoration or segmentation objectives, and
//! evaluates pixel-wise segmentation quality across five-fold cross
//! validation.

pub mod augment;
pub mod cli;
pub mod evaluate;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod nn;
pub mod report;
pub mod splits;
pub mod train;

pub use imaging::{CropRecord, Image2D, Mask2D, RasterStack};
