//! Differentiable scalar objectives: windowed SSIM and SSIM-L1 for the
//! restoration pretext task, BCE / Dice / IoU for segmentation.
//!
//! All arithmetic runs in f64; gradients are with respect to the prediction.

use crate::imaging::{Image2D, Mask2D};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("window size {0} exceeds image {1}x{2}")]
    WindowTooLarge(usize, usize, usize),
    #[error("unknown loss `{0}`")]
    UnknownLoss(String),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SsimConfig {
    pub c1: f64,
    pub c2: f64,
    pub window_size: usize,
    pub window_stride: usize,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            c1: 0.01,
            c2: 0.03,
            window_size: 11,
            window_stride: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub epsilon: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { epsilon: 1e-4 }
    }
}

/// Loss selection key used in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Ssim,
    SsimL1,
    Bce,
    Dice,
    Iou,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self, LossError> {
        match s {
            "ssim" => Ok(Self::Ssim),
            "ssim-l1" => Ok(Self::SsimL1),
            "bce" => Ok(Self::Bce),
            "dice" => Ok(Self::Dice),
            "iou" => Ok(Self::Iou),
            other => Err(LossError::UnknownLoss(other.to_string())),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Ssim => "ssim",
            Self::SsimL1 => "ssim-l1",
            Self::Bce => "bce",
            Self::Dice => "dice",
            Self::Iou => "iou",
        }
    }

    pub fn is_pretext(&self) -> bool {
        matches!(self, Self::Ssim | Self::SsimL1)
    }
}

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<(), LossError> {
    if a != b {
        return Err(LossError::DimensionMismatch(a.0, a.1, b.0, b.1));
    }
    Ok(())
}

/// Summed-area table with a zero top row and left column.
struct Integral {
    w: usize,
    data: Vec<f64>,
}

impl Integral {
    fn build(values: impl Iterator<Item = f64>, w: usize, h: usize) -> Self {
        let stride = w + 1;
        let mut data = vec![0.0; stride * (h + 1)];
        let vals: Vec<f64> = values.collect();
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += vals[y * w + x];
                data[(y + 1) * stride + x + 1] = data[y * stride + x + 1] + row;
            }
        }
        Self { w, data }
    }

    #[inline]
    fn window_sum(&self, x0: usize, y0: usize, ws: usize) -> f64 {
        let s = self.w + 1;
        let (x1, y1) = (x0 + ws, y0 + ws);
        self.data[y1 * s + x1] + self.data[y0 * s + x0]
            - self.data[y0 * s + x1]
            - self.data[y1 * s + x0]
    }
}

struct WindowGrid {
    xs: Vec<usize>,
    ys: Vec<usize>,
}

fn window_grid(w: usize, h: usize, cfg: &SsimConfig) -> Result<WindowGrid, LossError> {
    let ws = cfg.window_size;
    if ws > w || ws > h {
        return Err(LossError::WindowTooLarge(ws, w, h));
    }
    let positions = |n: usize| -> Vec<usize> {
        (0..=n - ws).step_by(cfg.window_stride.max(1)).collect()
    };
    Ok(WindowGrid {
        xs: positions(w),
        ys: positions(h),
    })
}

/// Per-window statistics for one window position.
#[derive(Debug, Clone, Copy)]
pub struct WindowStats {
    pub mu_x: f64,
    pub mu_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub cov_xy: f64,
}

fn ssim_value(stats: &WindowStats, cfg: &SsimConfig) -> f64 {
    let n1 = 2.0 * stats.mu_x * stats.mu_y + cfg.c1;
    let n2 = 2.0 * stats.cov_xy + cfg.c2;
    let d1 = stats.mu_x * stats.mu_x + stats.mu_y * stats.mu_y + cfg.c1;
    let d2 = stats.var_x + stats.var_y + cfg.c2;
    (n1 * n2) / (d1 * d2)
}

/// Mean SSIM over all uniform-weight windows, via summed-area tables.
pub fn ssim(x: &Image2D, y: &Image2D, cfg: &SsimConfig) -> Result<f64, LossError> {
    check_dims((x.width, x.height), (y.width, y.height))?;
    let grid = window_grid(x.width, x.height, cfg)?;
    let ws = cfg.window_size;
    let n = (ws * ws) as f64;
    let ix = Integral::build(x.data.iter().map(|&v| v as f64), x.width, x.height);
    let iy = Integral::build(y.data.iter().map(|&v| v as f64), x.width, x.height);
    let ixx = Integral::build(x.data.iter().map(|&v| (v as f64) * (v as f64)), x.width, x.height);
    let iyy = Integral::build(y.data.iter().map(|&v| (v as f64) * (v as f64)), x.width, x.height);
    let ixy = Integral::build(
        x.data.iter().zip(&y.data).map(|(&a, &b)| a as f64 * b as f64),
        x.width,
        x.height,
    );
    let mut total = 0.0;
    for &wy in &grid.ys {
        for &wx in &grid.xs {
            let mu_x = ix.window_sum(wx, wy, ws) / n;
            let mu_y = iy.window_sum(wx, wy, ws) / n;
            let var_x = (ixx.window_sum(wx, wy, ws) / n - mu_x * mu_x).max(0.0);
            let var_y = (iyy.window_sum(wx, wy, ws) / n - mu_y * mu_y).max(0.0);
            let cov_xy = ixy.window_sum(wx, wy, ws) / n - mu_x * mu_y;
            total += ssim_value(
                &WindowStats {
                    mu_x,
                    mu_y,
                    var_x,
                    var_y,
                    cov_xy,
                },
                cfg,
            );
        }
    }
    Ok(total / (grid.xs.len() * grid.ys.len()) as f64)
}

pub fn loss_ssim(x: &Image2D, y: &Image2D, cfg: &SsimConfig) -> Result<f64, LossError> {
    Ok(1.0 - ssim(x, y, cfg)?)
}

/// Gradient of `loss_ssim(x, y)` with respect to `y`.
pub fn grad_loss_ssim(x: &Image2D, y: &Image2D, cfg: &SsimConfig) -> Result<Vec<f64>, LossError> {
    check_dims((x.width, x.height), (y.width, y.height))?;
    let grid = window_grid(x.width, x.height, cfg)?;
    let ws = cfg.window_size;
    let n = (ws * ws) as f64;
    let n_windows = (grid.xs.len() * grid.ys.len()) as f64;
    let mut grad = vec![0.0f64; x.data.len()];
    for &wy in &grid.ys {
        for &wx in &grid.xs {
            // Window statistics.
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for py in wy..wy + ws {
                for px in wx..wx + ws {
                    let a = x.get(px, py) as f64;
                    let b = y.get(px, py) as f64;
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let mu_x = sx / n;
            let mu_y = sy / n;
            let var_x = (sxx / n - mu_x * mu_x).max(0.0);
            let var_y = (syy / n - mu_y * mu_y).max(0.0);
            let cov = sxy / n - mu_x * mu_y;
            let n1 = 2.0 * mu_x * mu_y + cfg.c1;
            let n2 = 2.0 * cov + cfg.c2;
            let d1 = mu_x * mu_x + mu_y * mu_y + cfg.c1;
            let d2 = var_x + var_y + cfg.c2;
            // Partials of the window SSIM w.r.t. mu_y, var_y, cov.
            let d_mu = 2.0 * mu_x * n2 / (d1 * d2) - n1 * n2 * 2.0 * mu_y / (d1 * d1 * d2);
            let d_var = -n1 * n2 / (d1 * d2 * d2);
            let d_cov = 2.0 * n1 / (d1 * d2);
            for py in wy..wy + ws {
                for px in wx..wx + ws {
                    let a = x.get(px, py) as f64;
                    let b = y.get(px, py) as f64;
                    let ds = d_mu / n + d_var * 2.0 * (b - mu_y) / n + d_cov * (a - mu_x) / n;
                    // Loss is 1 - mean(SSIM): negate and average over windows.
                    grad[py * x.width + px] -= ds / n_windows;
                }
            }
        }
    }
    Ok(grad)
}

/// Plain mean absolute error.
pub fn loss_mae(y: &Image2D, y_hat: &Image2D) -> Result<f64, LossError> {
    check_dims((y.width, y.height), (y_hat.width, y_hat.height))?;
    let n = y.data.len() as f64;
    let sum: f64 = y
        .data
        .iter()
        .zip(&y_hat.data)
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(sum / n)
}

pub fn grad_loss_mae(y: &Image2D, y_hat: &Image2D) -> Result<Vec<f64>, LossError> {
    check_dims((y.width, y.height), (y_hat.width, y_hat.height))?;
    let n = y.data.len() as f64;
    Ok(y.data
        .iter()
        .zip(&y_hat.data)
        .map(|(&a, &b)| {
            let d = b as f64 - a as f64;
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

/// Symmetric blend: 0.5 * MAE + 0.5 * SSIM loss.
pub fn loss_ssim_l1(x: &Image2D, y: &Image2D, cfg: &SsimConfig) -> Result<f64, LossError> {
    Ok(0.5 * loss_mae(x, y)? + 0.5 * loss_ssim(x, y, cfg)?)
}

pub fn grad_loss_ssim_l1(
    x: &Image2D,
    y: &Image2D,
    cfg: &SsimConfig,
) -> Result<Vec<f64>, LossError> {
    let gm = grad_loss_mae(x, y)?;
    let gs = grad_loss_ssim(x, y, cfg)?;
    Ok(gm
        .iter()
        .zip(&gs)
        .map(|(&a, &b)| 0.5 * a + 0.5 * b)
        .collect())
}

pub const BCE_CLAMP: f64 = 1e-7;

/// Binary cross entropy with natural log; predictions clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn loss_bce(y: &Mask2D, y_hat: &Image2D) -> Result<f64, LossError> {
    check_dims((y.width, y.height), (y_hat.width, y_hat.height))?;
    let n = y.data.len() as f64;
    let mut sum = 0.0;
    for (&t, &p) in y.data.iter().zip(&y_hat.data) {
        let p = (p as f64).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        sum += t as f64 * p.ln() + (1.0 - t as f64) * (1.0 - p).ln();
    }
    Ok(-sum / n)
}

pub fn grad_loss_bce(y: &Mask2D, y_hat: &Image2D) -> Result<Vec<f64>, LossError> {
    check_dims((y.width, y.height), (y_hat.width, y_hat.height))?;
    let n = y.data.len() as f64;
    Ok(y.data
        .iter()
        .zip(&y_hat.data)
        .map(|(&t, &p)| {
            let raw = p as f64;
            if raw < BCE_CLAMP || raw > 1.0 - BCE_CLAMP {
                // Clamp region: loss is locally constant in the prediction.
                0.0
            } else {
                (raw - t as f64) / (raw * (1.0 - raw) * n)
            }
        })
        .collect())
}

/// Dice loss with smoothing epsilon; accepts soft predictions.
pub fn loss_dice(y: &Mask2D, y_hat: &Image2D, cfg: &SmoothingConfig) -> Result<f64, LossError> {
    check_dims((y.width, y.height), (y_hat.width, y_hat.height))?;
    let mut inter = 0.0;
    let mut sum_sq = 0.0;
    for (&t, &p) in y.data.iter().zip(&y_hat.data) {
        let (t, p) = (t as f64, p as f64);
        inter += t * p;
        sum_sq += t * t + p * p;
    }
    Ok(1.0 - 2.0 * inter / (sum_sq + cfg.epsilon))
}

pub fn grad_loss_dice(
    y: &Mask2D,
    y_hat: &Image2D,
    cfg: &SmoothingConfig,
) -> Result<Vec<f64>, LossError> {
    check_dims((y.width, y.height), (y_hat.width, y_hat.height))?;
    let mut inter = 0.0;
    let mut sum_sq = 0.0;
    for (&t, &p) in y.data.iter().zip(&y_hat.data) {
        let (t, p) = (t as f64, p as f64);
        inter += t * p;
        sum_sq += t * t + p * p;
    }
    let denom = sum_sq + cfg.epsilon;
    Ok(y.data
        .iter()
        .zip(&y_hat.data)
        .map(|(&t, &p)| {
            let (t, p) = (t as f64, p as f64);
            -2.0 * t / denom + 4.0 * inter * p / (denom * denom)
        })
        .collect())
}

/// IoU (Jaccard) loss with smoothing epsilon; accepts soft predictions.
pub fn loss_iou(y: &Mask2D, y_hat: &Image2D, cfg: &SmoothingConfig) -> Result<f64, LossError> {
    check_dims((y.width, y.height), (y_hat.width, y_hat.height))?;
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&t, &p) in y.data.iter().zip(&y_hat.data) {
        let (t, p) = (t as f64, p as f64);
        inter += t * p;
        total += t + p;
    }
    let union = total - inter + cfg.epsilon;
    Ok(1.0 - inter / union)
}

pub fn grad_loss_iou(
    y: &Mask2D,
    y_hat: &Image2D,
    cfg: &SmoothingConfig,
) -> Result<Vec<f64>, LossError> {
    check_dims((y.width, y.height), (y_hat.width, y_hat.height))?;
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&t, &p) in y.data.iter().zip(&y_hat.data) {
        let (t, p) = (t as f64, p as f64);
        inter += t * p;
        total += t + p;
    }
    let union = total - inter + cfg.epsilon;
    Ok(y.data
        .iter()
        .map(|&t| {
            let t = t as f64;
            // dL/dp = -(t * U - I * (1 - t)) / U^2
            -(t * union - inter * (1.0 - t)) / (union * union)
        })
        .collect())
}
