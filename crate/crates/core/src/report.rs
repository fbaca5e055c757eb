//! Report emission: score tables (CSV + JSON), metric-vs-budget curve data
//! with rendered plots, and input / truth / prediction overlay images.
//!
//! All outputs are deterministic: fixed float formatting, stable row order,
//! and byte-identical files for identical inputs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::evaluate::{aggregate, FoldSummary, MetricScores};
use crate::imaging::{Image2D, Mask2D};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("image encoding failed: {0}")]
    Encode(#[from] image::ImageError),
    #[error("no data to report")]
    Empty,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Per-fold macro-averaged scores for one configuration cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScores {
    pub fold: usize,
    pub scores: MetricScores,
}

/// One table row: a configuration cell aggregated across folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config_id: String,
    pub loss: String,
    pub augmentation: String,
    pub pretext_fraction: Option<f64>,
    pub label_budget: Option<usize>,
    pub accuracy: FoldSummary,
    pub precision: FoldSummary,
    pub recall: FoldSummary,
    pub f1: FoldSummary,
    pub jaccard: FoldSummary,
    /// Fold indices that were expected but missing; empty for complete cells.
    pub missing_folds: Vec<usize>,
}

/// Aggregate fold scores into a row, flagging any missing folds instead of
/// failing, so a partial experiment still produces a (gap-marked) report.
pub fn summarize_cell(
    config_id: &str,
    loss: &str,
    augmentation: &str,
    pretext_fraction: Option<f64>,
    label_budget: Option<usize>,
    folds: &[FoldScores],
    expected_folds: usize,
) -> Result<ReportRow, ReportError> {
    if folds.is_empty() {
        return Err(ReportError::Empty);
    }
    let present: BTreeSet<usize> = folds.iter().map(|f| f.fold).collect();
    let missing_folds: Vec<usize> = (0..expected_folds)
        .filter(|f| !present.contains(f))
        .collect();
    let pick = |get: fn(&MetricScores) -> f64| -> FoldSummary {
        let scores: Vec<f64> = folds.iter().map(|f| get(&f.scores)).collect();
        aggregate(&scores).expect("folds checked non-empty")
    };
    Ok(ReportRow {
        config_id: config_id.to_string(),
        loss: loss.to_string(),
        augmentation: augmentation.to_string(),
        pretext_fraction,
        label_budget,
        accuracy: pick(|m| m.accuracy),
        precision: pick(|m| m.precision),
        recall: pick(|m| m.recall),
        f1: pick(|m| m.f1),
        jaccard: pick(|m| m.jaccard),
        missing_folds,
    })
}

fn fmt_opt_f(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.2}")).unwrap_or_default()
}

fn fmt_opt_u(v: Option<usize>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Write `tables/<name>.csv` and `tables/<name>.json`. Rows are sorted by
/// config id and floats printed with six decimals, so identical inputs give
/// byte-identical files.
pub fn emit_tables(out_dir: &Path, name: &str, rows: &[ReportRow]) -> Result<Vec<PathBuf>, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    let dir = out_dir.join("tables");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut rows: Vec<ReportRow> = rows.to_vec();
    rows.sort_by(|a, b| a.config_id.cmp(&b.config_id));

    let mut csv = String::new();
    csv.push_str("config_id,loss,augmentation,pretext_fraction,label_budget");
    for metric in ["accuracy", "precision", "recall", "f1", "jaccard"] {
        for stat in ["best", "mean", "std"] {
            csv.push_str(&format!(",{stat}_{metric}"));
        }
    }
    csv.push_str(",missing_folds\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}",
            r.config_id,
            r.loss,
            r.augmentation,
            fmt_opt_f(r.pretext_fraction),
            fmt_opt_u(r.label_budget),
        ));
        for s in [&r.accuracy, &r.precision, &r.recall, &r.f1, &r.jaccard] {
            csv.push_str(&format!(",{:.6},{:.6},{:.6}", s.best, s.mean, s.std));
        }
        let gaps = r
            .missing_folds
            .iter()
            .map(|f| f.to_string())
            .collect::<Vec<_>>()
            .join(";");
        csv.push_str(&format!(",{gaps}\n"));
    }
    let csv_path = dir.join(format!("{name}.csv"));
    std::fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;

    let json_path = dir.join(format!("{name}.json"));
    let json = serde_json::to_vec_pretty(&rows).expect("rows serialize");
    std::fs::write(&json_path, json).map_err(io_err(&json_path))?;
    Ok(vec![csv_path, json_path])
}

/// One plotted line: (x, y) points in data coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub title: String,
    pub series: Vec<CurveSeries>,
    /// Horizontal reference score (for example a fixed-baseline best F1),
    /// drawn as a dashed line.
    pub reference: Option<f64>,
}

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 480;
const MARGIN: u32 = 48;
const PALETTE: [[u8; 3]; 4] = [[214, 69, 65], [31, 119, 180], [44, 160, 44], [148, 103, 189]];

fn draw_line(img: &mut RgbImage, x0: f32, y0: f32, x1: f32, y1: f32, color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as u32).max(1);
    for i in 0..=steps {
        let t = i as f32 / steps as f32;
        let x = (x0 + t * (x1 - x0)).round() as i64;
        let y = (y0 + t * (y1 - y0)).round() as i64;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Write `curves/<name>.json` and a rendered `curves/<name>.png`.
pub fn emit_curve(out_dir: &Path, name: &str, curve: &Curve) -> Result<Vec<PathBuf>, ReportError> {
    if curve.series.is_empty() || curve.series.iter().all(|s| s.points.is_empty()) {
        return Err(ReportError::Empty);
    }
    let dir = out_dir.join("curves");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let json_path = dir.join(format!("{name}.json"));
    let json = serde_json::to_vec_pretty(curve).expect("curve serializes");
    std::fs::write(&json_path, json).map_err(io_err(&json_path))?;

    // Data bounds with a little headroom; y clamped into [0, 1] territory
    // when scores live there.
    let xs: Vec<f64> = curve.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let mut ys: Vec<f64> = curve.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    if let Some(r) = curve.reference {
        ys.push(r);
    }
    let (x_min, x_max) = bounds(&xs);
    let (y_min, y_max) = bounds(&ys);
    let to_px = |x: f64, y: f64| -> (f32, f32) {
        let w = (PLOT_W - 2 * MARGIN) as f64;
        let h = (PLOT_H - 2 * MARGIN) as f64;
        let px = MARGIN as f64 + (x - x_min) / (x_max - x_min).max(1e-12) * w;
        let py = (PLOT_H - MARGIN) as f64 - (y - y_min) / (y_max - y_min).max(1e-12) * h;
        (px as f32, py as f32)
    };

    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    // Axes.
    draw_line(
        &mut img,
        MARGIN as f32,
        (PLOT_H - MARGIN) as f32,
        (PLOT_W - MARGIN) as f32,
        (PLOT_H - MARGIN) as f32,
        axis,
    );
    draw_line(
        &mut img,
        MARGIN as f32,
        MARGIN as f32,
        MARGIN as f32,
        (PLOT_H - MARGIN) as f32,
        axis,
    );
    // Dashed reference line.
    if let Some(r) = curve.reference {
        let (_, py) = to_px(x_min, r);
        let grey = Rgb([90, 90, 200]);
        let mut x = MARGIN as f32;
        while x < (PLOT_W - MARGIN) as f32 {
            draw_line(&mut img, x, py, (x + 6.0).min((PLOT_W - MARGIN) as f32), py, grey);
            x += 12.0;
        }
    }
    for (si, series) in curve.series.iter().enumerate() {
        let color = Rgb(PALETTE[si % PALETTE.len()]);
        let px: Vec<(f32, f32)> = series.points.iter().map(|&(x, y)| to_px(x, y)).collect();
        for w in px.windows(2) {
            draw_line(&mut img, w[0].0, w[0].1, w[1].0, w[1].1, color);
        }
        // Point markers.
        for &(x, y) in &px {
            for dy in -2i32..=2 {
                for dx in -2i32..=2 {
                    let (mx, my) = (x as i32 + dx, y as i32 + dy);
                    if mx >= 0 && my >= 0 && (mx as u32) < PLOT_W && (my as u32) < PLOT_H {
                        img.put_pixel(mx as u32, my as u32, color);
                    }
                }
            }
        }
    }
    let png_path = dir.join(format!("{name}.png"));
    img.save(&png_path)?;
    Ok(vec![json_path, png_path])
}

fn bounds(vs: &[f64]) -> (f64, f64) {
    let lo = vs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

/// Side-by-side input | true mask | predicted mask panel, written to
/// `overlays/<name>.png`. Truth renders green, prediction red.
pub fn emit_overlay(
    out_dir: &Path,
    name: &str,
    input: &Image2D,
    truth: &Mask2D,
    pred: &Mask2D,
) -> Result<PathBuf, ReportError> {
    let dir = out_dir.join("overlays");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let (w, h) = (input.width as u32, input.height as u32);
    let gap = 2u32;
    let mut img = RgbImage::from_pixel(3 * w + 2 * gap, h, Rgb([255, 255, 255]));
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            let v = (input.data[i].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x, y, Rgb([v, v, v]));
            let t = truth.data[i] != 0;
            img.put_pixel(w + gap + x, y, if t { Rgb([40, 180, 60]) } else { Rgb([20, 20, 20]) });
            let p = pred.data[i] != 0;
            img.put_pixel(2 * (w + gap) + x, y, if p { Rgb([200, 50, 40]) } else { Rgb([20, 20, 20]) });
        }
    }
    let path = dir.join(format!("{name}.png"));
    img.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(f1: f64) -> MetricScores {
        MetricScores {
            accuracy: 0.9,
            precision: f1,
            recall: f1,
            f1,
            jaccard: f1 / (2.0 - f1),
        }
    }

    fn folds(f1s: &[f64]) -> Vec<FoldScores> {
        f1s.iter()
            .enumerate()
            .map(|(i, &f1)| FoldScores { fold: i, scores: scores(f1) })
            .collect()
    }

    #[test]
    fn summarize_flags_missing_folds() {
        let mut partial = folds(&[0.8, 0.82, 0.81]);
        partial[2].fold = 4; // folds 2 and 3 never ran
        let row = summarize_cell("c", "iou", "", None, Some(114), &partial, 5).unwrap();
        assert_eq!(row.missing_folds, vec![2, 3]);
        let full = summarize_cell("c", "iou", "", None, Some(114), &folds(&[0.8; 5]), 5).unwrap();
        assert!(full.missing_folds.is_empty());
        assert!(matches!(
            summarize_cell("c", "iou", "", None, None, &[], 5),
            Err(ReportError::Empty)
        ));
    }

    #[test]
    fn summarize_aggregates_each_metric() {
        let row =
            summarize_cell("c", "bce", "blur", Some(0.5), Some(114), &folds(&[0.84, 0.84, 0.85, 0.84, 0.84]), 5)
                .unwrap();
        assert_eq!(row.f1.best, 0.85);
        assert!((row.f1.mean - 0.842).abs() < 1e-12);
        assert_eq!(row.accuracy.std, 0.0);
    }

    #[test]
    fn tables_are_byte_deterministic() {
        let rows = vec![
            summarize_cell("b", "iou", "", None, Some(200), &folds(&[0.7, 0.72]), 2).unwrap(),
            summarize_cell("a", "bce", "blur", Some(1.0), Some(114), &folds(&[0.8, 0.81]), 2).unwrap(),
        ];
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_tables(dir.path(), "t", &rows).unwrap();
        let first: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
        // Different input order, same bytes.
        let rows_rev: Vec<ReportRow> = rows.iter().rev().cloned().collect();
        let paths2 = emit_tables(dir.path(), "t", &rows_rev).unwrap();
        let second: Vec<Vec<u8>> = paths2.iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(first, second);

        let csv = String::from_utf8(first[0].clone()).unwrap();
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("config_id,loss,augmentation,pretext_fraction,label_budget"));
        assert!(header.contains("best_f1,mean_f1,std_f1"));
        // Sorted by config id.
        assert!(lines.next().unwrap().starts_with("a,"));
        assert!(lines.next().unwrap().starts_with("b,"));
    }

    #[test]
    fn curve_emits_json_and_png() {
        let curve = Curve {
            title: "f1 vs budget".to_string(),
            series: vec![
                CurveSeries {
                    name: "supervised".to_string(),
                    points: (0..9).map(|i| (200.0 + 100.0 * i as f64, 0.5 + 0.03 * i as f64)).collect(),
                },
                CurveSeries {
                    name: "ssl".to_string(),
                    points: (0..9).map(|i| (200.0 + 100.0 * i as f64, 0.7 + 0.01 * i as f64)).collect(),
                },
            ],
            reference: Some(0.85),
        };
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_curve(dir.path(), "s3_f1", &curve).unwrap();
        let loaded: Curve = serde_json::from_slice(&std::fs::read(&paths[0]).unwrap()).unwrap();
        assert_eq!(loaded, curve);
        let png = image::open(&paths[1]).unwrap();
        assert_eq!((png.width(), png.height()), (PLOT_W, PLOT_H));
        assert!(matches!(
            emit_curve(dir.path(), "empty", &Curve { title: String::new(), series: vec![], reference: None }),
            Err(ReportError::Empty)
        ));
    }

    #[test]
    fn overlay_layout_is_three_panels() {
        let input = Image2D::filled(8, 6, 0.5);
        let truth = Mask2D::new(8, 6, vec![1; 48]).unwrap();
        let pred = Mask2D::new(8, 6, vec![0; 48]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = emit_overlay(dir.path(), "sample", &input, &truth, &pred).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (3 * 8 + 4, 6));
        // Truth panel green-ish, prediction panel dark.
        assert_eq!(*img.get_pixel(8 + 2, 0), Rgb([40, 180, 60]));
        assert_eq!(*img.get_pixel(2 * 10, 0), Rgb([20, 20, 20]));
    }
}
