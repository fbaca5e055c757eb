//! Pixel-wise evaluation: thresholding, per-image confusion matrices, the
//! metric family (accuracy / precision / recall / F1 / Jaccard), and
//! aggregation of per-fold scores into best / mean / sample-std summaries.

use serde::{Deserialize, Serialize};

use crate::imaging::{Image2D, Mask2D};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("no folds to aggregate")]
    NoFolds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub jaccard: f64,
}

/// Pixel >= threshold becomes foreground.
pub fn binarize(pred: &Image2D, threshold: f32) -> Mask2D {
    let data = pred.data.iter().map(|&v| u8::from(v >= threshold)).collect();
    Mask2D::new(pred.width, pred.height, data).expect("image dims are valid mask dims")
}

pub fn confusion(truth: &Mask2D, pred: &Mask2D) -> Result<ConfusionCounts, EvalError> {
    if truth.width != pred.width || truth.height != pred.height {
        return Err(EvalError::DimensionMismatch(
            truth.width,
            truth.height,
            pred.width,
            pred.height,
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&t, &p) in truth.data.iter().zip(pred.data.iter()) {
        match (t != 0, p != 0) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Metric family from one confusion matrix.
///
/// Degenerate cases: when both masks are empty (tp+fp+fn = 0) every ratio
/// metric is 1 — an all-background prediction of an all-background truth is
/// perfect. Otherwise any individually undefined ratio (0/0) is scored 0.
pub fn metrics(c: &ConfusionCounts) -> MetricScores {
    let n = c.total();
    let accuracy = if n == 0 {
        1.0
    } else {
        (c.tp + c.tn) as f64 / n as f64
    };
    if c.tp + c.fp + c.fn_ == 0 {
        return MetricScores {
            accuracy,
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
            jaccard: 1.0,
        };
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let jaccard = ratio(c.tp, c.tp + c.fp + c.fn_);
    MetricScores {
        accuracy,
        precision,
        recall,
        f1,
        jaccard,
    }
}

/// Macro average: metrics per image first, then the plain mean.
pub fn macro_average(per_image: &[ConfusionCounts]) -> Option<MetricScores> {
    if per_image.is_empty() {
        return None;
    }
    let n = per_image.len() as f64;
    let mut acc = [0.0f64; 5];
    for c in per_image {
        let m = metrics(c);
        acc[0] += m.accuracy;
        acc[1] += m.precision;
        acc[2] += m.recall;
        acc[3] += m.f1;
        acc[4] += m.jaccard;
    }
    Some(MetricScores {
        accuracy: acc[0] / n,
        precision: acc[1] / n,
        recall: acc[2] / n,
        f1: acc[3] / n,
        jaccard: acc[4] / n,
    })
}

/// Micro average: pool the pixel counts across images, then score once.
pub fn micro_average(per_image: &[ConfusionCounts]) -> Option<MetricScores> {
    if per_image.is_empty() {
        return None;
    }
    let mut pooled = ConfusionCounts::default();
    for c in per_image {
        pooled.add(c);
    }
    Some(metrics(&pooled))
}

/// Best / mean / sample standard deviation of one score across folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub best: f64,
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate(fold_scores: &[f64]) -> Result<FoldSummary, EvalError> {
    if fold_scores.is_empty() {
        return Err(EvalError::NoFolds);
    }
    let n = fold_scores.len() as f64;
    let best = fold_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = fold_scores.iter().sum::<f64>() / n;
    let std = if fold_scores.len() < 2 {
        0.0
    } else {
        let ss: f64 = fold_scores.iter().map(|&v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1.0)).sqrt()
    };
    Ok(FoldSummary { best, mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(w: usize, h: usize, bits: &[u8]) -> Mask2D {
        Mask2D::new(w, h, bits.to_vec()).unwrap()
    }

    #[test]
    fn binarize_uses_geq_convention() {
        let all6 = Image2D::filled(2, 2, 0.6);
        assert_eq!(binarize(&all6, 0.5).data, vec![1; 4]);
        let all5 = Image2D::filled(2, 2, 0.5);
        assert_eq!(binarize(&all5, 0.5).data, vec![1; 4]);
        let all4 = Image2D::filled(2, 2, 0.4999);
        assert_eq!(binarize(&all4, 0.5).data, vec![0; 4]);
    }

    #[test]
    fn confusion_hand_count() {
        let y = mask(2, 2, &[1, 0, 0, 1]);
        let yh = mask(2, 2, &[1, 1, 0, 0]);
        let c = confusion(&y, &yh).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 1, 1));
    }

    #[test]
    fn confusion_identity_and_extremes() {
        let y = mask(2, 2, &[1, 0, 1, 0]);
        let c = confusion(&y, &y).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let zeros = mask(2, 2, &[0; 4]);
        let ones = mask(2, 2, &[1; 4]);
        let c = confusion(&zeros, &ones).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (0, 4, 0, 0));
    }

    #[test]
    fn confusion_rejects_dimension_mismatch() {
        let a = mask(2, 2, &[0; 4]);
        let b = mask(2, 3, &[0; 6]);
        assert!(matches!(
            confusion(&a, &b),
            Err(EvalError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn metrics_hand_values() {
        let m = metrics(&ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.f1, 0.5);
        assert!((m.jaccard - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn metrics_perfect_and_empty() {
        let m = metrics(&ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 3 });
        assert_eq!((m.precision, m.recall, m.f1, m.jaccard, m.accuracy), (1.0, 1.0, 1.0, 1.0, 1.0));
        // Both masks empty: all ratios score 1 by convention.
        let m = metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 9 });
        assert_eq!((m.precision, m.recall, m.f1, m.jaccard, m.accuracy), (1.0, 1.0, 1.0, 1.0, 1.0));
        // Truth has foreground, prediction none: recall exists (0), precision 0/0 -> 0.
        let m = metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 4, tn: 5 });
        assert_eq!((m.precision, m.recall, m.f1, m.jaccard), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn aggregate_matches_reference_pattern() {
        let s = aggregate(&[0.84, 0.84, 0.85, 0.84, 0.84]).unwrap();
        assert_eq!(s.best, 0.85);
        assert!((s.mean - 0.842).abs() < 1e-12);
        assert!((s.std - 0.004472135954999579).abs() < 1e-12);
    }

    #[test]
    fn aggregate_degenerate_folds() {
        let s = aggregate(&[0.7]).unwrap();
        assert_eq!((s.best, s.mean, s.std), (0.7, 0.7, 0.0));
        let s = aggregate(&[0.6; 5]).unwrap();
        assert_eq!(s.std, 0.0);
        assert!(matches!(aggregate(&[]), Err(EvalError::NoFolds)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn confusion_matches_indexed_loop(
            t in proptest::collection::vec(0u8..2, 64),
            p in proptest::collection::vec(0u8..2, 64),
        ) {
            let y = mask(8, 8, &t);
            let yh = mask(8, 8, &p);
            let c = confusion(&y, &yh).unwrap();
            let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
            for yy in 0..8 {
                for xx in 0..8 {
                    let i = yy * 8 + xx;
                    match (t[i] != 0, p[i] != 0) {
                        (true, true) => tp += 1,
                        (false, true) => fp += 1,
                        (true, false) => fn_ += 1,
                        (false, false) => tn += 1,
                    }
                }
            }
            prop_assert_eq!((c.tp, c.fp, c.fn_, c.tn), (tp, fp, fn_, tn));
            prop_assert_eq!(c.total(), 64);

            let m = metrics(&c);
            prop_assert!(m.jaccard <= m.f1 + 1e-15);
            prop_assert!((m.accuracy - (1.0 - (c.fp + c.fn_) as f64 / 64.0)).abs() < 1e-15);
        }

        #[test]
        fn macro_mean_bounded_by_folds(scores in proptest::collection::vec(0.0f64..1.0, 1..6)) {
            let s = aggregate(&scores).unwrap();
            let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert!(s.mean >= lo - 1e-12 && s.mean <= s.best + 1e-12);
        }
    }
}
