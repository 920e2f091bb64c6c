//! Evaluation metrics: PCK, MJPE, box IOU, confusion-matrix scores and ROC AUC.

use serde::{Deserialize, Serialize};

use crate::detect::BoundingBox;
use crate::error::{invalid, structural, Result};
use crate::heatmap::JointSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckCurve {
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
}

/// Evenly spaced thresholds `0, step, 2 step, ..., max`.
pub fn pck_thresholds(max: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| max * i as f64 / steps as f64).collect()
}

fn check_k(pred: &JointSet, gt: &JointSet) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(structural(format!("predicted {} joints, ground truth has {}", pred.len(), gt.len())));
    }
    if gt.is_empty() {
        return Err(invalid("joint sets are empty"));
    }
    Ok(())
}

/// Distances normalised by the larger side of the box.
fn normalized_errors(pred: &JointSet, gt: &JointSet, bbox: &BoundingBox) -> Result<Vec<f64>> {
    check_k(pred, gt)?;
    let size = bbox.width().max(bbox.height()) as f64;
    Ok(pred.iter().zip(gt.iter()).map(|(p, g)| p.distance(g) / size).collect())
}

/// Fraction of joints whose normalised error is within each threshold.
pub fn pck(pred: &JointSet, gt: &JointSet, bbox: &BoundingBox, thresholds: &[f64]) -> Result<PckCurve> {
    pck_dataset(&[(pred.clone(), gt.clone(), *bbox)], thresholds)
}

/// PCK pooled over every joint of every sample.
pub fn pck_dataset(samples: &[(JointSet, JointSet, BoundingBox)], thresholds: &[f64]) -> Result<PckCurve> {
    let mut errors = Vec::new();
    for (pred, gt, bbox) in samples {
        errors.extend(normalized_errors(pred, gt, bbox)?);
    }
    if errors.is_empty() {
        return Err(invalid("no samples to evaluate"));
    }
    let fractions = thresholds
        .iter()
        .map(|t| errors.iter().filter(|e| **e <= *t).count() as f64 / errors.len() as f64)
        .collect();
    Ok(PckCurve { thresholds: thresholds.to_vec(), fractions })
}

/// Mean euclidean joint error in pixels.
pub fn mjpe(pred: &JointSet, gt: &JointSet) -> Result<f64> {
    check_k(pred, gt)?;
    Ok(pred.iter().zip(gt.iter()).map(|(p, g)| p.distance(g)).sum::<f64>() / gt.len() as f64)
}

/// Overlap of two inclusive-pixel boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) + 1).saturating_sub(a.x_min.max(b.x_min));
    let iy = (a.y_max.min(b.y_max) + 1).saturating_sub(a.y_min.max(b.y_min));
    let inter = (ix * iy) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Standard scores; any 0/0 evaluates to 0.
pub fn classification_metrics(c: &ConfusionCounts) -> ClassificationMetrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    ClassificationMetrics { accuracy: ratio(c.tp + c.tn, c.total()), precision, recall, f1 }
}

/// Area under the ROC curve by trapezoids over every distinct score.
///
/// Tied positive/negative scores contribute a diagonal segment, which is what
/// makes the result equal the Mann-Whitney statistic.
pub fn roc_auc(scores_positive: &[f64], scores_negative: &[f64]) -> Result<f64> {
    if scores_positive.is_empty() || scores_negative.is_empty() {
        return Err(invalid("ROC AUC needs at least one positive and one negative score"));
    }
    if scores_positive.iter().chain(scores_negative).any(|s| s.is_nan()) {
        return Err(invalid("scores must not be NaN"));
    }
    let mut all: Vec<(f64, bool)> = scores_positive
        .iter()
        .map(|s| (*s, true))
        .chain(scores_negative.iter().map(|s| (*s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (scores_positive.len() as f64, scores_negative.len() as f64);
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let score = all[i].0;
        while i < all.len() && all[i].0 == score {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp as f64 / np, fp as f64 / nn);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::Keypoint;
    use proptest::prelude::*;

    fn js(points: &[(f64, f64)]) -> JointSet {
        points.iter().map(|&(x, y)| Keypoint::new(x, y)).collect()
    }

    #[test]
    fn pck_examples() {
        let gt = js(&[(10.0, 10.0), (50.0, 50.0)]);
        let b = BoundingBox::new(0, 0, 99, 59).unwrap();
        let perfect = pck(&gt, &gt, &b, &[0.0, 0.1]).unwrap();
        assert_eq!(perfect.fractions, vec![1.0, 1.0]);
        let pred = js(&[(13.0, 10.0), (50.0, 60.0)]);
        assert_eq!(pck(&pred, &gt, &b, &[0.05]).unwrap().fractions, vec![0.5]);
        assert!(pck(&pred, &js(&[(0.0, 0.0)]), &b, &[0.1]).is_err());
    }

    #[test]
    fn mjpe_examples() {
        let gt = js(&[(1.0, 2.0), (10.0, 7.0), (0.0, 0.0)]);
        assert_eq!(mjpe(&gt, &gt).unwrap(), 0.0);
        let shifted = gt.map(|p| Keypoint::new(p.x + 3.0, p.y + 4.0));
        assert_eq!(mjpe(&shifted, &gt).unwrap(), 5.0);
        assert_eq!(mjpe(&shifted, &gt).unwrap(), mjpe(&gt, &shifted).unwrap());
        assert!(mjpe(&gt, &js(&[(0.0, 0.0)])).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0, 0, 2, 2).unwrap();
        let b = BoundingBox::new(1, 1, 3, 3).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BoundingBox::new(5, 5, 6, 6).unwrap()), 0.0);
        // inclusive pixels: 3x3 boxes overlapping in a 2x2 block
        assert!((iou(&a, &b) - 4.0 / 14.0).abs() < 1e-15);
        // continuous squares [0,2]^2 and [1,3]^2 are the same as inclusive (0,0,1,1) and (1,1,2,2)
        let ca = BoundingBox::new(0, 0, 1, 1).unwrap();
        let cb = BoundingBox::new(1, 1, 2, 2).unwrap();
        assert!((iou(&ca, &cb) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn classification_examples() {
        let m = classification_metrics(&ConfusionCounts { tp: 1, ..Default::default() });
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
        let m = classification_metrics(&ConfusionCounts { tp: 3, fp: 1, fn_: 1, tn: 5 });
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (0.75, 0.75, 0.75, 0.8));
        let m = classification_metrics(&ConfusionCounts { tn: 4, fn_: 2, ..Default::default() });
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.2], &[0.9, 0.8]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.3, 0.5, 0.7], &[0.3, 0.5, 0.7]).unwrap(), 0.5);
        assert!(roc_auc(&[], &[0.1]).is_err());
        assert!(roc_auc(&[0.4], &[f64::NAN]).is_err());
    }

    fn mann_whitney(pos: &[f64], neg: &[f64]) -> f64 {
        let mut s = 0.0;
        for p in pos {
            for n in neg {
                s += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        s / (pos.len() * neg.len()) as f64
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle(
            pos in proptest::collection::vec(0u8..20, 1..30),
            neg in proptest::collection::vec(0u8..20, 1..30),
        ) {
            // small integer scores force plenty of ties
            let pos: Vec<f64> = pos.into_iter().map(f64::from).collect();
            let neg: Vec<f64> = neg.into_iter().map(f64::from).collect();
            let auc = roc_auc(&pos, &neg).unwrap();
            prop_assert!((auc - mann_whitney(&pos, &neg)).abs() < 1e-9);
            prop_assert!((auc + roc_auc(&neg, &pos).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn iou_is_symmetric_and_bounded(a in (0usize..20, 0usize..20, 0usize..20, 0usize..20),
                                        b in (0usize..20, 0usize..20, 0usize..20, 0usize..20)) {
            let mk = |(x0, y0, x1, y1): (usize, usize, usize, usize)| {
                BoundingBox::new(x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1)).unwrap()
            };
            let (a, b) = (mk(a), mk(b));
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn pck_is_monotone(
            pts in proptest::collection::vec((0.0f64..64.0, 0.0f64..64.0, 0.0f64..64.0, 0.0f64..64.0), 1..21)
        ) {
            let pred: JointSet = pts.iter().map(|p| Keypoint::new(p.0, p.1)).collect();
            let gt: JointSet = pts.iter().map(|p| Keypoint::new(p.2, p.3)).collect();
            let b = BoundingBox::new(0, 0, 63, 63).unwrap();
            let curve = pck(&pred, &gt, &b, &pck_thresholds(2.0, 40)).unwrap();
            prop_assert!(curve.fractions.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*curve.fractions.last().unwrap(), 1.0);
        }

        #[test]
        fn mjpe_is_translation_invariant(
            pts in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0), 1..21),
            dx in -100.0f64..100.0, dy in -100.0f64..100.0,
        ) {
            let pred: JointSet = pts.iter().map(|p| Keypoint::new(p.0, p.1)).collect();
            let gt: JointSet = pts.iter().map(|p| Keypoint::new(p.2, p.3)).collect();
            let shift = |j: &Keypoint| Keypoint::new(j.x + dx, j.y + dy);
            let a = mjpe(&pred, &gt).unwrap();
            let b = mjpe(&pred.map(shift), &gt.map(shift)).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
