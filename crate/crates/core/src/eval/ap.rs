use serde::{Deserialize, Serialize};

use super::matching::{match_detections, MatchResult};
use crate::data::{Detection, GoldBox};

/// One scored prediction of a class, pooled across the dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPrediction {
    pub confidence: f64,
    pub true_positive: bool,
}

/// Average precision with all-points interpolation: precision at each
/// recall level is replaced by the maximum precision at any recall at or
/// above it, and the area under that envelope is summed over the recall
/// steps. Returns `None` when there is no gold box.
///
/// Appending false positives ranked below every existing prediction never
/// changes the result, since they add no recall step.
pub fn average_precision(predictions: &[ScoredPrediction], num_gold: usize) -> Option<f64> {
    if num_gold == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| predictions[b].confidence.total_cmp(&predictions[a].confidence));
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(order.len());
    for (rank, &i) in order.iter().enumerate() {
        if predictions[i].true_positive {
            tp += 1;
        }
        points.push((tp as f64 / num_gold as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut envelope = 0.0f64;
    for p in points.iter_mut().rev() {
        envelope = envelope.max(p.1);
        p.1 = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        if recall > prev_recall {
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
    }
    Some(ap)
}

/// Per-class detection results at one IoU threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDetectionMetrics {
    pub class_id: usize,
    /// `None` when the class has no gold box (excluded from the mean).
    pub ap: Option<f64>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub iou_threshold: f64,
    pub per_class: Vec<ClassDetectionMetrics>,
    /// Mean AP over classes with gold boxes; `None` if there are none.
    pub map: Option<f64>,
    /// Micro-averaged over classes.
    pub precision: f64,
    pub recall: f64,
    /// Classes left out of the mean for lack of gold boxes.
    pub excluded_classes: Vec<usize>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Match every image and pool the results per class.
pub fn detection_metrics(
    images: &[(&[Detection], &[GoldBox])],
    num_classes: usize,
    iou_threshold: f64,
) -> DetectionMetrics {
    let matched: Vec<MatchResult> = images
        .iter()
        .map(|(p, g)| match_detections(p, g, iou_threshold))
        .collect();
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mut scored = Vec::new();
        let (mut tp, mut fp, mut fneg, mut gold) = (0, 0, 0, 0);
        for ((preds, golds), m) in images.iter().zip(&matched) {
            for (i, d) in preds.iter().enumerate().filter(|(_, d)| d.class_id == c) {
                let hit = m.is_match(i);
                scored.push(ScoredPrediction {
                    confidence: d.confidence,
                    true_positive: hit,
                });
                if hit {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            gold += golds.iter().filter(|g| g.class_id == c).count();
            fneg += m.false_negatives.iter().filter(|&&g| golds[g].class_id == c).count();
        }
        per_class.push(ClassDetectionMetrics {
            class_id: c,
            ap: average_precision(&scored, gold),
            true_positives: tp,
            false_positives: fp,
            false_negatives: fneg,
        });
    }
    let aps: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let excluded_classes = per_class.iter().filter(|c| c.ap.is_none()).map(|c| c.class_id).collect();
    let tp: usize = per_class.iter().map(|c| c.true_positives).sum();
    let fp: usize = per_class.iter().map(|c| c.false_positives).sum();
    let fneg: usize = per_class.iter().map(|c| c.false_negatives).sum();
    DetectionMetrics {
        iou_threshold,
        map: (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
        per_class,
        excluded_classes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn seq(flags: &[bool]) -> Vec<ScoredPrediction> {
        let n = flags.len() as f64;
        flags
            .iter()
            .enumerate()
            .map(|(i, &t)| ScoredPrediction {
                confidence: 1.0 - i as f64 / n,
                true_positive: t,
            })
            .collect()
    }

    #[test]
    fn hand_worked_curve() {
        // precisions 1, 1/2, 2/3, 3/4, 3/5 at recalls 1/3, 1/3, 2/3, 1, 1;
        // envelope 1, 3/4, 3/4 over the three recall steps
        let ap = average_precision(&seq(&[true, false, true, true, false]), 3).unwrap();
        assert!((ap - (1.0 + 0.75 + 0.75) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn extremes() {
        assert_eq!(average_precision(&seq(&[true; 4]), 4), Some(1.0));
        assert_eq!(average_precision(&seq(&[false; 4]), 4), Some(0.0));
        assert_eq!(average_precision(&[], 2), Some(0.0));
        assert_eq!(average_precision(&seq(&[true]), 0), None);
    }

    #[test]
    fn trailing_false_positives_do_not_change_ap() {
        let mut rng = rng_from(12, &[]);
        for _ in 0..100 {
            let flags: Vec<bool> = (0..rng.random_range(1..15)).map(|_| rng.random_bool(0.5)).collect();
            let gold = flags.iter().filter(|&&t| t).count() + rng.random_range(0..3);
            if gold == 0 {
                continue;
            }
            let base = seq(&flags);
            let mut longer = base.clone();
            for k in 0..rng.random_range(1..5) {
                longer.push(ScoredPrediction {
                    confidence: -1.0 - k as f64,
                    true_positive: false,
                });
            }
            let a = average_precision(&base, gold).unwrap();
            assert_eq!(a, average_precision(&longer, gold).unwrap());
            assert!((0.0..=1.0).contains(&a));
        }
    }
}
