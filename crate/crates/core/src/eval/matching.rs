use serde::{Deserialize, Serialize};

use crate::data::{iou, Detection, GoldBox};

/// Matching of one image's detections against its gold boxes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(prediction index, gold index)` pairs.
    pub matches: Vec<(usize, usize)>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.matches.len()
    }

    pub fn is_match(&self, pred: usize) -> bool {
        self.matches.iter().any(|&(p, _)| p == pred)
    }
}

/// Predictions sorted by descending confidence; ties keep input order.
pub fn confidence_order(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    order
}

/// Greedy matching: in descending confidence order, each prediction takes
/// the unmatched same-class gold box with the highest IoU, provided the IoU
/// reaches `iou_threshold`.
pub fn match_detections(preds: &[Detection], golds: &[GoldBox], iou_threshold: f64) -> MatchResult {
    let mut taken = vec![false; golds.len()];
    let mut result = MatchResult::default();
    for p in confidence_order(preds) {
        let best = golds
            .iter()
            .enumerate()
            .filter(|(g, gold)| !taken[*g] && gold.class_id == preds[p].class_id)
            .map(|(g, gold)| (g, iou(&preds[p].bbox, &gold.bbox)))
            .filter(|&(_, v)| v >= iou_threshold)
            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            });
        match best {
            Some((g, _)) => {
                taken[g] = true;
                result.matches.push((p, g));
            }
            None => result.false_positives.push(p),
        }
    }
    result.false_positives.sort_unstable();
    result.false_negatives = (0..golds.len()).filter(|&g| !taken[g]).collect();
    result
}
