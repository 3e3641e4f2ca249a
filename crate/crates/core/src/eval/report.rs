use serde::{Deserialize, Serialize};

use super::ap::{detection_metrics, DetectionMetrics};
use super::counting::{counting_report, CountReport, SubimageCounts};
use crate::data::{Detection, GoldBox};
use crate::error::Result;

/// Detections and gold boxes of one (sub)image with its full-image source.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub source: String,
    pub detections: Vec<Detection>,
    pub gold: Vec<GoldBox>,
}

fn class_counts<T>(items: &[T], class: impl Fn(&T) -> usize, num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for item in items {
        let c = class(item);
        if c < num_classes {
            counts[c] += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub detection: DetectionMetrics,
    pub counting: CountReport,
}

pub fn evaluate(samples: &[EvalSample], class_names: &[String], iou_threshold: f64) -> Result<EvalReport> {
    let n = class_names.len();
    let pairs: Vec<(&[Detection], &[GoldBox])> = samples
        .iter()
        .map(|s| (s.detections.as_slice(), s.gold.as_slice()))
        .collect();
    let detection = detection_metrics(&pairs, n, iou_threshold);
    let subimages: Vec<SubimageCounts> = samples
        .iter()
        .map(|s| SubimageCounts {
            source: s.source.clone(),
            predicted: class_counts(&s.detections, |d| d.class_id, n),
            gold: class_counts(&s.gold, |g| g.class_id, n),
        })
        .collect();
    Ok(EvalReport {
        class_names: class_names.to_vec(),
        detection,
        counting: counting_report(&subimages, n)?,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "class,ap,tp,fp,fn,precision,recall,mae,mre";

    /// One row per class plus an `all` row (mAP, micro precision and
    /// recall, mean MAE and MRE).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        for (c, m) in self.detection.per_class.iter().enumerate() {
            let (tp, fp, fneg) = (m.true_positives, m.false_positives, m.false_negatives);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                self.class_names[c],
                opt(m.ap),
                tp,
                fp,
                fneg,
                ratio(tp, tp + fp),
                ratio(tp, tp + fneg),
                self.counting.mae[c],
                opt(self.counting.mre[c]),
            ));
        }
        let d = &self.detection;
        let sum = |f: fn(&super::ap::ClassDetectionMetrics) -> usize| d.per_class.iter().map(f).sum::<usize>();
        out.push_str(&format!(
            "all,{},{},{},{},{},{},{},{}\n",
            opt(d.map),
            sum(|m| m.true_positives),
            sum(|m| m.false_positives),
            sum(|m| m.false_negatives),
            d.precision,
            d.recall,
            self.counting.mean_mae,
            opt(self.counting.mean_mre),
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BoundingBox;

    #[test]
    fn csv_has_class_rows_and_aggregate() {
        let b = BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let s = EvalSample {
            source: "a".into(),
            detections: vec![Detection::new(b, 0, 0.9).unwrap()],
            gold: vec![GoldBox { class_id: 0, bbox: b }],
        };
        let r = evaluate(&[s], &["x".into(), "y".into()], 0.5).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "x,1,1,0,0,1,1,0,0");
        assert_eq!(lines[2], "y,,0,0,0,0,0,0,");
        assert!(lines[3].starts_with("all,1,"));
        assert_eq!(r.detection.excluded_classes, vec![1]);
    }
}
