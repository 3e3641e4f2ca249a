use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ratio at or above which a sample is classified as celiac.
pub const CELIAC_THRESHOLD: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Diagnosis {
    Celiac,
    NonCeliac,
}

impl Diagnosis {
    pub fn is_celiac(self) -> bool {
        self == Diagnosis::Celiac
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Diagnosis::Celiac => "celiac",
            Diagnosis::NonCeliac => "non-celiac",
        }
    }
}

/// IELs per 100 ENs.
pub fn q_ratio(iel_count: usize, en_count: usize) -> Result<f64> {
    if en_count == 0 {
        return Err(Error::UndefinedRatio("EN count is zero".into()));
    }
    Ok(100.0 * iel_count as f64 / en_count as f64)
}

pub fn classify_celiac(ratio: f64) -> Diagnosis {
    if ratio >= CELIAC_THRESHOLD {
        Diagnosis::Celiac
    } else {
        Diagnosis::NonCeliac
    }
}

/// Binary metrics with celiac as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Empty denominators: precision is 1 when nothing was predicted positive
/// and nothing was missed, recall is 1 when there is no positive to find,
/// otherwise 0.
pub fn classification_metrics(predicted: &[Diagnosis], gold: &[Diagnosis]) -> Result<ClassificationMetrics> {
    if predicted.len() != gold.len() {
        return Err(Error::DimensionMismatch {
            expected: gold.len(),
            actual: predicted.len(),
        });
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
    for (p, g) in predicted.iter().zip(gold) {
        match (p.is_celiac(), g.is_celiac()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else if fneg == 0 {
        1.0
    } else {
        0.0
    };
    let recall = if tp + fneg > 0 { tp as f64 / (tp + fneg) as f64 } else { 1.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let n = predicted.len();
    Ok(ClassificationMetrics {
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fneg,
        precision,
        recall,
        f1,
        accuracy: if n == 0 { 1.0 } else { (tp + tn) as f64 / n as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Diagnosis::*;

    #[test]
    fn ratio_examples() {
        assert_eq!(q_ratio(30, 120).unwrap(), 25.0);
        assert_eq!(classify_celiac(25.0), Celiac);
        assert_eq!(classify_celiac(q_ratio(10, 100).unwrap()), NonCeliac);
        assert_eq!(classify_celiac(q_ratio(0, 50).unwrap()), NonCeliac);
        assert!(matches!(q_ratio(3, 0), Err(Error::UndefinedRatio(_))));
    }

    #[test]
    fn monotone_in_iel_count() {
        for en in 1..60 {
            let mut seen_celiac = false;
            for iel in 0..40 {
                let d = classify_celiac(q_ratio(iel, en).unwrap());
                assert!(!(seen_celiac && d == NonCeliac));
                seen_celiac |= d == Celiac;
            }
        }
    }

    #[test]
    fn perfect_and_all_negative() {
        let gold = [Celiac, NonCeliac, Celiac];
        let m = classification_metrics(&gold, &gold).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (1.0, 1.0, 1.0, 1.0));
        let m = classification_metrics(&[NonCeliac; 3], &gold).unwrap();
        assert_eq!(m.recall, 0.0);
    }

    #[test]
    fn twenty_sample_confusion_matrix() {
        // tp 7, fn 3, fp 2, tn 8
        let mut pred = Vec::new();
        let mut gold = Vec::new();
        for (p, g, n) in [(Celiac, Celiac, 7), (NonCeliac, Celiac, 3), (Celiac, NonCeliac, 2), (NonCeliac, NonCeliac, 8)] {
            for _ in 0..n {
                pred.push(p);
                gold.push(g);
            }
        }
        let m = classification_metrics(&pred, &gold).unwrap();
        assert_eq!((m.true_positives, m.false_negatives, m.false_positives, m.true_negatives), (7, 3, 2, 8));
        assert_eq!(m.precision, 7.0 / 9.0);
        assert_eq!(m.recall, 0.7);
        assert!((m.f1 - 2.0 * (7.0 / 9.0) * 0.7 / (7.0 / 9.0 + 0.7)).abs() < 1e-15);
        assert_eq!(m.accuracy, 0.75);
    }
}
