use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class counts of one subimage, tagged with its full image.
#[derive(Debug, Clone, PartialEq)]
pub struct SubimageCounts {
    pub source: String,
    pub predicted: Vec<usize>,
    pub gold: Vec<usize>,
}

/// Counts of one recomposed full image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCounts {
    pub source: String,
    pub predicted: Vec<usize>,
    pub gold: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub images: Vec<ImageCounts>,
    pub mae: Vec<f64>,
    /// Percent; `None` for a class with no image having gold boxes.
    pub mre: Vec<Option<f64>>,
    /// Mean of the per-class values.
    pub mean_mae: f64,
    pub mean_mre: Option<f64>,
}

/// Sum subimage counts into their full images (in order of first
/// appearance) and compute per-class MAE and MRE over full images. Images
/// whose gold count is zero are left out of MRE but kept in MAE.
pub fn counting_report(subimages: &[SubimageCounts], num_classes: usize) -> Result<CountReport> {
    let mut images: Vec<ImageCounts> = Vec::new();
    for s in subimages {
        if s.predicted.len() != num_classes || s.gold.len() != num_classes {
            return Err(Error::DimensionMismatch {
                expected: num_classes,
                actual: s.predicted.len().max(s.gold.len()),
            });
        }
        let idx = match images.iter().position(|i| i.source == s.source) {
            Some(i) => i,
            None => {
                images.push(ImageCounts {
                    source: s.source.clone(),
                    predicted: vec![0; num_classes],
                    gold: vec![0; num_classes],
                });
                images.len() - 1
            }
        };
        for c in 0..num_classes {
            images[idx].predicted[c] += s.predicted[c];
            images[idx].gold[c] += s.gold[c];
        }
    }
    let mut mae = Vec::with_capacity(num_classes);
    let mut mre = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let errs: Vec<(f64, usize)> = images
            .iter()
            .map(|i| ((i.predicted[c] as f64 - i.gold[c] as f64).abs(), i.gold[c]))
            .collect();
        mae.push(if errs.is_empty() {
            0.0
        } else {
            errs.iter().map(|e| e.0).sum::<f64>() / errs.len() as f64
        });
        let rel: Vec<f64> = errs.iter().filter(|e| e.1 > 0).map(|e| e.0 / e.1 as f64 * 100.0).collect();
        mre.push((!rel.is_empty()).then(|| rel.iter().sum::<f64>() / rel.len() as f64));
    }
    let mean_mae = if num_classes == 0 { 0.0 } else { mae.iter().sum::<f64>() / num_classes as f64 };
    let defined: Vec<f64> = mre.iter().flatten().copied().collect();
    Ok(CountReport {
        images,
        mean_mre: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        mae,
        mre,
        mean_mae,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sub(source: &str, p: usize, g: usize) -> SubimageCounts {
        SubimageCounts {
            source: source.into(),
            predicted: vec![p],
            gold: vec![g],
        }
    }

    #[test]
    fn exact_counts_give_zero_error() {
        let r = counting_report(&[sub("a", 3, 3), sub("b", 5, 5)], 1).unwrap();
        assert_eq!(r.mae, vec![0.0]);
        assert_eq!(r.mre, vec![Some(0.0)]);
    }

    #[test]
    fn two_image_arithmetic() {
        let r = counting_report(&[sub("a", 12, 10), sub("b", 16, 20)], 1).unwrap();
        assert_eq!(r.mae, vec![3.0]);
        assert_eq!(r.mre, vec![Some(20.0)]);
    }

    #[test]
    fn subimages_recompose_before_errors() {
        // per-tile errors cancel inside image a
        let r = counting_report(&[sub("a", 2, 1), sub("b", 4, 4), sub("a", 0, 1)], 1).unwrap();
        assert_eq!(r.images.len(), 2);
        assert_eq!(r.images[0].predicted, vec![2]);
        assert_eq!(r.mae, vec![0.0]);
    }

    #[test]
    fn zero_gold_only_counts_in_mae() {
        let r = counting_report(&[sub("a", 2, 0), sub("b", 5, 10)], 1).unwrap();
        assert_eq!(r.mae, vec![3.5]);
        assert_eq!(r.mre, vec![Some(50.0)]);
        let r = counting_report(&[sub("a", 2, 0)], 1).unwrap();
        assert_eq!(r.mre, vec![None]);
        assert_eq!(r.mean_mre, None);
    }
}
