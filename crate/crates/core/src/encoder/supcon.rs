//! Supervised contrastive loss over a batch of embeddings.
//!
//! For anchor `v` with positives `P(v)` (same label, excluding `v`) the term
//! is `-log[(1/|P|) sum_p exp(s_vp) / sum_{a != v} exp(s_va)]` with
//! `s = z_v . z_a / tau`. Anchors without positives are skipped.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupConLoss {
    /// Sum over contributing anchors.
    pub value: f64,
    pub anchors: usize,
    pub skipped_anchors: usize,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn validate(embeddings: &[Vec<f64>], labels: &[usize], tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::Validation(format!("temperature {tau} must be > 0")));
    }
    if embeddings.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: embeddings.len(),
            actual: labels.len(),
        });
    }
    if embeddings.len() < 2 {
        return Err(Error::UndefinedLoss("need at least two samples".into()));
    }
    let d = embeddings[0].len();
    if let Some(e) = embeddings.iter().find(|e| e.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: e.len(),
        });
    }
    Ok(())
}

fn similarities(embeddings: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    embeddings
        .iter()
        .map(|a| {
            embeddings
                .iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau)
                .collect()
        })
        .collect()
}

pub fn supcon_loss(embeddings: &[Vec<f64>], labels: &[usize], tau: f64) -> Result<SupConLoss> {
    Ok(supcon_impl(embeddings, labels, tau, false)?.0)
}

/// Loss and its gradient with respect to the embeddings as given (no
/// normalization is applied inside).
pub fn supcon_grad(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    tau: f64,
) -> Result<(SupConLoss, Vec<Vec<f64>>)> {
    supcon_impl(embeddings, labels, tau, true)
}

fn supcon_impl(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    tau: f64,
    with_grad: bool,
) -> Result<(SupConLoss, Vec<Vec<f64>>)> {
    validate(embeddings, labels, tau)?;
    let n = embeddings.len();
    let d = embeddings[0].len();
    let sim = similarities(embeddings, tau);
    let mut grad = if with_grad {
        vec![vec![0.0; d]; n]
    } else {
        Vec::new()
    };
    let mut value = 0.0;
    let (mut anchors, mut skipped) = (0, 0);
    let mut coeff = vec![0.0; n];
    for v in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != v && labels[p] == labels[v]).collect();
        if positives.is_empty() {
            skipped += 1;
            continue;
        }
        anchors += 1;
        let others = (0..n).filter(|&a| a != v).map(|a| sim[v][a]);
        let lse_all = log_sum_exp(others);
        let lse_pos = log_sum_exp(positives.iter().map(|&p| sim[v][p]));
        value += -lse_pos + (positives.len() as f64).ln() + lse_all;

        if with_grad {
            // d L_v / d s_va for every a != v
            coeff.iter_mut().for_each(|c| *c = 0.0);
            for a in (0..n).filter(|&a| a != v) {
                coeff[a] = (sim[v][a] - lse_all).exp();
            }
            for &p in &positives {
                coeff[p] -= (sim[v][p] - lse_pos).exp();
            }
            for a in (0..n).filter(|&a| a != v) {
                let c = coeff[a] / tau;
                if c == 0.0 {
                    continue;
                }
                for j in 0..d {
                    grad[v][j] += c * embeddings[a][j];
                    grad[a][j] += c * embeddings[v][j];
                }
            }
        }
    }
    if anchors == 0 {
        return Err(Error::UndefinedLoss(
            "no anchor has a positive in this batch".into(),
        ));
    }
    Ok((
        SupConLoss {
            value,
            anchors,
            skipped_anchors: skipped,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn random_batch(seed: u64, n: usize, d: usize, classes: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = rng_from(seed, &[]);
        let emb = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let labels = (0..n).map(|i| i % classes).collect();
        (emb, labels)
    }

    /// Straightforward double loop without log-sum-exp.
    fn naive(emb: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        for v in 0..emb.len() {
            let mut denom = 0.0;
            for a in 0..emb.len() {
                if a != v {
                    denom += (dot(&emb[v], &emb[a]) / tau).exp();
                }
            }
            let mut inner = 0.0;
            let mut count = 0;
            for p in 0..emb.len() {
                if p != v && labels[p] == labels[v] {
                    inner += (dot(&emb[v], &emb[p]) / tau).exp() / denom;
                    count += 1;
                }
            }
            if count > 0 {
                total += -(inner / count as f64).ln();
            }
        }
        total
    }

    #[test]
    fn identical_embeddings_give_log_two_per_anchor() {
        let z = vec![vec![0.6, 0.8]; 3];
        let loss = supcon_loss(&z, &[0, 0, 1], 0.1).unwrap();
        assert_eq!(loss.anchors, 2);
        assert_eq!(loss.skipped_anchors, 1);
        assert!((loss.value - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn invariant_to_label_permutation() {
        let (emb, labels) = random_batch(1, 12, 5, 3);
        let permuted: Vec<usize> = labels.iter().map(|l| [2, 0, 1][*l]).collect();
        let a = supcon_loss(&emb, &labels, 0.1).unwrap().value;
        let b = supcon_loss(&emb, &permuted, 0.1).unwrap().value;
        assert_eq!(a, b);
    }

    #[test]
    fn matches_naive_double_loop() {
        for seed in 0..5 {
            let (emb, labels) = random_batch(seed, 16, 8, 3);
            let a = supcon_loss(&emb, &labels, 0.5).unwrap().value;
            let b = naive(&emb, &labels, 0.5);
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_on_raw_embeddings() {
        for seed in 0..20 {
            let (mut emb, labels) = random_batch(100 + seed, 6, 4, 2);
            // scale away from the unit sphere
            emb.iter_mut().enumerate().for_each(|(i, e)| {
                e.iter_mut().for_each(|x| *x *= 0.5 + 0.2 * i as f64)
            });
            let (_, grad) = supcon_grad(&emb, &labels, 0.1).unwrap();
            let h = 1e-5;
            for i in 0..6 {
                for j in 0..4 {
                    let mut p = emb.clone();
                    let mut m = emb.clone();
                    p[i][j] += h;
                    m[i][j] -= h;
                    let fd = (supcon_loss(&p, &labels, 0.1).unwrap().value
                        - supcon_loss(&m, &labels, 0.1).unwrap().value)
                        / (2.0 * h);
                    let rel = (fd - grad[i][j]).abs() / grad[i][j].abs().max(1e-3);
                    assert!(rel <= 1e-4, "seed {seed} ({i},{j}): fd {fd} an {}", grad[i][j]);
                }
            }
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(
            supcon_loss(&[vec![1.0], vec![1.0]], &[0, 1], 0.1),
            Err(Error::UndefinedLoss(_))
        ));
        assert!(supcon_loss(&[vec![1.0]], &[0], 0.1).is_err());
        assert!(supcon_loss(&[vec![1.0], vec![1.0]], &[0, 0], 0.0).is_err());
    }
}
