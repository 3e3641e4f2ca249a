//! Multinomial logistic-regression probe on frozen features, used to check
//! class separability of learned embeddings.

#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl LinearProbe {
    /// Full-batch gradient descent on the mean cross-entropy.
    pub fn fit(features: &[Vec<f64>], labels: &[usize], num_classes: usize, epochs: usize, lr: f64) -> Self {
        let d = features.first().map_or(0, Vec::len);
        let mut probe = LinearProbe {
            weights: vec![vec![0.0; d]; num_classes],
            biases: vec![0.0; num_classes],
        };
        let n = features.len() as f64;
        for _ in 0..epochs {
            let mut gw = vec![vec![0.0; d]; num_classes];
            let mut gb = vec![0.0; num_classes];
            for (x, &y) in features.iter().zip(labels) {
                let p = probe.probabilities(x);
                for c in 0..num_classes {
                    let err = p[c] - if c == y { 1.0 } else { 0.0 };
                    gb[c] += err;
                    for (g, xi) in gw[c].iter_mut().zip(x) {
                        *g += err * xi;
                    }
                }
            }
            for c in 0..num_classes {
                probe.biases[c] -= lr * gb[c] / n;
                for (w, g) in probe.weights[c].iter_mut().zip(&gw[c]) {
                    *w -= lr * g / n;
                }
            }
        }
        probe
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / s).collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let p = self.probabilities(x);
        (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0)
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        if features.is_empty() {
            return 0.0;
        }
        let correct = features
            .iter()
            .zip(labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        correct as f64 / features.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_linearly_separable_points() {
        let xs: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 } + 0.01 * i as f64, 0.5])
            .collect();
        let ys: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let p = LinearProbe::fit(&xs, &ys, 2, 500, 1.0);
        assert_eq!(p.accuracy(&xs, &ys), 1.0);
    }
}
