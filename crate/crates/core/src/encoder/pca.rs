//! Principal component analysis via cyclic Jacobi eigendecomposition of the
//! sample covariance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cumulative explained-variance target for choosing the retained
/// dimension.
pub const PCA_VARIANCE_TARGET: f64 = 0.9;

/// Eigen-decomposition of a symmetric matrix (row-major `n x n`). Returns
/// eigenvalues in descending order and matching unit eigenvectors as rows.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k * n + i]).collect())
        .collect();
    (values, vectors)
}

/// Frozen PCA projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// Orthonormal principal directions (rows), by descending eigenvalue;
    /// near-zero eigenvalues are dropped.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Number of leading components used by [`PcaProjection::project`].
    pub retained: usize,
    /// Sum of all covariance eigenvalues (the trace).
    pub total_variance: f64,
}

impl PcaProjection {
    pub fn explained_variance(&self) -> f64 {
        self.explained_variance_at(self.retained)
    }

    pub fn explained_variance_at(&self, r: usize) -> f64 {
        if self.total_variance <= 0.0 {
            return 1.0;
        }
        self.eigenvalues[..r.min(self.eigenvalues.len())]
            .iter()
            .sum::<f64>()
            / self.total_variance
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.project_with(x, self.retained)
    }

    pub fn project_with(&self, x: &[f64], r: usize) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                actual: x.len(),
            });
        }
        Ok(self.components[..r.min(self.components.len())]
            .iter()
            .map(|c| {
                c.iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(ci, (xi, mi))| ci * (xi - mi))
                    .sum()
            })
            .collect())
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, comp) in coords.iter().zip(&self.components) {
            for (o, v) in out.iter_mut().zip(comp) {
                *o += c * v;
            }
        }
        out
    }
}

/// Fit PCA, retaining the smallest dimension whose cumulative explained
/// variance reaches `variance_target`.
pub fn pca_fit(samples: &[Vec<f64>], variance_target: f64) -> Result<PcaProjection> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Validation("PCA needs at least two samples".into()));
    }
    let d = samples[0].len();
    if let Some(s) = samples.iter().find(|s| s.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: s.len(),
        });
    }
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for s in samples {
        for ((c, x), m) in centered.iter_mut().zip(s).zip(&mean) {
            *c = x - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let (values, vectors) = symmetric_eigen(&cov, d);
    let cutoff = 1e-12 * trace;
    let (eigenvalues, components): (Vec<f64>, Vec<Vec<f64>>) = values
        .into_iter()
        .zip(vectors)
        .filter(|(v, _)| *v > cutoff)
        .unzip();
    let total: f64 = eigenvalues.iter().sum();
    let mut retained = eigenvalues.len();
    let mut acc = 0.0;
    for (i, v) in eigenvalues.iter().enumerate() {
        acc += v;
        if acc >= variance_target * total * (1.0 - 1e-12) {
            retained = i + 1;
            break;
        }
    }
    if retained > n {
        return Err(Error::Validation(format!(
            "{n} samples cannot support {retained} retained components"
        )));
    }
    Ok(PcaProjection {
        mean,
        components,
        eigenvalues,
        retained: retained.max(1).min(d),
        total_variance: trace,
    })
}
