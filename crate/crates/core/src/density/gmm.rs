use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Lower bound applied to every diagonal covariance entry.
pub const VARIANCE_FLOOR: f64 = 1e-4;

pub const GMM_FORMAT_VERSION: u32 = 1;

const LN_2PI: f64 = 1.837_877_066_409_345_5; // ln(2*pi)

/// Gaussian mixture with diagonal covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

impl Gmm {
    /// Builds a mixture; variances below [`VARIANCE_FLOOR`] are raised to it.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::Validation("mixture needs at least one component".into()));
        }
        if means.len() != k || variances.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: means.len().min(variances.len()),
            });
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::Validation("mixture dimension must be >= 1".into()));
        }
        for (m, v) in means.iter().zip(&variances) {
            if m.len() != d || v.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: if m.len() != d { m.len() } else { v.len() },
                });
            }
            if m.iter().chain(v).any(|x| !x.is_finite()) {
                return Err(Error::Validation("non-finite mixture parameter".into()));
            }
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Validation(format!("invalid weights {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("weights sum to {total}, not 1")));
        }
        let variances = variances
            .into_iter()
            .map(|v| v.into_iter().map(|x| x.max(VARIANCE_FLOOR)).collect())
            .collect();
        Ok(Gmm {
            weights,
            means,
            variances,
        })
    }

    pub fn single(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// `ln w_k + ln N(x; mu_k, Sigma_k)` for every component.
    fn weighted_component_logs(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for ((w, mu), var) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            if *w <= 0.0 {
                out.push(f64::NEG_INFINITY);
                continue;
            }
            let mut acc = 0.0;
            for ((xi, mi), vi) in x.iter().zip(mu).zip(var) {
                let diff = xi - mi;
                acc += LN_2PI + vi.ln() + diff * diff / vi;
            }
            out.push(w.ln() - 0.5 * acc);
        }
    }

    fn log_sum_exp(logs: &[f64]) -> f64 {
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
    }

    /// `log sum_k w_k N(x; mu_k, Sigma_k)`, via log-sum-exp.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let mut logs = Vec::with_capacity(self.k());
        Ok(self.log_density_unchecked(x, &mut logs))
    }

    pub(crate) fn log_density_unchecked(&self, x: &[f64], scratch: &mut Vec<f64>) -> f64 {
        self.weighted_component_logs(x, scratch);
        Self::log_sum_exp(scratch)
    }

    /// Posterior component probabilities; returns the log density as well.
    pub fn responsibilities(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(x)?;
        let mut logs = Vec::with_capacity(self.k());
        self.weighted_component_logs(x, &mut logs);
        let total = Self::log_sum_exp(&logs);
        Ok((logs.iter().map(|l| (l - total).exp()).collect(), total))
    }

    /// Score `d/dx log p(x) = sum_k gamma_k(x) Sigma_k^-1 (mu_k - x)`.
    pub fn grad_log_density(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (gamma, _) = self.responsibilities(x)?;
        let mut grad = vec![0.0; self.dim()];
        for ((g, mu), var) in gamma.iter().zip(&self.means).zip(&self.variances) {
            for (((out, xi), mi), vi) in grad.iter_mut().zip(x).zip(mu).zip(var) {
                *out += g * (mi - xi) / vi;
            }
        }
        Ok(grad)
    }

    fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = self.k() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc && *w > 0.0 {
                comp = i;
                break;
            }
        }
        // trailing zero-weight components are never selected
        while self.weights[comp] <= 0.0 {
            comp -= 1;
        }
        self.means[comp]
            .iter()
            .zip(&self.variances[comp])
            .map(|(m, v)| {
                let z: f64 = rng.sample(StandardNormal);
                m + v.sqrt() * z
            })
            .collect()
    }

    /// `n` draws; deterministic per seed.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from(seed, &[]);
        (0..n).map(|_| self.draw(&mut rng)).collect()
    }

    pub(crate) fn sample_into(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.draw(rng)
    }

    pub fn to_document(&self) -> GmmDocument {
        GmmDocument {
            format_version: GMM_FORMAT_VERSION,
            dimension: self.dim(),
            k: self.k(),
            weights: self.weights.clone(),
            means: self.means.clone(),
            covariances: self.variances.clone(),
        }
    }

    pub fn from_document(doc: GmmDocument) -> Result<Self> {
        if doc.format_version != GMM_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported gmm format version {}",
                doc.format_version
            )));
        }
        let gmm = Gmm::new(doc.weights, doc.means, doc.covariances)?;
        if gmm.k() != doc.k || gmm.dim() != doc.dimension {
            return Err(Error::Validation(format!(
                "header says k={} d={}, arrays give k={} d={}",
                doc.k,
                doc.dimension,
                gmm.k(),
                gmm.dim()
            )));
        }
        Ok(gmm)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_document())?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_document(serde_json::from_str(&text)?)
    }
}

/// On-disk form of a [`Gmm`]. `covariances` holds diagonal entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmDocument {
    pub format_version: u32,
    pub dimension: usize,
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
}
