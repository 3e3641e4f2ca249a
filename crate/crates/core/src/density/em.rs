//! Expectation-maximization for diagonal mixtures with k-means++ seeding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gmm::{Gmm, VARIANCE_FLOOR};
use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop once the mean per-sample log-likelihood improves by less than this.
    pub tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 200,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub gmm: Gmm,
    /// Mean per-sample log-likelihood of each evaluated parameter set, in
    /// order; the last entry belongs to `gmm`.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Components re-seeded because they lost all responsibility.
    pub reseeded: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(samples: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = samples.len();
    let mut centers = vec![samples[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = samples[idx].clone();
        for (d, s) in d2.iter_mut().zip(samples) {
            *d = d.min(sq_dist(s, &c));
        }
        centers.push(c);
    }
    centers
}

/// Index of the sample farthest from its nearest mean.
fn farthest_sample(samples: &[Vec<f64>], means: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in samples.iter().enumerate() {
        let d = means
            .iter()
            .map(|m| sq_dist(s, m))
            .fold(f64::INFINITY, f64::min);
        if d > best.1 {
            best = (i, d);
        }
    }
    best.0
}

struct Params {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

fn m_step(samples: &[Vec<f64>], resp: &[Vec<f64>], k: usize, reseeded: &mut usize) -> Params {
    let n = samples.len();
    let d = samples[0].len();
    let mut weights = vec![0.0; k];
    let mut means = vec![vec![0.0; d]; k];
    let mut variances = vec![vec![0.0; d]; k];
    let mut empty = Vec::new();
    for c in 0..k {
        let nk: f64 = resp.iter().map(|r| r[c]).sum();
        if nk <= 1e-10 * n as f64 {
            empty.push(c);
            continue;
        }
        for (s, r) in samples.iter().zip(resp) {
            for (m, x) in means[c].iter_mut().zip(s) {
                *m += r[c] * x;
            }
        }
        means[c].iter_mut().for_each(|m| *m /= nk);
        for (s, r) in samples.iter().zip(resp) {
            for ((v, x), m) in variances[c].iter_mut().zip(s).zip(&means[c]) {
                let diff = x - m;
                *v += r[c] * diff * diff;
            }
        }
        variances[c]
            .iter_mut()
            .for_each(|v| *v = (*v / nk).max(VARIANCE_FLOOR));
        weights[c] = nk / n as f64;
    }
    if !empty.is_empty() {
        let live: Vec<Vec<f64>> = (0..k)
            .filter(|c| !empty.contains(c))
            .map(|c| means[c].clone())
            .collect();
        let pooled = pooled_variance(samples);
        let mut anchors = live;
        for &c in &empty {
            let idx = farthest_sample(samples, if anchors.is_empty() { &means } else { &anchors });
            means[c] = samples[idx].clone();
            variances[c] = pooled.clone();
            weights[c] = 1.0 / n as f64;
            anchors.push(means[c].clone());
            *reseeded += 1;
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
    }
    normalize_weights(&mut weights);
    Params {
        weights,
        means,
        variances,
    }
}

/// Force an exact simplex by absorbing rounding into the largest weight.
fn normalize_weights(weights: &mut [f64]) {
    let (imax, _) = weights
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &w)| {
            if w > acc.1 {
                (i, w)
            } else {
                acc
            }
        });
    let rest: f64 = weights
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != imax)
        .map(|(_, w)| w)
        .sum();
    weights[imax] = 1.0 - rest;
}

fn pooled_variance(samples: &[Vec<f64>]) -> Vec<f64> {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for s in samples {
        for ((v, x), m) in var.iter_mut().zip(s).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.into_iter()
        .map(|v| (v / n).max(VARIANCE_FLOOR))
        .collect()
}

fn e_step(gmm: &Gmm, samples: &[Vec<f64>], resp: &mut [Vec<f64>]) -> f64 {
    let mut scratch = Vec::with_capacity(gmm.k());
    let mut total = 0.0;
    for (s, r) in samples.iter().zip(resp.iter_mut()) {
        let ll = gmm.log_density_unchecked(s, &mut scratch);
        for (ri, l) in r.iter_mut().zip(&scratch) {
            *ri = (l - ll).exp();
        }
        total += ll;
    }
    total / samples.len() as f64
}

fn to_gmm(p: Params) -> Result<Gmm> {
    Gmm::new(p.weights, p.means, p.variances)
}

/// Fit a `k`-component diagonal mixture.
pub fn em_fit(samples: &[Vec<f64>], k: usize, seed: u64, config: &EmConfig) -> Result<EmFit> {
    if k == 0 {
        return Err(Error::Validation("k must be >= 1".into()));
    }
    if samples.len() < k {
        return Err(Error::Validation(format!(
            "{} samples cannot support {k} components",
            samples.len()
        )));
    }
    let d = samples[0].len();
    if d == 0 {
        return Err(Error::Validation("samples must have dimension >= 1".into()));
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.len(),
        });
    }
    if samples.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Validation("non-finite sample".into()));
    }

    let mut rng = rng_from(seed, &[]);
    let centers = kmeans_pp(samples, k, &mut rng);
    let mut resp: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            let nearest = (0..k)
                .min_by(|&a, &b| sq_dist(s, &centers[a]).total_cmp(&sq_dist(s, &centers[b])))
                .unwrap();
            (0..k).map(|c| if c == nearest { 1.0 } else { 0.0 }).collect()
        })
        .collect();
    let mut reseeded = 0;
    let mut gmm = to_gmm(m_step(samples, &resp, k, &mut reseeded))?;

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iter {
        let ll = e_step(&gmm, samples, &mut resp);
        if !ll.is_finite() {
            return Err(Error::NumericOverflow("log-likelihood not finite".into()));
        }
        if let Some(&prev) = trace.last() {
            if ll - prev < config.tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        gmm = to_gmm(m_step(samples, &resp, k, &mut reseeded))?;
        iterations += 1;
    }
    if !converged {
        trace.push(e_step(&gmm, samples, &mut resp));
    }
    Ok(EmFit {
        gmm,
        log_likelihood: trace,
        iterations,
        converged,
        reseeded,
    })
}

/// Fit each candidate `k` and return the index of the lowest-BIC fit along
/// with all fits.
pub fn select_k_bic(
    samples: &[Vec<f64>],
    candidates: &[usize],
    seed: u64,
    config: &EmConfig,
) -> Result<(usize, Vec<EmFit>)> {
    let n = samples.len() as f64;
    let mut fits = Vec::new();
    let mut best = (0, f64::INFINITY);
    for (i, &k) in candidates.iter().enumerate() {
        let fit = em_fit(samples, k, seed, config)?;
        let d = fit.gmm.dim() as f64;
        let params = (k as f64 - 1.0) + 2.0 * k as f64 * d;
        let ll_total = fit.log_likelihood.last().copied().unwrap_or(f64::NEG_INFINITY) * n;
        let bic = -2.0 * ll_total + params * n.ln();
        if bic < best.1 {
            best = (i, bic);
        }
        fits.push(fit);
    }
    Ok((best.0, fits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn single_component_is_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![rng.random_range(-2.0..5.0), rng.random_range(0.0..0.001)])
            .collect();
        let fit = em_fit(&samples, 1, 0, &EmConfig::default()).unwrap();
        let n = samples.len() as f64;
        for j in 0..2 {
            let mean = samples.iter().map(|s| 1.0 * s[j]).sum::<f64>() / n;
            let var = (samples.iter().map(|s| 1.0 * (s[j] - mean) * (s[j] - mean)).sum::<f64>() / n)
                .max(VARIANCE_FLOOR);
            assert_eq!(fit.gmm.means()[0][j], mean);
            assert_eq!(fit.gmm.variances()[0][j], var);
        }
        assert_eq!(fit.gmm.variances()[0][1], VARIANCE_FLOOR);
        assert!(fit.converged);
    }

    #[test]
    fn recovers_two_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Normal::new(-5.0, 0.5).unwrap();
        let b = Normal::new(5.0, 0.5).unwrap();
        let mut samples: Vec<Vec<f64>> = (0..500).map(|_| vec![a.sample(&mut rng)]).collect();
        samples.extend((0..500).map(|_| vec![b.sample(&mut rng)]));
        let fit = em_fit(&samples, 2, 1, &EmConfig::default()).unwrap();
        let mut means: Vec<f64> = fit.gmm.means().iter().map(|m| m[0]).collect();
        means.sort_by(f64::total_cmp);
        assert!((means[0] + 5.0).abs() < 0.1, "{means:?}");
        assert!((means[1] - 5.0).abs() < 0.1, "{means:?}");
    }

    #[test]
    fn log_likelihood_is_monotone() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let d = rng.random_range(1..4);
            let k = rng.random_range(1..4);
            let n = rng.random_range(20..120);
            let samples: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let shift = rng.random_range(0..3) as f64 * 3.0;
                    (0..d).map(|_| shift + rng.random_range(-1.0..1.0)).collect()
                })
                .collect();
            let fit = em_fit(&samples, k, seed, &EmConfig::default()).unwrap();
            if fit.reseeded > 0 {
                continue;
            }
            for w in fit.log_likelihood.windows(2) {
                assert!(w[1] - w[0] >= -1e-9, "seed {seed}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(em_fit(&[vec![1.0]], 2, 0, &EmConfig::default()).is_err());
        assert!(em_fit(&[vec![1.0], vec![1.0, 2.0]], 1, 0, &EmConfig::default()).is_err());
        assert!(em_fit(&[vec![f64::NAN]], 1, 0, &EmConfig::default()).is_err());
    }

    #[test]
    fn duplicate_points_still_fit() {
        let samples = vec![vec![2.0, 2.0]; 10];
        let fit = em_fit(&samples, 3, 0, &EmConfig::default()).unwrap();
        assert!(fit.gmm.log_density(&[2.0, 2.0]).unwrap().is_finite());
    }

    #[test]
    fn bic_prefers_two_components_for_two_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Normal::new(-5.0, 0.5).unwrap();
        let b = Normal::new(5.0, 0.5).unwrap();
        let mut samples: Vec<Vec<f64>> = (0..200).map(|_| vec![a.sample(&mut rng)]).collect();
        samples.extend((0..200).map(|_| vec![b.sample(&mut rng)]));
        let (best, fits) = select_k_bic(&samples, &[1, 2, 3], 0, &EmConfig::default()).unwrap();
        assert_eq!(fits[best].gmm.k(), 2);
    }
}
