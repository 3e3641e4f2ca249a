//! KL divergence between mixtures: Monte-Carlo estimates and the closed form
//! for single diagonal Gaussians.

use super::gmm::Gmm;
use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Samples per shard. Shard `s` draws from a stream derived from
/// `(seed, s)`, so results do not depend on the worker count.
pub const KL_SHARD_SIZE: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

fn check_same_dim(p: &Gmm, q: &Gmm) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            actual: q.dim(),
        });
    }
    Ok(())
}

/// Running (count, mean, M2) merged with Chan's update.
#[derive(Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.n;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(self, other: Moments) -> Moments {
        if other.n == 0.0 {
            return self;
        }
        if self.n == 0.0 {
            return other;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        Moments {
            n,
            mean: self.mean + delta * other.n / n,
            m2: self.m2 + other.m2 + delta * delta * self.n * other.n / n,
        }
    }
}

fn shard_moments(p: &Gmm, q: &Gmm, seed: u64, shard: usize, count: usize) -> Moments {
    let mut rng = rng_from(seed, &[shard as u64]);
    let mut scratch = Vec::with_capacity(p.k().max(q.k()));
    let mut m = Moments::default();
    for _ in 0..count {
        let x = p.sample_into(&mut rng);
        let lp = p.log_density_unchecked(&x, &mut scratch);
        let lq = q.log_density_unchecked(&x, &mut scratch);
        m.push(lp - lq);
    }
    m
}

/// Textbook estimate `(1/n) sum [log p(x_i) - log q(x_i)]`, `x_i ~ p`.
pub fn kl_mc_standard(p: &Gmm, q: &Gmm, n: usize, seed: u64) -> Result<KlEstimate> {
    kl_mc_standard_threaded(p, q, n, seed, 1)
}

/// [`kl_mc_standard`] with shards spread over `threads` workers. Shard
/// results are merged in shard order, so the output is identical for any
/// thread count.
pub fn kl_mc_standard_threaded(
    p: &Gmm,
    q: &Gmm,
    n: usize,
    seed: u64,
    threads: usize,
) -> Result<KlEstimate> {
    check_same_dim(p, q)?;
    if n == 0 {
        return Err(Error::Validation("need at least one sample".into()));
    }
    let shards = n.div_ceil(KL_SHARD_SIZE);
    let shard_len = |s: usize| KL_SHARD_SIZE.min(n - s * KL_SHARD_SIZE);
    let threads = threads.clamp(1, shards);
    let mut results = vec![Moments::default(); shards];
    if threads == 1 {
        for (s, r) in results.iter_mut().enumerate() {
            *r = shard_moments(p, q, seed, s, shard_len(s));
        }
    } else {
        let per = shards.div_ceil(threads);
        std::thread::scope(|scope| {
            for (chunk_idx, chunk) in results.chunks_mut(per).enumerate() {
                scope.spawn(move || {
                    for (j, r) in chunk.iter_mut().enumerate() {
                        let s = chunk_idx * per + j;
                        *r = shard_moments(p, q, seed, s, shard_len(s));
                    }
                });
            }
        });
    }
    let total = results
        .into_iter()
        .fold(Moments::default(), Moments::merge);
    let var = if total.n > 1.0 {
        total.m2 / (total.n - 1.0)
    } else {
        0.0
    };
    Ok(KlEstimate {
        value: total.mean,
        std_error: (var / total.n).sqrt(),
        samples: n,
    })
}

/// Paired per-image estimate `sum_im [log p(x_g,im) - log q(x_p,im)]`,
/// treating gold vectors as draws from `p` and predicted vectors as draws
/// from `q`. This is a sum over images, not a mean.
pub fn kl_mc_paired(p: &Gmm, q: &Gmm, gold: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<f64> {
    check_same_dim(p, q)?;
    if gold.len() != pred.len() {
        return Err(Error::DimensionMismatch {
            expected: gold.len(),
            actual: pred.len(),
        });
    }
    let mut total = 0.0;
    for (g, x) in gold.iter().zip(pred) {
        total += p.log_density(g)? - q.log_density(x)?;
    }
    Ok(total)
}

/// Closed-form KL between two single diagonal Gaussians.
pub fn kl_closed_form_gaussian(p: &Gmm, q: &Gmm) -> Result<f64> {
    check_same_dim(p, q)?;
    if p.k() != 1 || q.k() != 1 {
        return Err(Error::Validation(format!(
            "closed form needs single Gaussians, got k={} and k={}",
            p.k(),
            q.k()
        )));
    }
    let mut kl = 0.0;
    for j in 0..p.dim() {
        let (mp, vp) = (p.means()[0][j], p.variances()[0][j]);
        let (mq, vq) = (q.means()[0][j], q.variances()[0][j]);
        kl += 0.5 * ((vq / vp).ln() + (vp + (mp - mq) * (mp - mq)) / vq - 1.0);
    }
    Ok(kl)
}
