//! Running moments, estimate records and the chunked sample driver shared by
//! every Monte Carlo estimator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::RandomStream;

/// Samples per substream chunk. Chunk `c` of an estimate always draws from
/// `stream.child(c)`, so results do not depend on the worker count.
pub const CHUNK_SIZE: u64 = 2048;

/// Welford accumulator with Chan's pairwise merge.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&self, other: &Moments) -> Moments {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * (other.n as f64 / n as f64);
        let m2 = self.m2
            + other.m2
            + delta * delta * (self.n as f64 * other.n as f64 / n as f64);
        Moments { n, mean, m2 }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; `+inf` below two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            f64::INFINITY
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        }
    }

    /// Standard error of the mean; `+inf` below two samples.
    pub fn stderr(&self) -> f64 {
        if self.n < 2 {
            f64::INFINITY
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

impl FromIterator<f64> for Moments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = Moments::new();
        for x in iter {
            m.push(x);
        }
        m
    }
}

/// Merge in a fixed pairwise tree over the slice order.
pub fn tree_reduce(parts: &[Moments]) -> Moments {
    match parts.len() {
        0 => Moments::new(),
        1 => parts[0],
        n => {
            let (a, b) = parts.split_at(n / 2);
            tree_reduce(a).merge(&tree_reduce(b))
        }
    }
}

/// A Monte Carlo estimate with its sampling error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateWithError {
    pub value: f64,
    pub n_samples: u64,
    /// Sample standard deviation over `sqrt(n_samples)`; `+inf` when `n_samples == 1`.
    pub stderr: f64,
    pub variance_bound: Option<f64>,
}

impl EstimateWithError {
    /// Estimate `scale * E[X]` from the moments of `X`.
    pub fn from_moments(m: &Moments, scale: f64) -> Self {
        let stderr = m.stderr();
        Self {
            value: scale * m.mean(),
            n_samples: m.count(),
            stderr: if stderr.is_finite() { scale.abs() * stderr } else { stderr },
            variance_bound: None,
        }
    }

    pub fn exact(value: f64, n_samples: u64) -> Self {
        Self {
            value,
            n_samples,
            stderr: 0.0,
            variance_bound: None,
        }
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.variance_bound = Some(bound);
        self
    }

    /// Sum of independent estimates; standard errors add in quadrature.
    pub fn add_independent(&self, other: &EstimateWithError) -> Self {
        Self {
            value: self.value + other.value,
            n_samples: self.n_samples.max(other.n_samples),
            stderr: (self.stderr * self.stderr + other.stderr * other.stderr).sqrt(),
            variance_bound: match (self.variance_bound, other.variance_bound) {
                (Some(a), Some(b)) => Some(a + b),
                _ => None,
            },
        }
    }
}

/// Draw `n` samples of `draw` and return their moments.
///
/// `draw` receives the chunk's substream and the global sample index. Chunks
/// run in parallel and are merged in index order, so the output is
/// bit-identical for every thread count. The first non-finite sample (lowest
/// index) aborts the estimate.
pub fn sample_moments<F>(n: u64, stream: &RandomStream, draw: F) -> Result<Moments>
where
    F: Fn(&mut RandomStream, u64) -> Result<f64> + Sync,
{
    if n == 0 {
        return Err(Error::domain("sample count must be positive"));
    }
    let chunks = n.div_ceil(CHUNK_SIZE);
    let parts: Vec<Result<Moments>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut sub = stream.child(c);
            let lo = c * CHUNK_SIZE;
            let hi = (lo + CHUNK_SIZE).min(n);
            let mut m = Moments::new();
            for i in lo..hi {
                let x = draw(&mut sub, i)?;
                if !x.is_finite() {
                    return Err(Error::EstimatorFailure {
                        index: i,
                        reason: format!("non-finite integrand value {x}"),
                    });
                }
                m.push(x);
            }
            Ok(m)
        })
        .collect();
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(tree_reduce(&parts))
}

/// Vector version of [`sample_moments`]: `draw` fills `dim` outputs per sample,
/// all sharing the same variates.
pub fn sample_moments_vec<F>(
    n: u64,
    dim: usize,
    stream: &RandomStream,
    draw: F,
) -> Result<Vec<Moments>>
where
    F: Fn(&mut RandomStream, u64, &mut [f64]) -> Result<()> + Sync,
{
    if n == 0 {
        return Err(Error::domain("sample count must be positive"));
    }
    let chunks = n.div_ceil(CHUNK_SIZE);
    let parts: Vec<Result<Vec<Moments>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut sub = stream.child(c);
            let lo = c * CHUNK_SIZE;
            let hi = (lo + CHUNK_SIZE).min(n);
            let mut acc = vec![Moments::new(); dim];
            let mut out = vec![0.0; dim];
            for i in lo..hi {
                out.fill(0.0);
                draw(&mut sub, i, &mut out)?;
                if let Some(x) = out.iter().find(|x| !x.is_finite()) {
                    return Err(Error::EstimatorFailure {
                        index: i,
                        reason: format!("non-finite integrand value {x}"),
                    });
                }
                for (m, x) in acc.iter_mut().zip(&out) {
                    m.push(*x);
                }
            }
            Ok(acc)
        })
        .collect();
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((0..dim)
        .map(|j| {
            let col: Vec<Moments> = parts.iter().map(|p| p[j]).collect();
            tree_reduce(&col)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_matches_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.13 - 3.0).collect();
        let all: Moments = xs.iter().copied().collect();
        let parts: Vec<Moments> = xs.chunks(77).map(|c| c.iter().copied().collect()).collect();
        let merged = tree_reduce(&parts);
        assert_eq!(all.count(), merged.count());
        assert!((all.mean() - merged.mean()).abs() < 1e-12);
        assert!((all.variance() - merged.variance()).abs() < 1e-10);
    }

    #[test]
    fn constant_samples_are_exact() {
        let s = RandomStream::new(3);
        let m = sample_moments(10_000, &s, |_, _| Ok(0.1)).unwrap();
        assert_eq!(m.mean(), 0.1);
        assert_eq!(m.variance(), 0.0);
    }

    #[test]
    fn single_sample_has_infinite_stderr() {
        let s = RandomStream::new(3);
        let m = sample_moments(1, &s, |r, _| Ok(r.uniform())).unwrap();
        let e = EstimateWithError::from_moments(&m, 2.0);
        assert!(e.stderr.is_infinite());
        assert_eq!(e.n_samples, 1);
    }

    #[test]
    fn failure_reports_lowest_index() {
        let s = RandomStream::new(3);
        let err = sample_moments(10_000, &s, |_, i| {
            Ok(if i == 4500 || i == 9000 { f64::NAN } else { 1.0 })
        })
        .unwrap_err();
        assert_eq!(
            err,
            Error::EstimatorFailure {
                index: 4500,
                reason: "non-finite integrand value NaN".into()
            }
        );
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let s = RandomStream::new(99);
        let f = |r: &mut RandomStream, _| Ok(r.normal() * r.uniform());
        let a = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| sample_moments(50_000, &s, f).unwrap());
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| sample_moments(50_000, &s, f).unwrap());
        assert_eq!(a, b);
        let g = |r: &mut RandomStream, _, out: &mut [f64]| {
            out[0] = r.normal();
            out[1] = 2.0 * out[0];
            Ok(())
        };
        let v = sample_moments_vec(10_000, 2, &s, g).unwrap();
        assert_eq!(v[1].mean(), 2.0 * v[0].mean());
    }
}
