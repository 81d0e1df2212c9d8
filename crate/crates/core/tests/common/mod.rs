#![allow(dead_code)]

use rand::Rng;
use rq_core::rng::{seeded, ChaCha8Rng};
use rq_core::Codebook;
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub fn random_codebook(k: usize, n: usize, r: &mut ChaCha8Rng) -> Codebook {
    let v = (0..k * n).map(|_| r.random_range(-1.0..1.0)).collect();
    Codebook::from_embeddings(k, n, v).unwrap()
}

pub fn random_vec(n: usize, scale: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    seeded(seed)
}

/// Upper-tail p-value of Pearson's statistic for observed counts against
/// expected probabilities.
pub fn chi_square_p(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let mut stat = 0.0;
    let mut cells = 0;
    for (&c, &p) in counts.iter().zip(probs) {
        let e = p * n as f64;
        if e > 0.0 {
            stat += (c as f64 - e).powi(2) / e;
            cells += 1;
        } else {
            assert_eq!(c, 0, "draw with zero probability");
        }
    }
    let dist = ChiSquared::new((cells - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}
