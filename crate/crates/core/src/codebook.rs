//! Shared codebook with exact nearest-code lookup and EMA training.

use crate::error::{Error, Result};
use crate::io::{self, checked_len};
use crate::par::Execution;
use rand::Rng;
use rq_autodiff::kernels::squared_distance;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};

/// Additive smoothing on cluster sizes when refreshing embeddings.
pub const LAPLACE_EPS: f64 = 1e-5;
pub const DEFAULT_DECAY: f64 = 0.99;
/// In EMA-count units.
pub const DEFAULT_RESTART_THRESHOLD: f64 = 1.0;

const MAGIC: &[u8; 4] = b"RQCB";
const MAX_ELEMENTS: usize = 1 << 28;

/// Rounds through `f32` so the in-memory codebook equals its serialized form.
fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

/// `K` code embeddings in `R^{n_z}` with their EMA statistics.
///
/// Embeddings and embedding sums are held at `f32` precision (stored as
/// `f64`); all distance arithmetic runs in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    size: usize,
    dim: usize,
    embeddings: Vec<f64>,
    ema_cluster_size: Vec<f64>,
    ema_embed_sum: Vec<f64>,
}

impl Codebook {
    /// Builds a codebook whose EMA statistics start at `(1, e(k))`.
    pub fn from_embeddings(size: usize, dim: usize, embeddings: Vec<f64>) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::Parameter(format!(
                "codebook needs K >= 1 and n_z >= 1, got K={size}, n_z={dim}"
            )));
        }
        if embeddings.len() != size * dim {
            return Err(Error::Dimension {
                expected: size * dim,
                actual: embeddings.len(),
            });
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("embeddings must be finite".into()));
        }
        let embeddings: Vec<f64> = embeddings.into_iter().map(f32_exact).collect();
        Ok(Self {
            size,
            dim,
            ema_cluster_size: vec![1.0; size],
            ema_embed_sum: embeddings.clone(),
            embeddings,
        })
    }

    /// `K` distinct rows of `z` (a `B×dim` row-major matrix) chosen by
    /// [`select_init_rows`].
    pub fn init_from_samples(z: &[f64], dim: usize, size: usize, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 || !z.len().is_multiple_of(dim) {
            return Err(Error::Dimension {
                expected: dim,
                actual: z.len(),
            });
        }
        let rows = z.len() / dim;
        if rows < size {
            return Err(Error::InsufficientData {
                needed: size,
                available: rows,
            });
        }
        let picks = select_init_rows(rows, size, rng);
        let mut emb = Vec::with_capacity(size * dim);
        for &p in &picks {
            emb.extend_from_slice(&z[p * dim..(p + 1) * dim]);
        }
        Self::from_embeddings(size, dim, emb)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self, k: usize) -> &[f64] {
        &self.embeddings[k * self.dim..(k + 1) * self.dim]
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn ema_cluster_size(&self) -> &[f64] {
        &self.ema_cluster_size
    }

    pub fn ema_embed_sum(&self) -> &[f64] {
        &self.ema_embed_sum
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: z.len(),
            });
        }
        Ok(())
    }

    /// `||z − e(k)||²` for every code.
    pub fn squared_distances(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        Ok(self
            .embeddings
            .chunks_exact(self.dim)
            .map(|e| squared_distance(z, e))
            .collect())
    }

    /// Index of the nearest embedding; ties go to the lowest index.
    pub fn nearest_code(&self, z: &[f64]) -> Result<usize> {
        self.check_dim(z)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("query vector must be finite".into()));
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, e) in self.embeddings.chunks_exact(self.dim).enumerate() {
            let d = squared_distance(z, e);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        Ok(best)
    }

    /// Row-wise [`Codebook::nearest_code`] over a `B×n_z` matrix.
    pub fn nearest_code_batch(&self, z: &[f64], exec: Execution) -> Result<Vec<usize>> {
        if !z.len().is_multiple_of(self.dim) {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: z.len() % self.dim,
            });
        }
        let rows = z.len() / self.dim;
        exec.try_map_range(rows, |i| self.nearest_code(&z[i * self.dim..(i + 1) * self.dim]))
    }

    /// One EMA step on cluster sizes and embedding sums, then refreshes
    /// every embedding with a positive cluster size to
    /// `sum / (size + LAPLACE_EPS)`.
    pub fn ema_update(&mut self, z: &[f64], assignments: &[usize], decay: f64) -> Result<()> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Parameter(format!("decay {decay} not in [0, 1)")));
        }
        if z.len() != assignments.len() * self.dim {
            return Err(Error::Dimension {
                expected: assignments.len() * self.dim,
                actual: z.len(),
            });
        }
        let mut counts = vec![0.0; self.size];
        let mut sums = vec![0.0; self.size * self.dim];
        for (row, &k) in z.chunks_exact(self.dim).zip(assignments) {
            if k >= self.size {
                return Err(Error::Index {
                    index: k,
                    bound: self.size,
                });
            }
            counts[k] += 1.0;
            for (s, v) in sums[k * self.dim..(k + 1) * self.dim].iter_mut().zip(row) {
                *s += v;
            }
        }
        for k in 0..self.size {
            self.ema_cluster_size[k] = decay * self.ema_cluster_size[k] + (1.0 - decay) * counts[k];
            let range = k * self.dim..(k + 1) * self.dim;
            for (old, new) in self.ema_embed_sum[range.clone()].iter_mut().zip(&sums[range]) {
                *old = f32_exact(decay * *old + (1.0 - decay) * new);
            }
        }
        self.refresh_embeddings();
        Ok(())
    }

    fn refresh_embeddings(&mut self) {
        for k in 0..self.size {
            let n = self.ema_cluster_size[k];
            if n > 0.0 {
                let denom = n + LAPLACE_EPS;
                for j in 0..self.dim {
                    self.embeddings[k * self.dim + j] = f32_exact(self.ema_embed_sum[k * self.dim + j] / denom);
                }
            }
        }
    }

    /// Replaces every code whose EMA cluster size is below `threshold` by a
    /// row of `z` drawn uniformly with `rng.random_range(0..B)`, visiting
    /// codes in index order. Restarted codes get EMA stats `(1, row)`.
    /// Returns the number of restarted codes.
    pub fn restart_unused(&mut self, z: &[f64], threshold: f64, rng: &mut impl Rng) -> Result<usize> {
        if z.is_empty() || !z.len().is_multiple_of(self.dim) {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: z.len(),
            });
        }
        let rows = z.len() / self.dim;
        let mut restarted = 0;
        for k in 0..self.size {
            if self.ema_cluster_size[k] < threshold {
                let r = rng.random_range(0..rows);
                for j in 0..self.dim {
                    let v = f32_exact(z[r * self.dim + j]);
                    self.embeddings[k * self.dim + j] = v;
                    self.ema_embed_sum[k * self.dim + j] = v;
                }
                self.ema_cluster_size[k] = 1.0;
                restarted += 1;
            }
        }
        Ok(restarted)
    }

    /// SHA-256 over `K`, `n_z` and the embeddings as serialized.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.size as u32).to_le_bytes());
        h.update((self.dim as u32).to_le_bytes());
        for v in &self.embeddings {
            h.update((*v as f32).to_le_bytes());
        }
        h.finalize().into()
    }

    /// Writes the `RQCB` format.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        io::write_u32(w, 1)?;
        io::write_u32(w, self.size as u32)?;
        io::write_u32(w, self.dim as u32)?;
        for v in &self.embeddings {
            io::write_f32(w, *v)?;
        }
        for v in &self.ema_cluster_size {
            io::write_f64(w, *v)?;
        }
        for v in &self.ema_embed_sum {
            io::write_f32(w, *v)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        io::expect_magic(r, MAGIC)?;
        io::expect_version(r, "RQCB")?;
        let size = io::read_u32(r)?;
        let dim = io::read_u32(r)?;
        if size == 0 || dim == 0 {
            return Err(Error::Format("RQCB with zero K or n_z".into()));
        }
        let n = checked_len(&[size, dim], MAX_ELEMENTS)?;
        let (size, dim) = (size as usize, dim as usize);
        let embeddings = (0..n).map(|_| io::read_f32(r)).collect::<Result<Vec<_>>>()?;
        let ema_cluster_size = (0..size).map(|_| io::read_f64(r)).collect::<Result<Vec<_>>>()?;
        let ema_embed_sum = (0..n).map(|_| io::read_f32(r)).collect::<Result<Vec<_>>>()?;
        if embeddings.iter().chain(&ema_embed_sum).any(|v| !v.is_finite())
            || ema_cluster_size.iter().any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Format("RQCB contains invalid values".into()));
        }
        Ok(Self {
            size,
            dim,
            embeddings,
            ema_cluster_size,
            ema_embed_sum,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }
}

/// `K` distinct indices from `0..B` via `rand::seq::index::sample`, in the
/// order drawn.
pub fn select_init_rows(rows: usize, size: usize, rng: &mut impl Rng) -> Vec<usize> {
    rand::seq::index::sample(rng, rows, size).into_vec()
}

/// Per-depth code histogram (`D × K`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UsageHistogram {
    depth: usize,
    size: usize,
    counts: Vec<u64>,
}

impl UsageHistogram {
    pub fn new(depth: usize, size: usize) -> Self {
        Self {
            depth,
            size,
            counts: vec![0; depth * size],
        }
    }

    /// Records one depth-ordered code stack.
    pub fn record(&mut self, codes: &[usize]) {
        for (d, &k) in codes.iter().enumerate().take(self.depth) {
            self.counts[d * self.size + k] += 1;
        }
    }

    pub fn counts(&self, d: usize) -> &[u64] {
        &self.counts[d * self.size..(d + 1) * self.size]
    }

    pub fn total(&self, d: usize) -> u64 {
        self.counts(d).iter().sum()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Shannon entropy in bits of the code distribution at depth `d`.
    pub fn entropy_bits(&self, d: usize) -> f64 {
        let total = self.total(d) as f64;
        if total == 0.0 {
            return 0.0;
        }
        self.counts(d)
            .iter()
            .filter(|c| **c > 0)
            .map(|&c| {
                let p = c as f64 / total;
                -p * p.log2()
            })
            .sum()
    }

    pub fn used_codes(&self, d: usize) -> usize {
        self.counts(d).iter().filter(|c| **c > 0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn two_code() -> Codebook {
        Codebook::from_embeddings(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn exact_match_and_tie_break() {
        let cb = two_code();
        assert_eq!(cb.nearest_code(&[3.0, 4.0]).unwrap(), 1);
        assert_eq!(cb.nearest_code(&[1.5, 2.0]).unwrap(), 0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let cb = two_code();
        assert!(matches!(
            cb.nearest_code(&[1.0]),
            Err(Error::Dimension { expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn zero_decay_gives_batch_means() {
        let mut cb = two_code();
        let z = [1.0, 1.0, 3.0, 3.0, 10.0, 0.0];
        cb.ema_update(&z, &[0, 0, 1], 0.0).unwrap();
        let scale = |n: f64| n / (n + LAPLACE_EPS);
        assert!((cb.embedding(0)[0] - 2.0 * scale(2.0)).abs() < 1e-6);
        assert!((cb.embedding(0)[1] - 2.0 * scale(2.0)).abs() < 1e-6);
        assert!((cb.embedding(1)[0] - 10.0 * scale(1.0)).abs() < 1e-5);
        assert_eq!(cb.ema_cluster_size(), &[2.0, 1.0]);
    }

    #[test]
    fn unassigned_code_keeps_its_embedding() {
        let mut cb = two_code();
        cb.ema_update(&[0.1, 0.0], &[0], 0.99).unwrap();
        // 0.99*(3,4) / (0.99 + eps)
        let e = cb.embedding(1);
        assert!((e[0] - 3.0).abs() < 1e-4 && (e[1] - 4.0).abs() < 1e-4);
    }

    #[test]
    fn hand_computed_ema_step() {
        // K=2, B=3, decay=0.5, starting from stats (1, e(k)).
        let mut cb = Codebook::from_embeddings(2, 1, vec![0.0, 4.0]).unwrap();
        cb.ema_update(&[1.0, 2.0, 6.0], &[0, 0, 1], 0.5).unwrap();
        // size0 = 0.5 + 0.5*2 = 1.5 ; sum0 = 0 + 0.5*3 = 1.5
        // size1 = 0.5 + 0.5*1 = 1.0 ; sum1 = 2 + 0.5*6 = 5.0
        assert_eq!(cb.ema_cluster_size(), &[1.5, 1.0]);
        assert_eq!(cb.ema_embed_sum(), &[1.5, 5.0]);
        assert!((cb.embedding(0)[0] - 1.5 / (1.5 + LAPLACE_EPS)).abs() < 1e-7);
        assert!((cb.embedding(1)[0] - 5.0 / (1.0 + LAPLACE_EPS)).abs() < 1e-6);
    }

    #[test]
    fn ema_rejects_bad_assignment_and_decay() {
        let mut cb = two_code();
        assert!(matches!(
            cb.ema_update(&[0.0, 0.0], &[2], 0.5),
            Err(Error::Index { index: 2, bound: 2 })
        ));
        assert!(cb.ema_update(&[0.0, 0.0], &[0], 1.0).is_err());
    }

    #[test]
    fn restart_cases() {
        let z = [5.0, 5.0, 6.0, 6.0, 7.0, 7.0];
        let mut cb = two_code();
        let before = cb.clone();
        assert_eq!(cb.restart_unused(&z, 0.5, &mut seeded(1)).unwrap(), 0);
        assert_eq!(cb, before);

        let n = cb.restart_unused(&z, 10.0, &mut seeded(1)).unwrap();
        assert_eq!(n, 2);
        for k in 0..2 {
            let e = cb.embedding(k);
            assert!(z.chunks(2).any(|row| row == e));
            assert_eq!(cb.ema_cluster_size()[k], 1.0);
        }
        let mut again = two_code();
        again.restart_unused(&z, 10.0, &mut seeded(1)).unwrap();
        assert_eq!(cb, again);
    }

    #[test]
    fn init_requires_enough_rows() {
        let err = Codebook::init_from_samples(&[0.0; 6], 2, 4, &mut seeded(0)).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientData {
                needed: 4,
                available: 3
            }
        ));
    }

    #[test]
    fn init_with_b_equal_k_is_a_permutation() {
        let z: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let cb = Codebook::init_from_samples(&z, 2, 5, &mut seeded(3)).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..5).map(|k| cb.embedding(k).to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want: Vec<Vec<f64>> = z.chunks(2).map(<[f64]>::to_vec).collect();
        assert_eq!(rows, want);
        let again = Codebook::init_from_samples(&z, 2, 5, &mut seeded(3)).unwrap();
        assert_eq!(cb, again);
    }

    #[test]
    fn init_selection_never_repeats() {
        for seed in 0..50 {
            let picks = select_init_rows(40, 17, &mut seeded(seed));
            let mut seen = [false; 40];
            for p in picks {
                assert!(!seen[p], "row {p} chosen twice");
                seen[p] = true;
            }
        }
    }

    #[test]
    fn histogram_entropy() {
        let mut h = UsageHistogram::new(2, 4);
        for k in 0..4 {
            h.record(&[k, 0]);
        }
        assert_eq!(h.total(0), 4);
        assert_eq!(h.total(1), 4);
        assert!((h.entropy_bits(0) - 2.0).abs() < 1e-12);
        assert_eq!(h.entropy_bits(1), 0.0);
        assert_eq!(h.used_codes(1), 1);
    }
}
