//! Greedy residual quantization of single vectors.
//!
//! Starting from `r_0 = z`, depth `d` picks `k_d = argmin_k ||r_{d-1} − e(k)||²`
//! and sets `r_d = r_{d-1} − e(k_d)`. The partial sum `ẑ^(d)` adds the first
//! `d` chosen embeddings, so `ẑ^(D) + r_D = z`.

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use rand::Rng;
use sha2::{Digest, Sha256};

/// Source of the codebook used at each quantization depth.
pub trait CodebookStack: Sync {
    /// Codebook for 0-based depth `d`.
    fn at_depth(&self, d: usize) -> Result<&Codebook>;
    /// Codes per depth.
    fn codes_per_depth(&self) -> usize;
    fn dim(&self) -> usize;
    /// `None` when any depth can be used (one shared codebook).
    fn max_depth(&self) -> Option<usize>;
    /// Content hash identifying the embeddings of every depth.
    fn stack_hash(&self) -> [u8; 32];
}

impl CodebookStack for Codebook {
    fn at_depth(&self, _d: usize) -> Result<&Codebook> {
        Ok(self)
    }
    fn codes_per_depth(&self) -> usize {
        self.size()
    }
    fn dim(&self) -> usize {
        Codebook::dim(self)
    }
    fn max_depth(&self) -> Option<usize> {
        None
    }
    fn stack_hash(&self) -> [u8; 32] {
        self.content_hash()
    }
}

/// One separate codebook per depth (the non-shared ablation).
#[derive(Clone, Debug, PartialEq)]
pub struct PerDepthCodebooks {
    books: Vec<Codebook>,
}

impl PerDepthCodebooks {
    pub fn new(books: Vec<Codebook>) -> Result<Self> {
        let first = books
            .first()
            .ok_or_else(|| Error::Parameter("per-depth codebooks need at least one depth".into()))?;
        if books.iter().any(|b| b.size() != first.size() || b.dim() != first.dim()) {
            return Err(Error::Parameter("per-depth codebooks must share K and n_z".into()));
        }
        Ok(Self { books })
    }

    pub fn books(&self) -> &[Codebook] {
        &self.books
    }

    pub fn books_mut(&mut self) -> &mut [Codebook] {
        &mut self.books
    }
}

impl CodebookStack for PerDepthCodebooks {
    fn at_depth(&self, d: usize) -> Result<&Codebook> {
        self.books.get(d).ok_or(Error::DepthRange {
            requested: d + 1,
            available: self.books.len(),
        })
    }
    fn codes_per_depth(&self) -> usize {
        self.books[0].size()
    }
    fn dim(&self) -> usize {
        self.books[0].dim()
    }
    fn max_depth(&self) -> Option<usize> {
        Some(self.books.len())
    }
    fn stack_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for b in &self.books {
            h.update(b.content_hash());
        }
        h.finalize().into()
    }
}

/// Either a shared codebook or one codebook per depth.
#[derive(Clone, Debug, PartialEq)]
pub enum Quantizer {
    Shared(Codebook),
    PerDepth(PerDepthCodebooks),
}

impl Quantizer {
    pub fn codebooks(&self) -> Vec<&Codebook> {
        match self {
            Quantizer::Shared(cb) => vec![cb],
            Quantizer::PerDepth(p) => p.books().iter().collect(),
        }
    }

    pub fn codebooks_mut(&mut self) -> Vec<&mut Codebook> {
        match self {
            Quantizer::Shared(cb) => vec![cb],
            Quantizer::PerDepth(p) => p.books_mut().iter_mut().collect(),
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, Quantizer::Shared(_))
    }

    /// Index of the codebook that depth `d` reads from.
    pub fn book_index(&self, d: usize) -> usize {
        match self {
            Quantizer::Shared(_) => 0,
            Quantizer::PerDepth(_) => d,
        }
    }
}

impl CodebookStack for Quantizer {
    fn at_depth(&self, d: usize) -> Result<&Codebook> {
        match self {
            Quantizer::Shared(cb) => Ok(cb),
            Quantizer::PerDepth(p) => p.at_depth(d),
        }
    }
    fn codes_per_depth(&self) -> usize {
        match self {
            Quantizer::Shared(cb) => cb.size(),
            Quantizer::PerDepth(p) => p.codes_per_depth(),
        }
    }
    fn dim(&self) -> usize {
        match self {
            Quantizer::Shared(cb) => cb.dim(),
            Quantizer::PerDepth(p) => CodebookStack::dim(p),
        }
    }
    fn max_depth(&self) -> Option<usize> {
        match self {
            Quantizer::Shared(_) => None,
            Quantizer::PerDepth(p) => p.max_depth(),
        }
    }
    fn stack_hash(&self) -> [u8; 32] {
        match self {
            Quantizer::Shared(cb) => cb.stack_hash(),
            Quantizer::PerDepth(p) => p.stack_hash(),
        }
    }
}

/// Codes, residual trajectory `r_0..r_D` and partial sums `ẑ^(1)..ẑ^(D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RqResult {
    pub codes: Vec<usize>,
    pub residuals: Vec<Vec<f64>>,
    pub partial_sums: Vec<Vec<f64>>,
}

impl RqResult {
    pub fn depth(&self) -> usize {
        self.codes.len()
    }

    /// `ẑ^(D)`.
    pub fn quantized(&self) -> &[f64] {
        self.partial_sums.last().expect("depth >= 1")
    }

    /// `||r_d||²` for `d = 1..=D`.
    pub fn squared_errors(&self) -> Vec<f64> {
        self.residuals[1..]
            .iter()
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect()
    }
}

fn check_depth<C: CodebookStack + ?Sized>(stack: &C, depth: usize) -> Result<()> {
    if depth == 0 {
        return Err(Error::Parameter("quantization depth must be >= 1".into()));
    }
    if let Some(max) = stack.max_depth() {
        if depth > max {
            return Err(Error::DepthRange {
                requested: depth,
                available: max,
            });
        }
    }
    Ok(())
}

fn encode_with<C, F>(z: &[f64], stack: &C, depth: usize, mut choose: F) -> Result<RqResult>
where
    C: CodebookStack + ?Sized,
    F: FnMut(&Codebook, &[f64]) -> Result<usize>,
{
    check_depth(stack, depth)?;
    if z.len() != stack.dim() {
        return Err(Error::Dimension {
            expected: stack.dim(),
            actual: z.len(),
        });
    }
    let mut codes = Vec::with_capacity(depth);
    let mut residuals = Vec::with_capacity(depth + 1);
    let mut partial_sums = Vec::with_capacity(depth);
    residuals.push(z.to_vec());
    let mut acc = vec![0.0; z.len()];
    for d in 0..depth {
        let cb = stack.at_depth(d)?;
        let prev = &residuals[d];
        let k = choose(cb, prev)?;
        let e = cb.embedding(k);
        let next: Vec<f64> = prev.iter().zip(e).map(|(r, e)| r - e).collect();
        for (a, e) in acc.iter_mut().zip(e) {
            *a += e;
        }
        codes.push(k);
        residuals.push(next);
        partial_sums.push(acc.clone());
    }
    Ok(RqResult {
        codes,
        residuals,
        partial_sums,
    })
}

/// Deterministic greedy residual quantization to `depth` codes.
pub fn rq_encode<C: CodebookStack + ?Sized>(z: &[f64], stack: &C, depth: usize) -> Result<RqResult> {
    encode_with(z, stack, depth, |cb, r| cb.nearest_code(r))
}

/// `ẑ^(d) = Σ_{i<d} e(codes[i])`; `d = 0` gives the zero vector.
pub fn rq_decode<C: CodebookStack + ?Sized>(codes: &[usize], stack: &C, d: usize) -> Result<Vec<f64>> {
    if d > codes.len() {
        return Err(Error::DepthRange {
            requested: d,
            available: codes.len(),
        });
    }
    let mut acc = vec![0.0; stack.dim()];
    for (i, &k) in codes.iter().take(d).enumerate() {
        let cb = stack.at_depth(i)?;
        if k >= cb.size() {
            return Err(Error::Index {
                index: k,
                bound: cb.size(),
            });
        }
        for (a, e) in acc.iter_mut().zip(cb.embedding(k)) {
            *a += e;
        }
    }
    Ok(acc)
}

/// `Q_τ(k | r) ∝ exp(−||r − e(k)||² / τ)` over all `K` codes, evaluated
/// with the minimum distance subtracted.
pub fn code_distribution(cb: &Codebook, r: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let dist = cb.squared_distances(r)?;
    let min = dist.iter().copied().fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = dist.iter().map(|d| (-(d - min) / tau).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    Ok(p)
}

/// Inverse-CDF draw: `u = rng.random::<f64>() · Σw`, first index whose
/// running sum exceeds `u`.
pub(crate) fn sample_index(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Residual quantization where each code is drawn from `Q_τ(·|r_{d−1})`.
/// `τ = 0` is the deterministic [`rq_encode`].
pub fn rq_encode_stochastic<C: CodebookStack + ?Sized>(
    z: &[f64],
    stack: &C,
    depth: usize,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<RqResult> {
    if tau == 0.0 {
        return rq_encode(z, stack, depth);
    }
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be >= 0, got {tau}")));
    }
    encode_with(z, stack, depth, |cb, r| {
        let p = code_distribution(cb, r, tau)?;
        Ok(sample_index(&p, rng))
    })
}

/// Temperature-softened target distribution over codes.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabel {
    pub probabilities: Vec<f64>,
    pub tau: f64,
}

/// `Q_τ(·|r)`; use [`one_hot`] for the `τ = 0` limit.
pub fn soft_label(r: &[f64], cb: &Codebook, tau: f64) -> Result<SoftLabel> {
    Ok(SoftLabel {
        probabilities: code_distribution(cb, r, tau)?,
        tau,
    })
}

pub fn one_hot(k: usize, size: usize) -> Vec<f64> {
    let mut v = vec![0.0; size];
    v[k] = 1.0;
    v
}

/// Tuples above this count are sampled instead of enumerated.
pub const ENUMERATION_LIMIT: u64 = 1 << 20;

/// Number of distinct partial sums `ẑ^(D)` reachable from code tuples in
/// `[K]^D`. Enumerates every tuple when `K^D ≤ ENUMERATION_LIMIT`, otherwise
/// draws `sample_count` uniform tuples. Sums closer than `1e-9` (relative)
/// count as one output.
pub fn capacity_check<C: CodebookStack + ?Sized>(
    stack: &C,
    depth: usize,
    sample_count: usize,
    rng: &mut impl Rng,
) -> Result<usize> {
    check_depth(stack, depth)?;
    let k = stack.codes_per_depth();
    let total = (k as u64).checked_pow(depth as u32);
    let tuples: Vec<Vec<usize>> = match total {
        Some(t) if t <= ENUMERATION_LIMIT => (0..t)
            .map(|mut idx| {
                let mut tuple = vec![0; depth];
                for slot in tuple.iter_mut().rev() {
                    *slot = (idx % k as u64) as usize;
                    idx /= k as u64;
                }
                tuple
            })
            .collect(),
        _ => (0..sample_count)
            .map(|_| (0..depth).map(|_| rng.random_range(0..k)).collect())
            .collect(),
    };
    let mut sums = tuples
        .iter()
        .map(|t| rq_decode(t, stack, depth))
        .collect::<Result<Vec<_>>>()?;
    sums.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let close = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + x.abs().max(y.abs())))
    };
    let mut distinct = 0;
    let mut last: Option<&Vec<f64>> = None;
    for s in &sums {
        if last.is_none_or(|l| !close(l, s)) {
            distinct += 1;
            last = Some(s);
        }
    }
    Ok(distinct)
}
