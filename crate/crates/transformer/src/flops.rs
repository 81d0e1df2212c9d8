//! Attention cost of the two architectures: closed-form causal counts,
//! asymptotic predictions and tallies measured on a forward pass.

use crate::config::{ModelConfig, NaiveConfig};
use crate::error::Result;
use crate::model::RqTransformer;
use crate::naive::NaiveTransformer;
use rand::Rng;
use rq_autodiff::Tape;
use rq_core::rng;
use serde::{Deserialize, Serialize};

/// Query/key pairs a causal mask admits in a sequence of length `l`.
pub fn causal_pairs(l: usize) -> u64 {
    (l as u64) * (l as u64 + 1) / 2
}

/// Exact attention-score MACs per sequence: `(spatial, depth)`.
pub fn rq_attention_macs(cfg: &ModelConfig) -> (u64, u64) {
    let n_e = cfg.n_e as u64;
    let spatial = cfg.n_spatial as u64 * causal_pairs(cfg.spatial_len()) * n_e;
    let depth = cfg.n_depth as u64 * cfg.t as u64 * causal_pairs(cfg.d) * n_e;
    (spatial, depth)
}

/// Exact attention-score MACs per sequence of the unfolded model.
pub fn naive_attention_macs(cfg: &NaiveConfig) -> u64 {
    cfg.n_layers as u64 * causal_pairs(cfg.seq_len()) * cfg.n_e as u64
}

/// `(N_s·T² + N_d·T·D²) / (N·(T·D)²)`.
pub fn predicted_ratio(cfg: &ModelConfig, n_layers: usize) -> f64 {
    let (t, d) = (cfg.t as f64, cfg.d as f64);
    (cfg.n_spatial as f64 * t * t + cfg.n_depth as f64 * t * d * d) / (n_layers as f64 * (t * d).powi(2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub n_spatial: usize,
    pub n_depth: usize,
    pub n_layers: usize,
    pub t: usize,
    pub d: usize,
    pub n_e: usize,
    pub predicted_ratio: f64,
    pub exact_spatial: u64,
    pub exact_depth: u64,
    pub exact_naive: u64,
    pub measured_spatial: u64,
    pub measured_depth: u64,
    pub measured_naive: u64,
    pub measured_ratio: f64,
    /// `|measured / predicted − 1|`.
    pub relative_error: f64,
    /// Measured score and value tallies equal the closed forms.
    pub exact_match: bool,
}

/// Runs one forward pass of each architecture on a random sequence and
/// compares the tallies with the closed forms. The naive model has
/// `N = N_s + N_d` layers of the same width.
pub fn flop_report(cfg: &ModelConfig, seed: u64) -> Result<FlopReport> {
    let naive_cfg = NaiveConfig::matched(cfg);
    let mut r = rng::stream(seed, &[0]);
    let seq: Vec<usize> = (0..cfg.t * cfg.d).map(|_| r.random_range(0..cfg.k)).collect();
    let classes = cfg.condition_classes.map(|_| vec![0]);

    let table = vec![0.0; cfg.code_tables * cfg.k * cfg.n_z];
    let model = RqTransformer::new(cfg.clone(), table, seed)?;
    let mut tape = Tape::new();
    let vars = model.params().attach(&mut tape);
    let f = model.forward(&mut tape, &vars, std::slice::from_ref(&seq), classes.as_deref(), None)?;

    let naive = NaiveTransformer::new(naive_cfg.clone(), seed)?;
    let mut tape = Tape::new();
    let vars = naive.params().attach(&mut tape);
    let (_, naive_macs) = naive.forward(&mut tape, &vars, std::slice::from_ref(&seq), classes.as_deref())?;

    let (exact_spatial, exact_depth) = rq_attention_macs(cfg);
    let exact_naive = naive_attention_macs(&naive_cfg);
    let (ms, md) = (f.macs.spatial, f.macs.depth);
    let exact_match = ms.attention_scores == exact_spatial
        && ms.attention_values == exact_spatial
        && md.attention_scores == exact_depth
        && md.attention_values == exact_depth
        && naive_macs.attention_scores == exact_naive
        && naive_macs.attention_values == exact_naive;
    let measured_ratio = (ms.attention_scores + md.attention_scores) as f64 / naive_macs.attention_scores as f64;
    let predicted = predicted_ratio(cfg, naive_cfg.n_layers);
    Ok(FlopReport {
        n_spatial: cfg.n_spatial,
        n_depth: cfg.n_depth,
        n_layers: naive_cfg.n_layers,
        t: cfg.t,
        d: cfg.d,
        n_e: cfg.n_e,
        predicted_ratio: predicted,
        exact_spatial,
        exact_depth,
        exact_naive,
        measured_spatial: ms.attention_scores,
        measured_depth: md.attention_scores,
        measured_naive: naive_macs.attention_scores,
        measured_ratio,
        relative_error: (measured_ratio / predicted - 1.0).abs(),
        exact_match,
    })
}
