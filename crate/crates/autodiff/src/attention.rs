//! Fused multi-head causal self-attention.
//!
//! Rows of `q`, `k`, `v` are laid out as `groups` independent sequences of
//! `seq_len` rows each; every row has `heads * head_dim` columns. Query `i`
//! of a sequence attends to keys `0..=i` of the same sequence.

use crate::kernels::dot;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub groups: usize,
    pub seq_len: usize,
    pub heads: usize,
}

impl AttentionLayout {
    pub fn rows(&self) -> usize {
        self.groups * self.seq_len
    }

    /// Number of (query, key) pairs visited per head per sequence.
    pub fn causal_pairs(&self) -> u64 {
        let l = self.seq_len as u64;
        l * (l + 1) / 2
    }

    fn probs_len(&self) -> usize {
        self.groups * self.heads * self.causal_pairs() as usize
    }
}

/// Exact multiply-accumulate tallies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounter {
    /// Dense projections (`matmul`).
    pub matmul: u64,
    /// Query-key score products.
    pub attention_scores: u64,
    /// Probability-weighted value sums.
    pub attention_values: u64,
}

impl MacCounter {
    pub fn attention(&self) -> u64 {
        self.attention_scores + self.attention_values
    }

    pub fn since(&self, earlier: &MacCounter) -> MacCounter {
        MacCounter {
            matmul: self.matmul - earlier.matmul,
            attention_scores: self.attention_scores - earlier.attention_scores,
            attention_values: self.attention_values - earlier.attention_values,
        }
    }

    pub fn add(&mut self, other: &MacCounter) {
        self.matmul += other.matmul;
        self.attention_scores += other.attention_scores;
        self.attention_values += other.attention_values;
    }

    /// Counts one causal attention call of the given layout and width.
    pub fn record_attention(&mut self, layout: &AttentionLayout, width: usize) {
        let per = layout.groups as u64 * layout.causal_pairs() * width as u64;
        self.attention_scores += per;
        self.attention_values += per;
    }
}

/// Offset of the probability row for query `i` inside one (group, head) block.
fn tri_offset(i: usize) -> usize {
    i * (i + 1) / 2
}

pub(crate) fn forward(q: &[f64], k: &[f64], v: &[f64], width: usize, layout: &AttentionLayout) -> (Vec<f64>, Vec<f64>) {
    let AttentionLayout { groups, seq_len, heads } = *layout;
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let block = tri_offset(seq_len);
    let mut out = vec![0.0; groups * seq_len * width];
    let mut probs = vec![0.0; layout.probs_len()];
    for g in 0..groups {
        let base = g * seq_len;
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let pblock = &mut probs[(g * heads + h) * block..(g * heads + h + 1) * block];
            for i in 0..seq_len {
                let qi = &q[(base + i) * width..][cols.clone()];
                let row = &mut pblock[tri_offset(i)..tri_offset(i) + i + 1];
                for (j, p) in row.iter_mut().enumerate() {
                    *p = dot(qi, &k[(base + j) * width..][cols.clone()]) * scale;
                }
                crate::kernels::softmax_in_place(row);
                let oi = &mut out[(base + i) * width..][cols.clone()];
                for (j, p) in row.iter().enumerate() {
                    let vj = &v[(base + j) * width..][cols.clone()];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    grad_out: &[f64],
    width: usize,
    layout: &AttentionLayout,
    gq: &mut [f64],
    gk: &mut [f64],
    gv: &mut [f64],
) {
    let AttentionLayout { groups, seq_len, heads } = *layout;
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let block = tri_offset(seq_len);
    let mut dp = vec![0.0; seq_len];
    for g in 0..groups {
        let base = g * seq_len;
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let pblock = &probs[(g * heads + h) * block..(g * heads + h + 1) * block];
            for i in 0..seq_len {
                let row = &pblock[tri_offset(i)..tri_offset(i) + i + 1];
                let go = &grad_out[(base + i) * width..][cols.clone()];
                let mut weighted = 0.0;
                for (j, p) in row.iter().enumerate() {
                    let vj = &v[(base + j) * width..][cols.clone()];
                    dp[j] = dot(go, vj);
                    weighted += p * dp[j];
                    let gvj = &mut gv[(base + j) * width..][cols.clone()];
                    for (gvv, gov) in gvj.iter_mut().zip(go) {
                        *gvv += p * gov;
                    }
                }
                for (j, p) in row.iter().enumerate() {
                    let ds = p * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &k[(base + j) * width..][cols.clone()];
                    let gqi = &mut gq[(base + i) * width..][cols.clone()];
                    for (a, b) in gqi.iter_mut().zip(kj) {
                        *a += ds * b;
                    }
                    let qi = &q[(base + i) * width..][cols.clone()];
                    let gkj = &mut gk[(base + j) * width..][cols.clone()];
                    for (a, b) in gkj.iter_mut().zip(qi) {
                        *a += ds * b;
                    }
                }
            }
        }
    }
}
