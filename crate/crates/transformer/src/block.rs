//! Pre-norm transformer blocks: `x + Attn(LN(x))`, then `x + FFN(LN(x))`
//! with a `4·n_e` GELU hidden layer.

use crate::error::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rq_autodiff::{kernels, AttentionLayout, ParamId, ParamSet, Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const INIT_STD: f64 = 0.02;

pub(crate) fn normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("consistent shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct LayerNormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormIds {
    pub fn register(params: &mut ParamSet, prefix: &str, n: usize) -> Self {
        Self {
            gain: params.register(format!("{prefix}.gain"), Tensor::filled(vec![n], 1.0)),
            bias: params.register(format!("{prefix}.bias"), Tensor::zeros(vec![n])),
        }
    }

    pub fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, vars[self.gain.0], vars[self.bias.0], LN_EPS)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        n_in: usize,
        n_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = params.register(format!("{prefix}.weight"), normal(&[n_in, n_out], rng));
        let bias = bias.then(|| params.register(format!("{prefix}.bias"), Tensor::zeros(vec![n_out])));
        Self { weight, bias }
    }

    pub fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[self.weight.0])?;
        Ok(match self.bias {
            Some(b) => tape.add_bias(y, vars[b.0])?,
            None => y,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct BlockIds {
    pub ln1: LayerNormIds,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNormIds,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Dropout masks for one forward pass; `None` disables dropout.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

pub(crate) fn dropout(tape: &mut Tape, x: Var, drop: &mut Option<Dropout<'_>>) -> Result<Var> {
    let Some(d) = drop else { return Ok(x) };
    if d.rate == 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - d.rate);
    let n = tape.value(x).numel();
    let mask: Vec<f64> = (0..n)
        .map(|_| if d.rng.random::<f64>() < d.rate { 0.0 } else { keep })
        .collect();
    Ok(tape.mul_const(x, &Tensor::new(shape, mask)?)?)
}

impl BlockIds {
    pub fn register(params: &mut ParamSet, prefix: &str, n_e: usize, rng: &mut impl Rng) -> Self {
        let hidden = 4 * n_e;
        Self {
            ln1: LayerNormIds::register(params, &format!("{prefix}.ln1"), n_e),
            q: Linear::register(params, &format!("{prefix}.attn.q"), n_e, n_e, true, rng),
            k: Linear::register(params, &format!("{prefix}.attn.k"), n_e, n_e, true, rng),
            v: Linear::register(params, &format!("{prefix}.attn.v"), n_e, n_e, true, rng),
            o: Linear::register(params, &format!("{prefix}.attn.o"), n_e, n_e, true, rng),
            ln2: LayerNormIds::register(params, &format!("{prefix}.ln2"), n_e),
            fc1: Linear::register(params, &format!("{prefix}.ffn.fc1"), n_e, hidden, true, rng),
            fc2: Linear::register(params, &format!("{prefix}.ffn.fc2"), hidden, n_e, true, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        layout: AttentionLayout,
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        let a = self.ln1.apply(tape, vars, x)?;
        let q = self.q.apply(tape, vars, a)?;
        let k = self.k.apply(tape, vars, a)?;
        let v = self.v.apply(tape, vars, a)?;
        let att = tape.causal_attention(q, k, v, layout)?;
        let o = self.o.apply(tape, vars, att)?;
        let o = dropout(tape, o, drop)?;
        let x = tape.add(x, o)?;
        let m = self.ln2.apply(tape, vars, x)?;
        let hidden = self.fc1.apply(tape, vars, m)?;
        let hidden = tape.gelu(hidden);
        let f = self.fc2.apply(tape, vars, hidden)?;
        let f = dropout(tape, f, drop)?;
        Ok(tape.add(x, f)?)
    }
}

/// A stack of blocks followed by a final layer norm.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct StackIds {
    pub blocks: Vec<BlockIds>,
    pub ln_f: LayerNormIds,
}

impl StackIds {
    pub fn register(params: &mut ParamSet, prefix: &str, layers: usize, n_e: usize, rng: &mut impl Rng) -> Self {
        let blocks = (0..layers)
            .map(|i| BlockIds::register(params, &format!("{prefix}.block{i}"), n_e, rng))
            .collect();
        let ln_f = LayerNormIds::register(params, &format!("{prefix}.ln_f"), n_e);
        Self { blocks, ln_f }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        mut x: Var,
        layout: AttentionLayout,
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(tape, vars, x, layout, drop)?;
        }
        self.ln_f.apply(tape, vars, x)
    }

    pub fn weights(&self, params: &ParamSet, heads: usize) -> StackWeights {
        let t = |id: ParamId| params.get(id).data().to_vec();
        let lin = |l: &Linear| LinearWeights {
            w: t(l.weight),
            b: l.bias.map(t),
            n_out: params.get(l.weight).cols(),
        };
        let ln = |l: &LayerNormIds| (t(l.gain), t(l.bias));
        StackWeights {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    ln1: ln(&b.ln1),
                    q: lin(&b.q),
                    k: lin(&b.k),
                    v: lin(&b.v),
                    o: lin(&b.o),
                    ln2: ln(&b.ln2),
                    fc1: lin(&b.fc1),
                    fc2: lin(&b.fc2),
                })
                .collect(),
            ln_f: ln(&self.ln_f),
            heads,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LinearWeights {
    pub w: Vec<f64>,
    pub b: Option<Vec<f64>>,
    pub n_out: usize,
}

impl LinearWeights {
    /// `x·W + b` for `rows` input rows.
    pub fn apply(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let n_in = self.w.len() / self.n_out;
        let mut y = kernels::matmul(x, &self.w, rows, n_in, self.n_out);
        if let Some(b) = &self.b {
            for row in y.chunks_exact_mut(self.n_out) {
                row.iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
            }
        }
        y
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BlockWeights {
    ln1: (Vec<f64>, Vec<f64>),
    q: LinearWeights,
    k: LinearWeights,
    v: LinearWeights,
    o: LinearWeights,
    ln2: (Vec<f64>, Vec<f64>),
    fc1: LinearWeights,
    fc2: LinearWeights,
}

/// Keys and values of every position seen so far, for one sequence and one
/// block.
#[derive(Clone, Debug, Default)]
pub(crate) struct KvCache {
    keys: Vec<f64>,
    values: Vec<f64>,
}

pub(crate) fn layer_norm_rows(x: &[f64], (gain, bias): &(Vec<f64>, Vec<f64>)) -> Vec<f64> {
    let n = gain.len();
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        kernels::layer_norm_row(row, o, LN_EPS);
        for ((v, g), b) in o.iter_mut().zip(gain).zip(bias) {
            *v = *v * g + b;
        }
    }
    out
}

/// Tape-free copy of a stack for incremental decoding.
#[derive(Clone, Debug)]
pub(crate) struct StackWeights {
    blocks: Vec<BlockWeights>,
    ln_f: (Vec<f64>, Vec<f64>),
    heads: usize,
}

impl StackWeights {
    /// Fresh caches for `batch` sequences: `caches[layer][sequence]`.
    pub fn empty_caches(&self, batch: usize) -> Vec<Vec<KvCache>> {
        vec![vec![KvCache::default(); batch]; self.blocks.len()]
    }

    /// Feeds one new position per sequence (`x` is `batch × n_e`) and returns
    /// the final-normed outputs at those positions.
    pub fn step(&self, x: &[f64], caches: &mut [Vec<KvCache>]) -> Vec<f64> {
        let n = self.ln_f.0.len();
        let batch = x.len() / n;
        let hd = n / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut x = x.to_vec();
        for (b, layer) in self.blocks.iter().zip(caches.iter_mut()) {
            let a = layer_norm_rows(&x, &b.ln1);
            let q = b.q.apply(&a, batch);
            let k = b.k.apply(&a, batch);
            let v = b.v.apply(&a, batch);
            let mut att = vec![0.0; batch * n];
            for (s, cache) in layer.iter_mut().enumerate() {
                cache.keys.extend_from_slice(&k[s * n..(s + 1) * n]);
                cache.values.extend_from_slice(&v[s * n..(s + 1) * n]);
                let len = cache.keys.len() / n;
                let mut scores = vec![0.0; len];
                for h in 0..self.heads {
                    let cols = h * hd..(h + 1) * hd;
                    let qi = &q[s * n..][cols.clone()];
                    for (j, sc) in scores.iter_mut().enumerate() {
                        *sc = kernels::dot(qi, &cache.keys[j * n..][cols.clone()]) * scale;
                    }
                    kernels::softmax_in_place(&mut scores);
                    let out = &mut att[s * n..][cols.clone()];
                    for (j, p) in scores.iter().enumerate() {
                        for (o, vv) in out.iter_mut().zip(&cache.values[j * n..][cols.clone()]) {
                            *o += p * vv;
                        }
                    }
                }
            }
            let o = b.o.apply(&att, batch);
            x.iter_mut().zip(&o).for_each(|(xi, oi)| *xi += oi);
            let m = layer_norm_rows(&x, &b.ln2);
            let mut hidden = b.fc1.apply(&m, batch);
            hidden.iter_mut().for_each(|v| *v = kernels::gelu(*v));
            let f = b.fc2.apply(&hidden, batch);
            x.iter_mut().zip(&f).for_each(|(xi, fi)| *xi += fi);
        }
        layer_norm_rows(&x, &self.ln_f)
    }
}
