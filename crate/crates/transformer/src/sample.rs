//! Incremental (key/value cached) decoding and filtered sampling for both
//! architectures.

use crate::block::{LinearWeights, StackWeights};
use crate::config::ConditionMode;
use crate::error::{Error, Result};
use crate::model::RqTransformer;
use crate::naive::NaiveTransformer;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rq_autodiff::kernels;
use rq_core::{rng, Execution};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub temperature: f64,
    /// `None` keeps all `K` codes.
    pub top_k: Option<usize>,
    pub top_p: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            top_p: 1.0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if let Some(top_k) = self.top_k {
            if top_k == 0 || top_k > k {
                return Err(Error::Config(format!("top_k {top_k} not in [1, {k}]")));
            }
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} not in (0, 1]", self.top_p)));
        }
        Ok(())
    }

    /// Filtered, renormalised distribution for one logit row.
    pub fn distribution(&self, logits: &[f64]) -> Vec<f64> {
        let mut p: Vec<f64> = logits.iter().map(|l| l / self.temperature).collect();
        kernels::softmax_in_place(&mut p);
        filter(&p, self.top_k.unwrap_or(p.len()), self.top_p)
    }
}

/// Keeps the `top_k` most probable codes, then the smallest prefix of the
/// renormalised survivors (by descending probability, ties to the lower
/// index) whose mass reaches `top_p`, and renormalises.
pub fn filter(probs: &[f64], top_k: usize, top_p: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(top_k.clamp(1, probs.len()));
    let kept: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut cum = 0.0;
    let mut cut = order.len();
    for (n, &i) in order.iter().enumerate() {
        cum += probs[i] / kept;
        if cum >= top_p - 1e-12 {
            cut = n + 1;
            break;
        }
    }
    order.truncate(cut);
    let mass: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in &order {
        out[i] = probs[i] / mass;
    }
    out
}

/// Inverse-CDF draw with one `rng.random::<f64>()`.
pub fn draw(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

fn add_row(x: &mut [f64], row: &[f64]) {
    for chunk in x.chunks_exact_mut(row.len()) {
        chunk.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
}

fn rows(table: &[f64], width: usize, idx: impl Iterator<Item = usize>) -> Vec<f64> {
    idx.flat_map(|i| table[i * width..(i + 1) * width].iter().copied())
        .collect()
}

/// Autoregressive decoder that fills `batch` sequences with
/// `choose(sequence, position, logits)` deciding each code.
pub trait Decoder: Sync {
    fn codes_per_sequence(&self) -> usize;
    fn k(&self) -> usize;
    fn condition_classes(&self) -> Option<usize>;
    fn decode(
        &self,
        batch: usize,
        classes: Option<&[usize]>,
        choose: &mut dyn FnMut(usize, usize, &[f64]) -> usize,
    ) -> Vec<Vec<usize>>;
}

/// Cached weights of an [`RqTransformer`].
pub struct RqDecoder {
    t: usize,
    d: usize,
    k: usize,
    n_e: usize,
    n_z: usize,
    shared_table: bool,
    mode: ConditionMode,
    code_table: Vec<f64>,
    spatial_proj: LinearWeights,
    spatial_pos: Vec<f64>,
    start: Vec<f64>,
    class: Option<Vec<f64>>,
    spatial: StackWeights,
    depth_proj: LinearWeights,
    depth_pos: Vec<f64>,
    depth: StackWeights,
    head: LinearWeights,
}

impl RqDecoder {
    pub fn new(model: &RqTransformer) -> Self {
        let cfg = model.config();
        let p = model.params();
        let ids = &model.ids;
        let t = |id| p.get(id).data().to_vec();
        let lin = |l: &crate::block::Linear| LinearWeights {
            w: t(l.weight),
            b: l.bias.map(t),
            n_out: p.get(l.weight).cols(),
        };
        Self {
            t: cfg.t,
            d: cfg.d,
            k: cfg.k,
            n_e: cfg.n_e,
            n_z: cfg.n_z,
            shared_table: cfg.code_tables == 1,
            mode: cfg.condition_mode,
            code_table: t(ids.code_table),
            spatial_proj: lin(&ids.spatial_proj),
            spatial_pos: t(ids.spatial_pos),
            start: t(ids.start),
            class: ids.class.map(t),
            spatial: ids.spatial.weights(p, cfg.heads),
            depth_proj: lin(&ids.depth_proj),
            depth_pos: t(ids.depth_pos),
            depth: ids.depth.weights(p, cfg.heads),
            head: lin(&ids.head),
        }
    }

    fn embedding(&self, d: usize, k: usize) -> &[f64] {
        let row = if self.shared_table { k } else { d * self.k + k };
        &self.code_table[row * self.n_z..(row + 1) * self.n_z]
    }
}

impl Decoder for RqDecoder {
    fn codes_per_sequence(&self) -> usize {
        self.t * self.d
    }

    fn k(&self) -> usize {
        self.k
    }

    fn condition_classes(&self) -> Option<usize> {
        self.class.as_ref().map(|c| c.len() / self.n_e)
    }

    fn decode(
        &self,
        batch: usize,
        classes: Option<&[usize]>,
        choose: &mut dyn FnMut(usize, usize, &[f64]) -> usize,
    ) -> Vec<Vec<usize>> {
        let (n_e, n_z, k) = (self.n_e, self.n_z, self.k);
        let mut codes = vec![Vec::with_capacity(self.t * self.d); batch];
        let mut spatial_cache = self.spatial.empty_caches(batch);
        let class_rows =
            |labels: &[usize]| rows(self.class.as_ref().expect("class table"), n_e, labels.iter().copied());
        if let (Some(labels), ConditionMode::Prepend) = (classes, self.mode) {
            self.spatial.step(&class_rows(labels), &mut spatial_cache);
        }
        let mut prev = vec![0.0; batch * n_z];
        for ti in 0..self.t {
            let x = if ti == 0 {
                match (classes, self.mode) {
                    (Some(labels), ConditionMode::Replace) => class_rows(labels),
                    _ => rows(&self.start, n_e, std::iter::repeat_n(0, batch)),
                }
            } else {
                let mut u = self.spatial_proj.apply(&prev, batch);
                add_row(&mut u, &self.spatial_pos[ti * n_e..(ti + 1) * n_e]);
                u
            };
            let h = self.spatial.step(&x, &mut spatial_cache);
            let mut depth_cache = self.depth.empty_caches(batch);
            let mut partial = vec![0.0; batch * n_z];
            let mut y = h;
            add_row(&mut y, &self.depth_pos[..n_e]);
            for di in 0..self.d {
                let o = self.depth.step(&y, &mut depth_cache);
                let logits = self.head.apply(&o, batch);
                for s in 0..batch {
                    let c = choose(s, ti * self.d + di, &logits[s * k..(s + 1) * k]);
                    codes[s].push(c);
                    let e = self.embedding(di, c);
                    partial[s * n_z..(s + 1) * n_z]
                        .iter_mut()
                        .zip(e)
                        .for_each(|(a, b)| *a += b);
                }
                if di + 1 < self.d {
                    y = self.depth_proj.apply(&partial, batch);
                    add_row(&mut y, &self.depth_pos[(di + 1) * n_e..(di + 2) * n_e]);
                }
            }
            prev = partial;
        }
        codes
    }
}

/// Cached weights of a [`NaiveTransformer`].
pub struct NaiveDecoder {
    len: usize,
    k: usize,
    n_e: usize,
    tokens: Vec<f64>,
    pos: Vec<f64>,
    start: Vec<f64>,
    class: Option<Vec<f64>>,
    stack: StackWeights,
    head: LinearWeights,
}

impl NaiveDecoder {
    pub fn new(model: &NaiveTransformer) -> Self {
        let cfg = model.config();
        let p = model.params();
        let ids = &model.ids;
        let t = |id| p.get(id).data().to_vec();
        Self {
            len: cfg.seq_len(),
            k: cfg.k,
            n_e: cfg.n_e,
            tokens: t(ids.tokens),
            pos: t(ids.pos),
            start: t(ids.start),
            class: ids.class.map(t),
            stack: ids.stack.weights(p, cfg.heads),
            head: LinearWeights {
                w: t(ids.head.weight),
                b: ids.head.bias.map(t),
                n_out: cfg.k,
            },
        }
    }
}

impl Decoder for NaiveDecoder {
    fn codes_per_sequence(&self) -> usize {
        self.len
    }

    fn k(&self) -> usize {
        self.k
    }

    fn condition_classes(&self) -> Option<usize> {
        self.class.as_ref().map(|c| c.len() / self.n_e)
    }

    fn decode(
        &self,
        batch: usize,
        classes: Option<&[usize]>,
        choose: &mut dyn FnMut(usize, usize, &[f64]) -> usize,
    ) -> Vec<Vec<usize>> {
        let (n_e, k) = (self.n_e, self.k);
        let mut codes = vec![Vec::with_capacity(self.len); batch];
        let mut cache = self.stack.empty_caches(batch);
        for i in 0..self.len {
            let x = if i == 0 {
                match classes {
                    Some(labels) => rows(self.class.as_ref().expect("class table"), n_e, labels.iter().copied()),
                    None => rows(&self.start, n_e, std::iter::repeat_n(0, batch)),
                }
            } else {
                let mut u = rows(&self.tokens, n_e, codes.iter().map(|c| c[i - 1]));
                add_row(&mut u, &self.pos[i * n_e..(i + 1) * n_e]);
                u
            };
            let o = self.stack.step(&x, &mut cache);
            let logits = self.head.apply(&o, batch);
            for (s, seq) in codes.iter_mut().enumerate() {
                seq.push(choose(s, i, &logits[s * k..(s + 1) * k]));
            }
        }
        codes
    }
}

/// Probabilities of every code of `seq` under incremental decoding with
/// the codes of `seq` fed back (teacher forcing).
pub fn teacher_forced(decoder: &dyn Decoder, seq: &[usize], class: Option<usize>) -> Vec<f64> {
    let mut out = Vec::with_capacity(seq.len() * decoder.k());
    let labels = class.map(|c| vec![c]);
    decoder.decode(1, labels.as_deref(), &mut |_, i, logits| {
        let mut p = logits.to_vec();
        kernels::softmax_in_place(&mut p);
        out.extend(p);
        seq[i]
    });
    out
}

/// Samples `count` sequences in chunks of `batch_size`; sequence `i` draws
/// from `rng::stream(seed, [i])`, so results do not depend on the chunking
/// or the execution mode.
pub fn sample(
    decoder: &dyn Decoder,
    count: usize,
    batch_size: usize,
    cfg: &SampleConfig,
    classes: Option<&[usize]>,
    seed: u64,
    exec: Execution,
) -> Result<Vec<Vec<usize>>> {
    cfg.validate(decoder.k())?;
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    match (decoder.condition_classes(), classes) {
        (None, None) => {}
        (Some(n), Some(c)) => {
            if c.len() != count {
                return Err(Error::Shape(format!("{} classes for {count} samples", c.len())));
            }
            if let Some(l) = c.iter().find(|l| **l >= n) {
                return Err(Error::Config(format!("class {l} not in [0, {n})")));
            }
        }
        (None, Some(_)) => return Err(Error::Config("model is unconditional".into())),
        (Some(_), None) => return Err(Error::Config("model needs a class for every sample".into())),
    }
    let chunks = count.div_ceil(batch_size);
    let out = exec.map_range(chunks, |c| {
        let lo = c * batch_size;
        let hi = (lo + batch_size).min(count);
        let mut rngs: Vec<ChaCha8Rng> = (lo..hi).map(|i| rng::stream(seed, &[i as u64])).collect();
        let labels = classes.map(|l| &l[lo..hi]);
        decoder.decode(hi - lo, labels, &mut |s, _, logits| {
            draw(&cfg.distribution(logits), &mut rngs[s])
        })
    });
    Ok(out.into_iter().flatten().collect())
}
