//! Spatial transformer over positions and depth transformer over the code
//! stack of each position.
//!
//! With `e_d` the code table of depth `d` and `proj_T`, `proj_D` learned
//! `n_z → n_e` maps, the spatial inputs are `u_0 = start` and
//! `u_t = PE_T[t] + proj_T(Σ_d e_d(S_{t−1,d}))`; the spatial output at `t`
//! is `h_t`. The depth inputs at position `t` are `v_0 = PE_D[0] + h_t`
//! and `v_d = PE_D[d] + proj_D(Σ_{d'<d} e_{d'}(S_{t,d'}))`; the depth
//! output at `d` gives the logits of `S_{t,d}`.

use crate::block::{normal, Dropout, Linear, StackIds};
use crate::config::{ConditionMode, ModelConfig};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rq_autodiff::{AttentionLayout, MacCounter, ParamId, ParamSet, Tape, Tensor, Var};
use rq_core::{CodebookStack, Quantizer};

/// Multiply-accumulate tallies of one forward pass by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ComponentMacs {
    /// Input projection and spatial blocks.
    pub spatial: MacCounter,
    /// Input projection and depth blocks.
    pub depth: MacCounter,
    pub head: MacCounter,
}

impl ComponentMacs {
    pub fn total(&self) -> MacCounter {
        let mut t = self.spatial;
        t.add(&self.depth);
        t.add(&self.head);
        t
    }
}

pub struct Forward {
    /// `(B·T·D) × K`, row `(b·T + t)·D + d`.
    pub logits: Var,
    pub macs: ComponentMacs,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Ids {
    pub code_table: ParamId,
    pub spatial_proj: Linear,
    pub spatial_pos: ParamId,
    pub start: ParamId,
    pub class: Option<ParamId>,
    pub spatial: StackIds,
    pub depth_proj: Linear,
    pub depth_pos: ParamId,
    pub depth: StackIds,
    pub head: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RqTransformer {
    config: ModelConfig,
    params: ParamSet,
    pub(crate) ids: Ids,
}

/// Row-stacked code embeddings of every codebook of a quantizer.
pub fn code_table(quantizer: &Quantizer) -> Vec<f64> {
    quantizer
        .codebooks()
        .iter()
        .flat_map(|cb| cb.embeddings().iter().copied())
        .collect()
}

impl RqTransformer {
    /// Parameters are registered in a fixed order; weights start from
    /// `normal(0, 0.02)` drawn from one seeded stream in that order, biases
    /// and positional tables at zero, layer-norm gains at one. The code
    /// table (`code_tables·K × n_z`) is frozen.
    pub fn new(config: ModelConfig, code_table: Vec<f64>, seed: u64) -> Result<Self> {
        config.validate()?;
        let ModelConfig { n_e, n_z, t, d, k, .. } = config;
        if code_table.len() != config.code_tables * k * n_z {
            return Err(Error::Shape(format!(
                "code table needs {}·{k}·{n_z} values, got {}",
                config.code_tables,
                code_table.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let code_table = p.register_frozen(
            "code_table",
            Tensor::new(vec![config.code_tables * k, n_z], code_table)?,
        );
        let spatial_proj = Linear::register(&mut p, "spatial.input_proj", n_z, n_e, false, &mut rng);
        let spatial_pos = p.register("spatial.pos", Tensor::zeros(vec![t, n_e]));
        let start = p.register("spatial.start", normal(&[1, n_e], &mut rng));
        let class = config
            .condition_classes
            .map(|c| p.register("spatial.class", normal(&[c, n_e], &mut rng)));
        let spatial = StackIds::register(&mut p, "spatial", config.n_spatial, n_e, &mut rng);
        let depth_proj = Linear::register(&mut p, "depth.input_proj", n_z, n_e, false, &mut rng);
        let depth_pos = p.register("depth.pos", Tensor::zeros(vec![d, n_e]));
        let depth = StackIds::register(&mut p, "depth", config.n_depth, n_e, &mut rng);
        let head = Linear::register(&mut p, "head", n_e, k, true, &mut rng);
        Ok(Self {
            config,
            params: p,
            ids: Ids {
                code_table,
                spatial_proj,
                spatial_pos,
                start,
                class,
                spatial,
                depth_proj,
                depth_pos,
                depth,
                head,
            },
        })
    }

    pub fn from_quantizer(config: ModelConfig, quantizer: &Quantizer, seed: u64) -> Result<Self> {
        if quantizer.codes_per_depth() != config.k || quantizer.dim() != config.n_z {
            return Err(Error::Config(format!(
                "quantizer has K={}, n_z={}; model expects K={}, n_z={}",
                quantizer.codes_per_depth(),
                quantizer.dim(),
                config.k,
                config.n_z
            )));
        }
        Self::new(config, code_table(quantizer), seed)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// `e_d(k)`.
    pub fn code_embedding(&self, d: usize, k: usize) -> &[f64] {
        let table = if self.config.code_tables == 1 { 0 } else { d };
        self.params.get(self.ids.code_table).row(table * self.config.k + k)
    }

    /// `Σ_{i<upto} e_i(stack[i])`, accumulated in depth order from zero.
    pub fn embedding_sum(&self, stack: &[usize], upto: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.config.n_z];
        for (d, &k) in stack.iter().take(upto).enumerate() {
            for (a, e) in acc.iter_mut().zip(self.code_embedding(d, k)) {
                *a += e;
            }
        }
        acc
    }

    pub fn validate_codes(&self, seq: &[usize]) -> Result<()> {
        let (t, d, k) = (self.config.t, self.config.d, self.config.k);
        if seq.len() != t * d {
            return Err(Error::Shape(format!(
                "code sequence needs T·D = {} codes, got {}",
                t * d,
                seq.len()
            )));
        }
        if let Some(i) = seq.iter().position(|c| *c >= k) {
            return Err(Error::CodeRange {
                t: i / d,
                d: i % d,
                code: seq[i],
                k,
            });
        }
        Ok(())
    }

    pub(crate) fn validate_classes(&self, batch: usize, classes: Option<&[usize]>) -> Result<()> {
        match (self.config.condition_classes, classes) {
            (None, None) => Ok(()),
            (None, Some(_)) => Err(Error::Config("model is unconditional".into())),
            (Some(_), None) => Err(Error::Config("model needs a class for every sequence".into())),
            (Some(c), Some(labels)) => {
                if labels.len() != batch {
                    return Err(Error::Shape(format!("{} classes for {batch} sequences", labels.len())));
                }
                match labels.iter().find(|l| **l >= c) {
                    Some(l) => Err(Error::Config(format!("class {l} not in [0, {c})"))),
                    None => Ok(()),
                }
            }
        }
    }

    /// Logits for a batch of raster-order, depth-minor code sequences.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &[Vec<usize>],
        classes: Option<&[usize]>,
        mut drop: Option<Dropout<'_>>,
    ) -> Result<Forward> {
        for seq in batch {
            self.validate_codes(seq)?;
        }
        self.validate_classes(batch.len(), classes)?;
        let cfg = &self.config;
        let (b, t, d, n_z) = (batch.len(), cfg.t, cfg.d, cfg.n_z);
        let len = cfg.spatial_len();
        let prepend = len > t;
        let off = usize::from(prepend);
        let v = |id: ParamId| vars[id.0];

        let m0 = tape.macs();
        let mut x = None;
        let mut accumulate = |tape: &mut Tape, part: Var| -> Result<()> {
            x = Some(match x {
                None => part,
                Some(acc) => tape.add(acc, part)?,
            });
            Ok(())
        };
        // Start or class token at t = 0 (and a prepended class position).
        let first_rows: Vec<usize> = (0..b).map(|i| i * len + off).collect();
        let first = match (classes, cfg.condition_mode) {
            (Some(labels), ConditionMode::Replace) => tape.gather_rows(v(self.ids.class.unwrap()), labels)?,
            _ => tape.gather_rows(v(self.ids.start), &vec![0; b])?,
        };
        let first = tape.scatter_rows(first, &first_rows, b * len)?;
        accumulate(tape, first)?;
        if let (Some(labels), true) = (classes, prepend) {
            let c = tape.gather_rows(v(self.ids.class.unwrap()), labels)?;
            let rows: Vec<usize> = (0..b).map(|i| i * len).collect();
            let c = tape.scatter_rows(c, &rows, b * len)?;
            accumulate(tape, c)?;
        }
        if t > 1 {
            let mut sums = Vec::with_capacity(b * (t - 1) * n_z);
            let mut rows = Vec::with_capacity(b * (t - 1));
            let mut pos = Vec::with_capacity(b * (t - 1));
            for (i, seq) in batch.iter().enumerate() {
                for ti in 1..t {
                    sums.extend(self.embedding_sum(&seq[(ti - 1) * d..ti * d], d));
                    rows.push(i * len + off + ti);
                    pos.push(ti);
                }
            }
            let sums = tape.constant(Tensor::new(vec![rows.len(), n_z], sums)?);
            let proj = self.ids.spatial_proj.apply(tape, vars, sums)?;
            let pe = tape.gather_rows(v(self.ids.spatial_pos), &pos)?;
            let u = tape.add(proj, pe)?;
            let u = tape.scatter_rows(u, &rows, b * len)?;
            accumulate(tape, u)?;
        }
        let x = x.expect("start rows always present");
        let layout = AttentionLayout {
            groups: b,
            seq_len: len,
            heads: cfg.heads,
        };
        let out = self.ids.spatial.forward(tape, vars, x, layout, &mut drop)?;
        let h = if prepend {
            let rows: Vec<usize> = (0..b).flat_map(|i| (0..t).map(move |ti| i * len + 1 + ti)).collect();
            tape.gather_rows(out, &rows)?
        } else {
            out
        };
        let m1 = tape.macs();

        let rows_total = b * t * d;
        let h_rows: Vec<usize> = (0..b * t).map(|i| i * d).collect();
        let mut y = tape.scatter_rows(h, &h_rows, rows_total)?;
        let pe = tape.gather_rows(
            v(self.ids.depth_pos),
            &(0..rows_total).map(|r| r % d).collect::<Vec<_>>(),
        )?;
        y = tape.add(y, pe)?;
        if d > 1 {
            let mut sums = Vec::with_capacity(b * t * (d - 1) * n_z);
            let mut rows = Vec::with_capacity(b * t * (d - 1));
            for (i, seq) in batch.iter().enumerate() {
                for ti in 0..t {
                    let stack = &seq[ti * d..(ti + 1) * d];
                    for di in 1..d {
                        sums.extend(self.embedding_sum(stack, di));
                        rows.push((i * t + ti) * d + di);
                    }
                }
            }
            let sums = tape.constant(Tensor::new(vec![rows.len(), n_z], sums)?);
            let proj = self.ids.depth_proj.apply(tape, vars, sums)?;
            let proj = tape.scatter_rows(proj, &rows, rows_total)?;
            y = tape.add(y, proj)?;
        }
        let layout = AttentionLayout {
            groups: b * t,
            seq_len: d,
            heads: cfg.heads,
        };
        let out = self.ids.depth.forward(tape, vars, y, layout, &mut drop)?;
        let m2 = tape.macs();
        let logits = self.ids.head.apply(tape, vars, out)?;
        let m3 = tape.macs();
        Ok(Forward {
            logits,
            macs: ComponentMacs {
                spatial: m1.since(&m0),
                depth: m2.since(&m1),
                head: m3.since(&m2),
            },
        })
    }

    /// Mean cross-entropy over all `(t, d)` of the batch against `targets`
    /// (`(B·T·D) × K` distributions in forward row order).
    pub fn nll(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &[Vec<usize>],
        classes: Option<&[usize]>,
        targets: &Tensor,
        drop: Option<Dropout<'_>>,
    ) -> Result<Var> {
        let f = self.forward(tape, vars, batch, classes, drop)?;
        Ok(tape.cross_entropy_soft(f.logits, targets)?)
    }

    /// `p_td` for every sequence: `T·D·K` values per sequence.
    pub fn probabilities(&self, batch: &[Vec<usize>], classes: Option<&[usize]>) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape);
        let f = self.forward(&mut tape, &vars, batch, classes, None)?;
        let p = tape.softmax(f.logits)?;
        let per = self.config.t * self.config.d * self.config.k;
        Ok(tape.value(p).data().chunks(per).map(<[f64]>::to_vec).collect())
    }
}

/// One-hot targets for a batch in forward row order.
pub fn one_hot_targets(batch: &[Vec<usize>], k: usize) -> Tensor {
    let rows: usize = batch.iter().map(|s| s.len()).sum();
    let mut data = vec![0.0; rows * k];
    for (r, c) in batch.iter().flatten().enumerate() {
        data[r * k + c] = 1.0;
    }
    Tensor::new(vec![rows, k], data).expect("consistent targets")
}
