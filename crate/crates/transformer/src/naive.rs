//! Baseline that unfolds the `T × D` code stack into one depth-minor
//! sequence of length `T·D` and runs a single causal transformer over it.

use crate::block::{normal, Linear, StackIds};
use crate::config::NaiveConfig;
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rq_autodiff::{AttentionLayout, MacCounter, ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct NaiveIds {
    pub tokens: ParamId,
    pub pos: ParamId,
    pub start: ParamId,
    pub class: Option<ParamId>,
    pub stack: StackIds,
    pub head: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NaiveTransformer {
    config: NaiveConfig,
    params: ParamSet,
    pub(crate) ids: NaiveIds,
}

impl NaiveTransformer {
    /// Input `i` of the unfolded sequence is the start (or class) embedding
    /// for `i = 0` and `tokens[S_{i−1}] + pos[i]` otherwise.
    pub fn new(config: NaiveConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let n_e = config.n_e;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let tokens = p.register("tokens", normal(&[config.k, n_e], &mut rng));
        let pos = p.register("pos", Tensor::zeros(vec![config.seq_len(), n_e]));
        let start = p.register("start", normal(&[1, n_e], &mut rng));
        let class = config
            .condition_classes
            .map(|c| p.register("class", normal(&[c, n_e], &mut rng)));
        let stack = StackIds::register(&mut p, "stack", config.n_layers, n_e, &mut rng);
        let head = Linear::register(&mut p, "head", n_e, config.k, true, &mut rng);
        Ok(Self {
            config,
            params: p,
            ids: NaiveIds {
                tokens,
                pos,
                start,
                class,
                stack,
                head,
            },
        })
    }

    pub fn config(&self) -> &NaiveConfig {
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

    /// Logits `(B·T·D) × K` and the tape's MAC tally for this pass.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &[Vec<usize>],
        classes: Option<&[usize]>,
    ) -> Result<(Var, MacCounter)> {
        let cfg = &self.config;
        let (b, l) = (batch.len(), cfg.seq_len());
        for seq in batch {
            if seq.len() != l {
                return Err(Error::Shape(format!("sequence needs {l} codes, got {}", seq.len())));
            }
            if let Some(i) = seq.iter().position(|c| *c >= cfg.k) {
                return Err(Error::CodeRange {
                    t: i / cfg.d,
                    d: i % cfg.d,
                    code: seq[i],
                    k: cfg.k,
                });
            }
        }
        let m0 = tape.macs();
        let v = |id: ParamId| vars[id.0];
        let first = match (classes, self.ids.class) {
            (Some(labels), Some(c)) => {
                if labels.len() != b || labels.iter().any(|x| *x >= cfg.condition_classes.unwrap_or(0)) {
                    return Err(Error::Config("bad class labels".into()));
                }
                tape.gather_rows(v(c), labels)?
            }
            (None, None) => tape.gather_rows(v(self.ids.start), &vec![0; b])?,
            _ => return Err(Error::Config("class labels must match the model's conditioning".into())),
        };
        let first_rows: Vec<usize> = (0..b).map(|i| i * l).collect();
        let mut x = tape.scatter_rows(first, &first_rows, b * l)?;
        if l > 1 {
            let mut toks = Vec::with_capacity(b * (l - 1));
            let mut rows = Vec::with_capacity(b * (l - 1));
            let mut pos = Vec::with_capacity(b * (l - 1));
            for (i, seq) in batch.iter().enumerate() {
                for j in 1..l {
                    toks.push(seq[j - 1]);
                    rows.push(i * l + j);
                    pos.push(j);
                }
            }
            let e = tape.gather_rows(v(self.ids.tokens), &toks)?;
            let pe = tape.gather_rows(v(self.ids.pos), &pos)?;
            let u = tape.add(e, pe)?;
            let u = tape.scatter_rows(u, &rows, b * l)?;
            x = tape.add(x, u)?;
        }
        let layout = AttentionLayout {
            groups: b,
            seq_len: l,
            heads: cfg.heads,
        };
        let out = self.ids.stack.forward(tape, vars, x, layout, &mut None)?;
        let logits = self.ids.head.apply(tape, vars, out)?;
        Ok((logits, tape.macs().since(&m0)))
    }

    pub fn probabilities(&self, batch: &[Vec<usize>], classes: Option<&[usize]>) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape);
        let (logits, _) = self.forward(&mut tape, &vars, batch, classes)?;
        let p = tape.softmax(logits)?;
        let per = self.config.seq_len() * self.config.k;
        Ok(tape.value(p).data().chunks(per).map(<[f64]>::to_vec).collect())
    }
}
