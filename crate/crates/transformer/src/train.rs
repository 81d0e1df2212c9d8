//! Minibatch NLL training with optional soft labels and stochastic code
//! resampling from stored feature maps.

use crate::block::Dropout;
use crate::error::{Error, Result};
use crate::model::{one_hot_targets, RqTransformer};
use rand::seq::SliceRandom;
use rq_autodiff::{AdamState, AdamW, AutodiffError, LrSchedule, Tape, Tensor};
use rq_core::{
    one_hot, rng, rq_encode, rq_encode_stochastic, soft_label, CodebookStack, Execution, FeatureMap, Quantizer,
};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// One training sequence: raster-order, depth-minor codes of length `T·D`,
/// the feature map they came from (when known) and an optional class.
#[derive(Clone, Debug, PartialEq)]
pub struct ArExample {
    pub codes: Vec<usize>,
    /// `T × n_z`, row-major.
    pub features: Option<Vec<f64>>,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArDataset {
    pub examples: Vec<ArExample>,
    /// Needed for soft labels and stochastic resampling.
    pub quantizer: Option<Quantizer>,
    pub depth: usize,
}

impl ArDataset {
    pub fn from_codes(codes: Vec<Vec<usize>>, labels: Option<Vec<usize>>, depth: usize) -> Result<Self> {
        let labels = attach_labels(labels, codes.len())?;
        Ok(Self {
            examples: codes
                .into_iter()
                .zip(labels)
                .map(|(codes, label)| ArExample {
                    codes,
                    features: None,
                    label,
                })
                .collect(),
            quantizer: None,
            depth,
        })
    }

    /// Deterministic codes of every map; the maps are kept for resampling.
    pub fn from_features(
        maps: &[FeatureMap],
        quantizer: Quantizer,
        depth: usize,
        labels: Option<Vec<usize>>,
        exec: Execution,
    ) -> Result<Self> {
        let labels = attach_labels(labels, maps.len())?;
        let examples = exec.try_map_range(maps.len(), |i| -> Result<ArExample> {
            let m = &maps[i];
            let mut codes = Vec::with_capacity(m.positions() * depth);
            for t in 0..m.positions() {
                codes.extend(rq_encode(m.at(t), &quantizer, depth)?.codes);
            }
            Ok(ArExample {
                codes,
                features: Some(m.data.clone()),
                label: labels[i],
            })
        })?;
        Ok(Self {
            examples,
            quantizer: Some(quantizer),
            depth,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

fn attach_labels(labels: Option<Vec<usize>>, n: usize) -> Result<Vec<Option<usize>>> {
    match labels {
        None => Ok(vec![None; n]),
        Some(l) if l.len() == n => Ok(l.into_iter().map(Some).collect()),
        Some(l) => Err(Error::Shape(format!("{} labels for {n} sequences", l.len()))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: ScheduleKind,
    pub warmup: u64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    /// Soft-label temperature; `None` trains on one-hot targets.
    pub soft_label: Option<f64>,
    /// Temperature for resampling codes from the stored features on every
    /// batch; `None` uses the stored codes.
    pub stochastic: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            lr: 3e-3,
            schedule: ScheduleKind::Cosine,
            warmup: 100,
            lr_floor: 1e-4,
            weight_decay: 0.0,
            soft_label: None,
            stochastic: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.lr_floor < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "learning rates and weight decay must be non-negative".into(),
            ));
        }
        if self.soft_label.is_some_and(|t| t <= 0.0) {
            return Err(Error::Config("soft-label temperature must be > 0".into()));
        }
        if self.stochastic.is_some_and(|t| t < 0.0) {
            return Err(Error::Config("stochastic temperature must be >= 0".into()));
        }
        Ok(())
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        match self.schedule {
            ScheduleKind::Constant => LrSchedule::Constant(self.lr),
            ScheduleKind::Cosine => LrSchedule::Cosine {
                peak: self.lr,
                floor: self.lr_floor,
                warmup: self.warmup,
                total: self.steps,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: u64,
    pub nll: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Codes and `(T·D) × K` targets for one example at one step.
fn example_targets(
    ex: &ArExample,
    data: &ArDataset,
    cfg: &TrainConfig,
    k: usize,
    n_z: usize,
    stream: &[u64],
) -> Result<(Vec<usize>, Vec<f64>)> {
    let needs_features = cfg.soft_label.is_some() || cfg.stochastic.is_some();
    if !needs_features {
        return Ok((ex.codes.clone(), Vec::new()));
    }
    let (Some(features), Some(q)) = (&ex.features, &data.quantizer) else {
        return Err(Error::Config(
            "soft labels and stochastic codes need feature maps and a quantizer".into(),
        ));
    };
    let mut r = rng::stream(cfg.seed, stream);
    let mut codes = Vec::with_capacity(ex.codes.len());
    let mut targets = Vec::with_capacity(ex.codes.len() * k);
    for z in features.chunks_exact(n_z) {
        let enc = match cfg.stochastic {
            Some(tau) => rq_encode_stochastic(z, q, data.depth, tau, &mut r)?,
            None => rq_encode(z, q, data.depth)?,
        };
        for (d, &c) in enc.codes.iter().enumerate() {
            match cfg.soft_label {
                Some(tau) => targets.extend(soft_label(&enc.residuals[d], q.at_depth(d)?, tau)?.probabilities),
                None => targets.extend(one_hot(c, k)),
            }
        }
        codes.extend(enc.codes);
    }
    Ok((codes, targets))
}

/// Trains in place and returns one trace entry per step. Batches walk
/// epoch-wise permutations drawn from `stream(seed, [1, epoch])`; the
/// resampled codes of batch slot `j` at step `s` use `stream(seed, [2, s, j])`
/// and dropout masks `stream(seed, [3, s])`.
pub fn train(
    model: &mut RqTransformer,
    data: &ArDataset,
    cfg: &TrainConfig,
    exec: Execution,
    mut on_step: impl FnMut(&TraceEntry),
) -> Result<Vec<TraceEntry>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if data.depth != model.config().d {
        return Err(Error::Config(format!(
            "dataset depth {} != model depth {}",
            data.depth,
            model.config().d
        )));
    }
    let (k, n_z) = (model.config().k, model.config().n_z);
    let dropout = model.config().dropout;
    let optimizer = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let schedule = cfg.lr_schedule();
    let mut state = AdamState::for_params(model.params());
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut cursor = 0;
    let start = Instant::now();
    let mut trace = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut picks = Vec::with_capacity(cfg.batch_size);
        while picks.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng::stream(cfg.seed, &[1, epoch]));
                epoch += 1;
                cursor = 0;
            }
            picks.push(order[cursor]);
            cursor += 1;
        }
        let prepared = exec.try_map_range(picks.len(), |j| {
            example_targets(&data.examples[picks[j]], data, cfg, k, n_z, &[2, step, j as u64])
        })?;
        let batch: Vec<Vec<usize>> = prepared.iter().map(|p| p.0.clone()).collect();
        let targets = if prepared[0].1.is_empty() {
            one_hot_targets(&batch, k)
        } else {
            let data: Vec<f64> = prepared.iter().flat_map(|p| p.1.iter().copied()).collect();
            Tensor::new(vec![data.len() / k, k], data)?
        };
        let labels: Option<Vec<usize>> = picks.iter().map(|&i| data.examples[i].label).collect();

        let mut tape = Tape::new();
        let vars = model.params().attach(&mut tape);
        let mut drop_rng = rng::stream(cfg.seed, &[3, step]);
        let drop = (dropout > 0.0).then_some(Dropout {
            rate: dropout,
            rng: &mut drop_rng,
        });
        let loss = model.nll(&mut tape, &vars, &batch, labels.as_deref(), &targets, drop)?;
        let nll = tape.value(loss).item();
        if !nll.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("loss is {nll}"),
            });
        }
        let grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();
        let lr = schedule.at(step);
        optimizer
            .step(model.params_mut(), &grads, &mut state, lr)
            .map_err(|e| match e {
                AutodiffError::Divergence { .. } => Error::Divergence {
                    step,
                    reason: e.to_string(),
                },
                e => e.into(),
            })?;
        let entry = TraceEntry {
            step,
            nll,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_step(&entry);
        trace.push(entry);
    }
    Ok(trace)
}

/// Mean one-hot NLL per code over the stored codes of the dataset.
pub fn evaluate(model: &RqTransformer, data: &ArDataset, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in data.examples.chunks(batch_size.max(1)) {
        let batch: Vec<Vec<usize>> = chunk.iter().map(|e| e.codes.clone()).collect();
        let labels: Option<Vec<usize>> = chunk.iter().map(|e| e.label).collect();
        let mut tape = Tape::new();
        let vars = model.params().attach(&mut tape);
        let targets = one_hot_targets(&batch, model.config().k);
        let loss = model.nll(&mut tape, &vars, &batch, labels.as_deref(), &targets, None)?;
        let rows = targets.rows();
        total += tape.value(loss).item() * rows as f64;
        count += rows;
    }
    Ok(total / count as f64)
}
