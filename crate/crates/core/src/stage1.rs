//! Stage-1 training: patch codec plus residual quantizer.
//!
//! Each minibatch runs `Z = E(X)`, deterministic residual quantization,
//! the straight-through substitution and `X̂ = G(Ẑ)`, then minimises
//! `L_recon + β·L_commit` over the codec matrices with AdamW. The
//! codebooks follow by EMA k-means on the `(r_{d−1}, k_d)` pairs of the
//! batch, and unused codes restart once per epoch.

use crate::codebook::{Codebook, DEFAULT_DECAY, DEFAULT_RESTART_THRESHOLD};
use crate::codec::{CodecInit, PatchCodec};
use crate::error::{Error, Result};
use crate::feature_map::{quantize_feature_map, FeatureMap, QuantizedMap, SamplingMode};
use crate::image::{recon_loss, Image};
use crate::par::Execution;
use crate::rng;
use crate::rq::{PerDepthCodebooks, Quantizer};
use crate::UsageHistogram;
use rand::seq::SliceRandom;
use rq_autodiff::{AdamState, AdamW, AutodiffError, ParamSet, Tape, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub factor: usize,
    pub n_z: usize,
    pub codebook_size: usize,
    pub depth: usize,
    pub beta: f64,
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub restart_threshold: f64,
    /// `D` codebooks of `K / D` codes instead of one shared codebook.
    pub per_depth_codebooks: bool,
    /// Skip quantization entirely (`Ẑ = Z`).
    pub bypass_quantization: bool,
    pub train_codec: bool,
    pub codec_init: CodecInit,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            factor: 4,
            n_z: 16,
            codebook_size: 256,
            depth: 4,
            beta: 0.25,
            decay: DEFAULT_DECAY,
            epochs: 50,
            batch_size: 4,
            lr: 1e-3,
            restart_threshold: DEFAULT_RESTART_THRESHOLD,
            per_depth_codebooks: false,
            bypass_quantization: false,
            train_codec: true,
            codec_init: CodecInit::Orthonormal,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.depth == 0 || self.codebook_size == 0 {
            return bad("stage-1 needs K >= 1 and D >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return bad(format!("beta {} must be finite and >= 0", self.beta));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return bad(format!("decay {} not in [0, 1)", self.decay));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.per_depth_codebooks && !self.codebook_size.is_multiple_of(self.depth) {
            return bad(format!(
                "per-depth codebooks need K={} divisible by D={}",
                self.codebook_size, self.depth
            ));
        }
        Ok(())
    }

    /// Codes in each codebook.
    pub fn book_size(&self) -> usize {
        if self.per_depth_codebooks {
            self.codebook_size / self.depth
        } else {
            self.codebook_size
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_recon: f64,
    pub l_commit: f64,
    pub loss: f64,
    /// Usage entropy in bits of the codes chosen at each depth.
    pub usage_entropy: Vec<f64>,
    pub used_codes: Vec<usize>,
    /// Mean `||r_d||²` per position at each depth.
    pub depth_error: Vec<f64>,
    pub restarts: usize,
}

/// Trained codec and quantizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Model {
    pub codec: PatchCodec,
    pub quantizer: Quantizer,
    pub depth: usize,
}

impl Stage1Model {
    pub fn quantize(&self, z: &FeatureMap, depth: usize, mode: SamplingMode, exec: Execution) -> Result<QuantizedMap> {
        quantize_feature_map(z, &self.quantizer, depth, mode, exec)
    }

    /// Pixel MSE of the reconstruction from `Ẑ^(d)` for `d = 1..=depth`.
    pub fn depth_mse(&self, image: &Image, depth: usize) -> Result<Vec<f64>> {
        let z = self.codec.encode(image)?;
        let q = self.quantize(&z, depth, SamplingMode::Deterministic, Execution::Sequential)?;
        q.partial_sums
            .iter()
            .map(|zd| recon_loss(image, &self.codec.decode(zd)?))
            .collect()
    }

    /// [`Stage1Model::depth_mse`] for every image.
    pub fn evaluate(&self, images: &[Image], depth: usize, exec: Execution) -> Result<Vec<Vec<f64>>> {
        exec.try_map_range(images.len(), |i| self.depth_mse(&images[i], depth))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Output {
    pub model: Stage1Model,
    pub trace: Vec<EpochMetrics>,
}

/// Trains a codec (built from `cfg`) and a quantizer on `images`.
pub fn train_stage1(images: &[Image], cfg: &Stage1Config, exec: Execution) -> Result<Stage1Output> {
    cfg.validate()?;
    let codec = if cfg.train_codec {
        let mut r = rng::stream(cfg.seed, &[0]);
        PatchCodec::trainable(cfg.factor, cfg.n_z, cfg.codec_init, &mut r)?
    } else {
        PatchCodec::orthonormal(cfg.factor, cfg.n_z)?
    };
    train_stage1_with(images, cfg, codec, exec)
}

/// Trains starting from an existing codec; with `train_codec` off the codec
/// stays fixed and only the codebooks learn.
///
/// Random streams: the quantizer is initialised from `rng::stream(seed, [3])`
/// over the features of all images in order, epoch `e` visits images in the
/// order of a shuffle drawn from `rng::stream(seed, [1, e])`, and the
/// restart after epoch `e` (every epoch but the last) draws from
/// `rng::stream(seed, [2, e])`.
pub fn train_stage1_with(
    images: &[Image],
    cfg: &Stage1Config,
    mut codec: PatchCodec,
    exec: Execution,
) -> Result<Stage1Output> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::InsufficientData {
            needed: 1,
            available: 0,
        });
    }
    if codec.n_z() != cfg.n_z || codec.factor() != cfg.factor {
        return Err(Error::Parameter(format!(
            "codec (f={}, n_z={}) does not match config (f={}, n_z={})",
            codec.factor(),
            codec.n_z(),
            cfg.factor,
            cfg.n_z
        )));
    }
    let patches = exec.try_map_range(images.len(), |i| codec.patches(&images[i]))?;
    let (h, w) = codec.grid(&images[0])?;
    if images.iter().any(|im| codec.grid(im).ok() != Some((h, w))) {
        return Err(Error::Shape("all training images must share one size".into()));
    }
    let features = codec.encode_batch(images, exec)?;
    let rows = features.iter().flat_map(|m| m.data.iter().copied()).collect();
    let mut quantizer = init_quantizer(rows, cfg, &mut rng::stream(cfg.seed, &[3]), exec)?;

    let p = codec.config().patch_len();
    let n_z = cfg.n_z;
    let positions = h * w;
    let mut params = ParamSet::new();
    let enc_id = params.register("codec.encoder", Tensor::new(vec![p, n_z], codec.encoder().to_vec())?);
    let dec_id = params.register("codec.decoder", Tensor::new(vec![n_z, p], codec.decoder().to_vec())?);
    let optimizer = AdamW::default();
    let mut state = AdamState::for_params(&params);

    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut shuffle = rng::stream(cfg.seed, &[1, epoch as u64]);
        order.shuffle(&mut shuffle);
        let mut sums = (0.0, 0.0, 0.0);
        let mut usage = UsageHistogram::new(cfg.depth, cfg.book_size());
        let mut depth_error = vec![0.0; cfg.depth];
        let mut pooled: Vec<Vec<f64>> = vec![Vec::new(); quantizer.codebooks().len()];

        for batch in order.chunks(cfg.batch_size) {
            let rows = batch.len() * positions;
            let mut x = Vec::with_capacity(rows * p);
            for &i in batch {
                x.extend_from_slice(&patches[i]);
            }
            let x = Tensor::new(vec![rows, p], x)?;

            let mut tape = Tape::new();
            let vars = params.attach(&mut tape);
            let (enc, dec) = (vars[enc_id.0], vars[dec_id.0]);
            let xv = tape.constant(x.clone());
            let z = tape.matmul(xv, enc)?;
            let zmap = FeatureMap::new(1, rows, n_z, tape.value(z).data().to_vec())?;
            if !zmap.data.iter().all(|v| v.is_finite()) {
                return Err(divergence(epoch, "non-finite features"));
            }

            let (zq, commit, q) = if cfg.bypass_quantization {
                (z, None, None)
            } else {
                let q = quantize_feature_map(&zmap, &quantizer, cfg.depth, SamplingMode::Deterministic, exec)?;
                let zhat = Tensor::new(vec![rows, n_z], q.quantized().data.clone())?;
                let zq = tape.straight_through(z, &zhat)?;
                let mut commit = None;
                for ps in &q.partial_sums {
                    let target = Tensor::new(vec![rows, n_z], ps.data.clone())?;
                    let term = tape.squared_distance(z, &target, 1.0 / rows as f64)?;
                    commit = Some(match commit {
                        None => term,
                        Some(acc) => tape.add(acc, term)?,
                    });
                }
                (zq, commit, Some(q))
            };
            let xhat = tape.matmul(zq, dec)?;
            let recon = tape.squared_distance(xhat, &x, 1.0 / rows as f64)?;
            let loss = match commit {
                Some(c) if cfg.beta > 0.0 => {
                    let c = tape.scale(c, cfg.beta);
                    tape.add(recon, c)?
                }
                _ => recon,
            };
            let l_recon = tape.value(recon).item() / p as f64;
            let l_commit = commit.map_or(0.0, |c| tape.value(c).item());
            let l_total = tape.value(loss).item();
            if !l_total.is_finite() {
                return Err(divergence(epoch, &format!("loss became {l_total}")));
            }
            let weight = batch.len() as f64;
            sums.0 += l_recon * weight;
            sums.1 += l_commit * weight;
            sums.2 += l_total * weight;

            if cfg.train_codec {
                let grads = tape.backward(loss)?;
                let grads: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();
                optimizer
                    .step(&mut params, &grads, &mut state, cfg.lr)
                    .map_err(|e| match e {
                        AutodiffError::Divergence { param } => {
                            divergence(epoch, &format!("non-finite gradient for {param}"))
                        }
                        other => other.into(),
                    })?;
            }

            if let Some(q) = q {
                let codes: Vec<usize> = q.codes.codes().iter().map(|c| *c as usize).collect();
                for t in 0..rows {
                    usage.record(&codes[t * cfg.depth..(t + 1) * cfg.depth]);
                }
                for (d, err) in depth_error.iter_mut().enumerate() {
                    *err += q.residuals[d + 1].data.iter().map(|v| v * v).sum::<f64>();
                }
                update_codebooks(&mut quantizer, &q, &codes, cfg, &mut pooled)?;
            }
        }

        let mut restarts = 0;
        if !cfg.bypass_quantization && epoch + 1 < cfg.epochs {
            let mut r = rng::stream(cfg.seed, &[2, epoch as u64]);
            for (book, rows) in quantizer.codebooks_mut().into_iter().zip(&pooled) {
                restarts += book.restart_unused(rows, cfg.restart_threshold, &mut r)?;
            }
        }
        let n = images.len() as f64;
        let total_positions = (images.len() * positions) as f64;
        trace.push(EpochMetrics {
            epoch,
            l_recon: sums.0 / n,
            l_commit: sums.1 / n,
            loss: sums.2 / n,
            usage_entropy: (0..cfg.depth).map(|d| usage.entropy_bits(d)).collect(),
            used_codes: (0..cfg.depth).map(|d| usage.used_codes(d)).collect(),
            depth_error: depth_error.iter().map(|e| e / total_positions).collect(),
            restarts,
        });
        codec.set_matrices(params.get(enc_id).data().to_vec(), params.get(dec_id).data().to_vec());
    }
    codec.set_matrices(params.get(enc_id).data().to_vec(), params.get(dec_id).data().to_vec());
    Ok(Stage1Output {
        model: Stage1Model {
            codec,
            quantizer,
            depth: cfg.depth,
        },
        trace,
    })
}

fn divergence(epoch: usize, reason: &str) -> Error {
    Error::Divergence {
        epoch,
        reason: reason.to_string(),
    }
}

/// Codebooks start from rows of the residual pool, one depth at a time:
/// depth `d` contributes its share of codes from the residuals left by the
/// codes chosen so far. Per-depth codebooks take all their codes from
/// their own depth; a shared codebook takes `K / D` from each depth
/// (the remainder from the last), so for `D = 1` both reduce to drawing
/// `K` distinct rows of `Z`.
pub fn init_quantizer(
    mut rows: Vec<f64>,
    cfg: &Stage1Config,
    r: &mut impl rand::Rng,
    exec: Execution,
) -> Result<Quantizer> {
    let n_z = cfg.n_z;
    let size = cfg.book_size();
    let mut books = Vec::with_capacity(cfg.depth);
    let mut shared: Vec<f64> = Vec::with_capacity(size * n_z);
    for d in 0..cfg.depth {
        let remaining = size - shared.len() / n_z;
        let take = if cfg.per_depth_codebooks {
            size
        } else if d + 1 == cfg.depth {
            remaining
        } else {
            (size / cfg.depth).max(1).min(remaining)
        };
        let fresh = Codebook::init_from_samples(&rows, n_z, take.max(1), r)?;
        let book = if cfg.per_depth_codebooks {
            fresh
        } else {
            if take > 0 {
                shared.extend_from_slice(fresh.embeddings());
            }
            Codebook::from_embeddings(shared.len() / n_z, n_z, shared.clone())?
        };
        if d + 1 < cfg.depth {
            let codes = book.nearest_code_batch(&rows, exec)?;
            for (row, k) in rows.chunks_exact_mut(n_z).zip(codes) {
                for (v, e) in row.iter_mut().zip(book.embedding(k)) {
                    *v -= e;
                }
            }
        }
        books.push(book);
    }
    if cfg.per_depth_codebooks {
        Ok(Quantizer::PerDepth(PerDepthCodebooks::new(books)?))
    } else {
        Ok(Quantizer::Shared(books.pop().expect("depth >= 1")))
    }
}

/// EMA step on every codebook from `(r_{d−1}, k_d)`; a shared codebook
/// pools the pairs of all depths. The residuals also join the epoch's
/// restart pool.
fn update_codebooks(
    quantizer: &mut Quantizer,
    q: &QuantizedMap,
    codes: &[usize],
    cfg: &Stage1Config,
    pooled: &mut [Vec<f64>],
) -> Result<()> {
    let depth = cfg.depth;
    let rows = codes.len() / depth;
    let books = quantizer.codebooks().len();
    let mut z = vec![Vec::new(); books];
    let mut assign = vec![Vec::new(); books];
    for d in 0..depth {
        let b = quantizer.book_index(d);
        z[b].extend_from_slice(&q.residuals[d].data);
        assign[b].extend((0..rows).map(|t| codes[t * depth + d]));
    }
    for (b, book) in quantizer.codebooks_mut().into_iter().enumerate() {
        book.ema_update(&z[b], &assign[b], cfg.decay)?;
        pooled[b].extend_from_slice(&z[b]);
    }
    Ok(())
}
