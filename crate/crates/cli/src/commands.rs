//! One function per subcommand. Each reads its inputs from the run
//! configuration, writes its outputs under `out_dir` and returns a summary.

use crate::artifacts::*;
use crate::config::RunConfig;
use crate::error::{io_err, CliError, Result};
use rand::Rng;
use rq_core::stage1::{train_stage1, EpochMetrics, Stage1Model};
use rq_core::{rng, rq_decode, synthetic, CodeStackMap, CodebookStack, Execution, FeatureMap, Image, SamplingMode};
use rq_transformer::{
    code_table, evaluate, flop_report, sample, train, ArDataset, Decoder, FlopReport, ModelConfig, NaiveConfig,
    NaiveDecoder, NaiveTransformer, RqDecoder, RqTransformer, TraceEntry,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub struct Context {
    pub config: RunConfig,
    pub exec: Execution,
}

impl Context {
    pub fn new(config: RunConfig) -> Self {
        Self {
            config,
            exec: Execution::Parallel,
        }
    }

    fn out(&self, name: impl AsRef<Path>) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn stage1_dir(&self) -> Result<&Path> {
        self.config
            .stage1_dir
            .as_deref()
            .ok_or_else(|| CliError::Config("--stage1 <dir> is required".into()))
    }

    fn data_dir(&self) -> Result<&Path> {
        self.config
            .data_dir
            .as_deref()
            .ok_or_else(|| CliError::Config("no input images: --data <dir> is required".into()))
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into())
}

fn stage1_error(e: rq_core::Error) -> CliError {
    match e {
        rq_core::Error::Divergence { .. } => CliError::Divergence(e.to_string()),
        rq_core::Error::Parameter(_) | rq_core::Error::InsufficientData { .. } | rq_core::Error::Shape(_) => {
            CliError::Config(e.to_string())
        }
        e => e.into(),
    }
}

pub fn cmd_synth(ctx: &Context) -> Result<Vec<PathBuf>> {
    let p = &ctx.config.synth;
    if p.count == 0 || p.size == 0 {
        return Err(CliError::Config("synth needs count >= 1 and size >= 1".into()));
    }
    let mut paths = Vec::with_capacity(p.count);
    for (i, img) in synthetic::dataset(ctx.config.seed, p.count, p.size, p.size)
        .iter()
        .enumerate()
    {
        let path = ctx.out(format!("synth_{i:04}.ppm"));
        write_file(&path, &img.to_ppm_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn cmd_train_stage1(ctx: &Context) -> Result<(Stage1Model, Vec<EpochMetrics>)> {
    let images = load_images(ctx.data_dir()?)?;
    let cfg = ctx.config.stage1_config();
    cfg.validate().map_err(stage1_error)?;
    ctx.config.write_to_out()?;
    let out = train_stage1(&images, &cfg, ctx.exec).map_err(stage1_error)?;
    save_stage1(&ctx.config.out_dir, &out.model)?;
    write_jsonl(&ctx.out("metrics.jsonl"), &out.trace)?;
    Ok((out.model, out.trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodeReport {
    pub image: String,
    pub depth: usize,
    /// Pixel MSE of the reconstruction from `Ẑ^(d)`, `d = 1..=depth`.
    pub mse: Vec<f64>,
    pub codes: String,
    pub reconstructions: Vec<String>,
}

pub fn cmd_encode(ctx: &Context, image: &Path, depth: Option<usize>) -> Result<EncodeReport> {
    let model = load_stage1(ctx.stage1_dir()?)?;
    let depth = depth.unwrap_or(model.depth);
    let img = Image::load(image).map_err(|e| CliError::Config(format!("{}: {e}", image.display())))?;
    let z = model.codec.encode(&img).map_err(stage1_error)?;
    let q = model
        .quantize(&z, depth, SamplingMode::Deterministic, ctx.exec)
        .map_err(stage1_error)?;
    let name = stem(image);
    let codes = ctx.out(format!("{name}.rqcm"));
    write_file(&codes, &q.codes.to_bytes())?;
    let mut mse = Vec::with_capacity(depth);
    let mut reconstructions = Vec::with_capacity(depth);
    for (d, zd) in q.partial_sums.iter().enumerate() {
        let rec = model.codec.decode(zd)?;
        mse.push(rq_core::image::recon_loss(&img, &rec)?);
        let path = ctx.out(format!("{name}.d{}.ppm", d + 1));
        write_file(&path, &rec.to_ppm_bytes())?;
        reconstructions.push(path.display().to_string());
    }
    let report = EncodeReport {
        image: image.display().to_string(),
        depth,
        mse,
        codes: codes.display().to_string(),
        reconstructions,
    };
    write_json(&ctx.out(format!("{name}.report.json")), &report)?;
    Ok(report)
}

fn check_map(map: &CodeStackMap, model: &Stage1Model) -> Result<()> {
    if map.codebook_id != model.quantizer.stack_hash()
        || map.codebook_size as usize != model.quantizer.codes_per_depth()
    {
        return Err(CliError::Mismatch(
            "codebook/codec mismatch: code map was made with another codebook".into(),
        ));
    }
    Ok(())
}

/// Decodes a code map through the partial sums at `depth`.
pub fn decode_map(map: &CodeStackMap, model: &Stage1Model, depth: usize) -> Result<Image> {
    check_map(map, model)?;
    if depth == 0 || depth > map.depth() {
        return Err(CliError::Config(format!("depth {depth} not in [1, {}]", map.depth())));
    }
    let mut data = Vec::with_capacity(map.positions() * model.codec.n_z());
    for t in 0..map.positions() {
        data.extend(rq_decode(&map.stack(t), &model.quantizer, depth)?);
    }
    let z = FeatureMap::new(map.height as usize, map.width as usize, model.codec.n_z(), data)?;
    Ok(model.codec.decode(&z)?)
}

pub fn cmd_decode(ctx: &Context, codes: &Path, depth: Option<usize>) -> Result<PathBuf> {
    let model = load_stage1(ctx.stage1_dir()?)?;
    let map = CodeStackMap::from_bytes(&read_file(codes)?)
        .map_err(|e| CliError::Mismatch(format!("{}: {e}", codes.display())))?;
    let img = decode_map(&map, &model, depth.unwrap_or(map.depth()))?;
    let path = ctx.out(format!("{}.ppm", stem(codes)));
    write_file(&path, &img.to_ppm_bytes())?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub d: usize,
    pub beta: f64,
    pub per_depth_codebooks: bool,
    /// `T·Σ_d log2(codes at depth d)`.
    pub bits: f64,
    /// Held-out MSE at full depth.
    pub mse: f64,
    pub mse_by_depth: Vec<f64>,
    /// Codebook usage entropy (bits) per depth over the final epoch.
    pub usage_entropy: Vec<f64>,
    pub status: String,
}

fn sweep_images(ctx: &Context) -> Result<(Vec<Image>, Vec<Image>)> {
    let p = &ctx.config.sweep;
    match (&ctx.config.data_dir, &ctx.config.heldout_dir) {
        (Some(train), Some(held)) => Ok((load_images(train)?, load_images(held)?)),
        (None, None) => {
            let mut all = synthetic::dataset(
                ctx.config.seed,
                p.train_images + p.heldout_images,
                p.image_size,
                p.image_size,
            );
            let held = all.split_off(p.train_images);
            Ok((all, held))
        }
        _ => Err(CliError::Config(
            "sweep needs both --data and --heldout, or neither".into(),
        )),
    }
}

pub fn cmd_sweep(ctx: &Context) -> Result<Vec<SweepRow>> {
    let p = &ctx.config.sweep;
    if p.codebook_sizes.is_empty() || p.depths.is_empty() || p.betas.is_empty() || p.per_depth_codebooks.is_empty() {
        return Err(CliError::Config("sweep grid is empty".into()));
    }
    let (train, held) = sweep_images(ctx)?;
    if train.is_empty() || held.is_empty() {
        return Err(CliError::Config("no input images for the sweep".into()));
    }
    ctx.config.write_to_out()?;
    let base = ctx.config.stage1_config();
    let positions = (held[0].height / base.factor) * (held[0].width / base.factor);
    let mut rows = Vec::new();
    for &per_depth in &p.per_depth_codebooks {
        for &beta in &p.betas {
            for &k in &p.codebook_sizes {
                for &d in &p.depths {
                    let cfg = rq_core::stage1::Stage1Config {
                        codebook_size: k,
                        depth: d,
                        beta,
                        per_depth_codebooks: per_depth,
                        ..base.clone()
                    };
                    let mut row = SweepRow {
                        k,
                        d,
                        beta,
                        per_depth_codebooks: per_depth,
                        bits: positions as f64 * d as f64 * (cfg.book_size() as f64).log2(),
                        mse: f64::NAN,
                        mse_by_depth: vec![],
                        usage_entropy: vec![],
                        status: "ok".into(),
                    };
                    let run = train_stage1(&train, &cfg, ctx.exec)
                        .and_then(|out| Ok((out.model.evaluate(&held, d, ctx.exec)?, out.trace)));
                    match run {
                        Ok((errors, trace)) => {
                            row.mse_by_depth = (0..d)
                                .map(|i| errors.iter().map(|e| e[i]).sum::<f64>() / errors.len() as f64)
                                .collect();
                            row.mse = row.mse_by_depth[d - 1];
                            row.usage_entropy = trace.last().map(|m| m.usage_entropy.clone()).unwrap_or_default();
                        }
                        Err(e) => row.status = format!("error: {e}"),
                    }
                    rows.push(row);
                }
            }
        }
    }
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6e}")).collect::<Vec<_>>().join(";");
    let mut csv = String::from("k,d,beta,per_depth_codebooks,bits,mse,mse_by_depth,usage_entropy,status\n");
    for r in &rows {
        csv += &format!(
            "{},{},{},{},{},{:.6e},{},{},{}\n",
            r.k,
            r.d,
            r.beta,
            r.per_depth_codebooks,
            r.bits,
            r.mse,
            join(&r.mse_by_depth),
            join(&r.usage_entropy),
            r.status.replace(',', ";")
        );
    }
    write_file(&ctx.out("sweep.csv"), csv.as_bytes())?;
    Ok(rows)
}

fn ar_model_config(ctx: &Context, stage1: &Stage1Model, t: usize) -> ModelConfig {
    ModelConfig {
        t,
        d: stage1.depth,
        k: stage1.quantizer.codes_per_depth(),
        n_z: stage1.codec.n_z(),
        code_tables: stage1.quantizer.codebooks().len(),
        ..ctx.config.model.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainArReport {
    pub sequences: usize,
    pub parameters: usize,
    pub final_nll: f64,
    pub steps: u64,
}

/// Trains on the images of `data_dir` (encoded with the stage-1
/// artifacts) or, when `codes` is given, on the `.rqcm` maps in it.
pub fn cmd_train_ar(ctx: &Context, codes: Option<&Path>) -> Result<(RqTransformer, Vec<TraceEntry>, TrainArReport)> {
    let stage1 = load_stage1(ctx.stage1_dir()?)?;
    let depth = stage1.depth;
    let data = match codes {
        Some(dir) => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(io_err(dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "rqcm"))
                .collect();
            paths.sort();
            let mut seqs = Vec::with_capacity(paths.len());
            for p in &paths {
                let map = CodeStackMap::from_bytes(&read_file(p)?)
                    .map_err(|e| CliError::Mismatch(format!("{}: {e}", p.display())))?;
                check_map(&map, &stage1)?;
                if map.depth() != depth {
                    return Err(CliError::Mismatch(format!(
                        "{}: depth {} != {depth}",
                        p.display(),
                        map.depth()
                    )));
                }
                seqs.push(map.codes().iter().map(|c| *c as usize).collect::<Vec<_>>());
            }
            ArDataset::from_codes(seqs, None, depth)?
        }
        None => {
            let images = load_images(ctx.data_dir()?)?;
            let maps = images
                .iter()
                .map(|img| stage1.codec.encode(img).map_err(stage1_error))
                .collect::<Result<Vec<_>>>()?;
            ArDataset::from_features(&maps, stage1.quantizer.clone(), depth, None, ctx.exec)?
        }
    };
    if data.is_empty() {
        return Err(CliError::Config("no input sequences".into()));
    }
    let t = data.examples[0].codes.len() / depth;
    if data.examples.iter().any(|e| e.codes.len() != t * depth) {
        return Err(CliError::Config("all code maps must have the same size".into()));
    }
    let cfg = ar_model_config(ctx, &stage1, t);
    let mut model = RqTransformer::from_quantizer(cfg, &stage1.quantizer, ctx.config.seed)?;
    let train_cfg = rq_transformer::TrainConfig {
        seed: ctx.config.seed,
        ..ctx.config.train.clone()
    };
    ctx.config.write_to_out()?;
    let trace = train(&mut model, &data, &train_cfg, ctx.exec, |_| {})?;
    write_jsonl(&ctx.out("metrics.jsonl"), &trace)?;
    write_file(&ctx.out(MODEL_FILE), &model.to_bytes())?;
    let report = TrainArReport {
        sequences: data.len(),
        parameters: model.parameter_count(),
        final_nll: evaluate(&model, &data, 16)?,
        steps: train_cfg.steps,
    };
    write_json(&ctx.out("train_report.json"), &report)?;
    Ok((model, trace, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: usize,
    pub seed: u64,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: f64,
    pub class: Option<usize>,
}

pub fn cmd_sample(ctx: &Context, model_path: &Path) -> Result<Vec<CodeStackMap>> {
    let stage1 = load_stage1(ctx.stage1_dir()?)?;
    let model = RqTransformer::from_bytes(&read_file(model_path)?)
        .map_err(|e| CliError::Mismatch(format!("{}: {e}", model_path.display())))?;
    let cfg = model.config();
    let table = model
        .params()
        .get(model.params().ids().next().expect("code table"))
        .data();
    if cfg.d != stage1.depth || cfg.n_z != stage1.codec.n_z() || table != code_table(&stage1.quantizer).as_slice() {
        return Err(CliError::Mismatch(
            "model was trained on other stage-1 artifacts".into(),
        ));
    }
    let side = (cfg.t as f64).sqrt().round() as usize;
    if side * side != cfg.t {
        return Err(CliError::Config(format!("T={} is not a square code map", cfg.t)));
    }
    let p = &ctx.config.sampling;
    let classes = p.class.map(|c| vec![c; p.count]);
    let decoder = RqDecoder::new(&model);
    let seqs = sample(
        &decoder,
        p.count,
        p.batch_size,
        &p.filter,
        classes.as_deref(),
        ctx.config.seed,
        ctx.exec,
    )?;
    let hash = stage1.quantizer.stack_hash();
    let mut maps = Vec::with_capacity(seqs.len());
    for (i, seq) in seqs.iter().enumerate() {
        let map = CodeStackMap::new(
            side as u32,
            side as u32,
            cfg.d as u32,
            cfg.k as u32,
            hash,
            seq.iter().map(|c| *c as u32).collect(),
        )?;
        let img = decode_map(&map, &stage1, cfg.d)?;
        write_file(&ctx.out(format!("sample_{i:04}.rqcm")), &map.to_bytes())?;
        write_file(&ctx.out(format!("sample_{i:04}.ppm")), &img.to_ppm_bytes())?;
        let meta = SampleMeta {
            index: i,
            seed: ctx.config.seed,
            temperature: p.filter.temperature,
            top_k: p.filter.top_k,
            top_p: p.filter.top_p,
            class: p.class,
        };
        write_json(&ctx.out(format!("sample_{i:04}.json")), &meta)?;
        maps.push(map);
    }
    Ok(maps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub batch_size: usize,
    pub images: usize,
    pub rq_images_per_second: f64,
    pub naive_images_per_second: f64,
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rq_parameters: usize,
    pub naive_parameters: usize,
    pub throughput: Vec<Throughput>,
    /// Attention cost at the configured model.
    pub model_flops: FlopReport,
    /// Attention cost at the reference geometry.
    pub reference_flops: FlopReport,
}

fn images_per_second(decoder: &dyn Decoder, count: usize, batch: usize, seed: u64, exec: Execution) -> Result<f64> {
    let start = Instant::now();
    sample(decoder, count, batch, &Default::default(), None, seed, exec)?;
    Ok(count as f64 / start.elapsed().as_secs_f64())
}

/// Sampling throughput of both architectures at matched width and depth,
/// from randomly initialised weights; stage-1 decoding is not timed.
pub fn cmd_bench(ctx: &Context) -> Result<BenchReport> {
    let p = &ctx.config.bench;
    let cfg = p.model.clone();
    let mut r = rng::stream(ctx.config.seed, &[0]);
    let table = (0..cfg.code_tables * cfg.k * cfg.n_z)
        .map(|_| r.random::<f64>() - 0.5)
        .collect();
    let rq = RqTransformer::new(cfg.clone(), table, ctx.config.seed)?;
    let naive = NaiveTransformer::new(NaiveConfig::matched(&cfg), ctx.config.seed)?;
    let (rq_dec, naive_dec) = (RqDecoder::new(&rq), NaiveDecoder::new(&naive));
    let mut throughput = Vec::with_capacity(p.batch_sizes.len());
    for &b in &p.batch_sizes {
        if b == 0 {
            return Err(CliError::Config("batch sizes must be >= 1".into()));
        }
        let images = p.images.max(b);
        let rq_ips = images_per_second(&rq_dec, images, b, ctx.config.seed, ctx.exec)?;
        let naive_ips = images_per_second(&naive_dec, images, b, ctx.config.seed, ctx.exec)?;
        throughput.push(Throughput {
            batch_size: b,
            images,
            rq_images_per_second: rq_ips,
            naive_images_per_second: naive_ips,
            speedup: rq_ips / naive_ips,
        });
    }
    let report = BenchReport {
        rq_parameters: rq.parameter_count(),
        naive_parameters: naive.parameter_count(),
        throughput,
        model_flops: flop_report(&cfg, ctx.config.seed)?,
        reference_flops: flop_report(&p.flops, ctx.config.seed)?,
    };
    ctx.config.write_to_out()?;
    write_json(&ctx.out("bench.json"), &report)?;
    Ok(report)
}
