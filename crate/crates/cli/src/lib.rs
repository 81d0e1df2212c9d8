//! The `rq` command-line tool: stage-1 codec and codebook training, image
//! encoding and decoding, rate-distortion sweeps, autoregressive training,
//! sampling and benchmarks.
//!
//! Exit codes: 0 success, 1 failed check or I/O error, 2 configuration
//! error, 3 training divergence, 4 incompatible artifacts.

pub mod artifacts;
pub mod checks;
pub mod commands;
pub mod config;
mod error;

pub use commands::Context;
pub use config::RunConfig;
pub use error::{CliError, Result};

use clap::{Args, Parser, Subcommand};
use rq_core::Execution;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "rq",
    version,
    about = "Residual-quantized image codes and their autoregressive model"
)]
pub struct Cli {
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Stage1Args {
    #[arg(long)]
    pub factor: Option<usize>,
    #[arg(long)]
    pub n_z: Option<usize>,
    /// Codes per codebook (K).
    #[arg(long, short = 'k')]
    pub codebook_size: Option<usize>,
    /// Quantization depth (D).
    #[arg(long, short = 'd')]
    pub depth: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// D codebooks of K/D codes instead of one shared codebook.
    #[arg(long)]
    pub per_depth_codebooks: bool,
    /// Keep the orthonormal patch transform fixed.
    #[arg(long)]
    pub frozen_codec: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write seeded synthetic PPM images.
    Synth {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the patch codec and codebook(s).
    TrainStage1 {
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        stage1: Stage1Args,
    },
    /// Encode an image into a code map and per-depth reconstructions.
    Encode {
        image: PathBuf,
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long, short = 'd')]
        depth: Option<usize>,
    },
    /// Decode a code map into an image.
    Decode {
        codes: PathBuf,
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long, short = 'd')]
        depth: Option<usize>,
    },
    /// Rate-distortion table over a (K, D) grid.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        ds: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        /// Also run every cell with per-depth codebooks.
        #[arg(long)]
        compare_per_depth: bool,
        #[command(flatten)]
        stage1: Stage1Args,
    },
    /// Train the autoregressive model on encoded images or code maps.
    TrainAr {
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory of `.rqcm` code maps to train on instead of images.
        #[arg(long)]
        codes: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Soft-label temperature.
        #[arg(long)]
        soft_label: Option<f64>,
        /// Resample codes from Q_tau on every batch.
        #[arg(long)]
        stochastic: Option<f64>,
        #[arg(long)]
        n_spatial: Option<usize>,
        #[arg(long)]
        n_depth: Option<usize>,
        #[arg(long)]
        n_e: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
    },
    /// Sample code maps and decode them to images.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        class: Option<usize>,
    },
    /// Sampling throughput and attention cost of both architectures.
    Bench {
        #[arg(long, value_delimiter = ',')]
        batch_sizes: Option<Vec<usize>>,
        #[arg(long)]
        images: Option<usize>,
    },
    /// Finite-difference gradient checks.
    GradCheck,
    /// Oracle checks of the core algorithms and formats.
    Selftest,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_stage1(cfg: &mut RunConfig, a: Stage1Args) {
    let s = &mut cfg.stage1;
    set(&mut s.factor, a.factor);
    set(&mut s.n_z, a.n_z);
    set(&mut s.codebook_size, a.codebook_size);
    set(&mut s.depth, a.depth);
    set(&mut s.beta, a.beta);
    set(&mut s.decay, a.decay);
    set(&mut s.epochs, a.epochs);
    set(&mut s.batch_size, a.batch_size);
    set(&mut s.lr, a.lr);
    s.per_depth_codebooks |= a.per_depth_codebooks;
    if a.frozen_codec {
        s.train_codec = false;
    }
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn report_checks(checks: &[checks::Check], file: &str, ctx: &Context) -> Result<()> {
    for c in checks {
        println!(
            "[{}] {} (error {:.3e}, tolerance {:.0e})",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.error,
            c.tolerance
        );
    }
    artifacts::write_json(&ctx.config.out_dir.join(file), &checks)?;
    match checks.iter().filter(|c| !c.pass).count() {
        0 => Ok(()),
        n => Err(CliError::Check(format!("{n} check(s) failed"))),
    }
}

/// Builds the run configuration from the config file and flags, then runs
/// the command.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.out_dir, cli.out);
    let exec = match cli.threads {
        Some(0) => return Err(CliError::Config("--threads must be >= 1".into())),
        Some(1) => Execution::Sequential,
        _ => Execution::Parallel,
    };
    #[cfg(feature = "parallel")]
    if let Some(n) = cli.threads {
        // A pool may already exist when `run` is called more than once.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let some = |p: Option<PathBuf>, slot: &mut Option<PathBuf>| {
        if p.is_some() {
            *slot = p;
        }
    };
    match cli.command {
        Command::Synth { count, size } => {
            set(&mut cfg.synth.count, count);
            set(&mut cfg.synth.size, size);
            let ctx = Context { config: cfg, exec };
            let paths = commands::cmd_synth(&ctx)?;
            println!("wrote {} images to {}", paths.len(), ctx.config.out_dir.display());
        }
        Command::TrainStage1 { data, stage1 } => {
            some(data, &mut cfg.data_dir);
            apply_stage1(&mut cfg, stage1);
            let ctx = Context { config: cfg, exec };
            let (_, trace) = commands::cmd_train_stage1(&ctx)?;
            if let Some(last) = trace.last() {
                println!(
                    "epoch {}: l_recon {:.6e} l_commit {:.6e} depth error {:?}",
                    last.epoch, last.l_recon, last.l_commit, last.depth_error
                );
            }
        }
        Command::Encode { image, stage1, depth } => {
            some(stage1, &mut cfg.stage1_dir);
            let ctx = Context { config: cfg, exec };
            print_json(&commands::cmd_encode(&ctx, &image, depth)?);
        }
        Command::Decode { codes, stage1, depth } => {
            some(stage1, &mut cfg.stage1_dir);
            let ctx = Context { config: cfg, exec };
            println!("{}", commands::cmd_decode(&ctx, &codes, depth)?.display());
        }
        Command::Sweep {
            data,
            heldout,
            ks,
            ds,
            betas,
            compare_per_depth,
            stage1,
        } => {
            some(data, &mut cfg.data_dir);
            some(heldout, &mut cfg.heldout_dir);
            set(&mut cfg.sweep.codebook_sizes, ks);
            set(&mut cfg.sweep.depths, ds);
            set(&mut cfg.sweep.betas, betas);
            if compare_per_depth {
                cfg.sweep.per_depth_codebooks = vec![false, true];
            }
            apply_stage1(&mut cfg, stage1);
            let ctx = Context { config: cfg, exec };
            for r in commands::cmd_sweep(&ctx)? {
                println!(
                    "K={:<5} D={} beta={} per_depth={} bits={:<6} mse={:.6e} {}",
                    r.k, r.d, r.beta, r.per_depth_codebooks, r.bits, r.mse, r.status
                );
            }
        }
        Command::TrainAr {
            stage1,
            data,
            codes,
            steps,
            batch_size,
            lr,
            soft_label,
            stochastic,
            n_spatial,
            n_depth,
            n_e,
            heads,
        } => {
            some(stage1, &mut cfg.stage1_dir);
            some(data, &mut cfg.data_dir);
            set(&mut cfg.train.steps, steps);
            set(&mut cfg.train.batch_size, batch_size);
            set(&mut cfg.train.lr, lr);
            if soft_label.is_some() {
                cfg.train.soft_label = soft_label;
            }
            if stochastic.is_some() {
                cfg.train.stochastic = stochastic;
            }
            set(&mut cfg.model.n_spatial, n_spatial);
            set(&mut cfg.model.n_depth, n_depth);
            set(&mut cfg.model.n_e, n_e);
            set(&mut cfg.model.heads, heads);
            let ctx = Context { config: cfg, exec };
            let (_, _, report) = commands::cmd_train_ar(&ctx, codes.as_deref())?;
            print_json(&report);
        }
        Command::Sample {
            model,
            stage1,
            count,
            batch_size,
            top_k,
            top_p,
            temperature,
            class,
        } => {
            some(stage1, &mut cfg.stage1_dir);
            set(&mut cfg.sampling.count, count);
            set(&mut cfg.sampling.batch_size, batch_size);
            if top_k.is_some() {
                cfg.sampling.filter.top_k = top_k;
            }
            set(&mut cfg.sampling.filter.top_p, top_p);
            set(&mut cfg.sampling.filter.temperature, temperature);
            if class.is_some() {
                cfg.sampling.class = class;
            }
            let ctx = Context { config: cfg, exec };
            let maps = commands::cmd_sample(&ctx, &model)?;
            println!("wrote {} samples to {}", maps.len(), ctx.config.out_dir.display());
        }
        Command::Bench { batch_sizes, images } => {
            set(&mut cfg.bench.batch_sizes, batch_sizes);
            set(&mut cfg.bench.images, images);
            let ctx = Context { config: cfg, exec };
            print_json(&commands::cmd_bench(&ctx)?);
        }
        Command::GradCheck => {
            let ctx = Context { config: cfg, exec };
            report_checks(&checks::grad_checks(ctx.config.seed), "grad_check.json", &ctx)?;
        }
        Command::Selftest => {
            let ctx = Context { config: cfg, exec };
            report_checks(&checks::self_tests(ctx.config.seed), "selftest.json", &ctx)?;
        }
    }
    Ok(())
}
