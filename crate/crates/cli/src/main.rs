//! `tmr`: synthetic data, model training, text removal, descriptor
//! extraction and evaluation for trademark retrieval.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use trademark_attention::features::MethodConfig;

use crate::config::PipelineConfig;

#[derive(Parser)]
#[command(name = "tmr", version, about = "Attention-based trademark retrieval pipeline")]
struct Cli {
    /// Pipeline config (TOML). Flags override its fields.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Start from the CPU-sized preset instead of the reference defaults
    /// when no config file is given.
    #[arg(long, global = true)]
    desk: bool,
    /// Cache root for descriptor stores.
    #[arg(long, global = true, env = "TMR_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    models_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    reports_dir: Option<PathBuf>,
    /// Overrides the top-level seed and every per-section seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Render a synthetic pixel-level text localization set.
    GenPtl {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        canvas: Option<u32>,
    },
    /// Render a labelled catalog of the three trademark types.
    GenTypes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        per_class: usize,
        #[arg(long)]
        canvas: Option<u32>,
    },
    /// Render a figure-identity retrieval benchmark (catalog + queries).
    GenBench {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        identities: usize,
        #[arg(long, default_value_t = 3)]
        overlays: usize,
        #[arg(long)]
        canvas: Option<u32>,
    },
    /// Train the text segmenter on a PTL manifest.
    TrainSegmenter {
        #[arg(long)]
        ptl: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune the CAM classifier on a balanced split of a labelled catalog.
    TrainCam {
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Remove text from every catalog image into a parallel catalog.
    RemoveText {
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write mask, inpainted image and box per image under `out/debug`.
        #[arg(long)]
        dump: bool,
    },
    /// Describe the catalog into the (resumable) descriptor store.
    Extract {
        /// Method tag such as ATRHA_CAMSA_MAC or SPOC_PCAW.
        #[arg(long)]
        method: Option<MethodConfig>,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Rank the catalog for every query and report MAP@K and NAR.
    Evaluate {
        #[arg(long)]
        method: Option<MethodConfig>,
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Store to evaluate; the cached store of the configured models when unset.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None if cli.desk => PipelineConfig::desk(),
        None => PipelineConfig::default(),
    };
    if let Some(dir) = &cli.cache_dir {
        config.paths.cache = dir.clone();
    }
    if let Some(dir) = &cli.models_dir {
        config.paths.models = dir.clone();
    }
    if let Some(dir) = &cli.reports_dir {
        config.paths.reports = dir.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.synthesis.rng_seed = seed;
        config.segmenter.seed = seed;
        config.cam.train.seed = seed;
    }
    match &cli.command {
        Command::GenPtl { count, canvas, .. } => {
            if let Some(n) = count {
                config.synthesis.count = *n;
            }
            if let Some(c) = canvas {
                config.synthesis.canvas = *c;
            }
        }
        Command::GenTypes { canvas, .. } | Command::GenBench { canvas, .. } => {
            if let Some(c) = canvas {
                config.synthesis.canvas = *c;
            }
        }
        Command::TrainSegmenter { ptl, epochs } => {
            if ptl.is_some() {
                config.paths.ptl = ptl.clone();
            }
            if let Some(e) = epochs {
                config.segmenter.epochs = *e;
            }
        }
        Command::TrainCam { catalog, epochs } => {
            if catalog.is_some() {
                config.paths.type_catalog = catalog.clone();
            }
            if let Some(e) = epochs {
                config.cam.train.epochs = *e;
            }
        }
        Command::RemoveText { catalog, .. } | Command::Extract { catalog, .. } => {
            if catalog.is_some() {
                config.paths.catalog = catalog.clone();
            }
        }
        Command::Evaluate { eval, k, .. } => {
            if eval.is_some() {
                config.paths.eval = eval.clone();
            }
            if let Some(k) = k {
                config.eval.k = *k;
            }
        }
        Command::Config => {}
    }
    if let Command::Extract { method: Some(m), .. } | Command::Evaluate { method: Some(m), .. } = &cli.command {
        config.method = *m;
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<()> {
    let config = effective_config(cli)?;
    match &cli.command {
        Command::Config => print!("{}", config.to_toml()?),
        Command::GenPtl { out, .. } => {
            pipeline::gen_ptl(&config, out)?;
        }
        Command::GenTypes { out, per_class, .. } => {
            pipeline::gen_types(&config, out, *per_class)?;
        }
        Command::GenBench {
            out,
            identities,
            overlays,
            ..
        } => pipeline::gen_bench(&config, out, *identities, *overlays)?,
        Command::TrainSegmenter { .. } => pipeline::train_segmenter_cmd(&config)?,
        Command::TrainCam { .. } => pipeline::train_cam_cmd(&config)?,
        Command::RemoveText { out, dump, .. } => pipeline::remove_text_cmd(&config, out, *dump)?,
        Command::Extract { .. } => {
            pipeline::extract_cmd(&config)?;
        }
        Command::Evaluate { store, .. } => {
            pipeline::evaluate_cmd(&config, store.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
