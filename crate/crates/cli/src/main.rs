//! Command-line entry points: train, eval, ablate, visualize.
//!
//! Every run is described by a [`RunConfig`]; values come from defaults,
//! then the optional TOML config file, then individual CLI flags (highest
//! precedence). Every artifact embeds the config hash and seed.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mambafuse::ablate::{run_ablation, GridKind};
use mambafuse::datagen::save_rgb_png;
use mambafuse::detector::{decode_and_nms, Model};
use mambafuse::eval::render_overlay;
use mambafuse::tensor::no_grad;
use mambafuse::train::{
    build_data, evaluate_model, load_checkpoint, restore_params, train, Report, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "mambafuse",
    about = "Dual-modality (RGB+IR) small-object detector: training, evaluation, ablations and overlays",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// TOML config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory (YOLO layout); omit for the synthetic benchmark.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Backbone fusion variant: full | concat-fusion | uni-mamba | bi-mamba |
    /// dgc-gate | single-stream.
    #[arg(long)]
    variant: Option<String>,
    /// Neck: fpn | hfan.
    #[arg(long)]
    neck: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, value_name = "PIXELS")]
    img_size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write log, checkpoints and report.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Continue from <out>/last.ckpt if present.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run an ablation grid: fusion-neck or hfan-components.
    Ablate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        grid: String,
        /// Number of seeds (cells share seeds 0..n).
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Parallel worker threads.
        #[arg(long, default_value_t = 2)]
        jobs: usize,
    },
    /// Render side-by-side RGB/IR overlays for eval samples.
    Visualize {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated eval sample indices.
        #[arg(long, default_value = "0,1,2,3")]
        samples: String,
    },
}

/// defaults <- config file <- flags.
fn resolve_config(common: &CommonOpts) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<RunConfig>(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(data) = &common.data {
        cfg.data_dir = Some(data.display().to_string());
    }
    if let Some(variant) = &common.variant {
        cfg.variant = variant.clone();
    }
    if let Some(neck) = &common.neck {
        cfg.neck = neck.clone();
    }
    if let Some(epochs) = common.epochs {
        cfg.epochs = epochs;
    }
    if let Some(batch) = common.batch {
        cfg.batch_size = batch;
    }
    if let Some(img) = common.img_size {
        cfg.img_size = img;
    }
    cfg.model_config().context("invalid configuration")?;
    Ok(cfg)
}

fn out_dir(common: &CommonOpts) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("runs/default"))
}

fn cmd_train(common: &CommonOpts, resume: bool) -> Result<()> {
    let cfg = resolve_config(common)?;
    let dir = out_dir(common);
    println!("training {}+{} (seed {}, hash {})", cfg.variant, cfg.neck, cfg.seed, cfg.hash());
    let outcome = train(&cfg, Some(&dir), resume)?;
    println!(
        "done: best mAP@.5 = {:.4} at epoch {} ({} epochs total)",
        outcome.best_map,
        outcome.best_epoch,
        outcome.history.len()
    );
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    let loaded = load_checkpoint(checkpoint)?;
    if loaded.config_hash != cfg.hash() {
        bail!(
            "checkpoint was trained under config hash {} but this run resolves to {}; \
             pass the same config/flags used for training",
            loaded.config_hash,
            cfg.hash()
        );
    }
    let model = Model::new(cfg.model_config()?, cfg.seed)?;
    restore_params(&model.params(), &loaded)?;
    Ok(model)
}

fn cmd_eval(common: &CommonOpts, checkpoint: &Path) -> Result<()> {
    let cfg = resolve_config(common)?;
    let model = load_model(&cfg, checkpoint)?;
    let splits = build_data(&cfg)?;
    if splits.eval.is_empty() {
        bail!("empty eval split");
    }
    let result = evaluate_model(&model, &splits.eval, &cfg)?;
    let report = Report::from_match_result(&cfg.hash(), cfg.seed, &result);
    println!("{}", report.to_json());
    println!();
    println!("{:<10} {:>8}", "class", "AP@.5");
    for (class, ap) in &result.ap_per_class {
        println!("{class:<10} {ap:>8.4}");
    }
    println!("{:<10} {:>8.4}", "mAP@.5", result.map);
    let dir = out_dir(common);
    std::fs::create_dir_all(&dir)?;
    report.write(&dir.join("eval_report.json"))?;
    Ok(())
}

fn cmd_ablate(common: &CommonOpts, grid: &str, seeds: usize, jobs: usize) -> Result<()> {
    if seeds == 0 {
        bail!("need at least one seed");
    }
    let cfg = resolve_config(common)?;
    let kind = GridKind::parse(grid)?;
    let seed_list: Vec<u64> = (0..seeds as u64).map(|s| cfg.seed + s).collect();
    let dir = out_dir(common);
    println!(
        "running {} grid with seeds {:?} on {} worker(s)",
        kind.name(),
        seed_list,
        jobs
    );
    let table = run_ablation(kind, &cfg, &seed_list, jobs, Some(&dir))?;
    println!("{}", table.render());
    println!("table written to {}", dir.display());
    Ok(())
}

fn cmd_visualize(common: &CommonOpts, checkpoint: &Path, samples: &str) -> Result<()> {
    let cfg = resolve_config(common)?;
    let model = load_model(&cfg, checkpoint)?;
    let splits = build_data(&cfg)?;
    let loaded = load_checkpoint(checkpoint)?;
    let hash8: String = loaded.config_hash.chars().take(8).collect();
    let dir = out_dir(common);
    std::fs::create_dir_all(&dir)?;

    let ids: Vec<usize> = samples
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<usize>().context("bad sample id"))
        .collect::<Result<_>>()?;
    for id in ids {
        let Some(sample) = splits.eval.get(id) else {
            eprintln!("warning: sample {id} not in eval split, skipping");
            continue;
        };
        let batch =
            mambafuse::datagen::iterate_batches(&splits.eval[id..id + 1], 1, 0, false, cfg.img_size)?;
        let primary = if cfg.input_modality == "ir" { &batch[0].ir } else { &batch[0].rgb };
        let pred = no_grad(|| model.forward(primary, &batch[0].ir))?;
        let dets = decode_and_nms(&pred, cfg.conf_threshold, cfg.nms_iou_threshold)?;
        let canvas = render_overlay(&sample.rgb, &sample.ir, &dets[0], &batch[0].boxes[0]);
        let path = dir.join(format!("sample{id}_{hash8}.png"));
        save_rgb_png(&canvas, &path)?;
        println!(
            "{}: {} detections, {} ground truths -> {}",
            id,
            dets[0].len(),
            batch[0].boxes[0].len(),
            path.display()
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train { common, resume } => cmd_train(common, *resume),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint),
        Command::Ablate { common, grid, seeds, jobs } => cmd_ablate(common, grid, *seeds, *jobs),
        Command::Visualize { common, checkpoint, samples } => {
            cmd_visualize(common, checkpoint, samples)
        }
    }
}
