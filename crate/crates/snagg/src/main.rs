//! Command-line entry point: dataset generation, training, network
//! expansion, evaluation, flow encoding and gradient verification, all driven
//! by a flat key=value config file and one mandatory seed.
//!
//! Exit codes: 0 success, 2 config error, 3 I/O error, 4 training
//! divergence, 5 check failure.

use clap::{Args, Parser, Subcommand};
use snagg::checkpoint::{self, LoadedCheckpoint};
use snagg::config::{RunConfig, Stream};
use snagg::data::{self, Split};
use snagg::error::{Error, Result};
use snagg::eval::{self, EvalSettings, FusionStrategy};
use snagg::flow::{self, FlowParams};
use snagg::gradcheck;
use snagg::model::{self, ModelSpec};
use snagg::train::{self, MetricRecord, TrainState};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "snagg", about = "Temporal pooling and LSTM video classification lab")]
struct Cli {
    /// Worker thread cap (SNAGG_THREADS overrides).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory from a config file.
    GenData(GenDataArgs),
    /// Train a model; writes checkpoints and a metrics CSV.
    Train(TrainArgs),
    /// Expand a trained checkpoint to a larger frame count.
    Expand(ExpandArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Convert an image dataset into flow images.
    FlowEncode(FlowEncodeArgs),
    /// Verify reverse-mode gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overwrite an existing dataset directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override train.max_steps from the config.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Initialize shape-compatible parameters from a checkpoint.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Resume from the final checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct ExpandArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    target_frames: usize,
    #[arg(long)]
    out: PathBuf,
    /// Must match the source architecture when given.
    #[arg(long)]
    kind: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Split to evaluate: train or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Augmentation passes averaged per video (0 = single pass).
    #[arg(long, default_value_t = 0)]
    num_samples: usize,
    #[arg(long, default_value = "weighted_sum")]
    strategy: String,
    /// Resize edge for augmentation (with --crop).
    #[arg(long)]
    resize: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    /// Flow-stream checkpoint for two-stream fusion.
    #[arg(long)]
    flow_ckpt: Option<PathBuf>,
    /// Flow-stream dataset directory (defaults to --dataset).
    #[arg(long)]
    flow_dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    fusion_weight: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlowEncodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    #[arg(long, default_value_t = 0.1)]
    smoothness: f64,
    /// Raw frames advanced per emitted flow image.
    #[arg(long, default_value_t = 1)]
    fps_ratio: usize,
    /// Desk-to-full-scale unit conversion applied before encoding.
    #[arg(long, default_value_t = 14.0)]
    flow_scale: f64,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Architecture to check: one kind name, "lstm", or "all".
    #[arg(long, default_value = "all")]
    arch: String,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() {
    let cli = Cli::parse();
    let threads = std::env::var("SNAGG_THREADS")
        .ok()
        .and_then(|s| s.parse().ok())
        .or(cli.threads);
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Expand(args) => cmd_expand(args),
        Command::Eval(args) => cmd_eval(args),
        Command::FlowEncode(args) => cmd_flow_encode(args),
        Command::GradCheck(args) => cmd_grad_check(args),
    };
    if let Err(e) = result {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = RunConfig::from_file(&args.config)?;
    let task = cfg
        .task
        .clone()
        .ok_or_else(|| Error::Config("missing required field `dataset.task`".into()))?;
    let dir = &cfg.dataset_path;
    if dir.join("manifest.json").exists() && !args.force {
        return Err(Error::Io(format!(
            "{} already holds a dataset; pass --force to overwrite",
            dir.display()
        )));
    }
    data::generate(&task, dir)?;
    println!(
        "generated {} videos in {}",
        task.train_videos + task.test_videos,
        dir.display()
    );
    Ok(())
}

fn write_metrics(path: &Path, metrics: &[MetricRecord]) -> Result<()> {
    let mut text = String::from("record,step,loss_or_name,lr_or_value\n");
    for m in metrics {
        text.push_str(&m.to_csv_line());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::from_file(&args.config)?;
    if let Some(steps) = args.max_steps {
        cfg.max_steps = steps;
    }
    if cfg.stream == Stream::TwoStream {
        return Err(Error::Config(
            "training runs on one stream; set stream=image or stream=flow".into(),
        ));
    }
    let spec = cfg
        .model
        .clone()
        .ok_or_else(|| Error::Config("missing required field `model.kind`".into()))?;
    let dataset = data::load(&cfg.dataset_path)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let final_path = cfg.output_dir.join("final.ckpt");

    let frame_scale = if spec.is_sequential() && cfg.optimizer.lstm_lr_scale_by_frames {
        spec.frames() as f64
    } else {
        1.0
    };
    let mut state = if args.resume {
        let loaded = checkpoint::load(&final_path)?;
        if loaded.spec != spec {
            return Err(Error::Config(
                "checkpoint model does not match the config model".into(),
            ));
        }
        loaded.into_train_state(&cfg.optimizer)
    } else {
        let mut params = model::init_params(&spec, cfg.seed)?;
        if let Some(src) = &args.init_from {
            let loaded = checkpoint::load(src)?;
            let copied = checkpoint::init_from_compatible(&mut params, &loaded.params);
            println!(
                "initialized {copied}/{} parameters from {}",
                params.len(),
                src.display()
            );
        }
        TrainState::new(params, cfg.seed, frame_scale, &cfg.optimizer)
    };

    let settings = cfg.train_settings();
    let chunk = if cfg.checkpoint_every == 0 {
        settings.max_steps.max(1)
    } else {
        cfg.checkpoint_every
    };
    let mut metrics: Vec<MetricRecord> = Vec::new();
    let mut last_ckpt: Option<PathBuf> = None;
    loop {
        let until = (state.step + chunk).min(settings.max_steps);
        let chunk_settings = train::TrainSettings {
            max_steps: until,
            ..settings.clone()
        };
        let outcome =
            train::train_loop_from(&dataset, &spec, state, &cfg.optimizer, &chunk_settings, None)
                .map_err(|e| match (&e, &last_ckpt) {
                    (Error::Training(m), Some(p)) => {
                        Error::Training(format!("{m}; last good checkpoint: {}", p.display()))
                    }
                    _ => e,
                })?;
        state = outcome.state;
        metrics.extend(outcome.metrics);
        if state.step >= settings.max_steps {
            break;
        }
        let path = cfg.output_dir.join(format!("step-{:06}.ckpt", state.step));
        checkpoint::save(&path, &state, &spec)?;
        last_ckpt = Some(path);
    }
    checkpoint::save(&final_path, &state, &spec)?;
    write_metrics(&cfg.output_dir.join("metrics.csv"), &metrics)?;

    let report = eval::evaluate(
        &spec,
        &state.params,
        &dataset,
        Split::Test,
        &EvalSettings {
            num_samples: cfg.eval_num_samples,
            strategy: cfg.eval_strategy,
            geometry: cfg.eval_geometry,
            seed: cfg.seed,
        },
        None,
    )?;
    let csv = eval::reports_to_csv(&[report]);
    fs::write(cfg.output_dir.join("eval.csv"), &csv)?;
    print!("{csv}");
    println!("final checkpoint: {}", final_path.display());
    Ok(())
}

fn cmd_expand(args: ExpandArgs) -> Result<()> {
    let loaded = checkpoint::load(&args.src)?;
    if let Some(kind) = &args.kind {
        if kind != loaded.spec.kind_name() {
            return Err(Error::Contract(format!(
                "source checkpoint is {}, not {kind}",
                loaded.spec.kind_name()
            )));
        }
    }
    let LoadedCheckpoint {
        spec, params, seed, ..
    } = loaded;
    let (target_spec, target_params) = train::expand_network(&spec, &params, args.target_frames)?;
    // Expansion starts a fresh optimization: step 0, zero velocity.
    let state = TrainState::new(target_params, seed, 1.0, &train::OptimizerConfig::default());
    checkpoint::save(&args.out, &state, &target_spec)?;
    println!(
        "expanded {} from {} to {} frames -> {}",
        target_spec.kind_name(),
        spec.frames(),
        args.target_frames,
        args.out.display()
    );
    Ok(())
}

fn load_for_eval(path: &Path) -> Result<(ModelSpec, snagg::params::ParamSet)> {
    let loaded = checkpoint::load(path)?;
    Ok((loaded.spec, loaded.params))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (spec, params) = load_for_eval(&args.ckpt)?;
    let dataset = data::load(&args.dataset)?;
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => {
            return Err(Error::Config(format!(
                "split must be train or test, got {other:?}"
            )))
        }
    };
    let geometry = match (args.resize, args.crop) {
        (None, None) => None,
        (Some(resize), Some(crop)) => Some(eval::AugmentGeometry { resize, crop }),
        _ => {
            return Err(Error::Config(
                "--resize and --crop must be given together".into(),
            ))
        }
    };
    let settings = EvalSettings {
        num_samples: args.num_samples,
        strategy: FusionStrategy::parse(&args.strategy)?,
        geometry,
        seed: args.seed,
    };
    let flow_parts = match &args.flow_ckpt {
        None => None,
        Some(p) => {
            let (fspec, fparams) = load_for_eval(p)?;
            let fdataset = match &args.flow_dataset {
                Some(d) => data::load(d)?,
                None => dataset.clone(),
            };
            Some((fspec, fparams, fdataset, args.fusion_weight))
        }
    };
    let report = eval::evaluate(
        &spec,
        &params,
        &dataset,
        split,
        &settings,
        flow_parts.as_ref().map(|(s, p, d, w)| (s, p, d, *w)),
    )?;
    let csv = eval::reports_to_csv(&[report]);
    print!("{csv}");
    if let Some(out) = args.out {
        fs::write(&out, &csv)?;
    }
    Ok(())
}

fn cmd_flow_encode(args: FlowEncodeArgs) -> Result<()> {
    let dataset = data::load(&args.input)?;
    let params = FlowParams {
        iterations: args.iterations,
        smoothness: args.smoothness,
        sample_fps_ratio: args.fps_ratio,
        flow_scale: args.flow_scale,
    };
    let flow_videos = flow::flow_stream_videos(&dataset.videos, &params)?;
    data::write_dataset(
        &args.out,
        &dataset.task,
        dataset.num_classes,
        &flow_videos,
        "flow",
    )?;
    println!(
        "encoded {} flow videos into {}",
        flow_videos.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<()> {
    let specs: Vec<ModelSpec> = match args.arch.as_str() {
        "all" => gradcheck::standard_specs(),
        "lstm" => vec![gradcheck::micro_lstm_spec()],
        name => vec![gradcheck::micro_arch_spec(snagg::arch::ArchKind::parse(
            name,
        )?)],
    };
    let mut all_passed = true;
    println!(
        "{:<24} {:<20} {:>8} {:>14} {:>7}",
        "model", "block", "values", "max_rel_err", "status"
    );
    for spec in &specs {
        let report = gradcheck::check_model(spec, args.tolerance, args.seed, None)?;
        for b in &report.blocks {
            println!(
                "{:<24} {:<20} {:>8} {:>14.3e} {:>7}",
                report.model,
                b.block,
                b.values,
                b.max_rel_err,
                if b.passed { "ok" } else { "FAIL" }
            );
        }
        all_passed &= report.passed();
    }
    if !all_passed {
        return Err(Error::CheckFailed(format!(
            "gradient check failed at tolerance {}",
            args.tolerance
        )));
    }
    Ok(())
}
