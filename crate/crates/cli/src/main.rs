use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use pft_core::checks::run_grad_suite;
use pft_core::eval::ConfusionMatrix;
use pft_core::inference::{multi_scale_inference, DEFAULT_TTA_SCALES};
use pft_core::synth::{dataset, generate_scene, split_seed, write_sample, Split};
use pft_core::train::{
    ablate, compare, evaluate, export_attention, export_segmentation, run_summary, train, Ablation, TrainConfig,
    TrainState,
};
use pft_core::PftError;

#[derive(Parser)]
#[command(name = "pft", version, about = "Pyramid fusion transformer segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a field, e.g. `--set iterations=100 --set loss.attn=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing loss.csv, metrics.json and final.ckpt.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint (its embedded config is used).
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        /// Stop after this many steps instead of the full schedule.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Evaluate a checkpoint on its validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use test-time augmentation (six scales, horizontal flip).
        #[arg(long)]
        multi_scale: bool,
        /// Write predicted segmentation maps here.
        #[arg(long)]
        save_seg: Option<PathBuf>,
        /// Write the metrics JSON here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train paired baseline and ablated runs and report the deltas.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Variant name, or `all`.
        #[arg(long)]
        variant: String,
        #[arg(long)]
        until: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write every attention map of one validation image.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Index into the checkpoint's validation split.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Write synthetic scenes to disk.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val", value_parser = ["train", "val"])]
        split: String,
        #[arg(long, default_value_t = 16)]
        size: usize,
    },
}

/// Failures mapped to exit codes.
enum Failure {
    Usage(String),
    Check(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<PftError>() {
            Some(PftError::Config(msg)) => Failure::Usage(msg.clone()),
            _ => Failure::Run(e),
        }
    }
}

impl From<PftError> for Failure {
    fn from(e: PftError) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig, Failure> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    for kv in &args.overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        config.apply_override(key.trim(), value.trim())?;
    }
    config.validate()?;
    Ok(config)
}

fn load_state(path: &Path) -> Result<TrainState, Failure> {
    Ok(TrainState::load(path).with_context(|| format!("loading {}", path.display()))?)
}

fn print_json(value: &serde_json::Value, out: Option<&Path>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    println!("{text}");
    if let Some(path) = out {
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            config,
            out,
            resume,
            until,
        } => {
            let state = match resume {
                Some(path) => {
                    if !config.overrides.is_empty() {
                        return Err(Failure::Usage("--set cannot be combined with --resume".into()));
                    }
                    load_state(&path)?
                }
                None => TrainState::new(load_config(&config)?)?,
            };
            log::info!("config hash {}", state.config.hash());
            let outcome = train(state, until, Some(&out))?;
            let report = outcome.final_report().expect("final evaluation");
            print_json(
                &json!({
                    "step": outcome.state.step,
                    "miou": report.miou,
                    "mean_pearson": report.mean_pearson(),
                    "checkpoint": out.join("final.ckpt"),
                }),
                None,
            )
        }
        Command::Eval {
            checkpoint,
            multi_scale,
            save_seg,
            out,
        } => {
            let state = load_state(&checkpoint)?;
            let val = state.validation_set()?;
            let classes = state.config.classes;
            let (miou, per_class, pearson) = if multi_scale {
                let mut cm = ConfusionMatrix::new(classes);
                for sample in &val {
                    let pred = multi_scale_inference(&state.model, &sample.image, &DEFAULT_TTA_SCALES, true)?;
                    cm.accumulate(&pred, &sample.labels)?;
                    if let Some(dir) = &save_seg {
                        export_segmentation(&pred, classes, &dir.join(sample.seed.to_string()))?;
                    }
                }
                let (miou, per_class) = cm.miou()?;
                (miou, per_class, None)
            } else {
                let report = evaluate(&state.model, &val, state.config.pearson_samples)?;
                if let Some(dir) = &save_seg {
                    for sample in &val {
                        let pred = pft_core::inference::predict_single(&state.model, &sample.image)?;
                        export_segmentation(&pred, classes, &dir.join(sample.seed.to_string()))?;
                    }
                }
                let pearson = report.mean_pearson();
                (report.miou, report.per_class, Some(pearson))
            };
            print_json(
                &json!({
                    "step": state.step,
                    "multi_scale": multi_scale,
                    "miou": miou,
                    "per_class": per_class,
                    "mean_pearson": pearson,
                }),
                out.as_deref(),
            )
        }
        Command::Gradcheck { seed } => {
            let entries = run_grad_suite(seed)?;
            let mut failed = Vec::new();
            for e in &entries {
                let status = if e.passes() { "ok" } else { "FAIL" };
                println!(
                    "{:<28} max rel err {:.3e} (tol {:.0e}, {} entries) {status}",
                    e.name, e.max_rel_error, e.tolerance, e.entries_checked
                );
                if !e.passes() {
                    failed.push(e.name.clone());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::Check(format!("gradient check failed: {}", failed.join(", "))))
            }
        }
        Command::Ablate {
            config,
            variant,
            until,
            out,
        } => {
            let base = load_config(&config)?;
            let variants: Vec<Ablation> = if variant == "all" {
                Ablation::ALL.to_vec()
            } else {
                vec![variant.parse()?]
            };
            let reports = if variants.len() == 1 {
                vec![ablate(&base, variants[0], until)?]
            } else {
                let baseline = run_summary(&base, until)?;
                variants
                    .iter()
                    .map(|&v| Ok(compare(v, baseline.clone(), run_summary(&v.apply(&base), until)?)))
                    .collect::<Result<Vec<_>, Failure>>()?
            };
            for r in &reports {
                log::info!(
                    "{}: delta mIoU {:+.4}, delta Pearson {:+.4} ({})",
                    r.variant,
                    r.delta_miou,
                    r.delta_pearson,
                    r.reference
                );
            }
            print_json(&serde_json::to_value(&reports).map_err(anyhow::Error::from)?, out.as_deref())
        }
        Command::ExportAttn { checkpoint, out, index } => {
            let state = load_state(&checkpoint)?;
            let c = &state.config;
            let seed = split_seed(Split::Val, c.data_seed(), index);
            let sample = generate_scene(seed, c.height, c.width, c.classes)?;
            let written = export_attention(&state.model, &sample.image, &out.join("attn"))?;
            write_sample(&out.join("sample"), &sample, c.classes)?;
            print_json(&json!({ "maps": written, "sample_seed": seed }), None)
        }
        Command::GenData {
            config,
            out,
            split,
            size,
        } => {
            let c = load_config(&config)?;
            let split = if split == "train" { Split::Train } else { Split::Val };
            let samples = dataset(split, size, c.data_seed(), c.height, c.width, c.classes)?;
            for s in &samples {
                write_sample(&out, s, c.classes)?;
            }
            print_json(&json!({ "written": samples.len(), "dir": out }), None)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
