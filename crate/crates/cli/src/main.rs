use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use vocseg_core::exp_runner::{
    emit_plots, predict_image, read_metrics_log, results_table, run_experiment, save_map, ExperimentConfig, METRICS_FILE, PRESETS,
};
use vocseg_core::model_zoo::load_checkpoint;
use vocseg_core::synthetic::{write_fixture, FixtureSpec};

#[derive(Parser)]
#[command(name = "vocseg", about = "Semantic segmentation experiments on VOC-layout data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one experiment (a preset name or a config file).
    Run {
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data_root: Option<PathBuf>,
        /// Parent directory of the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the epoch cap.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print the markdown results table for run directories.
    Table {
        /// Run directories; defaults to whichever preset runs exist under --out.
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Predict the class map of one image with a saved checkpoint.
    Render {
        checkpoint: PathBuf,
        image: PathBuf,
        /// Palette PNG to write.
        output: PathBuf,
    },
    /// Redraw loss, IoU and accuracy plots from a run directory (or its metrics log).
    Plots {
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic VOC-layout dataset.
    Synth {
        root: PathBuf,
        #[arg(long, default_value_t = 8)]
        train: usize,
        #[arg(long, default_value_t = 4)]
        val: usize,
        #[arg(long, default_value_t = 4)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a preset as a config file.
    Preset { name: String },
}

fn load_config(arg: &str) -> Result<ExperimentConfig> {
    if PRESETS.contains(&arg) {
        return Ok(ExperimentConfig::preset(arg)?);
    }
    let path = Path::new(arg);
    if !path.is_file() {
        bail!("`{arg}` is neither a preset ({}) nor a config file", PRESETS.join(", "));
    }
    ExperimentConfig::from_file(path).with_context(|| format!("reading {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            data_root,
            out,
            epochs,
        } => {
            let mut config = load_config(&config)?;
            config.apply_overrides(seed, data_root, out);
            if let Some(epochs) = epochs {
                config.train.epochs_max = epochs;
            }
            println!("{} ({}) -> {}", config.label, config.arch, config.run_dir().display());
            let artifacts = run_experiment(&config, |r| {
                println!(
                    "epoch {:>3}  lr {:.6}  train loss {:.4} acc {:.4} miou {:.4}  val loss {:.4} acc {:.4} miou {:.4}",
                    r.epoch,
                    r.lr,
                    r.train.loss,
                    r.train.pixel_accuracy,
                    r.train.mean_iou,
                    r.val.loss,
                    r.val.pixel_accuracy,
                    r.val.mean_iou
                );
            })?;
            let row = &artifacts.row;
            println!(
                "best epoch {} (stopped at {})  test loss {:.4} acc {:.4} miou {:.4}",
                row.best_epoch, row.stop_epoch, row.test.loss, row.test.pixel_accuracy, row.test.mean_iou
            );
        }
        Command::Table { dirs, out } => {
            let dirs = if dirs.is_empty() {
                PRESETS.iter().map(|p| out.join(p)).filter(|d| d.is_dir()).collect()
            } else {
                dirs
            };
            print!("{}", results_table(&dirs));
        }
        Command::Render {
            checkpoint,
            image,
            output,
        } => {
            let (mut model, _) = load_checkpoint(&checkpoint)?;
            save_map(&output, &predict_image(&mut model, &image)?)?;
        }
        Command::Plots { run, out } => {
            let metrics = if run.is_dir() { run.join(METRICS_FILE) } else { run };
            let records = read_metrics_log(&metrics)?;
            let dir = out.unwrap_or_else(|| metrics.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
            let paths = emit_plots(&records, &dir)?;
            for p in [paths.loss, paths.iou, paths.accuracy] {
                println!("{}", p.display());
            }
        }
        Command::Synth {
            root,
            train,
            val,
            test,
            seed,
        } => {
            let spec = FixtureSpec {
                train,
                val,
                test,
                seed,
                ..FixtureSpec::default()
            };
            write_fixture(&root, &spec)?;
        }
        Command::Preset { name } => print!("{}", ExperimentConfig::preset(&name)?.to_text()),
    }
    Ok(())
}
