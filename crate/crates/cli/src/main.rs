use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

mod commands;
mod config;
mod render;

use commands::{InferOptions, Split};
use config::{output_path, Overrides};

#[derive(Parser, Debug)]
#[command(name = "snake", version, about = "Learned active contours: data, training, inference and evaluation")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Build a dataset from images and polygon files.
    Ingest {
        /// Directory of `<stem>.png` images.
        #[arg(long)]
        images: PathBuf,
        /// JSON lines of `{"id", "nodes"}` ground-truth polygons.
        #[arg(long)]
        polygons: PathBuf,
        /// Optional initial polygons with the same ids.
        #[arg(long)]
        inits: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a predictor on the training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run inference and write predicted contours.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Write every iterate and its energy per instance.
        #[arg(long)]
        dump_trajectory: bool,
        /// Write the four energy maps per instance.
        #[arg(long)]
        dump_maps: bool,
        #[arg(long)]
        force: bool,
    },
    /// Score predictions against the dataset.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Draw SVG overlays of ground truth, init and prediction.
    Render {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Train and compare map-mode variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to these variants (full, no_kappa, scalar_kappa_beta, local_alpha).
        #[arg(long = "variant")]
        variants: Vec<String>,
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = cli.overrides.resolve()?;
    match cli.command {
        Command::Synth { out, force } => {
            commands::synth(&mut cfg, &output_path(&out), force)?;
        }
        Command::Ingest {
            images,
            polygons,
            inits,
            out,
            force,
        } => {
            commands::ingest_cmd(&mut cfg, &images, &polygons, inits.as_deref(), &output_path(&out), force)?;
        }
        Command::Train { data, out, force } => {
            commands::train_cmd(&mut cfg, &data, &output_path(&out), force)?;
        }
        Command::Infer {
            model,
            data,
            out,
            split,
            dump_trajectory,
            dump_maps,
            force,
        } => {
            let opts = InferOptions {
                split,
                dump_trajectory,
                dump_maps,
            };
            commands::infer_cmd(&mut cfg, &model, &data, &output_path(&out), force, &opts)?;
        }
        Command::Eval { preds, data, json } => {
            commands::eval_cmd(&preds, &data, json.map(|p| output_path(&p)).as_deref())?;
        }
        Command::Render {
            preds,
            data,
            out,
            limit,
            force,
        } => {
            commands::render_cmd(&preds, &data, &output_path(&out), force, limit)?;
        }
        Command::Ablate {
            data,
            out,
            variants,
            force,
        } => {
            commands::ablate_cmd(&mut cfg, &data, &output_path(&out), force, &variants)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
