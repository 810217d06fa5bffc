use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use shiftlab_cli::commands::{
    cmd_eval, cmd_generate, cmd_render_shift_kernel, cmd_saccade, cmd_train, cmd_visualize,
    parse_mask, TrainOverrides,
};
use shiftlab_cli::config::ModelKind;
use shiftlab_core::error::Error;

/// Referring-relationship grounding on synthetic scenes: dataset
/// generation, training, evaluation, and attention visualization.
#[derive(Parser)]
#[command(name = "shiftlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test scene splits and print a census.
    Generate {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Dataset output directory.
        #[arg(long)]
        out: PathBuf,
        /// Master generation seed (default: the config's training seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured train-split scene count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model and write a checkpoint plus a training-log CSV.
    Train {
        /// Architecture to train.
        #[arg(long, value_enum)]
        model: Option<ModelKind>,
        /// Dataset directory (from `generate`).
        #[arg(long)]
        data: PathBuf,
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the attention-shifting iteration count.
        #[arg(long)]
        iterations: Option<usize>,
        /// Override the query entity-masking rate.
        #[arg(long)]
        mask_rate: Option<f64>,
    },
    /// Evaluate a checkpoint: per-query metrics plus aggregate reports.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to score (threshold is always selected on `val`).
        #[arg(long, default_value = "test")]
        split: String,
        /// Hide query slots at inference: none|subject|object|both.
        #[arg(long, default_value = "none")]
        mask: String,
        /// Report output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write per-iteration attention heatmaps for one query on one scene.
    Visualize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Scene id, e.g. test_000017.
        #[arg(long)]
        scene: String,
        /// Query as "subject,predicate,object" ('_' masks a slot).
        #[arg(long)]
        query: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a predicate's shift response to a centered unit of attention.
    RenderShiftKernel {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        predicate: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Traverse a scene-graph path, writing each node's attention map.
    Saccade {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: String,
        /// Graph JSON: {"nodes":[...],"path":[{"src":0,"p":"left","dst":1,"dir":"fwd"}],"start":0}.
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> shiftlab_core::error::Result<()> {
    match cli.command {
        Command::Generate { config, out, seed, count } => {
            cmd_generate(&config, &out, seed, count)
        }
        Command::Train { model, data, config, out, seed, iterations, mask_rate } => cmd_train(
            &config,
            &data,
            &out,
            &TrainOverrides { model, seed, iterations, mask_rate },
        ),
        Command::Eval { ckpt, data, split, mask, out } => {
            cmd_eval(&ckpt, &data, &split, parse_mask(&mask)?, &out)
        }
        Command::Visualize { ckpt, data, scene, query, out } => {
            cmd_visualize(&ckpt, &data, &scene, &query, &out)
        }
        Command::RenderShiftKernel { ckpt, predicate, out } => {
            cmd_render_shift_kernel(&ckpt, &predicate, &out)
        }
        Command::Saccade { ckpt, data, scene, graph, out } => {
            cmd_saccade(&ckpt, &data, &scene, &graph, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Numeric(_) => 3,
                Error::Io { .. } | Error::Format { .. } => 4,
                // Config, Invalid, Dimension, Placement: caller-side
                // configuration or input problems.
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}
