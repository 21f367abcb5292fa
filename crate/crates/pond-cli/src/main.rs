//! `pond` — the pipeline driver.
//!
//! Subcommands mirror the three training phases (pretrain, tune, adapt)
//! plus data generation, evaluation, and the analysis commands (ablate,
//! sweep-sources, heatmap, flexdemo, gradcheck). Every command reads one
//! strict JSON config and writes deterministic artifacts; exit codes are
//! 0 success, 2 usage or configuration error, 3 I/O or compatibility
//! error, 4 internal numeric fault.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "pond",
    version,
    about = "Multi-source time-series domain adaptation via prompt tuning",
    long_about = None,
    after_help = "Set POND_SEED to re-derive all seeds from one value."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain benchmark into a directory.
    GenData {
        /// Experiment configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for datasets and manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the backbone on the pooled source pretraining splits.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file to write; a .history.json sibling records losses.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Prompt-tune a pretrained checkpoint over the source tune splits.
    Tune {
        #[arg(long)]
        config: PathBuf,
        /// Pretrained backbone checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// State checkpoint to write; a .history.json sibling records losses.
        #[arg(long)]
        out: PathBuf,
        /// Override the discrimination weight λ₁.
        #[arg(long)]
        lambda1: Option<f64>,
        /// Override the fidelity weight λ₂.
        #[arg(long)]
        lambda2: Option<f64>,
    },
    /// Fit the target generator on labeled shots and pick the nearest source.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        /// Tuned state checkpoint.
        #[arg(long)]
        state: PathBuf,
        /// Target dataset file.
        #[arg(long)]
        target: PathBuf,
        /// Report JSON to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the target instances outside the shot set.
    Eval {
        /// Tuned state checkpoint (carries its run configuration).
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Metrics JSON to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the component-ablation grid over the configured seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the number of source domains and report mean metrics.
    SweepSources {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit the pairwise discrimination heatmap of a tuned state as CSV.
    Heatmap {
        #[arg(long)]
        state: PathBuf,
        /// CSV file to write; a .meta.json sidecar names the domains.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the conflicting-instance flexibility experiment.
    Flexdemo {
        #[arg(long)]
        out: PathBuf,
        /// Override the per-variant step budget.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Audit analytic gradients against central finite differences.
    Gradcheck,
}

fn run(command: Command) -> pond::Result<bool> {
    match command {
        Command::GenData { config, out } => commands::gen_data(&config, &out).map(|()| true),
        Command::Pretrain {
            config,
            data,
            out,
            epochs,
        } => commands::cmd_pretrain(&config, &data, &out, epochs).map(|()| true),
        Command::Tune {
            config,
            checkpoint,
            data,
            out,
            lambda1,
            lambda2,
        } => commands::cmd_tune(&config, &checkpoint, &data, &out, lambda1, lambda2)
            .map(|()| true),
        Command::Adapt {
            config,
            state,
            target,
            out,
        } => commands::cmd_adapt(&config, &state, &target, &out).map(|()| true),
        Command::Eval { state, target, out } => {
            commands::cmd_eval(&state, &target, &out).map(|()| true)
        }
        Command::Ablate { config, out } => commands::cmd_ablate(&config, &out).map(|()| true),
        Command::SweepSources { config, out } => {
            commands::cmd_sweep_sources(&config, &out).map(|()| true)
        }
        Command::Heatmap { state, out } => commands::cmd_heatmap(&state, &out).map(|()| true),
        Command::Flexdemo { out, budget } => {
            commands::cmd_flexdemo(&out, budget).map(|()| true)
        }
        Command::Gradcheck => commands::cmd_gradcheck(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        // A gradcheck that ran but found mismatches is a numeric fault.
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
