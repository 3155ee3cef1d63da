//! Workbench orchestrator: collect synthetic sessions, train and fine-tune
//! controllers offline, distill them, train the latent evaluation model, run
//! off-policy evaluation, and compare controller groups statistically. Every
//! subcommand is deterministic given (inputs, config, seed) and writes a
//! manifest with content hashes of its inputs.

mod commands;
mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::Failure;

#[derive(Parser)]
#[command(name = "stimweave", version, about = "Offline RL workbench for closed-loop stimulation control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll sessions in the synthetic environment and append them to a buffer file.
    Collect {
        /// Patient profile (key-value file).
        #[arg(long)]
        profile: PathBuf,
        /// Controller spec: random(B), constant(a), or a policy checkpoint path.
        #[arg(long)]
        controller: String,
        /// Label stored on each trajectory (defaults to the controller spec).
        #[arg(long)]
        controller_id: Option<String>,
        #[arg(long, default_value_t = 10)]
        sessions: u64,
        /// Steps per session.
        #[arg(long, default_value_t = 150)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Key-value config for reward/environment constants.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Buffer file to create or append to.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an actor-critic pair from replayed sessions.
    Train {
        #[arg(long, required = true)]
        buffer: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Actor checkpoint path; the training log lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue training from an existing actor checkpoint at fine-tune rates.
    Finetune {
        /// Source actor checkpoint.
        #[arg(long)]
        from: PathBuf,
        #[arg(long, required = true)]
        buffer: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compress a trained actor into a small student network.
    Distill {
        /// Teacher actor checkpoint.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, required = true)]
        buffer: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the latent sequential model used for model-based evaluation.
    TrainDlsm {
        #[arg(long, required = true)]
        buffer: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate policy returns with the latent model and the importance-sampling baseline.
    Ope {
        /// Latent-model checkpoint.
        #[arg(long)]
        dlsm: PathBuf,
        /// Policy checkpoints to evaluate (repeat the flag).
        #[arg(long = "policy", required = true)]
        policies: Vec<PathBuf>,
        #[arg(long, required = true)]
        buffer: Vec<PathBuf>,
        /// Optional profile for ground-truth environment rollouts.
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of evaluation seeds (rollout streams) per estimator.
        #[arg(long, default_value_t = 1)]
        num_seeds: u64,
        /// Report CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Wilcoxon rank-sum comparison of controller groups across five session metrics.
    Compare {
        #[arg(long, required = true)]
        buffer: Vec<PathBuf>,
        /// controller_id of the reference group.
        #[arg(long)]
        reference: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher/student fidelity report with forward-pass timing.
    Timing {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long, required = true)]
        buffer: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Collect { profile, controller, controller_id, sessions, horizon, seed, config, out } => {
            commands::cmd_collect(
                profile,
                controller,
                controller_id.clone(),
                *sessions,
                *horizon,
                *seed,
                config.as_deref(),
                out,
            )
        }
        Command::Train { buffer, config, seed, out } => {
            commands::cmd_train(buffer, config.as_deref(), *seed, out)
        }
        Command::Finetune { from, buffer, config, seed, out } => {
            commands::cmd_finetune(from, buffer, config.as_deref(), *seed, out)
        }
        Command::Distill { teacher, buffer, config, seed, out } => {
            commands::cmd_distill(teacher, buffer, config.as_deref(), *seed, out)
        }
        Command::TrainDlsm { buffer, config, seed, out } => {
            commands::cmd_train_dlsm(buffer, config.as_deref(), *seed, out)
        }
        Command::Ope { dlsm, policies, buffer, profile, config, seed, num_seeds, out } => {
            commands::cmd_ope(
                dlsm,
                policies,
                buffer,
                profile.as_deref(),
                config.as_deref(),
                *seed,
                *num_seeds,
                out,
            )
        }
        Command::Compare { buffer, reference, config, out } => {
            commands::cmd_compare(buffer, reference, config.as_deref(), out)
        }
        Command::Timing { teacher, student, buffer, config, out } => {
            commands::cmd_timing(teacher, student, buffer, config.as_deref(), out)
        }
    };
    match result {
        Ok(()) => {}
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}
