// SPDX-License-Identifier: MIT OR Apache-2.0

//! `featlab`: runs the lab's experiments stage by stage, each stage writing
//! its own directory under `runs/<experiment>/`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing upstream
//! artifact, 4 runtime failure.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

/// Invalid configuration or arguments.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// An upstream artifact a stage depends on is missing.
#[derive(Debug)]
pub struct PreconditionError(pub String);

impl std::fmt::Display for PreconditionError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for PreconditionError {}

#[derive(Parser)]
#[command(name = "featlab", version, about = "Feature-versus-neuron interpretability experiments on a toy transformer")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override `experiment` from the config.
    #[arg(long, global = true)]
    experiment: Option<String>,

    /// Override `paths.root` from the config.
    #[arg(long, global = true)]
    root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Which {
    /// The model trained on the fact corpus.
    Base,
    /// The base model after privacy fine-tuning.
    Finetuned,
}

impl Which {
    pub fn tag(self) -> &'static str {
        match self {
            Which::Base => "base",
            Which::Finetuned => "finetuned",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate fact, privacy and probe corpora plus the tokenizer.
    GenData,
    /// Train the toy LM on the fact corpus, or fine-tune it on privacy facts.
    TrainLm {
        #[arg(long)]
        finetune: bool,
    },
    /// Record activations of the configured site and layers.
    Capture {
        #[arg(long, value_enum, default_value = "base")]
        model: Which,
    },
    /// Train one SAE per captured layer.
    TrainSae {
        #[arg(long, value_enum, default_value = "base")]
        model: Which,
    },
    /// Fit the PCA, ICA and random-direction baselines per captured layer.
    FitBaseline {
        #[arg(long, value_enum, default_value = "base")]
        model: Which,
    },
    /// ΔProb of τ1-selected features versus baselines and neurons, with
    /// progressive ablation curves.
    Ablate,
    /// Integrated-gradients neuron attribution on privacy training prompts.
    Attribute,
    /// Build FeatureEdit and neuron-zeroing plans and edited models.
    Edit,
    /// Rel, Gen, Loc and ΔPPL for both edited models.
    EvalErasure,
    /// Relation-feature activations across fact mixtures.
    Mono,
    /// Overlap ratios of selected features across SAE widths.
    Stability {
        /// Width multipliers, comma separated.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
    },
    /// Interpretability scores for the top SAE features and neurons.
    Interpret,
    /// Aggregate every experiment's reports under the root into one CSV.
    Report,
    /// Run every stage in order.
    Pipeline,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(e) = &cli.experiment {
        cfg.experiment = e.clone();
    }
    if let Some(r) = &cli.root {
        cfg.paths.root = r.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::TrainLm { finetune } => commands::train_lm(&cfg, *finetune),
        Command::Capture { model } => commands::capture(&cfg, *model),
        Command::TrainSae { model } => commands::train_sae(&cfg, *model),
        Command::FitBaseline { model } => commands::fit_baseline(&cfg, *model),
        Command::Ablate => commands::ablate(&cfg),
        Command::Attribute => commands::attribute(&cfg),
        Command::Edit => commands::edit(&cfg),
        Command::EvalErasure => commands::eval_erasure(&cfg),
        Command::Mono => commands::mono(&cfg),
        Command::Stability { n } => {
            if let Some(n) = n {
                cfg.eval.stability_n = n.clone();
                cfg.validate()?;
            }
            commands::stability(&cfg)
        }
        Command::Interpret => commands::interpret(&cfg),
        Command::Report => commands::report(&cfg),
        Command::Pipeline => commands::pipeline(&cfg),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || matches!(cause.downcast_ref::<featlab::Error>(), Some(featlab::Error::Config(_))) {
            return 2;
        }
        if cause.is::<PreconditionError>() {
            return 3;
        }
    }
    4
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
