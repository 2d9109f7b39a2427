//! Batch front end for the event-sequence embedding pipeline.

pub mod config;
pub mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use es2emb_core::synthetic::{write_synthetic, Flavor, SynthConfig};

pub use config::{ConfigError, PipelineConfig, ENDPOINT_ENV};
pub use stages::{RunStats, Runner, StageError};

#[derive(Debug, Parser)]
#[command(
    name = "es2emb",
    version,
    about = "Event sequences to text, a fine-tuned byte-level LM and pooled user embeddings"
)]
pub struct Cli {
    /// Pipeline configuration file.
    #[arg(short, long, global = true, default_value = "es2emb.toml")]
    pub config: PathBuf,
    /// Replace the configured output directory.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Use the deterministic offline stand-in instead of the chat endpoint.
    #[arg(long, global = true)]
    pub stub_llm: bool,
    /// Rerun stages even when their outputs are up to date.
    #[arg(long, global = true)]
    pub force: bool,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    Components,
    Formats,
    Datasize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FlavorArg {
    Alpha,
    Beta,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the pipe serialization of every user.
    Serialize,
    /// Build the fine-tuning corpus.
    Enrich,
    /// Fine-tune the language model on the corpus.
    Train,
    /// Extract pooled user embeddings.
    Embed,
    /// Concatenate the embeddings with the configured extra matrices.
    Ensemble,
    /// Holdout + cross-validation probe evaluation.
    Eval,
    /// Run one of the ablation studies.
    Ablate {
        #[arg(value_enum)]
        which: Ablation,
    },
    /// serialize, enrich, train, embed, ensemble and eval in order.
    Pipeline,
    /// Generate a synthetic dataset (no configuration needed).
    Synth {
        /// Directory that receives schema.toml, events.csv, labels.csv and the dictionaries.
        #[arg(long)]
        out: PathBuf,
        /// Number of users.
        #[arg(long, default_value_t = 50)]
        users: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Which neutral category set and user-id prefix to use.
        #[arg(long, value_enum, default_value = "alpha")]
        flavor: FlavorArg,
    },
    /// Serve hidden states of a checkpoint over HTTP.
    Serve {
        /// Model checkpoint (`model.tlm`) to load.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8011")]
        bind: String,
        #[arg(long, default_value = "tinylm")]
        model_id: String,
    },
}

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    StageFailure = 1,
    ConfigError = 2,
}

/// Runs a parsed command line; errors are reported on stderr.
pub fn run(cli: Cli) -> (Exit, RunStats) {
    match cli.command {
        Command::Synth { out, users, seed, flavor } => {
            let flavor = match flavor {
                FlavorArg::Alpha => Flavor::Alpha,
                FlavorArg::Beta => Flavor::Beta,
            };
            let cfg = SynthConfig { n_users: users, seed, flavor, ..SynthConfig::default() };
            return match write_synthetic(&out, &cfg) {
                Ok(p) => {
                    log::info!("[synth] wrote {}", p.events.display());
                    (Exit::Ok, RunStats::default())
                }
                Err(es2emb_core::synthetic::SynthError::Config(m)) => {
                    eprintln!("config error: synth: {m}");
                    (Exit::ConfigError, RunStats::default())
                }
                Err(e) => {
                    eprintln!("error: stage synth failed: {e}");
                    (Exit::StageFailure, RunStats::default())
                }
            };
        }
        Command::Serve { checkpoint, bind, model_id } => {
            let result = es2emb_core::tinylm::load_checkpoint(&checkpoint).map_err(|e| e.to_string()).and_then(|m| {
                es2emb_core::embedder::serve_hidden_states(std::sync::Arc::new(m), &model_id, &bind)
                    .map_err(|e| e.to_string())
            });
            return match result {
                Ok(server) => {
                    log::info!("[serve] listening on {}", server.base_url());
                    server.join();
                    (Exit::Ok, RunStats::default())
                }
                Err(e) => {
                    eprintln!("error: stage serve failed: {e}");
                    (Exit::StageFailure, RunStats::default())
                }
            };
        }
        _ => {}
    }

    let mut config = match PipelineConfig::load(&cli.config, std::env::var(ENDPOINT_ENV).ok()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return (Exit::ConfigError, RunStats::default());
        }
    };
    if let Some(out) = cli.output_dir {
        if config.cache_dir.starts_with(&config.output_dir) {
            config.cache_dir = out.join("cache");
        }
        config.output_dir = out;
    }
    let mut runner = Runner::new(config, cli.force, cli.stub_llm);
    let result = match cli.command {
        Command::Serialize => runner.serialize(),
        Command::Enrich => runner.enrich(),
        Command::Train => runner.train(),
        Command::Embed => runner.embed(),
        Command::Ensemble => runner.ensemble(),
        Command::Eval => runner.eval(),
        Command::Ablate { which: Ablation::Components } => runner.ablate_components(),
        Command::Ablate { which: Ablation::Formats } => runner.ablate_formats(),
        Command::Ablate { which: Ablation::Datasize } => runner.ablate_datasize(),
        Command::Pipeline => runner.pipeline(),
        Command::Synth { .. } | Command::Serve { .. } => unreachable!("handled above"),
    };
    let stats = runner.stats;
    match result {
        Ok(()) => {
            log::info!("[done] {}", stats.summary());
            (Exit::Ok, stats)
        }
        Err(e) => {
            eprintln!("error: {e}");
            (Exit::StageFailure, stats)
        }
    }
}
