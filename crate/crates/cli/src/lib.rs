//! Command-line driver for the meshflow pipeline.
//!
//! Every pipeline subcommand reads a TOML config (see [`config`]), applies
//! flag overrides, validates everything before touching the output directory
//! and writes its artifacts atomically together with a manifest under
//! `<out_dir>/manifests/`.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod stages;
pub mod synth;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use meshflow_core::dyadreg::Imputation;

pub use config::{Overrides, PipelineConfig, ResolvedConfig};
pub use error::CliError;
pub use stages::{Pipeline, Stage};

#[derive(Debug, Parser)]
#[command(name = "meshflow", version, about = "Country-level communication network pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and validate every input file.
    Ingest(PipelineArgs),
    /// Infer each user's country of residence.
    Residence(PipelineArgs),
    /// Collapse the reciprocal user graph to country-pair densities.
    Densities(PipelineArgs),
    /// Fit the coverage model and rescale densities.
    Rescale(PipelineArgs),
    /// Centralities, top edges and layout.
    Stats(PipelineArgs),
    /// Community detection against the civilization partition.
    Communities(PipelineArgs),
    /// Permutation test of network and civilization co-membership.
    Qap(PipelineArgs),
    /// Dyadic mixed-effects models.
    Regress(PipelineArgs),
    /// Run every stage in order.
    All(PipelineArgs),
    /// Write a synthetic world as pipeline inputs.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ImputeArg {
    Mean,
    Min,
}

impl From<ImputeArg> for Imputation {
    fn from(a: ImputeArg) -> Self {
        match a {
            ImputeArg::Mean => Imputation::Mean,
            ImputeArg::Min => Imputation::Min,
        }
    }
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Pipeline config file.
    #[arg(long, default_value = "pipeline.toml")]
    pub config: PathBuf,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Abort on the first malformed input row.
    #[arg(long)]
    pub strict: bool,
    #[arg(long, allow_negative_numbers = true)]
    pub max_speed_kmh: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub min_valid_days: Option<f64>,
    #[arg(long)]
    pub min_country_users: Option<usize>,
    #[arg(long)]
    pub edge_floor: Option<u64>,
    #[arg(long)]
    pub k_top: Option<usize>,
    /// QAP permutations.
    #[arg(long)]
    pub permutations: Option<usize>,
    /// QAP seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fit mixed models by REML instead of ML.
    #[arg(long)]
    pub reml: bool,
    /// One random effect per country across both dyad slots.
    #[arg(long)]
    pub shared_country_effect: bool,
    #[arg(long, value_enum)]
    pub impute: Option<ImputeArg>,
}

impl PipelineArgs {
    pub fn overrides(&self) -> Overrides {
        let cwd = std::env::current_dir().unwrap_or_default();
        Overrides {
            out_dir: self.out_dir.as_ref().map(|p| cwd.join(p)),
            strict: self.strict,
            max_speed_kmh: self.max_speed_kmh,
            min_valid_days: self.min_valid_days,
            min_country_users: self.min_country_users,
            edge_floor: self.edge_floor,
            k_top: self.k_top,
            permutations: self.permutations,
            seed: self.seed,
            reml: self.reml,
            shared_country_effect: self.shared_country_effect,
            impute: self.impute.map(Imputation::from),
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// World specification (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory receiving the inputs and `pipeline.toml`.
    #[arg(long)]
    pub out: PathBuf,
    /// World seed, overriding the specification.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let (args, stages): (&PipelineArgs, Vec<Stage>) = match &cli.command {
        Command::Synth(a) => {
            let spec = synth::load_spec(a.config.as_deref(), a.seed)?;
            return synth::run(&spec, &a.out);
        }
        Command::All(a) => (a, Stage::ALL.to_vec()),
        Command::Ingest(a) => (a, vec![Stage::Ingest]),
        Command::Residence(a) => (a, vec![Stage::Residence]),
        Command::Densities(a) => (a, vec![Stage::Densities]),
        Command::Rescale(a) => (a, vec![Stage::Rescale]),
        Command::Stats(a) => (a, vec![Stage::Stats]),
        Command::Communities(a) => (a, vec![Stage::Communities]),
        Command::Qap(a) => (a, vec![Stage::Qap]),
        Command::Regress(a) => (a, vec![Stage::Regress]),
    };
    let cfg = ResolvedConfig::load(&args.config, &args.overrides())?;
    let pipeline = Pipeline::new(cfg);
    pipeline.check_inputs(&stages)?;
    for stage in stages {
        pipeline.run(stage)?;
    }
    Ok(())
}
