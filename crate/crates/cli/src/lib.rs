//! Command-line front end for the `docpack` library.
//!
//! Every subcommand reads one TOML [`RunConfig`]; flags override file values.
//! See [`error`] for exit codes.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use docpack::evalharness::RecallTemplate;
use docpack::{EpochMode, PackingStrategy};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "docpack",
    version,
    about = "Pack documents into training sequences and score recall"
)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Documents file (line-delimited JSON).
    #[arg(long, global = true)]
    pub docs: Option<PathBuf>,
    /// Question groups file (line-delimited JSON).
    #[arg(long, global = true)]
    pub groups: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write packed sequences and a manifest for each epoch.
    Pack(PackArgs),
    /// Plan statistics and convergence-table accounting.
    Stats(StatsArgs),
    /// Score recall generations.
    Eval(EvalArgs),
    /// Ask the judge about one or more answers.
    Judge(JudgeArgs),
    /// Pretty-print a packed sequence and its mask blocks.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct PackArgs {
    /// `no-packing`, `pack-<x>` or `pack-<a>-<b>-…`.
    #[arg(long)]
    pub strategy: Option<PackingStrategy>,
    /// `repack-every-epoch`, `no-repack` or `no-repack-reshuffle-order`.
    #[arg(long)]
    pub mode: Option<EpochMode>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub context_window: Option<usize>,
    #[arg(long)]
    pub sep_id: Option<u32>,
    #[arg(long)]
    pub pad_id: Option<u32>,
    /// Also write the flat binary arrays.
    #[arg(long)]
    pub compact: bool,
    /// Also write SFT examples (byte-level fallback tokens) to `sft.jsonl`.
    #[arg(long)]
    pub sft: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Packed records file written by `pack`.
    #[arg(long)]
    pub packed: Option<PathBuf>,
    /// Manifest for `--packed`; defaults to the sibling `.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Steps-to-convergence table (JSON).
    #[arg(long)]
    pub steps: Option<PathBuf>,
    /// Reference documents table to compare against.
    #[arg(long, requires = "steps")]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = docpack::stats::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Where to write the JSON report; defaults to `<out>/stats.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct JudgeFlags {
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    /// Verdict cache file (line-delimited JSON); created if missing.
    #[arg(long)]
    pub verdicts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Generations file: one `{"question_id", "text"}` per line.
    #[arg(long)]
    pub generations: PathBuf,
    #[arg(long)]
    pub template: Option<RecallTemplate>,
    /// Skip judging; accuracy is reported as undefined.
    #[arg(long)]
    pub no_judge: bool,
    #[command(flatten)]
    pub judge: JudgeFlags,
}

#[derive(Debug, Args)]
pub struct JudgeArgs {
    #[arg(long, requires_all = ["expected", "answer"], conflicts_with = "requests")]
    pub question: Option<String>,
    #[arg(long)]
    pub expected: Option<String>,
    #[arg(long)]
    pub answer: Option<String>,
    /// File of `{"question", "expected_answer", "model_answer"}` lines.
    #[arg(long)]
    pub requests: Option<PathBuf>,
    #[command(flatten)]
    pub judge: JudgeFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CrossDoc {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub packed: PathBuf,
    /// 0-based record index.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, value_enum, default_value_t = CrossDoc::Off)]
    pub cross_doc: CrossDoc,
    /// Draw the attention mask as a character grid.
    #[arg(long)]
    pub mask: bool,
}

impl Cli {
    /// Loads the config file and applies global and subcommand overrides.
    pub fn resolve_config(&self) -> Result<RunConfig, CliError> {
        let mut config = RunConfig::load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.paths.out = Some(out.clone());
        }
        if let Some(docs) = &self.docs {
            config.paths.docs = Some(docs.clone());
        }
        if let Some(groups) = &self.groups {
            config.paths.groups = Some(groups.clone());
        }
        match &self.command {
            Command::Pack(a) => {
                let p = &mut config.packing;
                if let Some(s) = &a.strategy {
                    p.strategy = s.clone();
                }
                if let Some(m) = a.mode {
                    p.mode = m;
                }
                if let Some(e) = a.epochs {
                    p.epochs = e;
                }
                if let Some(b) = a.batch_size {
                    p.batch_size = b;
                }
                p.compact |= a.compact;
                let v = &mut config.vocab;
                if let Some(w) = a.context_window {
                    v.context_window = w;
                }
                if let Some(s) = a.sep_id {
                    v.sep_id = s;
                }
                if let Some(p) = a.pad_id {
                    v.pad_id = p;
                }
            }
            Command::Eval(a) => {
                if let Some(t) = a.template {
                    config.sft.template = t;
                }
                a.judge.apply(&mut config);
            }
            Command::Judge(a) => a.judge.apply(&mut config),
            Command::Stats(_) | Command::Inspect(_) => {}
        }
        config.validate()?;
        Ok(config)
    }
}

impl JudgeFlags {
    fn apply(&self, config: &mut RunConfig) {
        let j = &mut config.judge;
        if let Some(e) = &self.endpoint {
            j.endpoint = e.clone();
        }
        if let Some(m) = &self.model {
            j.model = m.clone();
        }
        if let Some(k) = &self.api_key_env {
            j.api_key_env = Some(k.clone());
        }
        if let Some(c) = self.concurrency {
            j.concurrency = c;
        }
        if let Some(t) = self.timeout_secs {
            j.timeout_secs = t;
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let config = cli.resolve_config()?;
    let mut stdout = std::io::stdout().lock();
    match &cli.command {
        Command::Pack(a) => commands::pack(&config, a, &mut stdout),
        Command::Stats(a) => commands::stats(&config, a, &mut stdout),
        Command::Eval(a) => commands::eval(&config, a, &mut stdout),
        Command::Judge(a) => commands::judge(&config, a, &mut stdout),
        Command::Inspect(a) => commands::inspect(&config, a, &mut stdout),
    }
}
