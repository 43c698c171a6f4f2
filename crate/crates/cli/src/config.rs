//! Run configuration: one TOML file, overridable from the command line.

use std::path::{Path, PathBuf};

use docpack::evalharness::RecallTemplate;
use docpack::judgeclient::JudgeConfig;
use docpack::{EpochMode, PackingStrategy, VocabConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub vocab: VocabConfig,
    pub packing: PackingConfig,
    pub sft: SftConfig,
    pub judge: JudgeConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub docs: Option<PathBuf>,
    pub groups: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PackingConfig {
    pub strategy: PackingStrategy,
    pub mode: EpochMode,
    pub epochs: u64,
    pub batch_size: usize,
    /// Also write the flat binary form next to the JSON records.
    pub compact: bool,
}

impl Default for PackingConfig {
    fn default() -> Self {
        Self {
            strategy: PackingStrategy::NoPacking,
            mode: EpochMode::RepackEveryEpoch,
            epochs: 1,
            batch_size: 32,
            compact: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub template: RecallTemplate,
}

impl RunConfig {
    /// Reads `path`, or returns defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.vocab
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.packing
            .strategy
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.packing.batch_size == 0 {
            return Err(CliError::Config(
                "packing.batch_size must be at least 1".into(),
            ));
        }
        if self.judge.concurrency == 0 {
            return Err(CliError::Config(
                "judge.concurrency must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn docs_path(&self) -> Result<&Path, CliError> {
        existing(self.paths.docs.as_deref(), "docs")
    }

    pub fn groups_path(&self) -> Result<&Path, CliError> {
        existing(self.paths.groups.as_deref(), "groups")
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

fn existing<'a>(path: Option<&'a Path>, what: &str) -> Result<&'a Path, CliError> {
    let path = path.ok_or_else(|| {
        CliError::Config(format!(
            "no {what} file given (use --{what} or paths.{what})"
        ))
    })?;
    if !path.exists() {
        return Err(CliError::Config(format!(
            "{what} file {} does not exist",
            path.display()
        )));
    }
    Ok(path)
}
