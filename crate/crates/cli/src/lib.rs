//! Experiment driver: corpus generation, training, decoding, stress sweeps,
//! real-time-factor benchmarks and report tables.

pub mod commands;
pub mod config;
pub mod stress;

use std::fmt;
use std::path::Path;

use synclab_core::san::LanguageModel;
use synclab_core::training::{model_weights, Model, ModelKind};
use synclab_core::ParamStore;

pub use config::{ExperimentConfig, LoadedConfig};

/// Exit status 2.
pub const EXIT_VALIDATION: u8 = 2;
/// Exit status 3.
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Bad input: config, corpus, checkpoint or arguments.
    Validation(String),
    /// Failure while running: numerics, I/O, divergence.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    /// Prefixes the message with `what`, keeping the kind.
    pub fn context(self, what: &str) -> Self {
        match self {
            CliError::Validation(m) => CliError::Validation(format!("{what}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("{what}: {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<synclab_core::Error> for CliError {
    fn from(e: synclab_core::Error) -> Self {
        use synclab_core::Error as E;
        match e {
            E::Config { .. }
            | E::Format { .. }
            | E::Parameter { .. }
            | E::LabelOutOfVocab { .. }
            | E::UtteranceTooShort { .. }
            | E::EmptyCorpus
            | E::Contract(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Loads a checkpoint (optimizer state is dropped) into a model of the
/// configured shape.
pub fn load_model(cfg: &ExperimentConfig, checkpoint: &Path) -> CliResult<Model> {
    if !checkpoint.exists() {
        return Err(CliError::Validation(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    let saved = ParamStore::load(checkpoint)?;
    Model::with_params(cfg.model, cfg.san.clone(), model_weights(&saved))
        .map_err(|e| CliError::from(e).context(&checkpoint.display().to_string()))
}

/// The rescoring LM named by `cfg.lm`, if any.
pub fn load_lm(cfg: &ExperimentConfig) -> CliResult<Option<LanguageModel>> {
    let Some(r) = &cfg.lm else { return Ok(None) };
    let lm_cfg = ExperimentConfig::load(&r.config)?.cfg;
    if lm_cfg.model != ModelKind::Lm {
        return Err(CliError::Validation(format!(
            "{} is not a language model config",
            r.config.display()
        )));
    }
    if lm_cfg.san.labels != cfg.san.labels {
        return Err(CliError::Validation(format!(
            "vocabulary mismatch: LM has {} labels, recognizer {}",
            lm_cfg.san.labels, cfg.san.labels
        )));
    }
    let ckpt = r
        .checkpoint
        .clone()
        .unwrap_or_else(|| lm_cfg.final_checkpoint());
    match load_model(&lm_cfg, &ckpt)? {
        Model::Lm(lm) => Ok(Some(lm)),
        _ => unreachable!("kind checked above"),
    }
}
