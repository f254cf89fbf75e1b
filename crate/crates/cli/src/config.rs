//! Experiment configuration files (TOML).
//!
//! Relative paths are resolved against the directory holding the config
//! file. The top-level `seed` is the master seed: model initialisation,
//! batching, dropout, augmentation and sampling all draw from named
//! streams derived from it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use synclab_core::decode::DecodeConfig;
use synclab_core::san::SanConfig;
use synclab_core::training::{LossWeights, ModelKind, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusPaths {
    /// Training manifest (required by `train`).
    pub train: Option<PathBuf>,
    /// Evaluation manifest (default for `decode`, `stress`, `bench-rtf`).
    pub test: Option<PathBuf>,
}

/// Language model used for n-best rescoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmRef {
    /// Experiment config the LM was trained with.
    pub config: PathBuf,
    /// Defaults to `final.bin` in that experiment's output directory.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusPaths,
    pub san: SanConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub decode: DecodeConfig,
    pub lm: Option<LmRef>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelKind::Cif,
            seed: 1,
            out_dir: PathBuf::from("run"),
            corpus: CorpusPaths::default(),
            san: SanConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            decode: DecodeConfig::default(),
            lm: None,
        }
    }
}

/// A parsed config together with its verbatim text (archived into output
/// directories).
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub cfg: ExperimentConfig,
    pub text: String,
    pub path: PathBuf,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        resolve(&base, &mut cfg.out_dir);
        for p in [&mut cfg.corpus.train, &mut cfg.corpus.test]
            .into_iter()
            .flatten()
        {
            resolve(&base, p);
        }
        if let Some(lm) = &mut cfg.lm {
            resolve(&base, &mut lm.config);
            if let Some(c) = &mut lm.checkpoint {
                resolve(&base, c);
            }
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(LoadedConfig {
            cfg,
            text,
            path: path.to_path_buf(),
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.san.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.decode.validate()?;
        for p in [&self.corpus.train, &self.corpus.test]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(CliError::Validation(format!(
                    "corpus path {} does not exist",
                    p.display()
                )));
            }
        }
        if let Some(lm) = &self.lm {
            if !lm.config.exists() {
                return Err(CliError::Validation(format!(
                    "lm config {} does not exist",
                    lm.config.display()
                )));
            }
        }
        Ok(())
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.out_dir.join(synclab_core::training::FINAL_CHECKPOINT)
    }
}
