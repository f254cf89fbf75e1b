use serde::{Deserialize, Serialize};

use crate::cif::CifModel;
use crate::error::Result;
use crate::params::ParamStore;
use crate::san::{LanguageModel, SanConfig, Transformer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Transformer,
    Cif,
    Lm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Transformer => "transformer",
            ModelKind::Cif => "cif",
            ModelKind::Lm => "lm",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "transformer" => Ok(ModelKind::Transformer),
            "cif" => Ok(ModelKind::Cif),
            "lm" => Ok(ModelKind::Lm),
            other => Err(format!(
                "unknown model kind {other:?} (transformer, cif, lm)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Transformer(Transformer),
    Cif(CifModel),
    Lm(LanguageModel),
}

impl Model {
    pub fn new(kind: ModelKind, cfg: SanConfig, seed: u64) -> Result<Self> {
        Ok(match kind {
            ModelKind::Transformer => Model::Transformer(Transformer::new(cfg, seed)?),
            ModelKind::Cif => Model::Cif(CifModel::new(cfg, seed)?),
            ModelKind::Lm => Model::Lm(LanguageModel::new(cfg, seed)?),
        })
    }

    pub fn with_params(kind: ModelKind, cfg: SanConfig, params: ParamStore) -> Result<Self> {
        Ok(match kind {
            ModelKind::Transformer => Model::Transformer(Transformer::with_params(cfg, params)?),
            ModelKind::Cif => Model::Cif(CifModel::with_params(cfg, params)?),
            ModelKind::Lm => Model::Lm(LanguageModel::with_params(cfg, params)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Transformer(_) => ModelKind::Transformer,
            Model::Cif(_) => ModelKind::Cif,
            Model::Lm(_) => ModelKind::Lm,
        }
    }

    pub fn cfg(&self) -> &SanConfig {
        match self {
            Model::Transformer(m) => &m.cfg,
            Model::Cif(m) => &m.cfg,
            Model::Lm(m) => &m.cfg,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Transformer(m) => &m.params,
            Model::Cif(m) => &m.params,
            Model::Lm(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Transformer(m) => &mut m.params,
            Model::Cif(m) => &mut m.params,
            Model::Lm(m) => &mut m.params,
        }
    }
}
