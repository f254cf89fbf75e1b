//! Label-synchronous beam search for the transformer, frame-synchronous
//! beam search over CIF fires, LM rescoring and real-time-factor timing.

mod beam;
mod rtf;

pub use beam::{beam_search_label_sync, cif_beam, decode_frame_sync};
pub use rtf::{measure_rtf, RtfReport, UttTiming};

use serde::{Deserialize, Serialize};

use crate::cif::CifModel;
use crate::error::{Error, Result};
use crate::san::{LanguageModel, Transformer};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Surface labels; never contains end-of-sentence.
    pub labels: Vec<usize>,
    pub model_score: f64,
    pub lm_score: f64,
    pub combined: f64,
    /// Set when the label-synchronous search hit its length bound before
    /// any hypothesis emitted end-of-sentence.
    pub truncated: bool,
}

impl Hypothesis {
    pub fn new(labels: Vec<usize>, model_score: f64) -> Self {
        Hypothesis {
            labels,
            model_score,
            lm_score: 0.0,
            combined: model_score,
            truncated: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Label-synchronous length bound: `ratio · U + offset` steps for `U`
    /// encoder outputs.
    pub max_len_ratio: f64,
    pub max_len_offset: usize,
    /// Rank completed hypotheses by score per emitted symbol.
    pub length_norm: bool,
    /// LM rescoring coefficient γ.
    pub gamma: f64,
    pub nbest: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 10,
            max_len_ratio: 1.2,
            max_len_offset: 10,
            length_norm: false,
            gamma: 0.0,
            nbest: 1,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::config("beam", "must be positive"));
        }
        if self.nbest == 0 {
            return Err(Error::config("nbest", "must be positive"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("gamma", "must be non-negative"));
        }
        if !(self.max_len_ratio >= 0.0) {
            return Err(Error::config("max_len_ratio", "must be non-negative"));
        }
        Ok(())
    }

    pub fn max_len(&self, encoder_len: usize) -> usize {
        ((self.max_len_ratio * encoder_len as f64).ceil() as usize + self.max_len_offset).max(1)
    }
}

/// Anything that scores a complete label sequence.
pub trait SequenceScorer {
    fn score(&self, labels: &[usize]) -> Result<f64>;
}

impl SequenceScorer for LanguageModel {
    fn score(&self, labels: &[usize]) -> Result<f64> {
        self.lm_score(labels)
    }
}

impl<F: Fn(&[usize]) -> f64> SequenceScorer for F {
    fn score(&self, labels: &[usize]) -> Result<f64> {
        Ok(self(labels))
    }
}

/// `combined = model + γ·lm`, then a stable sort by combined score.
pub fn lm_rescore(
    mut hyps: Vec<Hypothesis>,
    lm: &dyn SequenceScorer,
    gamma: f64,
) -> Result<Vec<Hypothesis>> {
    for h in &mut hyps {
        h.lm_score = lm.score(&h.labels)?;
        h.combined = h.model_score + gamma * h.lm_score;
    }
    hyps.sort_by(|a, b| b.combined.total_cmp(&a.combined));
    Ok(hyps)
}

/// A trained recognizer of either kind.
#[derive(Debug, Clone, Copy)]
pub enum Recognizer<'m> {
    Transformer(&'m Transformer),
    Cif(&'m CifModel),
}

impl Recognizer<'_> {
    pub fn vocab_labels(&self) -> usize {
        match self {
            Recognizer::Transformer(m) => m.cfg.labels,
            Recognizer::Cif(m) => m.cfg.labels,
        }
    }

    /// Encoder, search and optional rescoring for one utterance; returns at
    /// most `cfg.nbest` hypotheses, best first.
    pub fn decode(
        &self,
        features: &Tensor,
        cfg: &DecodeConfig,
        lm: Option<&LanguageModel>,
    ) -> Result<Vec<Hypothesis>> {
        let mut hyps = match self {
            Recognizer::Transformer(m) => {
                let enc = m.encode(features)?;
                beam_search_label_sync(m, &enc, cfg)?
            }
            Recognizer::Cif(m) => decode_frame_sync(m, features, cfg.beam)?,
        };
        if let Some(lm) = lm {
            if cfg.gamma > 0.0 {
                hyps = lm_rescore(hyps, lm, cfg.gamma)?;
            }
        }
        hyps.truncate(cfg.nbest);
        Ok(hyps)
    }
}

/// `utt_id<TAB>labels<TAB>model_score<TAB>lm_score<TAB>combined`.
pub fn format_hypothesis(utt_id: &str, h: &Hypothesis) -> String {
    let labels = h
        .labels
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ");
    format!(
        "{utt_id}\t{labels}\t{:.6}\t{:.6}\t{:.6}",
        h.model_score, h.lm_score, h.combined
    )
}

/// Inverse of [`format_hypothesis`]: utterance id and labels.
pub fn parse_hypothesis(line: &str) -> Result<(String, Vec<usize>)> {
    let bad = || Error::Contract(format!("malformed hypothesis line {line:?}"));
    let mut cols = line.split('\t');
    let id = cols.next().ok_or_else(bad)?;
    let labels = cols
        .next()
        .ok_or_else(bad)?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad()))
        .collect::<Result<Vec<usize>>>()?;
    Ok((id.to_owned(), labels))
}
