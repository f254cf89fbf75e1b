//! Self-attention network (SAN) building blocks shared by both recognizers.

mod attention;
mod encoder;
mod lm;
mod transformer;

pub use attention::{multi_head_attention, Mask};
pub use encoder::{encode_batch, encoder_forward, encoder_graph, EncodedSequence, REDUCTION};
pub use lm::{LanguageModel, LmCache};
pub use transformer::{DecoderCache, Transformer};

pub(crate) use attention::{
    init_dense, init_norm, init_san_layer, san_layer, san_layer_step, KvRows, SanLayerOpts,
};
pub(crate) use encoder::init_encoder;
pub(crate) use transformer::init_embedding;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output vocabulary: `labels` real symbols followed by end-of-sentence
/// (also used as the start symbol), the CTC blank and padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub labels: usize,
}

impl Vocab {
    pub fn new(labels: usize) -> Self {
        Vocab { labels }
    }
    pub fn eos(self) -> usize {
        self.labels
    }
    pub fn blank(self) -> usize {
        self.labels + 1
    }
    pub fn pad(self) -> usize {
        self.labels + 2
    }
    pub fn size(self) -> usize {
        self.labels + 3
    }
    pub fn is_label(self, y: usize) -> bool {
        y < self.labels
    }
    pub fn check(self, y: usize) -> Result<()> {
        if y >= self.size() {
            return Err(Error::LabelOutOfVocab {
                label: y,
                vocab: self.size(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SanConfig {
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Input feature width.
    pub d_feat: usize,
    /// Total encoder SAN layers.
    pub encoder_layers: usize,
    /// How many of them run before the pair-concatenation (at 1/4 frame rate).
    pub encoder_layers_before_reduce: usize,
    /// Decoder blocks (N_d for the transformer, SAN layers for the CIF decoder,
    /// layers of the language model).
    pub decoder_layers: usize,
    pub dropout: f64,
    pub labels: usize,
    /// Initial proximity-bias length scale τ.
    pub init_tau: f64,
}

impl Default for SanConfig {
    fn default() -> Self {
        SanConfig {
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            d_feat: 20,
            encoder_layers: 4,
            encoder_layers_before_reduce: 2,
            decoder_layers: 3,
            dropout: 0.1,
            labels: 16,
            init_tau: 6.0,
        }
    }
}

impl SanConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.labels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "d_model",
                format!(
                    "{} is not divisible by n_heads = {}",
                    self.d_model, self.n_heads
                ),
            ));
        }
        if self.decoder_layers == 0 {
            return Err(Error::config("decoder_layers", "must be at least 1"));
        }
        if self.encoder_layers_before_reduce > self.encoder_layers {
            return Err(Error::config(
                "encoder_layers_before_reduce",
                "exceeds encoder_layers",
            ));
        }
        if self.d_ff == 0 || self.d_feat == 0 || self.labels == 0 {
            return Err(Error::config("d_ff/d_feat/labels", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if !(self.init_tau > 0.0) {
            return Err(Error::config("init_tau", "must be positive"));
        }
        Ok(())
    }
}
