//! Synthetic "symbolic phone" corpora, the stress-set generators (long,
//! repeated and noisy utterances) and the on-disk formats.

mod generate;
mod io;
mod stress;

pub use generate::{generate_corpus, CorpusSpec, Prototypes};
pub use io::{
    feature_reads, read_corpus, read_features, read_manifest, read_transcripts, write_corpus,
    write_features, ManifestEntry, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use stress::{concat_long, mix_noise, repeat_utterance, LongBucket, NoiseKind};

use serde::Serialize;

use crate::tensor::Tensor;

/// Frame shift of the synthetic features.
pub const FRAME_SHIFT_S: f64 = 0.010;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    /// `T × d_feat`.
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn audio_seconds(&self) -> f64 {
        self.frames() as f64 * FRAME_SHIFT_S
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorpusStats {
    pub utterances: usize,
    pub frames: usize,
    pub mean_labels: f64,
    pub mean_frames: f64,
}

pub fn corpus_stats(utts: &[Utterance]) -> CorpusStats {
    let n = utts.len();
    let frames: usize = utts.iter().map(Utterance::frames).sum();
    let labels: usize = utts.iter().map(|u| u.labels.len()).sum();
    let div = n.max(1) as f64;
    CorpusStats {
        utterances: n,
        frames,
        mean_labels: labels as f64 / div,
        mean_frames: frames as f64 / div,
    }
}
