use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UttTiming {
    pub id: String,
    pub audio_s: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub audio_s: f64,
    pub wall_s: f64,
    pub rtf: f64,
    pub n_utts: usize,
    pub per_utt: Vec<UttTiming>,
}

impl RtfReport {
    pub fn from_timings(per_utt: Vec<UttTiming>) -> Result<Self> {
        if per_utt.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let audio_s: f64 = per_utt.iter().map(|t| t.audio_s).sum();
        let wall_s: f64 = per_utt.iter().map(|t| t.wall_s).sum();
        Ok(RtfReport {
            audio_s,
            wall_s,
            rtf: wall_s / audio_s,
            n_utts: per_utt.len(),
            per_utt,
        })
    }
}

/// Times `decode` on each utterance on the calling thread. The first
/// `warmup` utterances are decoded but left out of the report.
pub fn measure_rtf<T>(
    mut decode: impl FnMut(&Utterance) -> Result<T>,
    corpus: &[Utterance],
    warmup: usize,
) -> Result<RtfReport> {
    if corpus.len() <= warmup {
        return Err(Error::EmptyCorpus);
    }
    for u in &corpus[..warmup] {
        decode(u)?;
    }
    let mut per_utt = Vec::with_capacity(corpus.len() - warmup);
    for u in &corpus[warmup..] {
        let start = Instant::now();
        decode(u)?;
        per_utt.push(UttTiming {
            id: u.id.clone(),
            audio_s: u.audio_seconds(),
            wall_s: start.elapsed().as_secs_f64(),
        });
    }
    RtfReport::from_timings(per_utt)
}
