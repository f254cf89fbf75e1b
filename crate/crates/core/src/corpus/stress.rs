use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Target length range `[min_frames, max_frames)` and how many utterances
/// to build for it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongBucket {
    pub min_frames: usize,
    pub max_frames: usize,
    pub count: usize,
}

const MAX_ATTEMPTS: usize = 1000;

/// Concatenates randomly chosen utterances of one speaker until the length
/// falls inside each bucket. Returns `(bucket index, utterance)` ordered by
/// bucket.
pub fn concat_long(
    corpus: &[Utterance],
    buckets: &[LongBucket],
    seed: u64,
) -> Result<Vec<(usize, Utterance)>> {
    let mut by_speaker: BTreeMap<usize, Vec<&Utterance>> = BTreeMap::new();
    for u in corpus {
        by_speaker.entry(u.speaker).or_default().push(u);
    }
    let speakers: Vec<usize> = by_speaker
        .iter()
        .filter_map(|(&s, utts)| {
            if utts.len() < 2 {
                log::warn!("speaker {s} has a single utterance; skipped for concatenation");
                None
            } else {
                Some(s)
            }
        })
        .collect();
    if speakers.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut out = Vec::new();
    for (b, bucket) in buckets.iter().enumerate() {
        if bucket.min_frames >= bucket.max_frames {
            return Err(Error::config(
                "duration_buckets",
                format!("bucket {b} has an empty range"),
            ));
        }
        let mut r = rng::stream(seed, "concat_long", b as u64);
        let mut made = 0;
        let mut attempts = 0;
        while made < bucket.count {
            attempts += 1;
            if attempts > MAX_ATTEMPTS * bucket.count.max(1) {
                return Err(Error::Contract(format!(
                    "duration bucket {b} ({}..{} frames) unreachable from same-speaker utterances",
                    bucket.min_frames, bucket.max_frames
                )));
            }
            let spk = speakers[r.random_range(0..speakers.len())];
            let mut pool = by_speaker[&spk].clone();
            pool.shuffle(&mut r);
            let mut pieces = Vec::new();
            let mut frames = 0;
            // Cycles through the speaker's utterances if one pass is too short.
            for u in pool.iter().cycle() {
                if frames >= bucket.min_frames {
                    break;
                }
                pieces.push(*u);
                frames += u.frames();
            }
            if frames >= bucket.max_frames || pieces.len() < 2 {
                continue;
            }
            let feats: Vec<&Tensor> = pieces.iter().map(|u| &u.features).collect();
            let utt = Utterance {
                id: format!("long{b}_{made:04}"),
                speaker: spk,
                features: Tensor::concat_rows(&feats)?,
                labels: pieces
                    .iter()
                    .flat_map(|u| u.labels.iter().copied())
                    .collect(),
            };
            out.push((b, utt));
            made += 1;
        }
    }
    Ok(out)
}

/// Features and transcript tiled `n` times.
pub fn repeat_utterance(u: &Utterance, n: usize) -> Result<Utterance> {
    if n == 0 {
        return Err(Error::Contract(
            "repetition count must be at least 1".into(),
        ));
    }
    if n == 1 {
        return Ok(u.clone());
    }
    let feats = vec![&u.features; n];
    Ok(Utterance {
        id: format!("{}_x{n}", u.id),
        speaker: u.speaker,
        features: Tensor::concat_rows(&feats)?,
        labels: u.labels.repeat(n),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    /// Slow per-dimension sinusoidal drift.
    Drift,
    /// Crossfaded mixtures of random prototype-like vectors.
    Babble,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Drift, NoiseKind::Babble];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Drift => "drift",
            NoiseKind::Babble => "babble",
        }
    }
}

fn noise_bank(kind: NoiseKind, frames: usize, d: usize, r: &mut impl Rng) -> Vec<f64> {
    let mut normal = || -> f64 { StandardNormal.sample(&mut *r) };
    match kind {
        NoiseKind::White => (0..frames * d).map(|_| normal()).collect(),
        NoiseKind::Drift => {
            let params: Vec<(f64, f64)> = (0..d)
                .map(|_| {
                    let period = 50.0 + 150.0 * normal().abs();
                    (
                        std::f64::consts::TAU / period,
                        std::f64::consts::PI * normal(),
                    )
                })
                .collect();
            (0..frames)
                .flat_map(|t| {
                    params
                        .iter()
                        .map(move |&(w, phase)| (w * t as f64 + phase).sin())
                })
                .collect()
        }
        NoiseKind::Babble => {
            const SEGMENT: usize = 10;
            const TALKERS: usize = 3;
            let anchors: Vec<Vec<f64>> = (0..frames / SEGMENT + 2)
                .map(|_| {
                    let mut v = vec![0.0; d];
                    for _ in 0..TALKERS {
                        v.iter_mut().for_each(|x| *x += normal());
                    }
                    v
                })
                .collect();
            let mut out = Vec::with_capacity(frames * d);
            for t in 0..frames {
                let (seg, w) = (t / SEGMENT, (t % SEGMENT) as f64 / SEGMENT as f64);
                out.extend((0..d).map(|k| (1.0 - w) * anchors[seg][k] + w * anchors[seg + 1][k]));
            }
            out
        }
    }
}

fn power(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>() / xs.len().max(1) as f64
}

/// Adds noise scaled so that the feature-power SNR over the utterance is
/// exactly `snr_db`. An infinite SNR returns the input unchanged.
pub fn mix_noise(u: &Utterance, snr_db: f64, kind: NoiseKind, seed: u64) -> Result<Utterance> {
    if snr_db == f64::INFINITY {
        return Ok(u.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::config("snr_db", "must be finite or +inf"));
    }
    let signal = power(u.features.data());
    if signal == 0.0 {
        return Err(Error::Contract(format!(
            "utterance {} has zero power",
            u.id
        )));
    }
    let mut r = rng::stream(seed, kind.name(), 0);
    let noise = noise_bank(kind, u.frames(), u.features.last_dim(), &mut r);
    let raw = power(&noise);
    let gain = (signal / 10f64.powf(snr_db / 10.0) / raw).sqrt();
    let mut features = u.features.clone();
    for (x, n) in features.data_mut().iter_mut().zip(&noise) {
        *x += gain * n;
    }
    Ok(Utterance {
        id: format!("{}_{}{}", u.id, kind.name(), snr_db),
        speaker: u.speaker,
        features,
        labels: u.labels.clone(),
    })
}
