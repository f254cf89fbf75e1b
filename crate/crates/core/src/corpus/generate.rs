use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    /// Number of distinct labels.
    pub labels: usize,
    pub d_feat: usize,
    pub min_labels: usize,
    pub max_labels: usize,
    pub min_frames_per_label: usize,
    pub max_frames_per_label: usize,
    /// Fraction of each segment, at either end, that crossfades with the
    /// neighbouring label (0 = hard boundaries).
    pub blur: f64,
    pub noise_std: f64,
    pub speakers: usize,
    /// Standard deviation of the per-speaker additive offset.
    pub speaker_offset: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            labels: 16,
            d_feat: 20,
            min_labels: 3,
            max_labels: 8,
            min_frames_per_label: 12,
            max_frames_per_label: 20,
            blur: 0.0,
            noise_std: 0.3,
            speakers: 8,
            speaker_offset: 0.2,
            seed: 1,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config(field, reason));
        if self.labels < 2 {
            return bad("labels", "need at least 2 labels");
        }
        if self.d_feat == 0 {
            return bad("d_feat", "must be positive");
        }
        if self.min_labels == 0 || self.min_labels > self.max_labels {
            return bad("min_labels", "need 1 <= min_labels <= max_labels");
        }
        if self.min_frames_per_label == 0 || self.min_frames_per_label > self.max_frames_per_label {
            return bad(
                "min_frames_per_label",
                "need 1 <= min <= max frames per label",
            );
        }
        if self.min_labels * self.min_frames_per_label < crate::san::REDUCTION {
            return bad(
                "min_frames_per_label",
                "shortest utterance would be under 8 frames",
            );
        }
        if !(0.0..=1.0).contains(&self.blur) {
            return bad("blur", "must lie in [0, 1]");
        }
        if !(self.noise_std >= 0.0) || !(self.speaker_offset >= 0.0) {
            return bad("noise_std", "noise and speaker offset must be non-negative");
        }
        if self.speakers == 0 {
            return bad("speakers", "must be positive");
        }
        Ok(())
    }

    /// Label prototypes and speaker offsets; a pure function of the seed.
    pub fn prototypes(&self) -> Prototypes {
        let mut r = rng::stream(self.seed, "prototypes", 0);
        let mut normal = |n: usize, std: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    std * z
                })
                .collect::<Vec<f64>>()
        };
        let labels = (0..self.labels).map(|_| normal(self.d_feat, 1.0)).collect();
        let speakers = (0..self.speakers)
            .map(|_| normal(self.d_feat, self.speaker_offset))
            .collect();
        Prototypes { labels, speakers }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub labels: Vec<Vec<f64>>,
    pub speakers: Vec<Vec<f64>>,
}

impl Prototypes {
    /// Clean frame of `label` for `speaker`.
    pub fn frame(&self, label: usize, speaker: usize) -> Vec<f64> {
        self.labels[label]
            .iter()
            .zip(&self.speakers[speaker])
            .map(|(a, b)| a + b)
            .collect()
    }
}

fn render(spec: &CorpusSpec, protos: &Prototypes, id: String, r: &mut impl Rng) -> Utterance {
    let speaker = r.random_range(0..spec.speakers);
    let n = r.random_range(spec.min_labels..=spec.max_labels);
    let mut labels: Vec<usize> = Vec::with_capacity(n);
    while labels.len() < n {
        let y = r.random_range(0..spec.labels);
        if labels.last() != Some(&y) {
            labels.push(y);
        }
    }
    let lens: Vec<usize> = (0..n)
        .map(|_| r.random_range(spec.min_frames_per_label..=spec.max_frames_per_label))
        .collect();
    let clean: Vec<Vec<f64>> = labels.iter().map(|&y| protos.frame(y, speaker)).collect();
    let total: usize = lens.iter().sum();
    let mut data = Vec::with_capacity(total * spec.d_feat);
    for (j, &len) in lens.iter().enumerate() {
        for p in 0..len {
            let x = (p as f64 + 0.5) / len as f64;
            // Share of the neighbouring label, 0.5 right at the boundary.
            let (nb, lambda) = if spec.blur > 0.0 && x < spec.blur && j > 0 {
                (j - 1, 0.5 * (1.0 - x / spec.blur))
            } else if spec.blur > 0.0 && x > 1.0 - spec.blur && j + 1 < n {
                (j + 1, 0.5 * (1.0 - (1.0 - x) / spec.blur))
            } else {
                (j, 0.0)
            };
            for k in 0..spec.d_feat {
                let base = (1.0 - lambda) * clean[j][k] + lambda * clean[nb][k];
                let noise: f64 = if spec.noise_std > 0.0 {
                    {
                        let z: f64 = StandardNormal.sample(r);
                        spec.noise_std * z
                    }
                } else {
                    0.0
                };
                data.push(base + noise);
            }
        }
    }
    Utterance {
        id,
        speaker,
        features: Tensor::matrix(total, spec.d_feat, data),
        labels,
    }
}

/// `n` utterances named `{split}{index:05}`; utterance `k` draws from its own
/// stream derived from `(seed, split, k)`, so splits and sizes never
/// perturb each other.
pub fn generate_corpus(
    spec: &CorpusSpec,
    n: usize,
    split: &str,
    exec: Execution,
) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let protos = spec.prototypes();
    Ok(exec.map_indexed(n, |k| {
        let mut r = rng::stream(spec.seed, split, k as u64);
        render(spec, &protos, format!("{split}{k:05}"), &mut r)
    }))
}
