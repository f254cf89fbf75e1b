use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Frequency and time masking parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecAugment {
    /// Maximum frequency-band width.
    pub f: usize,
    pub m_f: usize,
    /// Maximum time-span width.
    pub t: usize,
    pub m_t: usize,
    /// Upper bound on a time span as a fraction of the utterance.
    pub p: f64,
}

impl Default for SpecAugment {
    fn default() -> Self {
        SpecAugment {
            f: 8,
            m_f: 2,
            t: 70,
            m_t: 2,
            p: 0.2,
        }
    }
}

/// Zeroes `m_f` bands of width `~U[0, f]` and `m_t` spans of width
/// `~U[0, t]` capped at `p·T`.
pub fn spec_augment(features: &Tensor, cfg: &SpecAugment, rng: &mut impl Rng) -> Tensor {
    let mut out = features.clone();
    let (frames, d) = (out.rows(), out.last_dim());
    for _ in 0..cfg.m_f {
        let width = rng.random_range(0..=cfg.f).min(d);
        let start = rng.random_range(0..=d - width);
        for r in 0..frames {
            out.row_mut(r)[start..start + width].fill(0.0);
        }
    }
    let cap = (cfg.p * frames as f64).floor() as usize;
    for _ in 0..cfg.m_t {
        let width = rng.random_range(0..=cfg.t).min(cap);
        let start = rng.random_range(0..=frames - width);
        for r in start..start + width {
            out.row_mut(r).fill(0.0);
        }
    }
    out
}

/// Parallel scheduled sampling: every position independently takes the
/// model's prediction with probability `rate`.
pub fn scheduled_sampling_mix(
    refs: &[usize],
    preds: &[usize],
    rate: f64,
    rng: &mut impl Rng,
) -> Vec<usize> {
    refs.iter()
        .zip(preds)
        .map(|(&r, &p)| if rng.random::<f64>() < rate { p } else { r })
        .collect()
}
