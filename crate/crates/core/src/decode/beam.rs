use super::{DecodeConfig, Hypothesis};
use crate::cif::{CifDecoderCache, CifModel, ResidualPolicy};
use crate::error::Result;
use crate::san::{EncodedSequence, Transformer};
use crate::tensor::{log_softmax_in_place, Tensor};

struct Live<C> {
    labels: Vec<usize>,
    score: f64,
    cache: C,
}

/// Indices of the `k` largest values, best first; ties keep index order.
fn top_k(scores: &[(usize, f64)], k: usize) -> Vec<(usize, f64)> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1));
    v.truncate(k);
    v
}

fn rank_key(h: &Hypothesis, length_norm: bool) -> f64 {
    if length_norm {
        h.model_score / (h.labels.len() + 1) as f64
    } else {
        h.model_score
    }
}

/// Beam search over cached decoder steps. A hypothesis completes when it
/// emits end-of-sentence. Without length normalisation the search stops
/// once `beam` hypotheses have completed and no live one can still beat
/// the worst of them (scores only fall as hypotheses grow).
pub fn beam_search_label_sync(
    model: &Transformer,
    enc: &EncodedSequence,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let vocab = model.cfg.vocab();
    let eos = vocab.eos();
    let max_len = cfg.max_len(enc.len());
    let mut live = vec![Live {
        labels: Vec::new(),
        score: 0.0,
        cache: model.start(enc)?,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        // (parent, symbol, total score)
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (b, hyp) in live.iter_mut().enumerate() {
            let mut lp = model
                .decoder_step(&hyp.labels, &mut hyp.cache, enc)?
                .into_data();
            log_softmax_in_place(&mut lp);
            let allowed: Vec<(usize, f64)> =
                (0..vocab.labels).chain([eos]).map(|y| (y, lp[y])).collect();
            for (y, s) in top_k(&allowed, cfg.beam) {
                cands.push((b, y, hyp.score + s));
            }
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut next = Vec::with_capacity(cfg.beam);
        for &(b, y, score) in &cands {
            if next.len() == cfg.beam {
                break;
            }
            if y == eos {
                done.push(Hypothesis::new(live[b].labels.clone(), score));
            } else {
                let mut labels = live[b].labels.clone();
                labels.push(y);
                next.push(Live {
                    labels,
                    score,
                    cache: live[b].cache.clone(),
                });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if !cfg.length_norm && done.len() >= cfg.beam {
            let mut scores: Vec<f64> = done.iter().map(|h| h.model_score).collect();
            scores.sort_by(|a, b| b.total_cmp(a));
            let worst_kept = scores[cfg.beam - 1];
            if live[0].score <= worst_kept {
                break;
            }
        }
    }
    if done.is_empty() {
        let best = live
            .into_iter()
            .next()
            .expect("beam is never empty before the bound");
        let mut h = Hypothesis::new(best.labels, best.score);
        h.truncated = true;
        return Ok(vec![h]);
    }
    done.sort_by(|a, b| rank_key(b, cfg.length_norm).total_cmp(&rank_key(a, cfg.length_norm)));
    done.truncate(cfg.beam);
    Ok(done)
}

/// Beam over the decoder for already integrated embeddings `c` (one row per
/// fire). Every hypothesis has exactly `c.rows()` labels.
pub fn cif_beam(model: &CifModel, c: &Tensor, beam: usize) -> Result<Vec<Hypothesis>> {
    let labels = model.cfg.labels;
    let mut live: Vec<Live<CifDecoderCache>> = vec![Live {
        labels: Vec::new(),
        score: 0.0,
        cache: model.decoder_start(),
    }];
    for i in 0..c.rows() {
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (b, hyp) in live.iter_mut().enumerate() {
            let mut lp = model
                .decoder_step(&hyp.labels, &mut hyp.cache, c.row(i))?
                .into_data();
            log_softmax_in_place(&mut lp);
            let allowed: Vec<(usize, f64)> = (0..labels).map(|y| (y, lp[y])).collect();
            for (y, s) in top_k(&allowed, beam) {
                cands.push((b, y, hyp.score + s));
            }
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2));
        cands.truncate(beam.max(1));
        live = cands
            .into_iter()
            .map(|(b, y, score)| {
                let mut l = live[b].labels.clone();
                l.push(y);
                Live {
                    labels: l,
                    score,
                    cache: live[b].cache.clone(),
                }
            })
            .collect();
    }
    Ok(live
        .into_iter()
        .map(|h| Hypothesis::new(h.labels, h.score))
        .collect())
}

/// Encoder, weight prediction and one integrate-and-fire pass, then a beam
/// over the fired steps; stops right after the last fire.
pub fn decode_frame_sync(
    model: &CifModel,
    features: &Tensor,
    beam: usize,
) -> Result<Vec<Hypothesis>> {
    let (c, _, _) = model.fire(features, ResidualPolicy::Round)?;
    cif_beam(model, &c, beam)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_is_stable_on_ties() {
        let v = [(0, 1.0), (1, 2.0), (2, 1.0), (3, 2.0)];
        assert_eq!(top_k(&v, 3), vec![(1, 2.0), (3, 2.0), (0, 1.0)]);
    }
}
