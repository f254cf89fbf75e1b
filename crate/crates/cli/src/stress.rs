//! Stress sweeps: long concatenations, repeated utterances and noise.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use synclab_core::corpus::{
    concat_long, corpus_stats, mix_noise, read_corpus, repeat_utterance, LongBucket, NoiseKind,
    Utterance,
};
use synclab_core::decode::{DecodeConfig, Recognizer};
use synclab_core::metrics::{emit_report, score_corpus, ReportFormat, ReportRow, ScoreItem};
use synclab_core::training::Model;
use synclab_core::{rng, Execution};

use crate::config::ExperimentConfig;
use crate::{load_model, CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum StressMode {
    Long,
    Repeat,
    Noise,
}

impl StressMode {
    pub fn name(self) -> &'static str {
        match self {
            StressMode::Long => "long",
            StressMode::Repeat => "repeat",
            StressMode::Noise => "noise",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StressParams {
    pub seed: u64,
    /// Share of the test set that gets repeated (at least one utterance).
    pub fraction: f64,
    pub max_repeat: usize,
    /// Bucket edges as multiples of the mean source-utterance length.
    pub bucket_edges: Vec<f64>,
    pub per_bucket: usize,
    pub snr_min: f64,
    pub snr_max: f64,
}

impl Default for StressParams {
    fn default() -> Self {
        StressParams {
            seed: 1,
            fraction: 0.1,
            max_repeat: 4,
            bucket_edges: vec![5.0, 10.0, 20.0, 40.0],
            per_bucket: 10,
            snr_min: 0.0,
            snr_max: 20.0,
        }
    }
}

/// One stress condition: utterances plus an optional sub-group per utterance.
#[derive(Debug, Clone)]
pub struct Condition {
    pub name: String,
    pub utts: Vec<Utterance>,
    pub groups: Vec<Option<String>>,
}

impl Condition {
    fn plain(name: String, utts: Vec<Utterance>) -> Self {
        let groups = vec![None; utts.len()];
        Condition { name, utts, groups }
    }
}

/// `ceil(fraction · n)` utterances (at least one) in a seeded random order.
pub fn repeat_subset(test: &[Utterance], fraction: f64, seed: u64) -> Vec<Utterance> {
    let k = ((fraction * test.len() as f64).ceil() as usize).clamp(1, test.len());
    let mut idx: Vec<usize> = (0..test.len()).collect();
    idx.shuffle(&mut rng::stream(seed, "stress-subset", 0));
    idx.truncate(k);
    idx.sort_unstable();
    idx.into_iter().map(|i| test[i].clone()).collect()
}

pub fn repeat_conditions(subset: &[Utterance], max_repeat: usize) -> CliResult<Vec<Condition>> {
    (1..=max_repeat)
        .map(|n| {
            let utts = subset
                .iter()
                .map(|u| repeat_utterance(u, n))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Condition::plain(format!("x{n}"), utts))
        })
        .collect()
}

pub fn build_conditions(
    mode: StressMode,
    test: &[Utterance],
    p: &StressParams,
) -> CliResult<Vec<Condition>> {
    match mode {
        StressMode::Repeat => {
            if p.max_repeat == 0 || !(p.fraction > 0.0 && p.fraction <= 1.0) {
                return Err(CliError::Validation(
                    "need --max-repeat >= 1 and --fraction in (0, 1]".into(),
                ));
            }
            repeat_conditions(&repeat_subset(test, p.fraction, p.seed), p.max_repeat)
        }
        StressMode::Long => {
            if p.bucket_edges.len() < 2
                || p.bucket_edges.windows(2).any(|w| !(w[0] < w[1]))
                || p.per_bucket == 0
            {
                return Err(CliError::Validation(
                    "need increasing --buckets edges and --per-bucket >= 1".into(),
                ));
            }
            let mean = corpus_stats(test).mean_frames;
            let buckets: Vec<LongBucket> = p
                .bucket_edges
                .windows(2)
                .map(|w| LongBucket {
                    min_frames: (w[0] * mean).round() as usize,
                    max_frames: (w[1] * mean).round() as usize,
                    count: p.per_bucket,
                })
                .collect();
            let long = concat_long(test, &buckets, p.seed)?;
            Ok(p.bucket_edges
                .windows(2)
                .enumerate()
                .map(|(b, w)| {
                    let utts = long
                        .iter()
                        .filter(|(k, _)| *k == b)
                        .map(|(_, u)| u.clone())
                        .collect();
                    Condition::plain(format!("{}-{}x", w[0], w[1]), utts)
                })
                .collect())
        }
        StressMode::Noise => {
            if !(p.snr_min <= p.snr_max) || !p.snr_min.is_finite() || !p.snr_max.is_finite() {
                return Err(CliError::Validation(
                    "need finite --snr-min <= --snr-max".into(),
                ));
            }
            let mut noisy = Vec::with_capacity(test.len());
            let mut groups = Vec::with_capacity(test.len());
            for (i, u) in test.iter().enumerate() {
                let kind = NoiseKind::ALL[i % NoiseKind::ALL.len()];
                let snr = if p.snr_min == p.snr_max {
                    p.snr_min
                } else {
                    rng::stream(p.seed, "snr", i as u64).random_range(p.snr_min..=p.snr_max)
                };
                noisy.push(mix_noise(
                    u,
                    snr,
                    kind,
                    rng::derive_seed(p.seed, "noise", i as u64),
                )?);
                groups.push(Some(kind.name().to_owned()));
            }
            Ok(vec![
                Condition::plain("clean".into(), test.to_vec()),
                Condition {
                    name: "noisy".into(),
                    utts: noisy,
                    groups,
                },
            ])
        }
    }
}

/// Best hypothesis and wall time per utterance, decoded one at a time on
/// the calling thread.
pub fn decode_timed(
    rec: Recognizer<'_>,
    cfg: &DecodeConfig,
    utts: &[Utterance],
) -> CliResult<(Vec<Vec<usize>>, Vec<f64>)> {
    let mut hyps = Vec::with_capacity(utts.len());
    let mut times = Vec::with_capacity(utts.len());
    for u in utts {
        let t0 = Instant::now();
        let h = rec
            .decode(&u.features, cfg, None)
            .map_err(|e| CliError::from(e).context(&u.id))?;
        times.push(t0.elapsed().as_secs_f64());
        hyps.push(h.into_iter().next().map(|h| h.labels).unwrap_or_default());
    }
    Ok((hyps, times))
}

/// Scores one model on every condition. Time ratios are relative to the
/// first condition; sub-group rows follow their condition row.
pub fn evaluate(
    name: &str,
    rec: Recognizer<'_>,
    cfg: &DecodeConfig,
    conditions: &[Condition],
) -> CliResult<Vec<ReportRow>> {
    let mut rows = Vec::new();
    let mut base = None;
    for c in conditions {
        let (hyps, times) = decode_timed(rec, cfg, &c.utts)
            .map_err(|e| e.context(&format!("{name} on {}", c.name)))?;
        let items: Vec<ScoreItem> = c
            .utts
            .iter()
            .zip(&c.groups)
            .map(|(u, g)| ScoreItem {
                id: u.id.clone(),
                group: g.clone(),
                reference: u.labels.clone(),
            })
            .collect();
        let map: HashMap<String, Vec<usize>> =
            c.utts.iter().map(|u| u.id.clone()).zip(hyps).collect();
        let score = score_corpus(&items, &map)?;
        let wall: f64 = times.iter().sum();
        let base_wall = *base.get_or_insert(wall);
        let mut row = ReportRow::new(name, &c.name, &score.total);
        row.wall_s = Some(wall);
        row.time_ratio = Some(wall / base_wall);
        rows.push(row);
        for (g, b) in &score.groups {
            let mut row = ReportRow::new(name, &format!("{}/{g}", c.name), b);
            row.wall_s = Some(
                c.groups
                    .iter()
                    .zip(&times)
                    .filter(|(x, _)| x.as_deref() == Some(g.as_str()))
                    .map(|(_, t)| t)
                    .sum(),
            );
            rows.push(row);
        }
    }
    Ok(rows)
}

pub struct StressOptions {
    pub mode: StressMode,
    pub models: Vec<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub params: StressParams,
}

pub fn stress(opts: &StressOptions) -> CliResult<(Vec<ReportRow>, PathBuf)> {
    if opts.models.is_empty() {
        return Err(CliError::Validation("--models lists no configs".into()));
    }
    let mut models: Vec<(String, ExperimentConfig, Model)> = Vec::new();
    for (i, path) in opts.models.iter().enumerate() {
        let loaded = ExperimentConfig::load(path)?;
        let model = load_model(&loaded.cfg, &loaded.cfg.final_checkpoint())?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
        fs::create_dir_all(&opts.out)?;
        fs::write(
            opts.out.join(format!("config-{i}-{stem}.toml")),
            &loaded.text,
        )?;
        models.push((loaded.cfg.model.name().to_owned(), loaded.cfg, model));
    }
    let manifest = opts
        .manifest
        .clone()
        .or_else(|| models[0].1.corpus.test.clone())
        .ok_or_else(|| {
            CliError::Validation("no --manifest and the first config has no corpus.test".into())
        })?;
    let test = read_corpus(&manifest, Execution::Parallel)?;
    let conditions = build_conditions(opts.mode, &test, &opts.params)?;
    let mut rows = Vec::new();
    for (name, cfg, model) in &models {
        let rec = match model {
            Model::Transformer(m) => Recognizer::Transformer(m),
            Model::Cif(m) => Recognizer::Cif(m),
            Model::Lm(_) => {
                return Err(CliError::Validation(format!(
                    "{name}: a language model cannot decode speech"
                )))
            }
        };
        if conditions
            .iter()
            .flat_map(|c| &c.utts)
            .flat_map(|u| &u.labels)
            .any(|&y| y >= cfg.san.labels)
        {
            return Err(CliError::Validation(format!(
                "{name}: vocabulary mismatch with {}",
                manifest.display()
            )));
        }
        log::info!("stress {}: decoding with {name}", opts.mode.name());
        rows.extend(evaluate(name, rec, &cfg.decode, &conditions)?);
    }
    let csv = opts.out.join(format!("stress-{}.csv", opts.mode.name()));
    emit_report(
        &csv,
        &format!("stress {}", opts.mode.name()),
        &rows,
        ReportFormat::Csv,
    )?;
    emit_report(
        &opts.out.join(format!("stress-{}.json", opts.mode.name())),
        &format!("stress {}", opts.mode.name()),
        &rows,
        ReportFormat::Json,
    )?;
    Ok((rows, csv))
}

/// Parses `5,10,20` into bucket edges.
pub fn parse_edges(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect()
}
