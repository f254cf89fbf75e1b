use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use synclab_core::corpus::{
    corpus_stats, generate_corpus, read_corpus, read_transcripts, write_corpus, CorpusSpec,
    CorpusStats, Utterance,
};
use synclab_core::decode::{format_hypothesis, measure_rtf, Hypothesis, Recognizer, RtfReport};
use synclab_core::metrics::{
    emit_report, read_json_report, score_corpus, CorpusScore, ReportFormat, ReportRow, ReportTable,
    ScoreItem,
};
use synclab_core::training::{
    list_checkpoints, read_loss_curve, Model, ModelKind, TrainData, Trainer, LOSS_CSV,
};
use synclab_core::Execution;

use crate::config::ExperimentConfig;
use crate::{load_lm, load_model, CliError, CliResult};

/// Archived copy of a config inside an output directory.
pub const ARCHIVED_CONFIG: &str = "config.toml";
pub const ARCHIVED_SPEC: &str = "corpus.toml";
pub const HYPOTHESES: &str = "hyps.txt";
pub const SPEED_FILE: &str = "speed.json";

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Validation(format!("cannot create {}: {e}", dir.display())))
}

fn archive(dir: &Path, name: &str, text: &str) -> CliResult<()> {
    create_dir(dir)?;
    fs::write(dir.join(name), text)?;
    Ok(())
}

pub struct CorpusSummary {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub train: CorpusStats,
    pub test: CorpusStats,
}

pub fn gen_corpus(
    spec: Option<&Path>,
    out: &Path,
    n_train: usize,
    n_test: usize,
    seed: Option<u64>,
) -> CliResult<CorpusSummary> {
    if n_train == 0 || n_test == 0 {
        return Err(CliError::Validation(
            "--n-train and --n-test must be positive".into(),
        ));
    }
    let text = match spec {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cs: CorpusSpec = toml::from_str(&text)
        .map_err(|e| CliError::Validation(format!("corpus spec: {}", e.message())))?;
    if let Some(s) = seed {
        cs.seed = s;
    }
    cs.validate()?;
    let train = generate_corpus(&cs, n_train, "train", Execution::Parallel)?;
    let test = generate_corpus(&cs, n_test, "test", Execution::Parallel)?;
    create_dir(out)?;
    let train_manifest = write_corpus(out, "train", &train)?;
    let test_manifest = write_corpus(out, "test", &test)?;
    let archived = if spec.is_some() {
        text
    } else {
        toml::to_string(&cs).map_err(|e| CliError::Runtime(e.to_string()))?
    };
    archive(out, ARCHIVED_SPEC, &archived)?;
    Ok(CorpusSummary {
        train_manifest,
        test_manifest,
        train: corpus_stats(&train),
        test: corpus_stats(&test),
    })
}

/// Wall-clock training speed, kept apart from the (reproducible) loss curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSpeed {
    pub steps: usize,
    pub wall_s: f64,
    pub steps_per_s: f64,
}

fn check_vocab(utts: &[Utterance], labels: usize) -> CliResult<()> {
    for u in utts {
        if let Some(&y) = u.labels.iter().find(|&&y| y >= labels) {
            return Err(CliError::Validation(format!(
                "vocabulary mismatch: utterance {} has label {y} but the model has {labels} labels",
                u.id
            )));
        }
    }
    Ok(())
}

pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

pub fn train(config: &Path, resume: bool) -> CliResult<TrainSummary> {
    let loaded = ExperimentConfig::load(config)?;
    let cfg = &loaded.cfg;
    let manifest = cfg
        .corpus
        .train
        .as_ref()
        .ok_or_else(|| CliError::Validation("corpus.train is not set".into()))?;
    let archived = cfg.out_dir.join(ARCHIVED_CONFIG);
    if resume && archived.exists() && fs::read_to_string(&archived)? != loaded.text {
        return Err(CliError::Validation(format!(
            "{} differs from the config being resumed",
            archived.display()
        )));
    }
    archive(&cfg.out_dir, ARCHIVED_CONFIG, &loaded.text)?;

    let model = Model::new(cfg.model, cfg.san.clone(), cfg.seed)?;
    let utts;
    let texts;
    let data = if cfg.model == ModelKind::Lm {
        texts = read_transcripts(manifest)?;
        TrainData::Text(&texts)
    } else {
        utts = read_corpus(manifest, Execution::Parallel)?;
        check_vocab(&utts, cfg.san.labels)?;
        TrainData::Speech(&utts)
    };
    let mut trainer = Trainer::new(
        model,
        data,
        cfg.train.clone(),
        cfg.loss,
        Execution::Parallel,
    )?;
    let resumed_at = if resume {
        list_checkpoints(&cfg.out_dir)?.last().map_or(0, |c| c.0)
    } else {
        0
    };
    let t0 = Instant::now();
    let report = trainer.run(Some(&cfg.out_dir), resume)?;
    let wall_s = t0.elapsed().as_secs_f64();
    let ran = trainer.step_count().saturating_sub(resumed_at);
    let speed = TrainSpeed {
        steps: ran,
        wall_s,
        steps_per_s: ran as f64 / wall_s.max(1e-9),
    };
    fs::write(
        cfg.out_dir.join(SPEED_FILE),
        serde_json::to_string_pretty(&speed)? + "\n",
    )?;
    Ok(TrainSummary {
        steps: trainer.step_count(),
        final_loss: report.curve.last().map_or(f64::NAN, |r| r.total),
        checkpoint: cfg.final_checkpoint(),
    })
}

fn recognizer(model: &Model) -> CliResult<Recognizer<'_>> {
    match model {
        Model::Transformer(m) => Ok(Recognizer::Transformer(m)),
        Model::Cif(m) => Ok(Recognizer::Cif(m)),
        Model::Lm(_) => Err(CliError::Validation(
            "a language model cannot decode speech".into(),
        )),
    }
}

#[derive(Debug, Clone, Default)]
pub struct DecodeOptions {
    pub checkpoint: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub gamma: Option<f64>,
    pub nbest: Option<usize>,
    pub out: Option<PathBuf>,
}

pub struct DecodeSummary {
    pub score: CorpusScore,
    pub hypotheses: PathBuf,
    pub metrics: PathBuf,
}

fn manifest_or_test(cfg: &ExperimentConfig, given: &Option<PathBuf>) -> CliResult<PathBuf> {
    given
        .clone()
        .or_else(|| cfg.corpus.test.clone())
        .ok_or_else(|| CliError::Validation("no manifest given and corpus.test is not set".into()))
}

pub fn decode(config: &Path, opts: &DecodeOptions) -> CliResult<DecodeSummary> {
    let loaded = ExperimentConfig::load(config)?;
    let mut cfg = loaded.cfg.clone();
    if let Some(g) = opts.gamma {
        cfg.decode.gamma = g;
    }
    if let Some(n) = opts.nbest {
        cfg.decode.nbest = n;
    }
    cfg.decode.validate()?;
    let manifest = manifest_or_test(&cfg, &opts.manifest)?;
    let ckpt = opts
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.final_checkpoint());
    let model = load_model(&cfg, &ckpt)?;
    let rec = recognizer(&model)?;
    let lm = load_lm(&cfg)?;
    let utts = read_corpus(&manifest, Execution::Parallel)?;
    check_vocab(&utts, cfg.san.labels)?;

    let hyps: Vec<Vec<Hypothesis>> = Execution::Parallel.try_map(&utts, |u| {
        rec.decode(&u.features, &cfg.decode, lm.as_ref())
            .map_err(|e| CliError::from(e).context(&u.id))
    })?;

    let out = opts
        .out
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("decode"));
    archive(&out, ARCHIVED_CONFIG, &loaded.text)?;
    let mut lines = String::new();
    for (u, hs) in utts.iter().zip(&hyps) {
        for h in hs {
            lines.push_str(&format_hypothesis(&u.id, h));
            lines.push('\n');
        }
    }
    let hyp_path = out.join(HYPOTHESES);
    fs::write(&hyp_path, lines)?;

    let items: Vec<ScoreItem> = utts
        .iter()
        .map(|u| ScoreItem {
            id: u.id.clone(),
            group: None,
            reference: u.labels.clone(),
        })
        .collect();
    let best: HashMap<String, Vec<usize>> = utts
        .iter()
        .zip(&hyps)
        .map(|(u, hs)| {
            (
                u.id.clone(),
                hs.first().map(|h| h.labels.clone()).unwrap_or_default(),
            )
        })
        .collect();
    let score = score_corpus(&items, &best)?;
    let condition = manifest
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("test");
    let rows = vec![ReportRow::new(cfg.model.name(), condition, &score.total)];
    let metrics = out.join("metrics.csv");
    emit_report(&metrics, "decode", &rows, ReportFormat::Csv)?;
    emit_report(
        &out.join("metrics.json"),
        "decode",
        &rows,
        ReportFormat::Json,
    )?;
    Ok(DecodeSummary {
        score,
        hypotheses: hyp_path,
        metrics,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RtfOutput {
    pub model: String,
    pub parameters: usize,
    #[serde(flatten)]
    pub report: RtfReport,
    /// Training speed from the run directory, when requested.
    pub train_steps_per_s: Option<f64>,
}

pub struct RtfOptions {
    pub checkpoint: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub warmup: usize,
    pub train_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Decodes one utterance at a time on the calling thread.
pub fn bench_rtf(config: &Path, opts: &RtfOptions) -> CliResult<(RtfOutput, PathBuf)> {
    let loaded = ExperimentConfig::load(config)?;
    let cfg = &loaded.cfg;
    let manifest = manifest_or_test(cfg, &opts.manifest)?;
    let ckpt = opts
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.final_checkpoint());
    let model = load_model(cfg, &ckpt)?;
    let rec = recognizer(&model)?;
    let utts = read_corpus(&manifest, Execution::Parallel)?;
    check_vocab(&utts, cfg.san.labels)?;
    let report = measure_rtf(
        |u| rec.decode(&u.features, &cfg.decode, None),
        &utts,
        opts.warmup,
    )?;
    let train_steps_per_s = match &opts.train_dir {
        Some(dir) => {
            let speed: TrainSpeed =
                serde_json::from_str(&fs::read_to_string(dir.join(SPEED_FILE))?)?;
            // The loss curve must exist too: speed without a finished run is meaningless.
            read_loss_curve(&dir.join(LOSS_CSV))?;
            Some(speed.steps_per_s)
        }
        None => None,
    };
    let out = RtfOutput {
        model: cfg.model.name().to_owned(),
        parameters: model.params().num_scalars(),
        report,
        train_steps_per_s,
    };
    let path = opts
        .out
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("rtf.json"));
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    fs::write(&path, serde_json::to_string_pretty(&out)? + "\n")?;
    Ok((out, path))
}

/// Concatenates JSON report tables into one.
pub fn report(inputs: &[PathBuf], out: &Path, title: &str) -> CliResult<ReportTable> {
    if inputs.is_empty() {
        return Err(CliError::Validation("no input tables".into()));
    }
    let mut rows = Vec::new();
    for p in inputs {
        rows.extend(
            read_json_report(p)
                .map_err(|e| CliError::from(e).context(&p.display().to_string()))?
                .rows,
        );
    }
    let format = match out.extension().and_then(|e| e.to_str()) {
        Some("json") => ReportFormat::Json,
        _ => ReportFormat::Csv,
    };
    if let Some(dir) = out.parent() {
        create_dir(dir)?;
    }
    emit_report(out, title, &rows, format)?;
    Ok(ReportTable {
        version: synclab_core::metrics::REPORT_VERSION,
        title: title.to_owned(),
        rows,
    })
}

/// Fixed-width text rendering of report rows.
pub fn render_rows(rows: &[ReportRow]) -> String {
    let mut s = format!(
        "{:<12} {:<14} {:>6} {:>6} {:>6} {:>7} {:>8} {:>9} {:>7}\n",
        "model", "condition", "sub", "ins", "del", "N", "rate%", "wall_s", "ratio"
    );
    for r in rows {
        let opt =
            |x: Option<f64>, p: usize| x.map(|v| format!("{v:.p$}")).unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "{:<12} {:<14} {:>6} {:>6} {:>6} {:>7} {:>8.2} {:>9} {:>7}\n",
            r.model,
            r.condition,
            r.substitutions,
            r.insertions,
            r.deletions,
            r.ref_len,
            r.rate_pct,
            opt(r.wall_s, 3),
            opt(r.time_ratio, 2)
        ));
    }
    s
}
