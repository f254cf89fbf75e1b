//! Losses, optimizer, augmentation and the training loop shared by the
//! transformer, the CIF model and the language model.

mod augment;
mod losses;
mod model;
mod optim;

pub use augment::{scheduled_sampling_mix, spec_augment, SpecAugment};
pub use losses::{cross_entropy_smoothed, ctc_loss, ctc_min_frames, ctc_nll, quantity_loss};
pub use model::{Model, ModelKind};
pub use optim::{model_weights, noam_lr, Adam};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cif::teacher_inputs;
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::graph::{Graph, ParamGrads};
use crate::params::ParamStore;
use crate::rng;
use crate::san::encoder_graph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// λ1, on the encoder CTC loss.
    pub ctc: f64,
    /// λ2, on the CIF quantity loss.
    pub quantity: f64,
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ctc: 0.5,
            quantity: 1.0,
            label_smoothing: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.ctc >= 0.0) || !(self.quantity >= 0.0) {
            return Err(Error::config("loss", "coefficients must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub warmup: usize,
    /// Global learning-rate coefficient.
    pub lr_k: f64,
    /// Frame budget per batch (speech models).
    pub batch_frames: usize,
    /// Label budget per batch (language model).
    pub batch_tokens: usize,
    pub sampling_rate: f64,
    pub spec_augment: Option<SpecAugment>,
    pub checkpoint_every: usize,
    /// Number of newest checkpoints averaged into the final weights.
    pub average: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            warmup: 400,
            lr_k: 1.0,
            batch_frames: 2000,
            batch_tokens: 300,
            sampling_rate: 0.0,
            spec_augment: None,
            checkpoint_every: 50,
            average: 10,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: &str| Err(Error::config(f, r));
        if self.steps == 0 {
            return bad("steps", "must be positive");
        }
        if self.batch_frames == 0 || self.batch_tokens == 0 {
            return bad("batch_frames", "batch budgets must be positive");
        }
        if !(self.lr_k > 0.0) {
            return bad("lr_k", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.sampling_rate) {
            return bad("sampling_rate", "must lie in [0, 1]");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "must be positive");
        }
        Ok(())
    }
}

/// Training material: utterances for the recognizers, label sequences for
/// the language model.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    Speech(&'a [Utterance]),
    Text(&'a [Vec<usize>]),
}

impl TrainData<'_> {
    fn len(&self) -> usize {
        match self {
            TrainData::Speech(u) => u.len(),
            TrainData::Text(t) => t.len(),
        }
    }

    fn cost(&self, i: usize) -> usize {
        match self {
            TrainData::Speech(u) => u[i].frames(),
            TrainData::Text(t) => t[i].len() + 1,
        }
    }

    fn labels(&self, i: usize) -> &[usize] {
        match self {
            TrainData::Speech(u) => &u[i].labels,
            TrainData::Text(t) => &t[i],
        }
    }
}

/// One row of the loss curve; the components are batch means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub ce: f64,
    pub ctc: f64,
    pub quantity: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Parts {
    total: f64,
    ce: f64,
    ctc: f64,
    quantity: f64,
}

/// Length-sorted greedy grouping under a cost budget.
fn make_batches(data: &TrainData<'_>, budget: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by_key(|&i| data.cost(i));
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut used = 0;
    for i in order {
        let c = data.cost(i);
        if !cur.is_empty() && used + c > budget {
            batches.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(i);
        used += c;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

fn argmax_rows(t: &crate::Tensor, labels: usize) -> Vec<usize> {
    (0..t.rows())
        .map(|r| crate::cif::argmax_label(t.row(r), labels))
        .collect()
}

fn stream_index(step: usize, item: usize) -> u64 {
    ((step as u64) << 32) | item as u64
}

pub struct Trainer<'d> {
    pub model: Model,
    pub cfg: TrainConfig,
    pub weights: LossWeights,
    adam: Adam,
    data: TrainData<'d>,
    batches: Vec<Vec<usize>>,
    exec: Execution,
}

impl<'d> Trainer<'d> {
    pub fn new(
        model: Model,
        data: TrainData<'d>,
        cfg: TrainConfig,
        weights: LossWeights,
        exec: Execution,
    ) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        if data.len() == 0 {
            return Err(Error::EmptyCorpus);
        }
        match (model.kind(), &data) {
            (ModelKind::Lm, TrainData::Text(_))
            | (ModelKind::Transformer | ModelKind::Cif, TrainData::Speech(_)) => {}
            (kind, _) => {
                return Err(Error::config(
                    "model",
                    format!("{} cannot train on this kind of data", kind.name()),
                ));
            }
        }
        let vocab = model.cfg().vocab();
        for i in 0..data.len() {
            let labels = data.labels(i);
            if labels.is_empty() {
                return Err(Error::Contract(format!(
                    "training item {i} has an empty transcript"
                )));
            }
            for &y in labels {
                if !vocab.is_label(y) {
                    return Err(Error::LabelOutOfVocab {
                        label: y,
                        vocab: vocab.labels,
                    });
                }
            }
        }
        let budget = match model.kind() {
            ModelKind::Lm => cfg.batch_tokens,
            _ => cfg.batch_frames,
        };
        let batches = make_batches(&data, budget);
        let adam = Adam::new(model.params());
        Ok(Trainer {
            model,
            cfg,
            weights,
            adam,
            data,
            batches,
            exec,
        })
    }

    /// Optimizer steps taken so far.
    pub fn step_count(&self) -> usize {
        self.adam.step
    }

    pub fn batches(&self) -> &[Vec<usize>] {
        &self.batches
    }

    /// Batch used at 1-based `step`: batches are visited in an order
    /// shuffled afresh each epoch.
    fn batch_for(&self, step: usize) -> &[usize] {
        let n = self.batches.len();
        let (epoch, pos) = ((step - 1) / n, (step - 1) % n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(self.cfg.seed, "batches", epoch as u64));
        &self.batches[order[pos]]
    }

    /// Weights plus optimizer state.
    pub fn checkpoint(&self) -> ParamStore {
        let mut out = self.model.params().clone();
        self.adam.export(self.model.params(), &mut out);
        out
    }

    pub fn restore(&mut self, saved: &ParamStore) -> Result<()> {
        let weights = model_weights(saved);
        self.model.params_mut().load_from(&weights)?;
        self.adam = Adam::import(self.model.params(), saved)?;
        Ok(())
    }

    fn item_loss(&self, step: usize, i: usize) -> Result<(ParamGrads, Parts)> {
        let cfg = self.model.cfg();
        let vocab = cfg.vocab();
        let w = &self.weights;
        let key = stream_index(step, i);
        let mut g = Graph::train(
            self.model.params(),
            rng::stream(self.cfg.seed, "dropout", key),
        );
        let labels = self.data.labels(i);
        let mut parts = Parts::default();
        let features = |g: &mut Graph<'_>| match self.data {
            TrainData::Speech(u) => {
                let f = match &self.cfg.spec_augment {
                    Some(sa) => spec_augment(
                        &u[i].features,
                        sa,
                        &mut rng::stream(self.cfg.seed, "augment", key),
                    ),
                    None => u[i].features.clone(),
                };
                g.input(f)
            }
            TrainData::Text(_) => unreachable!("text data has no features"),
        };
        let sample = |inputs: Vec<usize>, preds: Vec<usize>| -> Vec<usize> {
            if self.cfg.sampling_rate == 0.0 {
                return inputs;
            }
            let mut r = rng::stream(self.cfg.seed, "sampling", key);
            let mut mixed = vec![inputs[0]];
            mixed.extend(scheduled_sampling_mix(
                &inputs[1..],
                &preds[..inputs.len() - 1],
                self.cfg.sampling_rate,
                &mut r,
            ));
            mixed
        };
        let mut targets = labels.to_vec();
        let loss = match &self.model {
            Model::Transformer(m) => {
                targets.push(vocab.eos());
                let mut inputs = teacher_inputs(vocab.eos(), &targets);
                let f = features(&mut g);
                let enc = encoder_graph(&mut g, cfg, f)?;
                if self.cfg.sampling_rate > 0.0 {
                    let mut pg = Graph::eval(self.model.params());
                    let e = pg.constant(g.value(enc).clone());
                    let y = m.decoder_graph(&mut pg, e, &inputs)?;
                    inputs = sample(inputs, argmax_rows(pg.value(y), cfg.labels));
                }
                let logits = m.decoder_graph(&mut g, enc, &inputs)?;
                let ce = cross_entropy_smoothed(
                    &mut g,
                    logits,
                    &targets,
                    w.label_smoothing,
                    vocab.pad(),
                )?;
                parts.ce = g.value(ce).item();
                let mut total = ce;
                if w.ctc > 0.0 {
                    let ctc_logits = g.dense(enc, "ctc")?;
                    if let Some(c) = self.ctc_term(&mut g, ctc_logits, labels)? {
                        parts.ctc = g.value(c).item();
                        let c = g.scale(c, w.ctc);
                        total = g.add(total, c)?;
                    }
                }
                total
            }
            Model::Cif(m) => {
                let f = features(&mut g);
                let mut inputs = None;
                if self.cfg.sampling_rate > 0.0 {
                    let out = m.forward(self.data_features(i), Some(labels))?;
                    inputs = Some(sample(
                        teacher_inputs(vocab.eos(), labels),
                        argmax_rows(&out.logits, cfg.labels),
                    ));
                }
                let out = m.train_graph_with_inputs(&mut g, f, labels, inputs.as_deref())?;
                let ce = cross_entropy_smoothed(
                    &mut g,
                    out.logits,
                    labels,
                    w.label_smoothing,
                    vocab.pad(),
                )?;
                parts.ce = g.value(ce).item();
                let mut total = ce;
                if w.ctc > 0.0 {
                    if let Some(c) = self.ctc_term(&mut g, out.ctc_logits, labels)? {
                        parts.ctc = g.value(c).item();
                        let c = g.scale(c, w.ctc);
                        total = g.add(total, c)?;
                    }
                }
                if w.quantity > 0.0 {
                    let q = quantity_loss(&mut g, out.alpha, labels.len());
                    parts.quantity = g.value(q).item();
                    let q = g.scale(q, w.quantity);
                    total = g.add(total, q)?;
                }
                total
            }
            Model::Lm(m) => {
                targets.push(vocab.eos());
                let inputs = teacher_inputs(vocab.eos(), &targets);
                let logits = m.logits_graph(&mut g, &inputs)?;
                let ce = cross_entropy_smoothed(
                    &mut g,
                    logits,
                    &targets,
                    w.label_smoothing,
                    vocab.pad(),
                )?;
                parts.ce = g.value(ce).item();
                ce
            }
        };
        parts.total = g.value(loss).item();
        let grads = g.backward(loss)?.params(&g);
        Ok((grads, parts))
    }

    fn data_features(&self, i: usize) -> &crate::Tensor {
        match self.data {
            TrainData::Speech(u) => &u[i].features,
            TrainData::Text(_) => unreachable!("text data has no features"),
        }
    }

    /// CTC normalised per reference label; `None` when the encoder output is
    /// too short to emit the reference.
    fn ctc_term(
        &self,
        g: &mut Graph<'_>,
        logits: crate::Var,
        labels: &[usize],
    ) -> Result<Option<crate::Var>> {
        let blank = self.model.cfg().vocab().blank();
        if g.shape(logits)[0] < ctc_min_frames(labels) {
            log::debug!(
                "skipping CTC: {} encoder frames for {} labels",
                g.shape(logits)[0],
                labels.len()
            );
            return Ok(None);
        }
        ctc_loss(g, logits, labels, blank, 1.0 / labels.len() as f64).map(Some)
    }

    /// One optimizer step over the next batch.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.adam.step + 1;
        let batch = self.batch_for(step).to_vec();
        // Non-finite activations mean the weights have already blown up.
        let results = self
            .exec
            .try_map(&batch, |&i| self.item_loss(step, i))
            .map_err(|e| match e {
                Error::NonFinite { .. } | Error::DegenerateWeights(_) => Error::Divergence {
                    step,
                    loss: f64::NAN,
                },
                other => other,
            })?;
        let n = results.len() as f64;
        let mut grads = ParamGrads::zeros_like(self.model.params());
        let mut mean = Parts::default();
        for (g, p) in &results {
            grads.accumulate(g, 1.0 / n);
            mean.total += p.total / n;
            mean.ce += p.ce / n;
            mean.ctc += p.ctc / n;
            mean.quantity += p.quantity / n;
        }
        if !mean.total.is_finite() || grads.first_non_finite().is_some() {
            return Err(Error::Divergence {
                step,
                loss: mean.total,
            });
        }
        let lr = noam_lr(
            step,
            self.model.cfg().d_model,
            self.cfg.warmup,
            self.cfg.lr_k,
        );
        self.adam.update(self.model.params_mut(), &grads, lr);
        Ok(StepRecord {
            step,
            lr,
            total: mean.total,
            ce: mean.ce,
            ctc: mean.ctc,
            quantity: mean.quantity,
        })
    }

    /// Trains up to `cfg.steps`, checkpointing every `checkpoint_every`
    /// steps and at the end. With `out`, checkpoints and `loss.csv` are
    /// written there and `resume` continues from the newest checkpoint.
    /// Finally the newest `cfg.average` checkpoints are averaged into the
    /// model (and into `out/final.bin`).
    pub fn run(&mut self, out: Option<&Path>, resume: bool) -> Result<TrainReport> {
        let mut curve = Vec::new();
        let mut kept: Vec<(usize, ParamStore)> = Vec::new();
        let keep = self.cfg.average.max(1);
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            if resume {
                let ckpts = list_checkpoints(dir)?;
                if let Some((step, path)) = ckpts.last() {
                    let saved = ParamStore::load(path)?;
                    self.restore(&saved)?;
                    let csv = dir.join(LOSS_CSV);
                    if csv.exists() {
                        curve = read_loss_curve(&csv)?;
                        curve.retain(|r| r.step <= *step);
                    }
                    for (s, p) in ckpts.iter().rev().take(keep).rev() {
                        kept.push((*s, model_weights(&ParamStore::load(p)?)));
                    }
                    log::info!("resumed from {} at step {step}", path.display());
                }
            }
        }
        let mut written = Vec::new();
        while self.step_count() < self.cfg.steps {
            let rec = self.step()?;
            curve.push(rec);
            if rec.step % self.cfg.checkpoint_every == 0 || rec.step == self.cfg.steps {
                if let Some(dir) = out {
                    let path = dir.join(format!("ckpt-{:06}.bin", rec.step));
                    self.checkpoint().save(&path)?;
                    written.push(path);
                    write_loss_curve(&dir.join(LOSS_CSV), &curve)?;
                    prune_checkpoints(dir, keep.max(MIN_RETAINED))?;
                }
                kept.push((rec.step, self.model.params().clone()));
                if kept.len() > keep {
                    kept.remove(0);
                }
                log::info!("step {} loss {:.4} (ce {:.4})", rec.step, rec.total, rec.ce);
            }
        }
        let averaged = if self.cfg.average > 0 && !kept.is_empty() {
            let stores: Vec<ParamStore> = kept.iter().map(|(_, p)| p.clone()).collect();
            let avg = average_checkpoints(&stores)?;
            self.model.params_mut().load_from(&avg)?;
            stores.len()
        } else {
            0
        };
        if let Some(dir) = out {
            write_loss_curve(&dir.join(LOSS_CSV), &curve)?;
            self.model.params().save(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(TrainReport {
            curve,
            checkpoints: written,
            averaged,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub curve: Vec<StepRecord>,
    /// Checkpoint files written during this run.
    pub checkpoints: Vec<PathBuf>,
    /// Number of checkpoints averaged into the final weights.
    pub averaged: usize,
}

pub const LOSS_CSV: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.bin";
const MIN_RETAINED: usize = 10;

/// Arithmetic mean of model weights (optimizer state is ignored).
pub fn average_checkpoints(stores: &[ParamStore]) -> Result<ParamStore> {
    let weights: Vec<ParamStore> = stores.iter().map(model_weights).collect();
    ParamStore::average(&weights)
}

/// `ckpt-NNNNNN.bin` files in `dir`, oldest first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(step) = name
            .strip_prefix("ckpt-")
            .and_then(|s| s.strip_suffix(".bin"))
        {
            if let Ok(step) = step.parse() {
                out.push((step, path));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn prune_checkpoints(dir: &Path, keep: usize) -> Result<()> {
    let ckpts = list_checkpoints(dir)?;
    for (_, path) in ckpts.iter().take(ckpts.len().saturating_sub(keep)) {
        fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn write_loss_curve(path: &Path, curve: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in curve {
        w.serialize(r)?;
    }
    if curve.is_empty() {
        w.write_record(["step", "lr", "total", "ce", "ctc", "quantity"])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_curve(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
