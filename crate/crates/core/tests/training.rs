use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synclab_core::corpus::{generate_corpus, CorpusSpec};
use synclab_core::gradcheck::{grad_check, grad_check_params, DEFAULT_EPS};
use synclab_core::san::SanConfig;
use synclab_core::training::{
    average_checkpoints, cross_entropy_smoothed, ctc_loss, ctc_nll, noam_lr, quantity_loss,
    scheduled_sampling_mix, spec_augment, LossWeights, Model, ModelKind, SpecAugment, TrainConfig,
    TrainData, Trainer,
};
use synclab_core::{Error, Execution, Graph, ParamStore, Tensor};

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect(),
    )
}

fn log_softmax_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
            row.iter().map(|x| x - z).collect()
        })
        .collect()
}

/// Sums the probability of every frame path that collapses to `refs`.
fn ctc_brute_force(logits: &Tensor, refs: &[usize], blank: usize) -> f64 {
    let lp = log_softmax_rows(logits);
    let (u, v) = (logits.rows(), logits.last_dim());
    let mut total = 0.0;
    let mut path = vec![0usize; u];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &s in &path {
            if Some(s) != prev && s != blank {
                collapsed.push(s);
            }
            prev = Some(s);
        }
        if collapsed == refs {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &s)| lp[t][s])
                .sum::<f64>()
                .exp();
        }
        let mut k = 0;
        loop {
            if k == u {
                return -total.ln();
            }
            path[k] += 1;
            if path[k] < v {
                break;
            }
            path[k] = 0;
            k += 1;
        }
    }
}

fn ce_value(logits: &Tensor, refs: &[usize], eps: f64, pad: usize) -> f64 {
    let mut g = Graph::new();
    let l = g.input(logits.clone());
    let y = cross_entropy_smoothed(&mut g, l, refs, eps, pad).unwrap();
    g.value(y).item()
}

#[test]
fn uniform_logits_give_log_vocab() {
    let v = 7;
    let logits = Tensor::zeros(&[4, v]);
    for eps in [0.0, 0.2, 0.9] {
        let ce = ce_value(&logits, &[0, 3, 6, 2], eps, 99);
        assert!((ce - (v as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn unsmoothed_ce_is_negative_log_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = random(5, 6, &mut rng);
    let refs = [1, 0, 5, 5, 2];
    let lp = log_softmax_rows(&logits);
    let nll = -refs.iter().enumerate().map(|(i, &y)| lp[i][y]).sum::<f64>() / 5.0;
    assert!((ce_value(&logits, &refs, 0.0, 99) - nll).abs() < 1e-12);
}

#[test]
fn padding_positions_are_ignored() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = random(4, 5, &mut rng);
    let pad = 4;
    let full = ce_value(&logits.slice_rows(0, 2), &[1, 3], 0.1, pad);
    let padded = ce_value(&logits, &[1, 3, pad, pad], 0.1, pad);
    assert!((full - padded).abs() < 1e-12);
}

#[test]
fn ce_rejects_out_of_vocab_reference() {
    let mut g = Graph::new();
    let l = g.input(Tensor::zeros(&[2, 3]));
    let err = cross_entropy_smoothed(&mut g, l, &[0, 5], 0.1, 9).unwrap_err();
    assert!(matches!(err, Error::LabelOutOfVocab { label: 5, vocab: 3 }));
}

#[test]
fn ctc_single_label_single_frame() {
    let logits = Tensor::from_rows(&[vec![0.3, -1.0, 0.5]]);
    let lp = log_softmax_rows(&logits);
    assert!((ctc_nll(&logits, &[1], 2).unwrap() + lp[0][1]).abs() < 1e-12);
}

#[test]
fn ctc_three_frames_one_label_has_six_paths() {
    // Paths over {a, blank} collapsing to "a" in 3 frames:
    // aaa, aa_, a__, _aa, _a_, __a.
    let logits = Tensor::zeros(&[3, 2]);
    let nll = ctc_nll(&logits, &[0], 1).unwrap();
    assert!((nll - (-(6.0f64 / 8.0).ln())).abs() < 1e-12);
}

#[test]
fn ctc_repeated_label_needs_separating_blank() {
    let logits = Tensor::zeros(&[2, 2]);
    let err = ctc_nll(&logits, &[0, 0], 1).unwrap_err();
    assert!(matches!(
        err,
        Error::InfeasibleAlignment {
            frames: 2,
            required: 3
        }
    ));
    let logits = Tensor::zeros(&[3, 2]);
    // Only a_a is valid.
    assert!((ctc_nll(&logits, &[0, 0], 1).unwrap() - 3.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn ctc_matches_brute_force_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..200 {
        let v = rng.random_range(2..=4);
        let u = rng.random_range(1..=8);
        let blank = v - 1;
        let s = rng.random_range(0..=u.min(4));
        let refs: Vec<usize> = (0..s).map(|_| rng.random_range(0..blank)).collect();
        let logits = random(u, v, &mut rng);
        let oracle = ctc_brute_force(&logits, &refs, blank);
        match ctc_nll(&logits, &refs, blank) {
            Ok(nll) => {
                let rel = (nll - oracle).abs() / oracle.abs().max(1e-300);
                assert!(rel <= 1e-10, "case {case}: {nll} vs {oracle}");
            }
            Err(Error::InfeasibleAlignment { .. }) => assert!(oracle.is_infinite(), "case {case}"),
            Err(e) => panic!("case {case}: {e}"),
        }
    }
}

#[test]
fn ctc_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let logits = random(7, 4, &mut rng);
        let report = grad_check(
            |g, x| ctc_loss(g, x, &[0, 2, 2, 1], 3, 0.5),
            &logits,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }
}

#[test]
fn ce_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random(5, 6, &mut rng);
    let report = grad_check(
        |g, x| cross_entropy_smoothed(g, x, &[1, 0, 5, 5, 2], 0.2, 99),
        &logits,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-5, "{report:?}");
}

#[test]
fn quantity_loss_gradient_off_the_kink() {
    let alpha = Tensor::vector(vec![0.3, 0.8, 0.45, 0.9]);
    for s in [1, 4] {
        let report = grad_check(|g, a| Ok(quantity_loss(g, a, s)), &alpha, DEFAULT_EPS).unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }
}

#[test]
fn quantity_loss_of_scaled_weights_is_zero() {
    let alpha = vec![0.3, 0.8, 0.45, 0.9];
    let scaled = synclab_core::cif::scale_weights(&alpha, 3).unwrap();
    let mut g = Graph::new();
    let a = g.input(Tensor::vector(scaled));
    let q = quantity_loss(&mut g, a, 3);
    assert!(g.value(q).item() < 1e-12);
}

#[test]
fn noam_peaks_at_warmup() {
    let (d, w) = (64, 400);
    let peak = noam_lr(w, d, w, 1.0);
    assert!(noam_lr(w - 1, d, w, 1.0) < peak);
    assert!(noam_lr(w + 1, d, w, 1.0) < peak);
    for s in 1..w {
        assert!(noam_lr(s, d, w, 1.0) < noam_lr(s + 1, d, w, 1.0));
    }
    for s in w..3 * w {
        assert!(noam_lr(s, d, w, 1.0) > noam_lr(s + 1, d, w, 1.0));
    }
    assert!((peak - (d as f64).powf(-0.5) * (w as f64).powf(-0.5)).abs() < 1e-15);
}

#[test]
fn scheduled_sampling_rates() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let refs: Vec<usize> = (0..10_000).map(|i| i % 3).collect();
    let preds: Vec<usize> = refs.iter().map(|r| r + 10).collect();
    assert_eq!(scheduled_sampling_mix(&refs, &preds, 0.0, &mut rng), refs);
    assert_eq!(scheduled_sampling_mix(&refs, &preds, 1.0, &mut rng), preds);
    let mixed = scheduled_sampling_mix(&refs, &preds, 0.5, &mut rng);
    let frac = mixed.iter().filter(|&&x| x >= 10).count() as f64 / refs.len() as f64;
    assert!((frac - 0.5).abs() < 0.02, "{frac}");
}

#[test]
fn spec_augment_zero_widths_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(50, 10, &mut rng);
    let cfg = SpecAugment {
        f: 0,
        t: 0,
        ..SpecAugment::default()
    };
    assert_eq!(spec_augment(&x, &cfg, &mut rng), x);
}

#[test]
fn spec_augment_masks_exactly_and_caps_time_span() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::full(&[60, 12], 1.0);
    let cfg = SpecAugment {
        f: 0,
        m_f: 0,
        m_t: 1,
        ..SpecAugment::default()
    };
    let cap = (cfg.p * 60.0).floor() as usize;
    for _ in 0..1000 {
        let y = spec_augment(&x, &cfg, &mut rng);
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let masked = (0..60)
            .filter(|&r| y.row(r).iter().all(|&v| v == 0.0))
            .count();
        assert!(masked <= cap);
    }
}

#[test]
fn averaging_checkpoints() {
    let store = |v: f64| {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[2, 2], v));
        s
    };
    let avg = average_checkpoints(&[store(0.0), store(2.0)]).unwrap();
    assert_eq!(avg.get("w").unwrap().data(), &[1.0; 4]);
    let same = average_checkpoints(&vec![store(3.5); 4]).unwrap();
    assert_eq!(same, store(3.5));
    let mut bad = store(1.0);
    bad.insert("w", Tensor::zeros(&[3]));
    match average_checkpoints(&[store(0.0), bad]) {
        Err(Error::Parameter { name, .. }) => assert_eq!(name, "w"),
        other => panic!("{other:?}"),
    }
}

fn tiny() -> SanConfig {
    SanConfig {
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        d_feat: 6,
        encoder_layers: 2,
        encoder_layers_before_reduce: 1,
        decoder_layers: 1,
        dropout: 0.1,
        labels: 4,
        init_tau: 4.0,
    }
}

fn toy_corpus(n: usize) -> Vec<synclab_core::corpus::Utterance> {
    let spec = CorpusSpec {
        labels: 4,
        d_feat: 6,
        min_labels: 2,
        max_labels: 4,
        min_frames_per_label: 8,
        max_frames_per_label: 12,
        noise_std: 0.2,
        speakers: 3,
        seed: 11,
        ..CorpusSpec::default()
    };
    generate_corpus(&spec, n, "toy", Execution::Sequential).unwrap()
}

fn toy_train_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        warmup: 50,
        lr_k: 2.0,
        batch_frames: 300,
        checkpoint_every: 25,
        average: 0,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn ema_drops(curve: &[f64]) -> bool {
    let mut ema = Vec::with_capacity(curve.len());
    let mut e = curve[0];
    for &x in curve {
        e = 0.98 * e + 0.02 * x;
        ema.push(e);
    }
    let first = ema[49];
    let last = *ema.last().unwrap();
    last < 0.8 * first
}

#[test]
fn smoke_training_reduces_loss() {
    let corpus = toy_corpus(50);
    for kind in [ModelKind::Transformer, ModelKind::Cif] {
        let model = Model::new(kind, tiny(), 3).unwrap();
        let mut t = Trainer::new(
            model,
            TrainData::Speech(&corpus),
            toy_train_cfg(300),
            LossWeights::default(),
            Execution::Parallel,
        )
        .unwrap();
        let report = t.run(None, false).unwrap();
        let totals: Vec<f64> = report.curve.iter().map(|r| r.total).collect();
        assert_eq!(totals.len(), 300);
        assert!(
            ema_drops(&totals),
            "{kind:?}: {:?} -> {:?}",
            &totals[..5],
            &totals[295..]
        );
    }
}

#[test]
fn training_is_deterministic_across_execution_modes() {
    let corpus = toy_corpus(20);
    let run = |exec| {
        let model = Model::new(ModelKind::Cif, tiny(), 3).unwrap();
        let mut t = Trainer::new(
            model,
            TrainData::Speech(&corpus),
            toy_train_cfg(12),
            LossWeights::default(),
            exec,
        )
        .unwrap();
        let r = t.run(None, false).unwrap();
        (r.curve, t.model.params().to_bytes())
    };
    let a = run(Execution::Parallel);
    let b = run(Execution::Parallel);
    let c = run(Execution::Sequential);
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn zero_coefficients_leave_pure_cross_entropy() {
    let corpus = toy_corpus(8);
    let weights = LossWeights {
        ctc: 0.0,
        quantity: 0.0,
        ..LossWeights::default()
    };
    let mut cfg = tiny();
    cfg.dropout = 0.0;
    let model = Model::new(ModelKind::Cif, cfg, 3).unwrap();
    let mut t = Trainer::new(
        model,
        TrainData::Speech(&corpus),
        toy_train_cfg(1),
        weights,
        Execution::Sequential,
    )
    .unwrap();
    let Model::Cif(m) = t.model.clone() else {
        unreachable!()
    };
    assert_eq!(t.batches().len(), 1);
    let rec = t.step().unwrap();
    assert_eq!(rec.total, rec.ce);
    let mut expected = 0.0;
    for u in &corpus {
        let out = m.forward(&u.features, Some(&u.labels)).unwrap();
        expected +=
            ce_value(&out.logits, &u.labels, weights.label_smoothing, 99) / corpus.len() as f64;
    }
    assert!(
        (expected - rec.ce).abs() < 1e-12,
        "ce {} vs {expected}",
        rec.ce
    );
}

#[test]
fn resume_reproduces_uninterrupted_curve() {
    let corpus = toy_corpus(16);
    let dir = tempfile::tempdir().unwrap();
    let full = {
        let model = Model::new(ModelKind::Transformer, tiny(), 3).unwrap();
        let mut t = Trainer::new(
            model,
            TrainData::Speech(&corpus),
            toy_train_cfg(50),
            LossWeights::default(),
            Execution::Parallel,
        )
        .unwrap();
        t.run(None, false).unwrap().curve
    };
    let first = {
        let model = Model::new(ModelKind::Transformer, tiny(), 3).unwrap();
        let mut t = Trainer::new(
            model,
            TrainData::Speech(&corpus),
            toy_train_cfg(30),
            LossWeights::default(),
            Execution::Parallel,
        )
        .unwrap();
        t.run(Some(dir.path()), false).unwrap()
    };
    assert!(!first.checkpoints.is_empty());
    let model = Model::new(ModelKind::Transformer, tiny(), 99).unwrap();
    let mut t = Trainer::new(
        model,
        TrainData::Speech(&corpus),
        toy_train_cfg(50),
        LossWeights::default(),
        Execution::Parallel,
    )
    .unwrap();
    let resumed = t.run(Some(dir.path()), true).unwrap().curve;
    assert_eq!(resumed.len(), 50);
    for (a, b) in full.iter().zip(&resumed) {
        assert_eq!(a.step, b.step);
        assert!(
            (a.total - b.total).abs() <= 1e-9,
            "step {}: {} vs {}",
            a.step,
            a.total,
            b.total
        );
    }
}

#[test]
fn final_weights_average_newest_checkpoints() {
    let corpus = toy_corpus(10);
    let mut cfg = toy_train_cfg(20);
    cfg.checkpoint_every = 5;
    cfg.average = 2;
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(ModelKind::Cif, tiny(), 3).unwrap();
    let mut t = Trainer::new(
        model,
        TrainData::Speech(&corpus),
        cfg,
        LossWeights::default(),
        Execution::Parallel,
    )
    .unwrap();
    let report = t.run(Some(dir.path()), false).unwrap();
    assert_eq!(report.averaged, 2);
    let a = ParamStore::load(&dir.path().join("ckpt-000015.bin")).unwrap();
    let b = ParamStore::load(&dir.path().join("ckpt-000020.bin")).unwrap();
    let expected = average_checkpoints(&[a, b]).unwrap();
    let fin = ParamStore::load(&dir.path().join("final.bin")).unwrap();
    assert_eq!(fin, expected);
    assert_eq!(t.model.params(), &expected);
}

#[test]
fn language_model_prefers_in_grammar_strings() {
    // Bigram grammar: label y is always followed by (y + 1) mod 4.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let text: Vec<Vec<usize>> = (0..200)
        .map(|_| {
            let start = rng.random_range(0..4);
            let len = rng.random_range(3..7);
            (0..len).map(|k| (start + k) % 4).collect()
        })
        .collect();
    let mut cfg = tiny();
    cfg.dropout = 0.0;
    let model = Model::new(ModelKind::Lm, cfg, 3).unwrap();
    let train = TrainConfig {
        batch_tokens: 100,
        ..toy_train_cfg(150)
    };
    let mut t = Trainer::new(
        model,
        TrainData::Text(&text),
        train,
        LossWeights::default(),
        Execution::Parallel,
    )
    .unwrap();
    t.run(None, false).unwrap();
    let Model::Lm(lm) = &t.model else {
        unreachable!()
    };
    let good = lm.lm_score(&[1, 2, 3, 0, 1]).unwrap();
    let shuffled = lm.lm_score(&[1, 3, 0, 2, 1]).unwrap();
    assert!(good > shuffled + 1.0, "{good} vs {shuffled}");
}

#[test]
fn model_and_data_kinds_must_agree() {
    let text = vec![vec![0, 1]];
    let model = Model::new(ModelKind::Cif, tiny(), 3).unwrap();
    let err = Trainer::new(
        model,
        TrainData::Text(&text),
        toy_train_cfg(1),
        LossWeights::default(),
        Execution::Sequential,
    )
    .err()
    .unwrap();
    assert!(matches!(err, Error::Config { .. }));
    let model = Model::new(ModelKind::Lm, tiny(), 3).unwrap();
    let empty: Vec<Vec<usize>> = Vec::new();
    assert!(matches!(
        Trainer::new(
            model,
            TrainData::Text(&empty),
            toy_train_cfg(1),
            LossWeights::default(),
            Execution::Sequential
        ),
        Err(Error::EmptyCorpus)
    ));
}

#[test]
fn full_cif_objective_gradient() {
    let mut cfg = tiny();
    cfg.dropout = 0.0;
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.d_feat = 3;
    cfg.encoder_layers = 1;
    cfg.encoder_layers_before_reduce = 0;
    let m = synclab_core::cif::CifModel::new(cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(24, 3, &mut rng);
    let labels = [1, 2];
    let report = grad_check_params(
        &m.params,
        |g| {
            let f = g.constant(x.clone());
            let out = m.train_graph(g, f, &labels)?;
            let ce = cross_entropy_smoothed(g, out.logits, &labels, 0.2, 99)?;
            let ctc = ctc_loss(g, out.ctc_logits, &labels, m.cfg.vocab().blank(), 0.5)?;
            let q = quantity_loss(g, out.alpha, 7);
            let t = g.add(ce, ctc)?;
            g.add(t, q)
        },
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}
