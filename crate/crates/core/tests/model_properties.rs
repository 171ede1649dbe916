use idea_core::autodiff::Tape;
use idea_core::checkpoint;
use idea_core::encoder::EncoderConfig;
use idea_core::export::{export_features, read_features};
use idea_core::head::{AblationMode, GammaMode};
use idea_core::metrics::Metrics;
use idea_core::model::{IdeaModel, L2Scope, LabelPass, ModelConfig};
use idea_core::stats::welch_t_test;
use idea_core::synthetic::SyntheticConfig;
use idea_core::text::{make_batches, Batch, Vocab};
use idea_core::train::{train, Corpus, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(ablation: AblationMode, gamma_mode: GammaMode) -> (IdeaModel, Vocab, Vec<Batch>) {
    let corpus = SyntheticConfig {
        train_size: 64,
        test_size: 3,
        doc_len: 9,
        ..SyntheticConfig::default()
    }
    .generate()
    .unwrap();
    // vary lengths so batches carry padding
    let docs: Vec<_> = corpus
        .train
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let words: Vec<&str> = d.text.split(' ').take(1 + i % 9).collect();
            idea_core::text::Document {
                text: words.join(" "),
                label: d.label,
            }
        })
        .collect();
    let vocab = Vocab::build(&docs, Some(&corpus.labels), 1, 1000).unwrap();
    let mut enc = EncoderConfig::new(vocab.len());
    enc.d = 16;
    enc.n_heads = 2;
    enc.ffn_dim = 64;
    let config = ModelConfig {
        encoder: enc,
        num_labels: 3,
        ablation,
        gamma_mode,
        dropout: 0.1,
        l2_scope: L2Scope::default(),
    };
    let seq = vocab.encode_label_sequence(&corpus.labels);
    let model = IdeaModel::new(config, corpus.labels, seq, 1).unwrap();
    let batches = make_batches(&docs, &vocab, 32, 128, false, 0).unwrap();
    (model, vocab, batches)
}

#[test]
fn single_sample_matches_batched_evaluation() {
    let (model, _, batches) = setup(AblationMode::Full, GammaMode::PerSample);
    let batch = &batches[0];
    assert_eq!(batch.rows, 32);
    let full = model.predict(batch).unwrap();
    let zw = full.z.shape()[1];
    for r in 0..batch.rows {
        let alone = model.predict(&batch.select(r)).unwrap();
        assert_eq!(alone.predicted[0], full.predicted[r]);
        let row = &full.z.data()[r * zw..(r + 1) * zw];
        let gap = row
            .iter()
            .zip(alone.z.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-9, "row {r}: {gap:e}");
    }
}

#[test]
fn per_batch_gamma_couples_samples() {
    let (model, _, batches) = setup(AblationMode::Full, GammaMode::PerBatchLiteral);
    let batch = &batches[0];
    let full = model.predict(batch).unwrap();
    let zw = full.z.shape()[1];
    let alone = model.predict(&batch.select(0)).unwrap();
    let gap = full.z.data()[..zw]
        .iter()
        .zip(alone.z.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(gap > 1e-9);
}

#[test]
fn broadcast_label_pass_gives_identical_loss() {
    let (model, _, batches) = setup(AblationMode::Full, GammaMode::PerSample);
    let batch = &batches[1];
    let loss = |pass| {
        let mut tape = Tape::with_params(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = model.forward_with(&mut tape, batch, false, &mut rng, pass).unwrap();
        let l = model.loss(&mut tape, &fwd, &batch.gold, 0.01).unwrap();
        tape.backward(l).unwrap();
        (tape.value(l).item(), tape.param_grads())
    };
    let (a, ga) = loss(LabelPass::Broadcast);
    let (b, gb) = loss(LabelPass::PerSample);
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    for (x, y) in ga.iter().zip(&gb) {
        if let (Some(x), Some(y)) = (x, y) {
            assert!(x.max_abs_diff(y) < 1e-12);
        }
    }
}

#[test]
fn shared_encoder_moves_documents_and_labels_together() {
    let (mut model, vocab, batches) = setup(AblationMode::Full, GammaMode::PerSample);
    let batch = &batches[0];
    let label_tokens = |m: &IdeaModel| {
        let mut tape = Tape::with_params(&m.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let le = m
            .encoder()
            .encode_labels_once(&mut tape, &m.label_sequence, 1, false, &mut rng)
            .unwrap();
        tape.value(le.vectors).clone()
    };
    let before_labels = label_tokens(&model);
    let before_docs = model.predict(batch).unwrap().z;
    // nudge the embedding of the first label's name token only
    let id = vocab.id("alpha") as usize;
    let emb = model.encoder.token_embedding;
    let d = model.config.encoder.d;
    for v in &mut model.store.value_mut(emb).data_mut()[id * d..(id + 1) * d] {
        *v += 0.5;
    }
    assert!(label_tokens(&model).max_abs_diff(&before_labels) > 1e-3);
    assert!(model.predict(batch).unwrap().z.max_abs_diff(&before_docs) > 1e-6);
}

#[test]
fn exported_features_reproduce_predictions() {
    for mode in [AblationMode::Full, AblationMode::OnlyFusing] {
        let (model, _, batches) = setup(mode, GammaMode::PerSample);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.tsv");
        let rows = export_features(&model, &batches, &path).unwrap();
        assert_eq!(rows, 64);
        let back = read_features(&path).unwrap();
        assert_eq!(back.len(), 64);
        let zw = model.config.z_width();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().all(|l| l.split('\t').count() == 2 + zw));
        let z = idea_core::autodiff::Tensor::new(vec![64, zw], back.iter().flat_map(|r| r.z.clone()).collect()).unwrap();
        let again = model.classify_z(&z).unwrap();
        let exported: Vec<usize> = back.iter().map(|r| r.predicted).collect();
        assert_eq!(again, exported);
        let gold: Vec<usize> = batches.iter().flat_map(|b| b.gold.clone()).collect();
        assert_eq!(back.iter().map(|r| r.gold).collect::<Vec<_>>(), gold);
    }
}

#[test]
fn metrics_recount_from_confusion_counts() {
    let (model, _, batches) = setup(AblationMode::Full, GammaMode::PerSample);
    let gold: Vec<usize> = batches.iter().flat_map(|b| b.gold.clone()).collect();
    let pred: Vec<usize> = batches
        .iter()
        .flat_map(|b| model.predict(b).unwrap().predicted)
        .collect();
    let m = Metrics::from_predictions(&gold, &pred, 3).unwrap();
    let correct = gold.iter().zip(&pred).filter(|(g, p)| g == p).count();
    assert_eq!(m.accuracy, correct as f64 / gold.len() as f64);
    assert_eq!(m, Metrics::from_counts(m.per_class.clone(), m.n_samples));
    let recall: f64 = (0..3)
        .map(|c| {
            let n = gold.iter().filter(|&&g| g == c).count();
            let hit = gold.iter().zip(&pred).filter(|(g, p)| **g == c && **p == c).count();
            hit as f64 / n as f64
        })
        .sum::<f64>()
        / 3.0;
    assert!((m.macro_recall - recall).abs() < 1e-15);
}

#[test]
fn checkpoint_file_round_trip() {
    let (model, _, batches) = setup(AblationMode::NoAbsDiff, GammaMode::PerSample);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let a = model.predict(&batches[0]).unwrap();
    let b = loaded.predict(&batches[0]).unwrap();
    // parameters are stored at 32-bit precision
    assert!(a.z.max_abs_diff(&b.z) < 1e-5);
    assert_eq!(loaded.config, model.config);
}

#[test]
fn welch_matches_reference_values() {
    // reference t, Welch–Satterthwaite df and two-sided p
    let cases: [(&[f64], &[f64], f64, f64, f64); 3] = [
        (
            &[94.2, 94.9, 94.6, 94.4, 94.8],
            &[94.0, 94.1, 93.9, 94.2, 94.05],
            3.8551827275026618,
            5.1918171578067405,
            0.011107321488706292,
        ),
        (
            &[1.0, 2.0, 3.0, 4.0],
            &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0],
            -2.713602101199873,
            6.59467097295115,
            0.03182444378084147,
        ),
        (
            &[0.81, 0.79, 0.83],
            &[0.75, 0.80, 0.72, 0.78],
            2.2655466055239226,
            4.812560804237377,
            0.0749094240281187,
        ),
    ];
    for (a, b, t, df, p) in cases {
        let r = welch_t_test(a, b).unwrap();
        assert!((r.t - t).abs() < 1e-6, "{r:?}");
        assert!((r.df - df).abs() < 1e-6, "{r:?}");
        assert!((r.p - p).abs() < 1e-6, "{r:?}");
    }
    let r = welch_t_test(&[94.2, 94.9, 94.6], &[94.2, 94.9, 94.6]).unwrap();
    assert_eq!((r.t, r.p), (0.0, 1.0));
}

#[test]
fn checkpoint_reload_preserves_test_metrics_report() {
    let s = SyntheticConfig {
        train_size: 60,
        test_size: 15,
        ..SyntheticConfig::default()
    }
    .generate()
    .unwrap();
    let corpus = Corpus {
        labels: s.labels,
        train: s.train,
        test: s.test.clone(),
    };
    let cfg = TrainConfig {
        d: 16,
        n_heads: 2,
        epochs: 1,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &corpus).unwrap();
    let bytes = checkpoint::to_bytes(&out.model);
    let reloaded = checkpoint::from_bytes(&bytes).unwrap();
    let m1 = idea_core::train::evaluate(&out.model, &out.vocab, &s.test, 32, 128).unwrap();
    let m2 = idea_core::train::evaluate(&reloaded, &out.vocab, &s.test, 32, 128).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(m1, out.result.test);
}
