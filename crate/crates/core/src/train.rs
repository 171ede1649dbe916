//! Training loop, evaluation, and seed sweeps.

use std::fmt::Write as _;
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::encoder::{EncoderBackend, EncoderConfig};
use crate::error::{Error, Result};
use crate::head::{AblationMode, GammaMode};
use crate::metrics::Metrics;
use crate::model::{IdeaModel, L2Scope, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::text::{make_batches, stratified_split, stratified_subsample, tokenize, Batch, Document, LabelSet, Vocab, DEFAULT_MAX_LEN};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub lambda_l2: f64,
    pub l2_scope: L2Scope,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub clip_norm: Option<f64>,
    pub epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub ablation: AblationMode,
    pub gamma_mode: GammaMode,
    /// Stratified subsample sizes applied to the raw train and test files.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Validation holdout size; defaults to the test-set size.
    pub val_size: Option<usize>,
    pub max_len: usize,
    pub min_freq: usize,
    pub max_vocab: usize,
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub backend: EncoderBackend,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            batch_size: 32,
            dropout: 0.1,
            lambda_l2: 0.01,
            l2_scope: L2Scope::WeightMatrices,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-6,
            clip_norm: Some(1.0),
            epochs: 2,
            max_steps: None,
            seed: 0,
            ablation: AblationMode::Full,
            gamma_mode: GammaMode::PerSample,
            train_limit: None,
            test_limit: None,
            val_size: None,
            max_len: DEFAULT_MAX_LEN,
            min_freq: 1,
            max_vocab: 30_000,
            d: 64,
            n_layers: 2,
            n_heads: 4,
            backend: EncoderBackend::MiniTransformer,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.lambda_l2 >= 0.0 && self.lambda_l2.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.max_steps == Some(0) {
            return bad("max steps must be at least 1");
        }
        if self.max_len == 0 {
            return bad("max length must be at least 1");
        }
        self.optimizer().validate()?;
        self.encoder(8).validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_epsilon,
            weight_decay: 0.0,
            clip_norm: self.clip_norm,
        }
    }

    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d: self.d,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: 4 * self.d,
            max_positions: self.max_len + 2,
            backend: self.backend,
            dropout: self.dropout,
            layer_norm_eps: 1e-12,
        }
    }
}

/// Independent seed for one purpose of a run.
fn sub_seed(seed: u64, purpose: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ purpose.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

const SPLIT: u64 = 1;
const LIMIT_TRAIN: u64 = 2;
const LIMIT_TEST: u64 = 3;
const INIT: u64 = 4;
const DROPOUT: u64 = 5;
const SHUFFLE: u64 = 100;

/// Raw corpus before limits and the validation holdout.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub labels: LabelSet,
    pub train: Vec<Document>,
    pub test: Vec<Document>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_train_loss: f64,
    pub validation: Metrics,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub ablation: AblationMode,
    pub gamma_mode: GammaMode,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub selected_epoch: usize,
    pub test: Metrics,
    pub total_steps: usize,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    pub dropped_documents: usize,
}

impl RunResult {
    /// Machine-parseable `key=value` lines. Wall-clock times are left out so
    /// reports of identical runs are byte-identical; see [`Self::timings`].
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "ablation={}", self.ablation);
        let _ = writeln!(s, "gamma_mode={}", self.gamma_mode);
        let _ = writeln!(s, "train_size={}", self.train_size);
        let _ = writeln!(s, "validation_size={}", self.validation_size);
        let _ = writeln!(s, "test_size={}", self.test_size);
        let _ = writeln!(s, "dropped_documents={}", self.dropped_documents);
        let _ = writeln!(s, "total_steps={}", self.total_steps);
        for e in &self.epochs {
            let _ = writeln!(s, "epoch{}.steps={}", e.epoch, e.steps);
            let _ = writeln!(s, "epoch{}.train_loss={:.6}", e.epoch, e.mean_train_loss);
            let _ = writeln!(s, "epoch{}.validation_accuracy={:.6}", e.epoch, e.validation.accuracy);
            let _ = writeln!(s, "epoch{}.validation_macro_f1={:.6}", e.epoch, e.validation.macro_f1);
        }
        let _ = writeln!(s, "selected_epoch={}", self.selected_epoch);
        self.test.write_report("test_", &mut s);
        s
    }

    pub fn timings(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            let _ = writeln!(s, "epoch{}.seconds={:.3}", e.epoch, e.seconds);
        }
        s
    }
}

/// The trained model (reloaded from its checkpoint bytes) with its
/// vocabulary and run record.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub result: RunResult,
    pub model: IdeaModel,
    pub vocab: Vocab,
}

fn drop_empty(docs: Vec<Document>, what: &str) -> (Vec<Document>, usize) {
    let before = docs.len();
    let kept: Vec<Document> = docs.into_iter().filter(|d| !tokenize(&d.text).is_empty()).collect();
    let dropped = before - kept.len();
    if dropped > 0 {
        warn!("dropped {dropped} {what} documents with no tokens");
    }
    (kept, dropped)
}

pub fn train(config: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    config.validate()?;
    let seed = config.seed;
    let (train_docs, d1) = drop_empty(corpus.train.clone(), "training");
    let (test_docs, d2) = drop_empty(corpus.test.clone(), "test");
    let train_docs = match config.train_limit {
        Some(n) => stratified_subsample(&train_docs, n, sub_seed(seed, LIMIT_TRAIN))?,
        None => train_docs,
    };
    let test_docs = match config.test_limit {
        Some(n) => stratified_subsample(&test_docs, n, sub_seed(seed, LIMIT_TEST))?,
        None => test_docs,
    };
    if test_docs.is_empty() {
        return Err(Error::Empty { op: "train: test set" });
    }
    let val_size = config.val_size.unwrap_or(test_docs.len());
    if val_size == 0 || val_size >= train_docs.len() {
        return Err(Error::InvalidArgument(format!(
            "validation holdout of {val_size} needs a larger training set than {}",
            train_docs.len()
        )));
    }
    let (train_docs, val_docs) = stratified_split(&train_docs, val_size, sub_seed(seed, SPLIT))?;
    info!(
        "train {} / validation {} / test {} documents",
        train_docs.len(),
        val_docs.len(),
        test_docs.len()
    );

    let vocab = Vocab::build(&train_docs, Some(&corpus.labels), config.min_freq, config.max_vocab)?;
    let label_sequence = vocab.encode_label_sequence(&corpus.labels);
    let mut encoder = config.encoder(vocab.len());
    encoder.max_positions = encoder.max_positions.max(label_sequence.ids.len());
    let model_config = ModelConfig {
        encoder,
        num_labels: corpus.labels.len(),
        ablation: config.ablation,
        gamma_mode: config.gamma_mode,
        dropout: config.dropout,
        l2_scope: config.l2_scope,
    };
    let mut model = IdeaModel::new(model_config, corpus.labels.clone(), label_sequence, sub_seed(seed, INIT))?;
    let mut opt = AdamW::new(&model.store, config.optimizer())?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, DROPOUT));
    let val_batches = make_batches(&val_docs, &vocab, config.batch_size, config.max_len, false, 0)?;

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Vec<u8>)> = None;
    let mut step = 0usize;
    'epochs: for epoch in 1..=config.epochs {
        let start = Instant::now();
        let batches = make_batches(
            &train_docs,
            &vocab,
            config.batch_size,
            config.max_len,
            true,
            sub_seed(seed, SHUFFLE + epoch as u64),
        )?;
        let (mut loss_sum, mut epoch_steps) = (0.0, 0);
        for batch in &batches {
            let (loss, grads) = {
                let mut tape = Tape::with_params(&model.store);
                let fwd = model.forward(&mut tape, batch, true, &mut dropout_rng)?;
                let loss = model.loss(&mut tape, &fwd, &batch.gold, config.lambda_l2)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        step: step + 1,
                        lr: config.learning_rate,
                        grad_norm: f64::NAN,
                        detail: format!("loss is {value} in epoch {epoch}"),
                    });
                }
                tape.backward(loss)?;
                (value, tape.param_grads())
            };
            let stats = opt.step(&mut model.store, &grads)?;
            step += 1;
            if !stats.grad_norm.is_finite() {
                let worst = grads
                    .iter()
                    .enumerate()
                    .filter_map(|(id, g)| g.as_ref().map(|g| (id, g.norm())))
                    .filter(|(_, n)| !n.is_finite())
                    .map(|(id, _)| model.store.get(id).name.clone())
                    .collect::<Vec<_>>()
                    .join(", ");
                return Err(Error::NonFinite {
                    step,
                    lr: config.learning_rate,
                    grad_norm: stats.grad_norm,
                    detail: format!("non-finite gradients in {worst}"),
                });
            }
            if let Some((id, _)) = model.store.iter().find(|(_, p)| p.value.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite {
                    step,
                    lr: config.learning_rate,
                    grad_norm: stats.grad_norm,
                    detail: format!("parameter {} became non-finite", model.store.get(id).name),
                });
            }
            loss_sum += loss;
            epoch_steps += 1;
            if config.max_steps.is_some_and(|m| step >= m) {
                break;
            }
        }
        let validation = evaluate_batches(&model, &val_batches)?;
        let record = EpochRecord {
            epoch,
            steps: epoch_steps,
            mean_train_loss: loss_sum / epoch_steps.max(1) as f64,
            validation,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: loss {:.4}, validation accuracy {:.4} ({:.1}s)",
            record.mean_train_loss, record.validation.accuracy, record.seconds
        );
        // strictly better only, so the earliest epoch wins ties
        if best.as_ref().is_none_or(|(acc, _, _)| record.validation.accuracy > *acc) {
            best = Some((record.validation.accuracy, epoch, checkpoint::to_bytes(&model)));
        }
        epochs.push(record);
        if config.max_steps.is_some_and(|m| step >= m) {
            break 'epochs;
        }
    }

    let (_, selected_epoch, bytes) = best.expect("at least one epoch ran");
    let model = checkpoint::from_bytes(&bytes)?;
    let test = evaluate(&model, &vocab, &test_docs, config.batch_size, config.max_len)?;
    info!("test accuracy {:.4} at epoch {selected_epoch}", test.accuracy);
    Ok(TrainOutcome {
        result: RunResult {
            seed,
            ablation: config.ablation,
            gamma_mode: config.gamma_mode,
            epochs,
            selected_epoch,
            test,
            total_steps: step,
            train_size: train_docs.len(),
            validation_size: val_docs.len(),
            test_size: test_docs.len(),
            dropped_documents: d1 + d2,
        },
        model,
        vocab,
    })
}

/// Evaluate with dropout off. Batches are scored in parallel and merged in
/// order.
pub fn evaluate_batches(model: &IdeaModel, batches: &[Batch]) -> Result<Metrics> {
    let preds: Vec<Vec<usize>> = batches
        .par_iter()
        .map(|b| model.predict(b).map(|p| p.predicted))
        .collect::<Result<_>>()?;
    let gold: Vec<usize> = batches.iter().flat_map(|b| b.gold.iter().copied()).collect();
    let pred: Vec<usize> = preds.into_iter().flatten().collect();
    Metrics::from_predictions(&gold, &pred, model.config.num_labels)
}

pub fn evaluate(model: &IdeaModel, vocab: &Vocab, docs: &[Document], batch_size: usize, max_len: usize) -> Result<Metrics> {
    let (docs, _) = drop_empty(docs.to_vec(), "evaluation");
    let batches = make_batches(&docs, vocab, batch_size, max_len, false, 0)?;
    evaluate_batches(model, &batches)
}

/// One training run per seed.
pub fn seed_sweep(config: &TrainConfig, corpus: &Corpus, seeds: &[u64]) -> Result<Vec<RunResult>> {
    seeds
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..config.clone() };
            train(&cfg, corpus).map(|o| o.result)
        })
        .collect()
}
