//! The complete classifier: shared encoder, head and classifier over one
//! parameter store.

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, GradCheckReport, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use crate::encoder::{Encoder, EncoderConfig, EncoderParams, LabelEncoding};
use crate::error::{Error, Result};
use crate::head::{
    argmax_rows, classify, head_features, idea_loss, predict, AblationMode, AttentionParams,
    ClassifierParams, GammaMode, HeadInput, HeadVars, IdeaFeatures,
};
use crate::text::{Batch, LabelSet, LabelSequence};

/// Parameters covered by the L2 term. Biases and layer-norm parameters are
/// never included.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum L2Scope {
    /// Every weight matrix: encoder projections, feed-forward, pooler,
    /// `W_m`, `W_t` and the classifier.
    #[default]
    WeightMatrices,
    /// Weight matrices plus the token and position embedding tables.
    WithEmbeddings,
}

impl L2Scope {
    pub fn name(self) -> &'static str {
        match self {
            L2Scope::WeightMatrices => "weight-matrices",
            L2Scope::WithEmbeddings => "with-embeddings",
        }
    }

    fn covers(self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::Weight => true,
            ParamKind::Embedding => self == L2Scope::WithEmbeddings,
            ParamKind::Bias | ParamKind::Norm => false,
        }
    }
}

impl fmt::Display for L2Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for L2Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "weight-matrices" | "weights" => Ok(L2Scope::WeightMatrices),
            "with-embeddings" => Ok(L2Scope::WithEmbeddings),
            _ => Err(Error::InvalidArgument(format!(
                "unknown L2 scope {s:?} (expected weight-matrices or with-embeddings)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub num_labels: usize,
    pub ablation: AblationMode,
    pub gamma_mode: GammaMode,
    /// Dropout on `z` before the classifier.
    pub dropout: f64,
    #[serde(default)]
    pub l2_scope: L2Scope,
}

impl ModelConfig {
    pub fn z_width(&self) -> usize {
        self.ablation.z_width(self.encoder.d)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_labels == 0 {
            return Err(Error::InvalidArgument("num_labels must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// How the label sequence is run through the encoder for a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LabelPass {
    /// Encode once and broadcast over the batch.
    #[default]
    Broadcast,
    /// Encode one copy per sample.
    PerSample,
}

#[derive(Clone, Debug)]
pub struct IdeaModel {
    pub config: ModelConfig,
    pub labels: LabelSet,
    pub label_sequence: LabelSequence,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub attention: AttentionParams,
    pub classifier: ClassifierParams,
}

/// Result of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub features: IdeaFeatures,
    pub logits: Var,
    pub labels: LabelEncoding,
    pub vars: HeadVars,
}

/// Evaluation-mode outputs as plain tensors.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub predicted: Vec<usize>,
    pub z: Tensor,
}

impl IdeaModel {
    pub fn new(config: ModelConfig, labels: LabelSet, label_sequence: LabelSequence, seed: u64) -> Result<Self> {
        config.validate()?;
        if labels.len() != config.num_labels || label_sequence.spans.len() != config.num_labels {
            return Err(Error::InvalidArgument(format!(
                "model has {} labels but the label set has {} and the label sequence {} spans",
                config.num_labels,
                labels.len(),
                label_sequence.spans.len()
            )));
        }
        if label_sequence.ids.len() > config.encoder.max_positions {
            return Err(Error::InvalidArgument(format!(
                "label sequence of {} tokens exceeds max_positions {}",
                label_sequence.ids.len(),
                config.encoder.max_positions
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&mut store, &config.encoder, &mut rng);
        let attention = AttentionParams::init(&mut store, config.encoder.d, &mut rng);
        let classifier = ClassifierParams::init(&mut store, config.z_width(), config.num_labels, &mut rng);
        Ok(IdeaModel {
            config,
            labels,
            label_sequence,
            store,
            encoder,
            attention,
            classifier,
        })
    }

    pub fn encoder(&self) -> Encoder<'_> {
        Encoder {
            config: &self.config.encoder,
            params: &self.encoder,
        }
    }

    /// Parameters carried by the L2 term, in store order.
    pub fn regularized_params(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| self.config.l2_scope.covers(self.store.get(id).kind))
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape<'_>, batch: &Batch, training: bool, rng: &mut dyn RngCore) -> Result<Forward> {
        self.forward_with(tape, batch, training, rng, LabelPass::Broadcast)
    }

    pub fn forward_with(
        &self,
        tape: &mut Tape<'_>,
        batch: &Batch,
        training: bool,
        rng: &mut dyn RngCore,
        label_pass: LabelPass,
    ) -> Result<Forward> {
        let (k, width, d) = (batch.rows, batch.width, self.config.encoder.d);
        if width < 3 {
            return Err(Error::Empty { op: "forward: batch has no word positions" });
        }
        let enc = self.encoder();
        let text = enc.encode(tape, batch.into(), training, rng)?;
        let labels = match label_pass {
            LabelPass::Broadcast => enc.encode_labels_once(tape, &self.label_sequence, k, training, rng)?,
            LabelPass::PerSample => enc.encode_labels_per_sample(tape, &self.label_sequence, k, training, rng)?,
        };
        let n = width - 2;
        let text_tokens = tape.narrow(text.tokens, 1, 1, n)?;
        let word_mask = batch.word_mask();
        debug_assert_eq!(word_mask.len(), k * n);
        let vars = HeadVars::new(tape, &self.attention, &self.classifier);
        let features = head_features(
            tape,
            HeadInput {
                text_tokens,
                t_global: text.global,
                label_vectors: labels.vectors,
                m_global: labels.global,
                word_mask: &word_mask,
            },
            &vars,
            self.config.ablation,
            self.config.gamma_mode,
        )?;
        debug_assert_eq!(tape.shape(features.z), &[k, self.config.ablation.z_width(d)]);
        let z = tape.dropout(features.z, self.config.dropout, training, rng)?;
        let logits = classify(tape, z, vars.classifier_weight, vars.classifier_bias)?;
        Ok(Forward {
            features,
            logits,
            labels,
            vars,
        })
    }

    /// Regularized loss for a forward pass.
    pub fn loss(&self, tape: &mut Tape<'_>, fwd: &Forward, gold: &[usize], lambda: f64) -> Result<Var> {
        let reg: Vec<Var> = self.regularized_params().into_iter().map(|id| tape.param(id)).collect();
        idea_loss(tape, fwd.logits, gold, &reg, lambda)
    }

    /// Evaluation-mode forward pass.
    pub fn predict(&self, batch: &Batch) -> Result<Prediction> {
        let mut tape = Tape::with_params(&self.store);
        // dropout is off, the generator is never drawn from
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward(&mut tape, batch, false, &mut rng)?;
        let logits = tape.value(fwd.logits).clone();
        let probabilities = predict(&logits);
        let predicted = argmax_rows(&logits);
        Ok(Prediction {
            logits,
            probabilities,
            predicted,
            z: tape.value(fwd.features.z).clone(),
        })
    }

    /// Classify precomputed `z` rows with the stored classifier weights.
    pub fn classify_z(&self, z: &Tensor) -> Result<Vec<usize>> {
        let mut tape = Tape::with_params(&self.store);
        let zv = tape.constant(z.clone());
        let w = tape.param(self.classifier.weight);
        let b = tape.param(self.classifier.bias);
        let logits = classify(&mut tape, zv, w, b)?;
        Ok(argmax_rows(tape.value(logits)))
    }
}

/// Shape of the model used by [`gradient_check_tiny_model`].
#[derive(Clone, Copy, Debug)]
pub struct TinyModelShape {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub words: usize,
    pub num_labels: usize,
    pub batch: usize,
}

impl Default for TinyModelShape {
    fn default() -> Self {
        TinyModelShape {
            d: 8,
            n_layers: 2,
            n_heads: 2,
            words: 6,
            num_labels: 3,
            batch: 2,
        }
    }
}

/// Build a small model with random parameters and a random batch, then
/// compare the loss gradient of every parameter against central differences.
/// Dropout is active with a fixed mask so its backward path is covered too.
pub fn gradient_check_tiny_model(shape: TinyModelShape, seed: u64, step: f64, ablation: AblationMode) -> Result<GradCheckReport> {
    use crate::text::{CLS_ID, SEP_ID};
    use rand::Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab_size = 24;
    let names: Vec<String> = (0..shape.num_labels).map(|i| format!("label{i}")).collect();
    let labels = LabelSet::new(&names)?;
    // label i is a one- or two-token name
    let mut ids = vec![CLS_ID];
    let mut spans = Vec::new();
    for i in 0..shape.num_labels {
        if i > 0 {
            ids.push(4);
        }
        let start = ids.len();
        let len = 1 + i % 2;
        for _ in 0..len {
            ids.push(rng.random_range(5..vocab_size as u32));
        }
        spans.push(start..ids.len());
    }
    ids.push(SEP_ID);
    let seq = LabelSequence { ids, spans };

    let mut enc = EncoderConfig::new(vocab_size);
    enc.d = shape.d;
    enc.n_layers = shape.n_layers;
    enc.n_heads = shape.n_heads;
    enc.ffn_dim = 4 * shape.d;
    enc.max_positions = (shape.words + 2).max(seq.ids.len());
    let config = ModelConfig {
        encoder: enc,
        num_labels: shape.num_labels,
        ablation,
        gamma_mode: GammaMode::PerSample,
        dropout: 0.1,
        l2_scope: L2Scope::WeightMatrices,
    };
    let mut model = IdeaModel::new(config, labels, seq, seed)?;
    // widen the initial weights so every nonlinearity sits in a curved region
    for id in model.store.ids() {
        let shape = model.store.value(id).shape().to_vec();
        *model.store.value_mut(id) = Tensor::randn(&shape, 0.5, &mut rng);
    }

    let rows: Vec<Vec<u32>> = (0..shape.batch)
        .map(|r| {
            let n = if r == 0 { shape.words } else { (shape.words / 2).max(1) };
            let mut row = vec![CLS_ID];
            row.extend((0..n).map(|_| rng.random_range(4..vocab_size as u32)));
            row.push(SEP_ID);
            row
        })
        .collect();
    let gold: Vec<usize> = (0..shape.batch).map(|_| rng.random_range(0..shape.num_labels)).collect();
    let batch = Batch::from_encoded(&rows, gold.clone());
    let dropout_seed: u64 = rng.random();

    let IdeaModel {
        config,
        labels,
        label_sequence,
        mut store,
        encoder,
        attention,
        classifier,
    } = model;
    let frozen = IdeaModel {
        config,
        labels,
        label_sequence,
        store: ParamStore::new(),
        encoder,
        attention,
        classifier,
    };
    let params: Vec<ParamId> = store.ids().collect();
    grad_check(&mut store, &params, step, |tape| {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let fwd = frozen.forward(tape, &batch, true, &mut rng)?;
        frozen.loss(tape, &fwd, &gold, 0.01)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        for seed in 0..3 {
            let report = gradient_check_tiny_model(TinyModelShape::default(), seed, 1e-5, AblationMode::Full).unwrap();
            assert!(report.max_relative_error < 1e-4, "seed {seed}: {report:?}");
            assert_eq!(report.per_parameter_errors.len(), 2 + 2 * 15 + 2 + 4 + 2);
        }
    }

    #[test]
    fn every_ablation_mode_passes_gradient_check() {
        for mode in AblationMode::ALL {
            let report = gradient_check_tiny_model(TinyModelShape::default(), 7, 1e-5, mode).unwrap();
            assert!(report.max_relative_error < 1e-4, "{mode}: {report:?}");
        }
    }

    fn tiny(scope: L2Scope) -> IdeaModel {
        let labels = LabelSet::new(&["a", "b"]).unwrap();
        let seq = LabelSequence {
            ids: vec![2, 4, 5, 3],
            spans: vec![1..2, 2..3],
        };
        let mut enc = EncoderConfig::new(8);
        enc.d = 4;
        enc.n_heads = 2;
        enc.ffn_dim = 8;
        let config = ModelConfig {
            encoder: enc,
            num_labels: 2,
            ablation: AblationMode::Full,
            gamma_mode: GammaMode::PerSample,
            dropout: 0.0,
            l2_scope: scope,
        };
        IdeaModel::new(config, labels, seq, 3).unwrap()
    }

    #[test]
    fn l2_covers_weight_matrices_only_by_default() {
        let m = tiny(L2Scope::WeightMatrices);
        let names: Vec<&str> = m.regularized_params().into_iter().map(|id| m.store.get(id).name.as_str()).collect();
        for want in ["encoder.layer0.attn.wq", "encoder.layer1.ffn.w2", "encoder.pooler.weight", "head.text_attention.w_m", "head.classifier.weight"] {
            assert!(names.contains(&want), "{want} missing from {names:?}");
        }
        assert!(
            names.iter().all(|n| !n.contains("embedding") && !n.contains(".b") && !n.contains("gamma")),
            "{names:?}"
        );
        let with = tiny(L2Scope::WithEmbeddings);
        assert_eq!(with.regularized_params().len(), names.len() + 2);
    }

    #[test]
    fn loss_adds_half_lambda_squared_norm() {
        let m = tiny(L2Scope::WeightMatrices);
        let batch = Batch::from_encoded(&[vec![2, 6, 7, 3]], vec![1]);
        let loss_at = |lambda: f64| {
            let mut tape = Tape::with_params(&m.store);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let fwd = m.forward(&mut tape, &batch, false, &mut rng).unwrap();
            let l = m.loss(&mut tape, &fwd, &batch.gold, lambda).unwrap();
            tape.value(l).item()
        };
        let sq: f64 = m.regularized_params().into_iter().map(|id| m.store.value(id).norm().powi(2)).sum();
        let gap = loss_at(0.5) - loss_at(0.0);
        assert!((gap - 0.25 * sq).abs() < 1e-12, "{gap} vs {}", 0.25 * sq);
    }
}
