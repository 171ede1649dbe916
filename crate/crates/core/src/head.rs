//! Interactive double attention, weighted similarity features, feature
//! assembly and the linear classifier.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use crate::encoder::INIT_STD;
use crate::error::{Error, Result};

/// Which feature blocks enter `z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    Full,
    OnlyTextFeatures,
    OnlyFusing,
    NoAbsDiff,
    NoEleProd,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Full,
        AblationMode::OnlyTextFeatures,
        AblationMode::OnlyFusing,
        AblationMode::NoAbsDiff,
        AblationMode::NoEleProd,
    ];

    pub fn blocks(self) -> &'static [Block] {
        use Block::*;
        match self {
            AblationMode::Full => &[Text, Product, AbsDiff, Label],
            AblationMode::OnlyTextFeatures => &[Text],
            AblationMode::OnlyFusing => &[Product, AbsDiff],
            AblationMode::NoAbsDiff => &[Text, Product, Label],
            AblationMode::NoEleProd => &[Text, AbsDiff, Label],
        }
    }

    pub fn z_width(self, d: usize) -> usize {
        self.blocks().len() * d
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::OnlyTextFeatures => "only-text",
            AblationMode::OnlyFusing => "only-fusing",
            AblationMode::NoAbsDiff => "no-abs-diff",
            AblationMode::NoEleProd => "no-ele-prod",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "full" => Ok(AblationMode::Full),
            "only-text" | "only-text-features" => Ok(AblationMode::OnlyTextFeatures),
            "only-fusing" => Ok(AblationMode::OnlyFusing),
            "no-abs-diff" => Ok(AblationMode::NoAbsDiff),
            "no-ele-prod" => Ok(AblationMode::NoEleProd),
            _ => Err(Error::InvalidArgument(format!(
                "unknown ablation mode {s:?} (expected full, only-text, only-fusing, no-abs-diff or no-ele-prod)"
            ))),
        }
    }
}

/// Feature blocks of `z`, in layout order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Text,
    Product,
    AbsDiff,
    Label,
}

/// How the product/difference mixing weight is pooled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaMode {
    /// One weight per sample from means over the feature dimension.
    #[default]
    PerSample,
    /// One weight per batch: features are summed over the batch before the
    /// mean, so a sample's weight depends on its batch neighbours.
    PerBatchLiteral,
}

impl GammaMode {
    pub fn name(self) -> &'static str {
        match self {
            GammaMode::PerSample => "per-sample",
            GammaMode::PerBatchLiteral => "per-batch-literal",
        }
    }
}

impl fmt::Display for GammaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GammaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "per-sample" => Ok(GammaMode::PerSample),
            "per-batch-literal" | "per-batch" => Ok(GammaMode::PerBatchLiteral),
            _ => Err(Error::InvalidArgument(format!(
                "unknown gamma mode {s:?} (expected per-sample or per-batch-literal)"
            ))),
        }
    }
}

/// `W_m`, `W_t` are `d × d`; `b_m`, `b_t` are scalars broadcast over every
/// position.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_m: ParamId,
    pub b_m: ParamId,
    pub w_t: ParamId,
    pub b_t: ParamId,
}

impl AttentionParams {
    pub fn init(store: &mut ParamStore, d: usize, rng: &mut dyn RngCore) -> Self {
        AttentionParams {
            w_m: store.add("head.text_attention.w_m", Tensor::randn(&[d, d], INIT_STD, rng), ParamKind::Weight),
            b_m: store.add("head.text_attention.b_m", Tensor::zeros(&[1]), ParamKind::Bias),
            w_t: store.add("head.label_attention.w_t", Tensor::randn(&[d, d], INIT_STD, rng), ParamKind::Weight),
            b_t: store.add("head.label_attention.b_t", Tensor::zeros(&[1]), ParamKind::Bias),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ClassifierParams {
    pub fn init(store: &mut ParamStore, z_width: usize, num_labels: usize, rng: &mut dyn RngCore) -> Self {
        ClassifierParams {
            weight: store.add(
                "head.classifier.weight",
                Tensor::randn(&[z_width, num_labels], INIT_STD, rng),
                ParamKind::Weight,
            ),
            bias: store.add("head.classifier.bias", Tensor::zeros(&[num_labels]), ParamKind::Bias),
        }
    }
}

/// Attention weights over positions and the weighted sum they produce.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub weights: Var,
    pub pooled: Var,
}

/// Every intermediate of the head for one batch.
#[derive(Clone, Copy, Debug)]
pub struct IdeaFeatures {
    /// Text attention `[K, N]`.
    pub alpha: Var,
    /// Label attention `[K, L]`.
    pub beta: Var,
    pub c: Var,
    pub s: Var,
    pub p: Var,
    pub d_feat: Var,
    /// `[K, 1]`.
    pub gamma: Var,
    /// `[K, 1]`, equal to `1 − gamma`.
    pub eta: Var,
    pub p_weighted: Var,
    pub d_weighted: Var,
    pub z: Var,
}

/// `weights = softmax_j(tanh(x_j · W · gᵀ + b))` over positions `j`, then
/// `pooled = Σ_j weights_j · x_j`.
fn interactive_attention(
    tape: &mut Tape<'_>,
    seq: Var,
    global: Var,
    w: Var,
    b: Var,
    mask: Option<&[bool]>,
) -> Result<Attended> {
    let shape = tape.shape(seq).to_vec();
    let [k, n, d] = shape[..] else {
        return Err(Error::shape("attention sequence", &shape, &[]));
    };
    if tape.shape(global) != [k, d] {
        return Err(Error::shape("attention global", &[k, d], tape.shape(global)));
    }
    if tape.shape(w) != [d, d] {
        return Err(Error::shape("attention weight", &[d, d], tape.shape(w)));
    }
    if n == 0 {
        return Err(Error::Empty { op: "attention" });
    }
    // x · W · gᵀ == x · (g · Wᵀ)ᵀ, one matrix-vector product per sample
    let wt = tape.transpose(w)?;
    let v = tape.matmul(global, wt)?;
    let v = tape.reshape(v, &[k, d, 1])?;
    let scores = tape.matmul(seq, v)?;
    let scores = tape.reshape(scores, &[k, n])?;
    let scores = tape.add(scores, b)?;
    let scores = tape.tanh(scores);
    let weights = tape.softmax(scores, 1, mask)?;
    let w3 = tape.reshape(weights, &[k, 1, n])?;
    let pooled = tape.matmul(w3, seq)?;
    let pooled = tape.reshape(pooled, &[k, d])?;
    Ok(Attended { weights, pooled })
}

/// Text attention scored against the label-sequence global vector.
/// `text_tokens` are the word positions only (no CLS/SEP); `word_mask` marks
/// real words, row-major `[K, N]`.
pub fn text_attention(
    tape: &mut Tape<'_>,
    text_tokens: Var,
    m_global: Var,
    w_m: Var,
    b_m: Var,
    word_mask: &[bool],
) -> Result<Attended> {
    interactive_attention(tape, text_tokens, m_global, w_m, b_m, Some(word_mask))
}

/// Label attention over the `L` class vectors, scored against the document
/// global vector. No mask: every class is always present.
pub fn label_attention(
    tape: &mut Tape<'_>,
    label_vectors: Var,
    t_global: Var,
    w_t: Var,
    b_t: Var,
) -> Result<Attended> {
    interactive_attention(tape, label_vectors, t_global, w_t, b_t, None)
}

/// `p = c ⊙ s`, `d = |c − s|`.
pub fn similarity_features(tape: &mut Tape<'_>, c: Var, s: Var) -> Result<(Var, Var)> {
    let p = tape.hadamard(c, s)?;
    let d = tape.abs_diff(c, s)?;
    Ok((p, d))
}

#[derive(Clone, Copy, Debug)]
pub struct Weighted {
    pub p_weighted: Var,
    pub d_weighted: Var,
    pub gamma: Var,
    pub eta: Var,
}

/// `γ = exp(mean d) / (exp(mean p) + exp(mean d)) = sigmoid(mean d − mean p)`,
/// `p′ = γ·p`, `d′ = (1 − γ)·d`.
pub fn weighted_features(tape: &mut Tape<'_>, p: Var, d: Var, mode: GammaMode) -> Result<Weighted> {
    let shape = tape.shape(p).to_vec();
    if shape.len() != 2 || tape.shape(d) != shape.as_slice() {
        return Err(Error::shape("weighted_features", &shape, tape.shape(d)));
    }
    let k = shape[0];
    let gamma = match mode {
        GammaMode::PerSample => {
            let md = tape.mean(d, 1)?;
            let mp = tape.mean(p, 1)?;
            let diff = tape.sub(md, mp)?;
            let g = tape.sigmoid(diff);
            tape.reshape(g, &[k, 1])?
        }
        GammaMode::PerBatchLiteral => {
            let sd = tape.sum(d, 0)?;
            let sp = tape.sum(p, 0)?;
            let md = tape.mean(sd, 0)?;
            let mp = tape.mean(sp, 0)?;
            let diff = tape.sub(md, mp)?;
            let g = tape.sigmoid(diff);
            let g = tape.reshape(g, &[1, 1])?;
            tape.expand(g, &[k, 1])?
        }
    };
    let neg = tape.scale(gamma, -1.0);
    let eta = tape.add_scalar(neg, 1.0);
    let p_weighted = tape.mul(p, gamma)?;
    let d_weighted = tape.mul(d, eta)?;
    Ok(Weighted {
        p_weighted,
        d_weighted,
        gamma,
        eta,
    })
}

/// Concatenate the blocks selected by `mode` in the fixed order
/// `[c | p′ | d′ | s]`.
pub fn assemble_z(
    tape: &mut Tape<'_>,
    c: Var,
    p_weighted: Var,
    d_weighted: Var,
    s: Var,
    mode: AblationMode,
) -> Result<Var> {
    let parts: Vec<Var> = mode
        .blocks()
        .iter()
        .map(|b| match b {
            Block::Text => c,
            Block::Product => p_weighted,
            Block::AbsDiff => d_weighted,
            Block::Label => s,
        })
        .collect();
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    tape.concat(&parts, 1)
}

/// `logits = z · W_c + b_c`.
pub fn classify(tape: &mut Tape<'_>, z: Var, weight: Var, bias: Var) -> Result<Var> {
    let zw = tape.shape(z).get(1).copied().unwrap_or(0);
    let ws = tape.shape(weight);
    if ws.len() != 2 || ws[0] != zw {
        return Err(Error::InvalidArgument(format!(
            "classifier expects z width {} but got {zw}; was the ablation mode changed after initialization?",
            ws.first().copied().unwrap_or(0)
        )));
    }
    let y = tape.matmul(z, weight)?;
    tape.add(y, bias)
}

/// Row-wise softmax of a `[K, L]` logits tensor.
pub fn predict(logits: &Tensor) -> Tensor {
    let l = logits.shape()[logits.rank() - 1];
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(l) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

/// Row-wise argmax; the first maximum wins.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let l = t.shape()[t.rank() - 1];
    t.data()
        .chunks(l)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Mean cross-entropy plus `(λ/2)·Σ‖W‖²_F` over `reg_params`.
pub fn idea_loss(tape: &mut Tape<'_>, logits: Var, gold: &[usize], reg_params: &[Var], lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let ce = tape.cross_entropy(logits, gold)?;
    if lambda == 0.0 || reg_params.is_empty() {
        return Ok(ce);
    }
    let reg = tape.frobenius_sq(reg_params)?;
    let reg = tape.scale(reg, lambda / 2.0);
    tape.add(ce, reg)
}

/// Parameters of the full head, resolved on one tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w_m: Var,
    pub b_m: Var,
    pub w_t: Var,
    pub b_t: Var,
    pub classifier_weight: Var,
    pub classifier_bias: Var,
}

impl HeadVars {
    pub fn new(tape: &mut Tape<'_>, attention: &AttentionParams, classifier: &ClassifierParams) -> Self {
        HeadVars {
            w_m: tape.param(attention.w_m),
            b_m: tape.param(attention.b_m),
            w_t: tape.param(attention.w_t),
            b_t: tape.param(attention.b_t),
            classifier_weight: tape.param(classifier.weight),
            classifier_bias: tape.param(classifier.bias),
        }
    }
}

/// Inputs the head consumes from the encoder.
#[derive(Clone, Copy, Debug)]
pub struct HeadInput<'a> {
    /// Word positions of the documents, `[K, N, d]`.
    pub text_tokens: Var,
    /// `[K, d]`.
    pub t_global: Var,
    /// Per-class label vectors, `[K, L, d]`.
    pub label_vectors: Var,
    /// `[K, d]`.
    pub m_global: Var,
    pub word_mask: &'a [bool],
}

/// Run both attentions, the similarity features and the feature assembly.
pub fn head_features(
    tape: &mut Tape<'_>,
    input: HeadInput<'_>,
    vars: &HeadVars,
    ablation: AblationMode,
    gamma_mode: GammaMode,
) -> Result<IdeaFeatures> {
    let text = text_attention(tape, input.text_tokens, input.m_global, vars.w_m, vars.b_m, input.word_mask)?;
    let label = label_attention(tape, input.label_vectors, input.t_global, vars.w_t, vars.b_t)?;
    let (c, s) = (text.pooled, label.pooled);
    let (p, d_feat) = similarity_features(tape, c, s)?;
    let w = weighted_features(tape, p, d_feat, gamma_mode)?;
    let z = assemble_z(tape, c, w.p_weighted, w.d_weighted, s, ablation)?;
    Ok(IdeaFeatures {
        alpha: text.weights,
        beta: label.weights,
        c,
        s,
        p,
        d_feat,
        gamma: w.gamma,
        eta: w.eta,
        p_weighted: w.p_weighted,
        d_weighted: w.d_weighted,
        z,
    })
}
