//! Shared-weight encoder applied to both documents and the label sequence.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::text::{Batch, LabelSequence, DEFAULT_MAX_LEN};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderBackend {
    MiniTransformer,
    BagOfEmbeddings,
}

impl EncoderBackend {
    pub fn name(self) -> &'static str {
        match self {
            EncoderBackend::MiniTransformer => "mini-transformer",
            EncoderBackend::BagOfEmbeddings => "bag-of-embeddings",
        }
    }
}

impl fmt::Display for EncoderBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "mini-transformer" | "transformer" => Ok(EncoderBackend::MiniTransformer),
            "bag-of-embeddings" | "bag" => Ok(EncoderBackend::BagOfEmbeddings),
            _ => Err(Error::InvalidArgument(format!(
                "unknown encoder backend {s:?} (expected mini-transformer or bag-of-embeddings)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub backend: EncoderBackend,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults: d = 64, 2 layers, 4 heads, ffn = 4d.
    pub fn new(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            max_positions: DEFAULT_MAX_LEN + 2,
            backend: EncoderBackend::MiniTransformer,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d == 0 || self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return bad(format!("d = {} must be a positive multiple of n_heads = {}", self.d, self.n_heads));
        }
        if self.vocab_size < 4 || self.max_positions < 2 || self.ffn_dim == 0 {
            return bad(format!("degenerate encoder config {self:?}"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    /// No key bias: it shifts every score of a query row equally, which the
    /// softmax cancels, so it would never receive a gradient.
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

/// Parameter handles of one encoder. The same handles serve documents and
/// labels.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<LayerParams>,
    pub pooler_weight: ParamId,
    pub pooler_bias: ParamId,
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, config: &EncoderConfig, rng: &mut dyn RngCore) -> Self {
        let d = config.d;
        let bias = |store: &mut ParamStore, name: String, n: usize| {
            store.add(name, Tensor::zeros(&[n]), ParamKind::Bias)
        };
        let norm = |store: &mut ParamStore, name: String| {
            (
                store.add(format!("{name}.gamma"), Tensor::ones(&[d]), ParamKind::Norm),
                store.add(format!("{name}.beta"), Tensor::zeros(&[d]), ParamKind::Norm),
            )
        };
        let token_embedding = store.add(
            "encoder.token_embedding",
            Tensor::randn(&[config.vocab_size, d], INIT_STD, rng),
            ParamKind::Embedding,
        );
        let position_embedding = store.add(
            "encoder.position_embedding",
            Tensor::randn(&[config.max_positions, d], INIT_STD, rng),
            ParamKind::Embedding,
        );

        let mut w = |store: &mut ParamStore, name: String, shape: &[usize]| {
            store.add(name, Tensor::randn(shape, INIT_STD, rng), ParamKind::Weight)
        };
        let n_layers = match config.backend {
            EncoderBackend::MiniTransformer => config.n_layers,
            EncoderBackend::BagOfEmbeddings => 0,
        };
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let p = format!("encoder.layer{l}");
            let wq = w(store, format!("{p}.attn.wq"), &[d, d]);
            let bq = bias(store, format!("{p}.attn.bq"), d);
            let wk = w(store, format!("{p}.attn.wk"), &[d, d]);
            let wv = w(store, format!("{p}.attn.wv"), &[d, d]);
            let bv = bias(store, format!("{p}.attn.bv"), d);
            let wo = w(store, format!("{p}.attn.wo"), &[d, d]);
            let bo = bias(store, format!("{p}.attn.bo"), d);
            let (ln1_gamma, ln1_beta) = norm(store, format!("{p}.ln1"));
            let ffn_w1 = w(store, format!("{p}.ffn.w1"), &[d, config.ffn_dim]);
            let ffn_b1 = bias(store, format!("{p}.ffn.b1"), config.ffn_dim);
            let ffn_w2 = w(store, format!("{p}.ffn.w2"), &[config.ffn_dim, d]);
            let ffn_b2 = bias(store, format!("{p}.ffn.b2"), d);
            let (ln2_gamma, ln2_beta) = norm(store, format!("{p}.ln2"));
            layers.push(LayerParams {
                wq,
                bq,
                wk,
                wv,
                bv,
                wo,
                bo,
                ln1_gamma,
                ln1_beta,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
                ln2_gamma,
                ln2_beta,
            });
        }
        let pooler_weight = w(store, "encoder.pooler.weight".into(), &[d, d]);
        let pooler_bias = bias(store, "encoder.pooler.bias".into(), d);
        EncoderParams {
            token_embedding,
            position_embedding,
            layers,
            pooler_weight,
            pooler_bias,
        }
    }
}

/// Per-token representations `[K, S, d]` and pooled global vectors `[K, d]`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub tokens: Var,
    pub global: Var,
}

/// Token-id rows to encode together with their padding mask.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub token_ids: &'a [u32],
    pub pad_mask: &'a [bool],
    pub rows: usize,
    pub width: usize,
}

impl<'a> From<&'a Batch> for EncoderInput<'a> {
    fn from(b: &'a Batch) -> Self {
        EncoderInput {
            token_ids: &b.token_ids,
            pad_mask: &b.pad_mask,
            rows: b.rows,
            width: b.width,
        }
    }
}

pub struct Encoder<'m> {
    pub config: &'m EncoderConfig,
    pub params: &'m EncoderParams,
}

impl Encoder<'_> {
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        input: EncoderInput<'_>,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<EncoderOutput> {
        let cfg = self.config;
        let (k, s, d) = (input.rows, input.width, cfg.d);
        if s > cfg.max_positions {
            return Err(Error::InvalidArgument(format!(
                "sequence length {s} exceeds max_positions {}",
                cfg.max_positions
            )));
        }
        if input.token_ids.len() != k * s || input.pad_mask.len() != k * s {
            return Err(Error::shape("encode", &[k, s], &[input.token_ids.len()]));
        }
        let ids: Vec<usize> = input.token_ids.iter().map(|&i| i as usize).collect();
        let table = tape.param(self.params.token_embedding);
        let tok = tape.embedding(table, &ids, &[k, s])?;
        let pos_table = tape.param(self.params.position_embedding);
        let pos = tape.narrow(pos_table, 0, 0, s)?;
        let mut x = tape.add(tok, pos)?;
        x = tape.dropout(x, cfg.dropout, training, rng)?;

        if cfg.backend == EncoderBackend::MiniTransformer {
            let h = cfg.n_heads;
            let mut key_mask = Vec::with_capacity(k * h * s * s);
            for row in 0..k {
                let m = &input.pad_mask[row * s..(row + 1) * s];
                for _ in 0..h * s {
                    key_mask.extend_from_slice(m);
                }
            }
            for layer in &self.params.layers {
                x = self.layer(tape, layer, x, [k, s, d], &key_mask, training, rng)?;
            }
        }

        let cls = tape.narrow(x, 1, 0, 1)?;
        let cls = tape.reshape(cls, &[k, d])?;
        let global = self.pooler(tape, cls)?;
        Ok(EncoderOutput { tokens: x, global })
    }

    #[allow(clippy::too_many_arguments)]
    fn layer(
        &self,
        tape: &mut Tape<'_>,
        p: &LayerParams,
        x: Var,
        [k, s, d]: [usize; 3],
        key_mask: &[bool],
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let cfg = self.config;
        let h = cfg.n_heads;
        let dh = d / h;
        let heads = |tape: &mut Tape<'_>, w: ParamId, b: Option<ParamId>| -> Result<Var> {
            let y = match b {
                Some(b) => linear(tape, x, w, b)?,
                None => {
                    let w = tape.param(w);
                    tape.matmul(x, w)?
                }
            };
            let y = tape.reshape(y, &[k, s, h, dh])?;
            tape.permute(y, &[0, 2, 1, 3])
        };
        let q = heads(tape, p.wq, Some(p.bq))?;
        let kk = heads(tape, p.wk, None)?;
        let v = heads(tape, p.wv, Some(p.bv))?;
        let kt = tape.transpose(kk)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = tape.softmax(scores, 3, Some(key_mask))?;
        let ctx = tape.matmul(probs, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[k, s, d])?;
        let attn = linear(tape, ctx, p.wo, p.bo)?;
        let attn = tape.dropout(attn, cfg.dropout, training, rng)?;
        let res = tape.add(x, attn)?;
        let (g1, b1) = (tape.param(p.ln1_gamma), tape.param(p.ln1_beta));
        let x = tape.layer_norm(res, g1, b1, cfg.layer_norm_eps)?;

        let ff = linear(tape, x, p.ffn_w1, p.ffn_b1)?;
        let ff = tape.gelu(ff);
        let ff = linear(tape, ff, p.ffn_w2, p.ffn_b2)?;
        let ff = tape.dropout(ff, cfg.dropout, training, rng)?;
        let res = tape.add(x, ff)?;
        let (g2, b2) = (tape.param(p.ln2_gamma), tape.param(p.ln2_beta));
        tape.layer_norm(res, g2, b2, cfg.layer_norm_eps)
    }

    /// `tanh(cls · W_pool + b_pool)`.
    pub fn pooler(&self, tape: &mut Tape<'_>, cls: Var) -> Result<Var> {
        let y = linear(tape, cls, self.params.pooler_weight, self.params.pooler_bias)?;
        Ok(tape.tanh(y))
    }

    /// Encode the label sequence once and broadcast it over `k` samples.
    pub fn encode_labels_once(
        &self,
        tape: &mut Tape<'_>,
        seq: &LabelSequence,
        k: usize,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<LabelEncoding> {
        let mask = vec![true; seq.ids.len()];
        let out = self.encode(
            tape,
            EncoderInput {
                token_ids: &seq.ids,
                pad_mask: &mask,
                rows: 1,
                width: seq.ids.len(),
            },
            training,
            rng,
        )?;
        let d = self.config.d;
        let pooled = pool_label_vectors(tape, out.tokens, &seq.spans)?;
        let l = seq.spans.len();
        let pooled = tape.reshape(pooled, &[1, l, d])?;
        let vectors = tape.expand(pooled, &[k, l, d])?;
        let global = tape.expand(out.global, &[k, d])?;
        Ok(LabelEncoding {
            output: out,
            vectors,
            global,
        })
    }

    /// Reference path: encode a separate copy of the label sequence for each
    /// of the `k` samples. Matches [`Self::encode_labels_once`] whenever
    /// dropout is off.
    pub fn encode_labels_per_sample(
        &self,
        tape: &mut Tape<'_>,
        seq: &LabelSequence,
        k: usize,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<LabelEncoding> {
        let s = seq.ids.len();
        let ids: Vec<u32> = (0..k).flat_map(|_| seq.ids.iter().copied()).collect();
        let mask = vec![true; k * s];
        let out = self.encode(
            tape,
            EncoderInput {
                token_ids: &ids,
                pad_mask: &mask,
                rows: k,
                width: s,
            },
            training,
            rng,
        )?;
        let d = self.config.d;
        let l = seq.spans.len();
        let mut rows = Vec::with_capacity(k);
        for r in 0..k {
            let t = tape.narrow(out.tokens, 0, r, 1)?;
            let pooled = pool_label_vectors(tape, t, &seq.spans)?;
            rows.push(tape.reshape(pooled, &[1, l, d])?);
        }
        let vectors = tape.concat(&rows, 0)?;
        Ok(LabelEncoding {
            output: out,
            vectors,
            global: out.global,
        })
    }
}

/// Label-side encoder products broadcast over the batch.
#[derive(Clone, Copy, Debug)]
pub struct LabelEncoding {
    pub output: EncoderOutput,
    /// Per-class label vectors `[K, L, d]`.
    pub vectors: Var,
    /// Label-sequence global vector `[K, d]`.
    pub global: Var,
}

fn linear(tape: &mut Tape<'_>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let (w, b) = (tape.param(w), tape.param(b));
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Mean of the token vectors inside each span: `[S, d]` (or `[1, S, d]`)
/// → `[L, d]`.
pub fn pool_label_vectors(tape: &mut Tape<'_>, tokens: Var, spans: &[Range<usize>]) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    let (s, d) = match shape.as_slice() {
        [s, d] | [1, s, d] => (*s, *d),
        _ => return Err(Error::shape("pool_label_vectors", &shape, &[])),
    };
    if spans.is_empty() {
        return Err(Error::Empty {
            op: "pool_label_vectors",
        });
    }
    let l = spans.len();
    let mut pool = vec![0.0; l * s];
    for (i, span) in spans.iter().enumerate() {
        if span.is_empty() {
            return Err(Error::InvalidArgument(format!("label span {i} is empty")));
        }
        if span.end > s {
            return Err(Error::IndexOutOfRange {
                op: "pool_label_vectors",
                index: span.end,
                size: s,
            });
        }
        let w = 1.0 / span.len() as f64;
        for j in span.clone() {
            pool[i * s + j] = w;
        }
    }
    let pool = tape.constant(Tensor::new(vec![l, s], pool)?);
    let tokens = tape.reshape(tokens, &[s, d])?;
    tape.matmul(pool, tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(backend: EncoderBackend) -> (ParamStore, EncoderConfig, EncoderParams) {
        let mut cfg = EncoderConfig::new(20);
        cfg.d = 8;
        cfg.n_heads = 2;
        cfg.ffn_dim = 16;
        cfg.max_positions = 10;
        cfg.backend = backend;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = EncoderParams::init(&mut store, &cfg, &mut rng);
        // larger weights so the check exercises non-trivial curvature
        for id in store.ids().collect::<Vec<_>>() {
            if store.get(id).kind == ParamKind::Weight || store.get(id).kind == ParamKind::Embedding {
                let t = Tensor::randn(store.value(id).shape(), 0.5, &mut rng);
                *store.value_mut(id) = t;
            }
        }
        (store, cfg, params)
    }

    fn batch() -> Batch {
        Batch::from_encoded(
            &[vec![2, 5, 6, 7, 3], vec![2, 9, 3], vec![2, 4, 4, 8, 11, 3]],
            vec![0, 1, 2],
        )
    }

    fn run(store: &ParamStore, cfg: &EncoderConfig, params: &EncoderParams, b: &Batch) -> (Tensor, Tensor) {
        let mut tape = Tape::with_params(store);
        let enc = Encoder { config: cfg, params };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = enc.encode(&mut tape, b.into(), false, &mut rng).unwrap();
        (tape.value(out.tokens).clone(), tape.value(out.global).clone())
    }

    #[test]
    fn output_shapes() {
        let (store, cfg, params) = tiny(EncoderBackend::MiniTransformer);
        let (tokens, global) = run(&store, &cfg, &params, &batch());
        assert_eq!(tokens.shape(), &[3, 6, 8]);
        assert_eq!(global.shape(), &[3, 8]);
        assert!(global.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn too_long_sequence_errors() {
        let (store, cfg, params) = tiny(EncoderBackend::MiniTransformer);
        let b = Batch::from_encoded(&[vec![2; 11]], vec![0]);
        let mut tape = Tape::with_params(&store);
        let enc = Encoder { config: &cfg, params: &params };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(enc.encode(&mut tape, (&b).into(), false, &mut rng).is_err());
    }

    #[test]
    fn batch_rows_are_equivariant() {
        let (store, cfg, params) = tiny(EncoderBackend::MiniTransformer);
        let b = batch();
        let (tokens, global) = run(&store, &cfg, &params, &b);
        let perm = [2, 0, 1];
        let rows: Vec<Vec<u32>> = perm
            .iter()
            .map(|&r| b.row(r)[..b.word_count(r) + 2].to_vec())
            .collect();
        let pb = Batch::from_encoded(&rows, vec![0; 3]);
        let (pt, pg) = run(&store, &cfg, &params, &pb);
        for (new, &old) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((pg.at(&[new, j]) - global.at(&[old, j])).abs() < 1e-12);
                for p in 0..6 {
                    if b.pad_mask[old * 6 + p] {
                        assert!((pt.at(&[new, p, j]) - tokens.at(&[old, p, j])).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn pad_token_ids_do_not_leak() {
        let (store, cfg, params) = tiny(EncoderBackend::MiniTransformer);
        let b = batch();
        let (tokens, global) = run(&store, &cfg, &params, &b);
        let mut altered = b.clone();
        for (t, m) in altered.token_ids.iter_mut().zip(&b.pad_mask) {
            if !m {
                *t = 13;
            }
        }
        let (t2, g2) = run(&store, &cfg, &params, &altered);
        assert_eq!(global, g2);
        for r in 0..3 {
            for p in 0..6 {
                if b.pad_mask[r * 6 + p] {
                    for j in 0..8 {
                        assert_eq!(tokens.at(&[r, p, j]), t2.at(&[r, p, j]));
                    }
                }
            }
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (store, cfg, params) = tiny(EncoderBackend::MiniTransformer);
        let a = run(&store, &cfg, &params, &batch());
        let b = run(&store, &cfg, &params, &batch());
        assert_eq!(a, b);
    }

    #[test]
    fn pooler_zero_weights_give_zero() {
        let (mut store, cfg, params) = tiny(EncoderBackend::BagOfEmbeddings);
        *store.value_mut(params.pooler_weight) = Tensor::zeros(&[8, 8]);
        let mut tape = Tape::with_params(&store);
        let enc = Encoder { config: &cfg, params: &params };
        let cls = tape.constant(Tensor::ones(&[2, 8]));
        let y = enc.pooler(&mut tape, cls).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooler_gradient_check() {
        let (mut store, cfg, params) = tiny(EncoderBackend::BagOfEmbeddings);
        let cls = Tensor::randn(&[3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let ids = [params.pooler_weight, params.pooler_bias];
        let p2 = params.clone();
        let cfg2 = cfg.clone();
        let report = grad_check(&mut store, &ids, 1e-5, move |tape| {
            let enc = Encoder { config: &cfg2, params: &p2 };
            let x = tape.constant(cls.clone());
            let y = enc.pooler(tape, x)?;
            let w = tape.constant(Tensor::randn(&[3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
            let yw = tape.mul(y, w)?;
            Ok(tape.sum_all(yw))
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn pooled_label_vectors() {
        let mut tape = Tape::new();
        let toks = Tensor::randn(&[6, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let t = tape.constant(toks.clone());
        let pooled = pool_label_vectors(&mut tape, t, &[1..2, 3..5]).unwrap();
        let pv = tape.value(pooled);
        assert_eq!(pv.shape(), &[2, 4]);
        for j in 0..4 {
            assert_eq!(pv.at(&[0, j]), toks.at(&[1, j]));
            let mean = (toks.at(&[3, j]) + toks.at(&[4, j])) / 2.0;
            assert!((pv.at(&[1, j]) - mean).abs() < 1e-15);
        }
        assert!(pool_label_vectors(&mut tape, t, std::slice::from_ref(&(1..1))).is_err());
        assert!(pool_label_vectors(&mut tape, t, &[]).is_err());
    }

    #[test]
    fn dbpedia_label_sequence_pools_to_fourteen_rows() {
        use crate::text::{Document, LabelSet, Vocab};
        let labels = LabelSet::new(&crate::datasets::Dataset::DbPedia.default_labels()).unwrap();
        assert_eq!(labels.len(), 14);
        let vocab = Vocab::build(&[Document { text: "x".into(), label: 0 }], Some(&labels), 1, 100).unwrap();
        let seq = vocab.encode_label_sequence(&labels);
        let mut cfg = EncoderConfig::new(vocab.len());
        cfg.d = 8;
        cfg.n_heads = 2;
        cfg.ffn_dim = 16;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = EncoderParams::init(&mut store, &cfg, &mut rng);
        let mut tape = Tape::with_params(&store);
        let enc = Encoder { config: &cfg, params: &params };
        let le = enc.encode_labels_once(&mut tape, &seq, 3, false, &mut rng).unwrap();
        assert_eq!(tape.shape(le.vectors), &[3, 14, 8]);
    }

    #[test]
    fn broadcast_label_encoding_equals_stacked_copies() {
        let (store, cfg, params) = tiny(EncoderBackend::MiniTransformer);
        let seq = LabelSequence {
            ids: vec![2, 5, 4, 6, 7, 4, 8, 3],
            spans: vec![1..2, 3..5, 6..7],
        };
        let enc = Encoder { config: &cfg, params: &params };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::with_params(&store);
        let once = enc.encode_labels_once(&mut tape, &seq, 4, false, &mut rng).unwrap();
        let per = enc.encode_labels_per_sample(&mut tape, &seq, 4, false, &mut rng).unwrap();
        assert_eq!(tape.shape(once.vectors), &[4, 3, 8]);
        assert!(tape.value(once.vectors).max_abs_diff(tape.value(per.vectors)) < 1e-12);
        assert!(tape.value(once.global).max_abs_diff(tape.value(per.global)) < 1e-12);
        let single = tape.narrow(once.vectors, 0, 0, 1).unwrap();
        for r in 1..4 {
            let other = tape.narrow(once.vectors, 0, r, 1).unwrap();
            assert_eq!(tape.value(single), tape.value(other));
        }
    }

    #[test]
    fn shared_label_parameters_collect_gradient_from_every_sample() {
        let (store, cfg, params) = tiny(EncoderBackend::MiniTransformer);
        let seq = LabelSequence {
            ids: vec![2, 5, 4, 6, 3],
            spans: vec![1..2, 3..4],
        };
        let enc = Encoder { config: &cfg, params: &params };
        let grad_for = |k: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut tape = Tape::with_params(&store);
            let le = enc.encode_labels_once(&mut tape, &seq, k, false, &mut rng).unwrap();
            let s = tape.sum_all(le.vectors);
            tape.backward(s).unwrap();
            tape.param_grads()[params.token_embedding]
                .clone()
                .unwrap()
        };
        let g1 = grad_for(1);
        let g3 = grad_for(3);
        for (a, b) in g1.data().iter().zip(g3.data()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_encoder_gradient_check() {
        let (mut store, cfg, params) = tiny(EncoderBackend::MiniTransformer);
        let b = batch();
        let p2 = params.clone();
        let cfg2 = cfg.clone();
        let ids: Vec<ParamId> = store.ids().collect();
        let report = grad_check(&mut store, &ids, 1e-5, move |tape| {
            let enc = Encoder { config: &cfg2, params: &p2 };
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let out = enc.encode(tape, (&b).into(), true, &mut rng)?;
            let w = tape.constant(Tensor::randn(&[3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
            let g = tape.mul(out.global, w)?;
            let t = tape.tanh(out.tokens);
            let t = tape.sum_all(t);
            let g = tape.sum_all(g);
            tape.add(g, t)
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
