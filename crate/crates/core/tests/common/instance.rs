//! Random small head instances and helpers to run them through the tape.

#![allow(dead_code)]

use idea_core::autodiff::{Tape, Tensor};
use idea_core::head::{label_attention, similarity_features, text_attention, weighted_features, GammaMode};
use rand::Rng;

use super::oracle::Mat;

pub struct HeadInstance {
    pub k: usize,
    pub n: usize,
    pub l: usize,
    pub d: usize,
    pub tokens: Tensor,
    pub word_mask: Vec<bool>,
    pub m_global: Tensor,
    pub labels: Tensor,
    pub t_global: Tensor,
    pub w_m: Tensor,
    pub b_m: f64,
    pub w_t: Tensor,
    pub b_t: f64,
}

/// `K ≤ 4`, `N ≤ 8`, `L ≤ 5`, `d ≤ 8`; every row keeps at least one word.
pub fn random_instance<R: Rng>(rng: &mut R) -> HeadInstance {
    let k = rng.random_range(1..=4);
    let n = rng.random_range(1..=8);
    let l = rng.random_range(1..=5);
    let d = rng.random_range(1..=8);
    let mut word_mask = vec![false; k * n];
    for r in 0..k {
        let len = rng.random_range(1..=n);
        word_mask[r * n..r * n + len].fill(true);
    }
    let scale = rng.random_range(0.1..2.0);
    HeadInstance {
        k,
        n,
        l,
        d,
        tokens: Tensor::randn(&[k, n, d], scale, rng),
        word_mask,
        m_global: Tensor::uniform(&[k, d], -1.0, 1.0, rng),
        labels: Tensor::randn(&[k, l, d], scale, rng),
        t_global: Tensor::uniform(&[k, d], -1.0, 1.0, rng),
        w_m: Tensor::randn(&[d, d], 1.0, rng),
        b_m: rng.random_range(-1.0..1.0),
        w_t: Tensor::randn(&[d, d], 1.0, rng),
        b_t: rng.random_range(-1.0..1.0),
    }
}

pub struct HeadOutputs {
    pub alpha: Tensor,
    pub beta: Tensor,
    pub c: Tensor,
    pub s: Tensor,
    pub p: Tensor,
    pub d: Tensor,
    pub gamma: Tensor,
    pub eta: Tensor,
    pub p_weighted: Tensor,
    pub d_weighted: Tensor,
}

pub fn run_head(inst: &HeadInstance) -> HeadOutputs {
    let mut tape = Tape::new();
    let x = tape.constant(inst.tokens.clone());
    let mg = tape.constant(inst.m_global.clone());
    let lv = tape.constant(inst.labels.clone());
    let tg = tape.constant(inst.t_global.clone());
    let wm = tape.constant(inst.w_m.clone());
    let bm = tape.constant(Tensor::scalar(inst.b_m));
    let wt = tape.constant(inst.w_t.clone());
    let bt = tape.constant(Tensor::scalar(inst.b_t));
    let text = text_attention(&mut tape, x, mg, wm, bm, &inst.word_mask).unwrap();
    let label = label_attention(&mut tape, lv, tg, wt, bt).unwrap();
    let (p, d) = similarity_features(&mut tape, text.pooled, label.pooled).unwrap();
    let w = weighted_features(&mut tape, p, d, GammaMode::PerSample).unwrap();
    let v = |x| tape.value(x).clone();
    HeadOutputs {
        alpha: v(text.weights),
        beta: v(label.weights),
        c: v(text.pooled),
        s: v(label.pooled),
        p: v(p),
        d: v(d),
        gamma: v(w.gamma),
        eta: v(w.eta),
        p_weighted: v(w.p_weighted),
        d_weighted: v(w.d_weighted),
    }
}

pub fn to_mat(t: &Tensor) -> Mat {
    let cols = t.shape()[t.rank() - 1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn to_mat3(t: &Tensor) -> Vec<Mat> {
    let [k, n, d] = t.shape()[..] else { panic!("rank 3 expected") };
    (0..k)
        .map(|i| (0..n).map(|j| t.data()[(i * n + j) * d..(i * n + j + 1) * d].to_vec()).collect())
        .collect()
}

pub fn mask_rows(mask: &[bool], n: usize) -> Vec<Vec<bool>> {
    mask.chunks(n).map(<[bool]>::to_vec).collect()
}

pub fn max_diff(t: &Tensor, m: &Mat) -> f64 {
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    assert_eq!(flat.len(), t.numel());
    t.data().iter().zip(&flat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Largest deviation of the head from the scalar oracle on one instance.
pub fn oracle_gap(inst: &HeadInstance) -> f64 {
    use super::oracle;
    let out = run_head(inst);
    let keep = mask_rows(&inst.word_mask, inst.n);
    let (alpha, c) = oracle::attention(
        &to_mat3(&inst.tokens),
        &to_mat(&inst.m_global),
        &to_mat(&inst.w_m),
        inst.b_m,
        Some(&keep),
    );
    let (beta, s) = oracle::attention(
        &to_mat3(&inst.labels),
        &to_mat(&inst.t_global),
        &to_mat(&inst.w_t),
        inst.b_t,
        None,
    );
    // downstream stages are checked on the engine's own c and s so each
    // comparison isolates one operation
    let (p, d) = oracle::similarity(&to_mat(&out.c), &to_mat(&out.s));
    let (pw, dw, gamma) = oracle::weighted(&to_mat(&out.p), &to_mat(&out.d));
    [
        max_diff(&out.alpha, &alpha),
        max_diff(&out.c, &c),
        max_diff(&out.beta, &beta),
        max_diff(&out.s, &s),
        max_diff(&out.p, &p),
        max_diff(&out.d, &d),
        max_diff(&out.p_weighted, &pw),
        max_diff(&out.d_weighted, &dw),
        max_diff(&out.gamma, &gamma.iter().map(|&g| vec![g]).collect()),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}
