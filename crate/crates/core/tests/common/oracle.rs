//! Scalar reference implementations of the head written with explicit loops
//! over nested `Vec`s, sharing no code with the tensor engine.

#![allow(dead_code, clippy::needless_range_loop)]

pub type Mat = Vec<Vec<f64>>;

/// `weights[k][j] ∝ exp(tanh(Σ_a Σ_b x[k][j][a] · w[a][b] · g[k][b] + bias))`
/// over kept positions, `pooled[k] = Σ_j weights[k][j] · x[k][j]`.
pub fn attention(x: &[Mat], g: &Mat, w: &Mat, bias: f64, keep: Option<&[Vec<bool>]>) -> (Mat, Mat) {
    let k = x.len();
    let d = g[0].len();
    let mut weights = Vec::with_capacity(k);
    let mut pooled = Vec::with_capacity(k);
    for s in 0..k {
        let n = x[s].len();
        let mut scores = vec![0.0; n];
        for j in 0..n {
            let mut acc = 0.0;
            for a in 0..d {
                for b in 0..d {
                    acc += x[s][j][a] * w[a][b] * g[s][b];
                }
            }
            scores[j] = (acc + bias).tanh();
        }
        let kept = |j: usize| keep.is_none_or(|m| m[s][j]);
        let mut denom = 0.0;
        for j in 0..n {
            if kept(j) {
                denom += scores[j].exp();
            }
        }
        let mut row = vec![0.0; n];
        for j in 0..n {
            if kept(j) {
                row[j] = scores[j].exp() / denom;
            }
        }
        let mut c = vec![0.0; d];
        for j in 0..n {
            for a in 0..d {
                c[a] += row[j] * x[s][j][a];
            }
        }
        weights.push(row);
        pooled.push(c);
    }
    (weights, pooled)
}

pub fn similarity(c: &Mat, s: &Mat) -> (Mat, Mat) {
    let mut p = c.clone();
    let mut d = c.clone();
    for i in 0..c.len() {
        for j in 0..c[i].len() {
            p[i][j] = c[i][j] * s[i][j];
            d[i][j] = (c[i][j] - s[i][j]).abs();
        }
    }
    (p, d)
}

/// Per-sample `γ_k = exp(mean d_k) / (exp(mean p_k) + exp(mean d_k))`.
pub fn weighted(p: &Mat, d: &Mat) -> (Mat, Mat, Vec<f64>) {
    let mut pw = p.clone();
    let mut dw = d.clone();
    let mut gammas = Vec::new();
    for k in 0..p.len() {
        let n = p[k].len() as f64;
        let mp: f64 = p[k].iter().sum::<f64>() / n;
        let md: f64 = d[k].iter().sum::<f64>() / n;
        let gamma = md.exp() / (mp.exp() + md.exp());
        for j in 0..p[k].len() {
            pw[k][j] = gamma * p[k][j];
            dw[k][j] = (1.0 - gamma) * d[k][j];
        }
        gammas.push(gamma);
    }
    (pw, dw, gammas)
}
