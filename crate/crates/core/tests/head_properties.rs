mod common;

use common::instance::{oracle_gap, random_instance, run_head};
use idea_core::autodiff::{Tape, Tensor};
use idea_core::head::{weighted_features, GammaMode};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn vectorized_head_matches_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..100 {
        let inst = random_instance(&mut rng);
        let gap = oracle_gap(&inst);
        assert!(gap < 1e-10, "instance {i}: gap {gap:e}");
    }
}

#[test]
fn attention_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let inst = random_instance(&mut rng);
        let out = run_head(&inst);
        for (r, row) in out.alpha.data().chunks(inst.n).enumerate() {
            let mask = &inst.word_mask[r * inst.n..(r + 1) * inst.n];
            assert!(row.iter().all(|&a| (0.0..=1.0).contains(&a)));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (a, m) in row.iter().zip(mask) {
                if !m {
                    assert_eq!(*a, 0.0);
                }
            }
        }
        for row in out.beta.data().chunks(inst.l) {
            assert!(row.iter().all(|&b| (0.0..=1.0).contains(&b)));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for (g, e) in out.gamma.data().iter().zip(out.eta.data()) {
            assert!(*g > 0.0 && *g < 1.0);
            assert_eq!(g + e, 1.0);
        }
    }
}

#[test]
fn pooled_vectors_lie_in_the_convex_hull() {
    // a convex combination never leaves the per-coordinate range of its inputs
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let inst = random_instance(&mut rng);
        let out = run_head(&inst);
        let (n, d) = (inst.n, inst.d);
        for k in 0..inst.k {
            for a in 0..d {
                let vals: Vec<f64> = (0..n)
                    .filter(|&j| inst.word_mask[k * n + j])
                    .map(|j| inst.tokens.at(&[k, j, a]))
                    .collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let c = out.c.at(&[k, a]);
                assert!(c >= lo - 1e-12 && c <= hi + 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn gamma_depends_only_on_means(
        p in prop::collection::vec(-3.0f64..3.0, 6),
        d in prop::collection::vec(0.0f64..3.0, 6),
        rot in 0usize..6,
    ) {
        let gamma = |p: &[f64], d: &[f64]| {
            let mut tape = Tape::new();
            let pv = tape.constant(Tensor::new(vec![1, 6], p.to_vec()).unwrap());
            let dv = tape.constant(Tensor::new(vec![1, 6], d.to_vec()).unwrap());
            let w = weighted_features(&mut tape, pv, dv, GammaMode::PerSample).unwrap();
            tape.value(w.gamma).item()
        };
        let mut pr = p.clone();
        let mut dr = d.clone();
        pr.rotate_left(rot);
        dr.rotate_left(rot);
        prop_assert!((gamma(&p, &d) - gamma(&pr, &dr)).abs() < 1e-12);
    }
}
