//! Accuracy and macro-averaged precision, recall and F1.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ClassCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// A class with no predictions (or no gold samples) scores 0 for the
/// undefined ratio.
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassCounts>,
    pub n_samples: usize,
}

impl Metrics {
    pub fn from_predictions(gold: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if gold.is_empty() {
            return Err(Error::Empty { op: "metrics" });
        }
        if gold.len() != predicted.len() {
            return Err(Error::shape("metrics", &[gold.len()], &[predicted.len()]));
        }
        let mut per_class = vec![ClassCounts::default(); num_classes];
        for (&g, &p) in gold.iter().zip(predicted) {
            for (i, size) in [(g, num_classes), (p, num_classes)] {
                if i >= size {
                    return Err(Error::IndexOutOfRange { op: "metrics", index: i, size });
                }
            }
            if g == p {
                per_class[g].tp += 1;
            } else {
                per_class[p].fp += 1;
                per_class[g].fn_ += 1;
            }
        }
        Ok(Self::from_counts(per_class, gold.len()))
    }

    pub fn from_counts(per_class: Vec<ClassCounts>, n_samples: usize) -> Self {
        let l = per_class.len().max(1) as f64;
        let mean = |f: fn(&ClassCounts) -> f64| per_class.iter().map(f).sum::<f64>() / l;
        Metrics {
            accuracy: ratio(per_class.iter().map(|c| c.tp).sum(), n_samples),
            macro_precision: mean(ClassCounts::precision),
            macro_recall: mean(ClassCounts::recall),
            macro_f1: mean(ClassCounts::f1),
            per_class,
            n_samples,
        }
    }

    /// `key=value` lines with every key prefixed by `prefix`.
    pub fn write_report(&self, prefix: &str, out: &mut String) {
        let _ = writeln!(out, "{prefix}accuracy={:.6}", self.accuracy);
        let _ = writeln!(out, "{prefix}macro_precision={:.6}", self.macro_precision);
        let _ = writeln!(out, "{prefix}macro_recall={:.6}", self.macro_recall);
        let _ = writeln!(out, "{prefix}macro_f1={:.6}", self.macro_f1);
        let _ = writeln!(out, "{prefix}n_samples={}", self.n_samples);
        for (i, c) in self.per_class.iter().enumerate() {
            let _ = writeln!(out, "{prefix}class{i}.tp={}", c.tp);
            let _ = writeln!(out, "{prefix}class{i}.fp={}", c.fp);
            let _ = writeln!(out, "{prefix}class{i}.fn={}", c.fn_);
        }
    }
}
