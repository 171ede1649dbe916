//! Synthetic keyword corpora for smoke tests and ablation sweeps.
//!
//! Class `c` owns a set of keyword tokens: the tokens of its label name plus
//! `c{c}w{i}` markers. A document mixes keywords of its class with shared
//! noise tokens `n{i}`. Optional confusers are keywords borrowed from a
//! different class, which makes bag-of-words evidence unreliable while the
//! label-name tokens stay informative.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::text::{Document, LabelSet};

const NAMES: [&str; 20] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet", "kilo", "lima",
    "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Words per document.
    pub doc_len: usize,
    /// Marker keywords per class, in addition to the label-name token.
    pub keywords_per_class: usize,
    /// Size of the shared noise vocabulary.
    pub noise_vocab: usize,
    /// Fraction of words drawn from the document's own class keywords.
    pub keyword_rate: f64,
    /// Probability that a class keyword is the label-name token itself.
    pub label_overlap: f64,
    /// Fraction of words drawn from another class's marker keywords.
    pub confuser_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 3,
            train_size: 300,
            test_size: 150,
            doc_len: 12,
            keywords_per_class: 4,
            noise_vocab: 40,
            keyword_rate: 0.3,
            label_overlap: 0.5,
            confuser_rate: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub labels: LabelSet,
    pub train: Vec<Document>,
    pub test: Vec<Document>,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let rate = |x: f64| (0.0..=1.0).contains(&x);
        let ok = self.num_classes >= 1
            && self.doc_len >= 1
            && self.noise_vocab >= 1
            && rate(self.keyword_rate)
            && rate(self.label_overlap)
            && rate(self.confuser_rate)
            && self.keyword_rate + self.confuser_rate <= 1.0
            && (self.confuser_rate == 0.0 || (self.num_classes > 1 && self.keywords_per_class > 0));
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid synthetic corpus settings {self:?}")))
        }
    }

    pub fn label_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|c| match NAMES.get(c) {
                Some(n) => n.to_string(),
                None => format!("topic{c}"),
            })
            .collect()
    }

    pub fn generate(&self) -> Result<SyntheticCorpus> {
        self.validate()?;
        let names = self.label_names();
        let labels = LabelSet::new(&names)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let markers: Vec<Vec<String>> = (0..self.num_classes)
            .map(|c| (0..self.keywords_per_class).map(|i| format!("c{c}w{i}")).collect())
            .collect();
        let make = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Document> {
            // balanced: class of document i is i mod L, then shuffled
            let mut docs: Vec<Document> = (0..n)
                .map(|i| {
                    let c = i % self.num_classes;
                    let words: Vec<String> = (0..self.doc_len)
                        .map(|_| self.word(c, &names, &markers, rng))
                        .collect();
                    Document { text: words.join(" "), label: c }
                })
                .collect();
            rand::seq::SliceRandom::shuffle(docs.as_mut_slice(), rng);
            docs
        };
        let train = make(self.train_size, &mut rng);
        let test = make(self.test_size, &mut rng);
        Ok(SyntheticCorpus { labels, train, test })
    }

    fn word(&self, c: usize, names: &[String], markers: &[Vec<String>], rng: &mut ChaCha8Rng) -> String {
        let u: f64 = rng.random();
        if u < self.keyword_rate {
            if markers[c].is_empty() || rng.random::<f64>() < self.label_overlap {
                names[c].clone()
            } else {
                markers[c].choose(rng).expect("non-empty").clone()
            }
        } else if u < self.keyword_rate + self.confuser_rate {
            let other = (c + rng.random_range(1..self.num_classes)) % self.num_classes;
            markers[other].choose(rng).expect("non-empty").clone()
        } else {
            format!("n{}", rng.random_range(0..self.noise_vocab))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_sizes() {
        let cfg = SyntheticConfig {
            train_size: 300,
            test_size: 30,
            ..SyntheticConfig::default()
        };
        let corpus = cfg.generate().unwrap();
        assert_eq!(corpus.train.len(), 300);
        for c in 0..3 {
            assert_eq!(corpus.train.iter().filter(|d| d.label == c).count(), 100);
            assert_eq!(corpus.test.iter().filter(|d| d.label == c).count(), 10);
        }
        assert_eq!(corpus.labels.names(), &["alpha", "bravo", "charlie"]);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SyntheticConfig::default();
        assert_eq!(cfg.generate().unwrap().train, cfg.generate().unwrap().train);
        let other = SyntheticConfig { seed: 1, ..cfg };
        assert_ne!(other.generate().unwrap().train, SyntheticConfig::default().generate().unwrap().train);
    }

    #[test]
    fn label_names_appear_only_in_their_class() {
        let corpus = SyntheticConfig {
            confuser_rate: 0.3,
            ..SyntheticConfig::default()
        }
        .generate()
        .unwrap();
        let names = corpus.labels.names().to_vec();
        let mut hits = 0;
        for d in &corpus.train {
            for (c, n) in names.iter().enumerate() {
                if d.text.split(' ').any(|w| w == n) {
                    assert_eq!(c, d.label);
                    hits += 1;
                }
            }
        }
        assert!(hits > 100);
    }

    #[test]
    fn invalid_rates_rejected() {
        let cfg = SyntheticConfig {
            keyword_rate: 0.8,
            confuser_rate: 0.5,
            ..SyntheticConfig::default()
        };
        assert!(cfg.generate().is_err());
    }
}
