//! Tokenization, vocabulary, label sequences, CSV ingestion, stratified
//! splitting and dynamic-padding batches.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
const SPECIALS: [&str; 4] = [PAD, UNK, CLS, SEP];

/// Separator placed between label names in the joint label sequence.
pub const LABEL_SEPARATOR: &str = ",";

pub const DEFAULT_MAX_LEN: usize = 128;

/// Lowercase, split on whitespace, and emit every non-alphanumeric character
/// as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
        } else if c.is_alphanumeric() {
            word.push(c);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            tokens.push(c.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub text: String,
    pub label: usize,
}

/// Ordered class names plus their token positions in the joint label
/// sequence `[CLS] name₁ , name₂ , … [SEP]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
    tokens: Vec<Vec<String>>,
}

impl LabelSet {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidArgument("label set is empty".into()));
        }
        let mut tokens = Vec::with_capacity(names.len());
        for n in names {
            let t = tokenize(n.as_ref());
            if t.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "label name {:?} has no tokens",
                    n.as_ref()
                )));
            }
            tokens.push(t);
        }
        Ok(LabelSet {
            names: names.iter().map(|n| n.as_ref().to_string()).collect(),
            tokens,
        })
    }

    /// Parse a comma-separated list such as `"world,sports,business,sci tech"`.
    pub fn parse(list: &str) -> Result<Self> {
        let names: Vec<&str> = list.split(',').map(str::trim).collect();
        Self::new(&names)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name_tokens(&self) -> &[Vec<String>] {
        &self.tokens
    }

    /// Tokens the label sequence needs, which the vocabulary must contain.
    pub fn required_tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens
            .iter()
            .flatten()
            .map(String::as_str)
            .chain((self.names.len() > 1).then_some(LABEL_SEPARATOR))
    }
}

/// Encoded label sequence with one `[start, end)` token span per class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSequence {
    pub ids: Vec<u32>,
    pub spans: Vec<Range<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut v = Vocab {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for t in SPECIALS.iter().map(|s| s.to_string()).chain(tokens) {
            if v.token_to_id.contains_key(&t) {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token {t:?}")));
            }
            v.token_to_id.insert(t.clone(), v.id_to_token.len() as u32);
            v.id_to_token.push(t);
        }
        Ok(v)
    }

    /// Build from a corpus. Tokens are ordered by descending frequency then
    /// lexicographically; those under `min_freq` or past `max_size` are left
    /// out (and will encode as UNK). Label tokens are always appended.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a Document>,
        labels: Option<&LabelSet>,
        min_freq: usize,
        max_size: usize,
    ) -> Result<Self> {
        if min_freq < 1 {
            return Err(Error::InvalidArgument("min_freq must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut n_docs = 0;
        for doc in corpus {
            n_docs += 1;
            for t in tokenize(&doc.text) {
                *counts.entry(t).or_default() += 1;
            }
        }
        if n_docs == 0 {
            return Err(Error::Empty { op: "build_vocab" });
        }
        for s in SPECIALS {
            counts.remove(s);
        }
        let by_rank = |a: &(String, usize), b: &(String, usize)| b.1.cmp(&a.1).then(a.0.cmp(&b.0));
        let mut ranked: Vec<(String, usize)> =
            counts.iter().map(|(t, &c)| (t.clone(), c)).collect();
        ranked.sort_by(by_rank);
        let mut chosen: Vec<String> = ranked
            .into_iter()
            .filter(|(_, c)| *c >= min_freq)
            .take(max_size)
            .map(|(t, _)| t)
            .collect();
        if let Some(labels) = labels {
            let have: HashSet<String> = chosen.iter().cloned().collect();
            let mut forced: Vec<(String, usize)> = labels
                .required_tokens()
                .filter(|t| !have.contains(*t))
                .map(|t| (t.to_string(), counts.get(t).copied().unwrap_or(0)))
                .collect();
            forced.sort_by(by_rank);
            forced.dedup();
            chosen.extend(forced.into_iter().map(|(t, _)| t));
        }
        Self::from_tokens(chosen)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// `[CLS] + ids (truncated to max_len) + [SEP]`.
    pub fn encode_document(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids = vec![CLS_ID];
        ids.extend(tokenize(text).iter().take(max_len).map(|t| self.id(t)));
        ids.push(SEP_ID);
        ids
    }

    pub fn encode_label_sequence(&self, labels: &LabelSet) -> LabelSequence {
        let mut ids = vec![CLS_ID];
        let mut spans = Vec::with_capacity(labels.len());
        for (i, toks) in labels.name_tokens().iter().enumerate() {
            if i > 0 {
                ids.push(self.id(LABEL_SEPARATOR));
            }
            let start = ids.len();
            ids.extend(toks.iter().map(|t| self.id(t)));
            spans.push(start..ids.len());
        }
        ids.push(SEP_ID);
        LabelSequence { ids, spans }
    }

    /// One token per line in id order; the first four lines are the specials.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for t in &self.id_to_token {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
        let mut tokens = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
            if i < SPECIALS.len() {
                if line != SPECIALS[i] {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i as u64 + 1,
                        message: format!("expected special token {}, found {line:?}", SPECIALS[i]),
                    });
                }
            } else {
                tokens.push(line);
            }
        }
        Self::from_tokens(tokens)
    }
}

/// Read a headerless CSV of `class_index(1-based), text, [text, …]` rows.
pub fn load_csv(path: &Path, num_classes: usize) -> Result<Vec<Document>> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    read_csv(file, path, num_classes)
}

pub(crate) fn read_csv(
    reader: impl std::io::Read,
    path: &Path,
    num_classes: usize,
) -> Result<Vec<Document>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut docs = Vec::new();
    for rec in rdr.records() {
        let parse_err = |line: u64, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() < 2 {
            return Err(parse_err(line, "expected a class index and at least one text field".into()));
        }
        let class: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("invalid class index {:?}", &rec[0])))?;
        if class < 1 || class > num_classes {
            return Err(parse_err(
                line,
                format!("class index {class} outside 1..={num_classes}"),
            ));
        }
        let text = rec.iter().skip(1).collect::<Vec<_>>().join(" ");
        docs.push(Document {
            text,
            label: class - 1,
        });
    }
    Ok(docs)
}

/// Write documents in the same CSV layout [`load_csv`] reads.
pub fn write_csv(path: &Path, docs: &[Document]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Always)
        .from_path(path)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    for d in docs {
        w.write_record([(d.label + 1).to_string(), d.text.clone()])
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Per-class holdout quotas: floor of the proportional share, with the
/// remaining slots going to the largest fractional remainders (ties to the
/// lower class id).
fn stratified_quotas(class_counts: &BTreeMap<usize, usize>, total: usize, holdout: usize) -> BTreeMap<usize, usize> {
    let mut quotas = BTreeMap::new();
    let mut remainders = Vec::new();
    let mut assigned = 0;
    for (&c, &n) in class_counts {
        let exact = n as f64 * holdout as f64 / total as f64;
        let base = exact.floor() as usize;
        quotas.insert(c, base);
        assigned += base;
        remainders.push((exact - base as f64, c));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, c) in remainders.into_iter().take(holdout - assigned) {
        *quotas.get_mut(&c).unwrap() += 1;
    }
    quotas
}

/// Split `docs` into `(train, holdout)` with class proportions in the holdout
/// matching the full set within one document per class. Both halves keep the
/// input order.
pub fn stratified_split(
    docs: &[Document],
    holdout_size: usize,
    seed: u64,
) -> Result<(Vec<Document>, Vec<Document>)> {
    if holdout_size > docs.len() {
        return Err(Error::InvalidArgument(format!(
            "holdout of {holdout_size} exceeds corpus of {}",
            docs.len()
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, d) in docs.iter().enumerate() {
        by_class.entry(d.label).or_default().push(i);
    }
    let counts = by_class.iter().map(|(&c, v)| (c, v.len())).collect();
    let quotas = stratified_quotas(&counts, docs.len(), holdout_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_holdout = vec![false; docs.len()];
    for (c, mut idx) in by_class {
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(quotas[&c]) {
            in_holdout[i] = true;
        }
    }
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for (d, h) in docs.iter().zip(in_holdout) {
        if h {
            holdout.push(d.clone());
        } else {
            train.push(d.clone());
        }
    }
    Ok((train, holdout))
}

/// Stratified subsample of at most `limit` documents.
pub fn stratified_subsample(docs: &[Document], limit: usize, seed: u64) -> Result<Vec<Document>> {
    if limit >= docs.len() {
        return Ok(docs.to_vec());
    }
    Ok(stratified_split(docs, limit, seed)?.1)
}

/// A padded mini-batch. `token_ids` and `pad_mask` are `rows × width`
/// row-major with `width = longest document in the batch + 2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub token_ids: Vec<u32>,
    pub pad_mask: Vec<bool>,
    pub gold: Vec<usize>,
    pub rows: usize,
    pub width: usize,
}

impl Batch {
    pub fn from_encoded(encoded: &[Vec<u32>], gold: Vec<usize>) -> Self {
        assert_eq!(encoded.len(), gold.len());
        let width = encoded.iter().map(Vec::len).max().unwrap_or(2);
        let rows = encoded.len();
        let mut token_ids = vec![PAD_ID; rows * width];
        let mut pad_mask = vec![false; rows * width];
        for (r, ids) in encoded.iter().enumerate() {
            token_ids[r * width..r * width + ids.len()].copy_from_slice(ids);
            pad_mask[r * width..r * width + ids.len()].fill(true);
        }
        Batch {
            token_ids,
            pad_mask,
            gold,
            rows,
            width,
        }
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.token_ids[r * self.width..(r + 1) * self.width]
    }

    /// Word tokens in row `r` (between CLS and SEP).
    pub fn word_count(&self, r: usize) -> usize {
        self.pad_mask[r * self.width..(r + 1) * self.width]
            .iter()
            .filter(|&&m| m)
            .count()
            - 2
    }

    /// Longest word count in the batch (`width - 2`).
    pub fn max_words(&self) -> usize {
        self.width - 2
    }

    /// `rows × max_words` mask marking real word positions 1..=len.
    pub fn word_mask(&self) -> Vec<bool> {
        let n = self.max_words();
        let mut m = vec![false; self.rows * n];
        for r in 0..self.rows {
            m[r * n..r * n + self.word_count(r)].fill(true);
        }
        m
    }

    /// Single-row batch holding row `r` of this batch, re-padded to its own
    /// length.
    pub fn select(&self, r: usize) -> Batch {
        let len = self.word_count(r) + 2;
        Batch::from_encoded(&[self.row(r)[..len].to_vec()], vec![self.gold[r]])
    }
}

/// Group documents into batches padded to each batch's longest document.
/// The final partial batch is kept.
pub fn make_batches(
    docs: &[Document],
    vocab: &Vocab,
    batch_size: usize,
    max_len: usize,
    shuffle: bool,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let encoded: Vec<Vec<u32>> = chunk
                .iter()
                .map(|&i| vocab.encode_document(&docs[i].text, max_len))
                .collect();
            Batch::from_encoded(&encoded, chunk.iter().map(|&i| docs[i].label).collect())
        })
        .collect())
}
