//! Add-k n-gram language model used to score insertion candidates.
//!
//! Sentences are padded with `order − 1` BOS markers and one EOS; the
//! conditional is `P(w | ctx) = (count(ctx·w) + k) / (count(ctx) + k·V')`
//! with `V' = |vocab| + 2` (EOS and UNK are always outcomes). Unseen
//! predicted words fall to UNK, so scoring never fails.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

pub const LM_BOS: &str = "<s>";
pub const LM_EOS: &str = "</s>";

/// Scoring contract for insertion-position selection. The pseudo-data
/// pipeline only needs a length-comparable sentence score, so any language
/// model satisfying this trait can replace the n-gram default.
pub trait InsertionScorer: Sync {
    /// Higher is better; comparable across candidates of different lengths.
    fn normalized_score(&self, sentence: &[String]) -> f64;
}

impl InsertionScorer for NgramLm {
    fn normalized_score(&self, sentence: &[String]) -> f64 {
        NgramLm::normalized_score(self, sentence)
    }
}

#[derive(Debug, Error)]
pub enum LmError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("order must be >= 1, got {0}")]
    BadOrder(usize),
    #[error("add_k must be > 0, got {0}")]
    BadAddK(f64),
    #[error("model io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt model dump: {0}")]
    Corrupt(String),
}

/// Trained add-k n-gram model. Immutable after training; safe to score from
/// many threads.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramLm {
    order: usize,
    add_k: f64,
    /// `grams[k-1]` holds k-gram counts for windows ending at a real
    /// position (a word or the sentence-final EOS).
    grams: Vec<HashMap<Vec<String>, u64>>,
    /// Number of prediction sites per (order−1)-length context, including
    /// contexts that contain BOS padding. Derived from the top-order table.
    context_totals: HashMap<Vec<String>, u64>,
    vocab: BTreeSet<String>,
}

fn padded(sentence: &[String], order: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(sentence.len() + order);
    for _ in 0..order.saturating_sub(1) {
        out.push(LM_BOS.to_string());
    }
    out.extend(sentence.iter().cloned());
    out.push(LM_EOS.to_string());
    out
}

impl NgramLm {
    pub fn train(sentences: &[Vec<String>], order: usize, add_k: f64) -> Result<Self, LmError> {
        if order < 1 {
            return Err(LmError::BadOrder(order));
        }
        if add_k <= 0.0 {
            return Err(LmError::BadAddK(add_k));
        }
        if sentences.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        let mut lm = NgramLm {
            order,
            add_k,
            grams: vec![HashMap::new(); order],
            context_totals: HashMap::new(),
            vocab: BTreeSet::new(),
        };
        for sentence in sentences {
            lm.add_sentence(sentence);
        }
        lm.rebuild_context_totals();
        Ok(lm)
    }

    fn add_sentence(&mut self, sentence: &[String]) {
        for w in sentence {
            // Literal marker strings in the data are treated as the markers.
            if w != LM_BOS && w != LM_EOS {
                self.vocab.insert(w.clone());
            }
        }
        let seq = padded(sentence, self.order);
        let first_real = self.order - 1;
        for j in first_real..seq.len() {
            for k in 1..=self.order {
                let gram = seq[j + 1 - k..=j].to_vec();
                *self.grams[k - 1].entry(gram).or_insert(0) += 1;
            }
        }
    }

    /// Every prediction site contributes exactly one top-order gram, so the
    /// per-context totals are the prefix sums of that table.
    fn rebuild_context_totals(&mut self) {
        self.context_totals.clear();
        for (gram, count) in &self.grams[self.order - 1] {
            let ctx = gram[..self.order - 1].to_vec();
            *self.context_totals.entry(ctx).or_insert(0) += count;
        }
    }

    /// Merge another shard trained with the same order and add_k.
    pub fn absorb(&mut self, other: NgramLm) {
        assert_eq!(self.order, other.order, "shard order mismatch");
        for (k, shard) in other.grams.into_iter().enumerate() {
            for (gram, count) in shard {
                *self.grams[k].entry(gram).or_insert(0) += count;
            }
        }
        self.vocab.extend(other.vocab);
        self.rebuild_context_totals();
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn add_k(&self) -> f64 {
        self.add_k
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    /// Outcome count for smoothing: vocabulary plus EOS and UNK.
    pub fn outcome_count(&self) -> usize {
        self.vocab.len() + 2
    }

    pub fn gram_count(&self, gram: &[String]) -> u64 {
        if gram.is_empty() || gram.len() > self.order {
            return 0;
        }
        self.grams[gram.len() - 1].get(gram).copied().unwrap_or(0)
    }

    fn context_total(&self, ctx: &[String]) -> u64 {
        self.context_totals.get(ctx).copied().unwrap_or(0)
    }

    /// Contexts with at least one stored continuation.
    pub fn contexts(&self) -> impl Iterator<Item = &Vec<String>> {
        self.context_totals.keys()
    }

    fn normalize_token(&self, tok: &str) -> String {
        if tok == LM_EOS || self.vocab.contains(tok) {
            tok.to_string()
        } else {
            // Unseen outcomes share the UNK slot; its stored count is zero
            // either way, but the mapping keeps semantics explicit.
            "<unk-lm>".to_string()
        }
    }

    /// Smoothed conditional `P(tok | ctx)`; `ctx` must have length
    /// `order − 1` (use BOS padding for sentence starts).
    pub fn conditional(&self, ctx: &[String], tok: &str) -> f64 {
        debug_assert_eq!(ctx.len(), self.order - 1);
        let tok = self.normalize_token(tok);
        let mut gram = ctx.to_vec();
        gram.push(tok);
        let count = self.gram_count(&gram) as f64;
        let total = self.context_total(ctx) as f64;
        let v = self.outcome_count() as f64;
        (count + self.add_k) / (total + self.add_k * v)
    }

    /// Sum of per-position log conditionals, EOS term included.
    pub fn log_prob(&self, sentence: &[String]) -> f64 {
        assert!(!sentence.is_empty(), "log_prob of an empty sentence");
        let seq = padded(sentence, self.order);
        let first_real = self.order - 1;
        let mut total = 0.0;
        for j in first_real..seq.len() {
            let ctx = &seq[j + 1 - self.order..j];
            total += self.conditional(ctx, &seq[j]).ln();
        }
        total
    }

    /// Length-normalized score for ranking insertions of different lengths:
    /// `log_prob / (|sentence| + 1)`, the +1 counting EOS.
    pub fn normalized_score(&self, sentence: &[String]) -> f64 {
        self.log_prob(sentence) / (sentence.len() as f64 + 1.0)
    }

    /// Versioned sorted-text dump: `k-gram<TAB>count`, grams space-joined.
    pub fn save(&self, path: &Path) -> Result<(), LmError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "crn-lm v1")?;
        writeln!(w, "order\t{}", self.order)?;
        writeln!(w, "add_k\t{}", self.add_k)?;
        for k in 1..=self.order {
            writeln!(w, "[{k}-grams]")?;
            let mut entries: Vec<(String, u64)> = self.grams[k - 1]
                .iter()
                .map(|(g, c)| (g.join(" "), *c))
                .collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            for (gram, count) in entries {
                writeln!(w, "{gram}\t{count}")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        let mut lines = BufReader::new(File::open(path)?).lines();
        let header = lines
            .next()
            .ok_or_else(|| LmError::Corrupt("empty file".into()))??;
        if header != "crn-lm v1" {
            return Err(LmError::Corrupt(format!("bad header {header:?}")));
        }
        let mut order = 0usize;
        let mut add_k = 0.0f64;
        let mut grams: Vec<HashMap<Vec<String>, u64>> = Vec::new();
        let mut current: Option<usize> = None;
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let k: usize = rest
                    .strip_suffix("-grams]")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| LmError::Corrupt(format!("bad section {line:?}")))?;
                current = Some(k);
                continue;
            }
            let (head, tail) = line
                .rsplit_once('\t')
                .ok_or_else(|| LmError::Corrupt(format!("bad line {line:?}")))?;
            match current {
                None => match head {
                    "order" => {
                        order = tail
                            .parse()
                            .map_err(|_| LmError::Corrupt("bad order".into()))?;
                        grams = vec![HashMap::new(); order];
                    }
                    "add_k" => {
                        add_k = tail
                            .parse()
                            .map_err(|_| LmError::Corrupt("bad add_k".into()))?;
                    }
                    _ => return Err(LmError::Corrupt(format!("bad header line {line:?}"))),
                },
                Some(k) => {
                    let gram: Vec<String> = head.split(' ').map(str::to_string).collect();
                    if gram.len() != k || k > order {
                        return Err(LmError::Corrupt(format!("bad gram {line:?}")));
                    }
                    let count: u64 = tail
                        .parse()
                        .map_err(|_| LmError::Corrupt("bad count".into()))?;
                    grams[k - 1].insert(gram, count);
                }
            }
        }
        if order == 0 {
            return Err(LmError::Corrupt("missing order".into()));
        }
        let mut vocab = BTreeSet::new();
        for gram in grams[0].keys() {
            let w = &gram[0];
            if w != LM_EOS && w != LM_BOS {
                vocab.insert(w.clone());
            }
        }
        let mut lm = NgramLm {
            order,
            add_k,
            grams,
            context_totals: HashMap::new(),
            vocab,
        };
        lm.rebuild_context_totals();
        Ok(lm)
    }
}
