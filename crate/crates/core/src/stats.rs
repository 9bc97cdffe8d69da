//! Co-occurrence statistics and PMI contribution scores for keyword
//! extraction.
//!
//! Counting is session-level presence: a word pair (w_c, w_t) counts once
//! per session where w_c appears anywhere in the context and w_t appears in
//! the last utterance (q-side) or the response (r-side), regardless of how
//! often either repeats. PMI is `ln( p(w_c|w_t) / p_c(w_c) )` with
//! `p(w_c|w_t) = n(w_c,w_t)/n(w_t)` and `p_c(w_c) = n(w_c)/N_sessions`;
//! an epsilon is added to the pair count so zero co-occurrence stays finite.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::corpus::DialogueSession;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("word {0:?} was never seen on the required side")]
    UnseenWord(String),
    #[error("word {word:?} has count {count} below min_count {min_count}")]
    RareWord {
        word: String,
        count: u64,
        min_count: u64,
    },
    #[error("cannot build a table from an empty corpus")]
    EmptyCorpus,
    #[error("table io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt table dump: {0}")]
    Corrupt(String),
}

/// Which target side a PMI query concerns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Q,
    R,
}

#[derive(Debug, Clone)]
pub struct StatsConfig {
    /// Words rarer than this on either side of a pair are refused.
    pub min_count: u64,
    /// Smoothing added to pair counts.
    pub epsilon: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            min_count: 2,
            epsilon: 1e-9,
        }
    }
}

/// Session-level presence counts backing all PMI quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceTable {
    n_sessions: u64,
    context_tokens_total: u64,
    ctx_counts: HashMap<String, u64>,
    q_counts: HashMap<String, u64>,
    r_counts: HashMap<String, u64>,
    pair_q: HashMap<(String, String), u64>,
    pair_r: HashMap<(String, String), u64>,
    min_count: u64,
    epsilon: f64,
}

impl CooccurrenceTable {
    pub fn build(corpus: &[DialogueSession], config: &StatsConfig) -> Result<Self, StatsError> {
        if corpus.is_empty() {
            return Err(StatsError::EmptyCorpus);
        }
        let mut table = CooccurrenceTable {
            n_sessions: 0,
            context_tokens_total: 0,
            ctx_counts: HashMap::new(),
            q_counts: HashMap::new(),
            r_counts: HashMap::new(),
            pair_q: HashMap::new(),
            pair_r: HashMap::new(),
            min_count: config.min_count,
            epsilon: config.epsilon,
        };
        for session in corpus {
            table.add_session(session);
        }
        Ok(table)
    }

    fn add_session(&mut self, session: &DialogueSession) {
        self.n_sessions += 1;
        self.context_tokens_total += session
            .context
            .iter()
            .map(|u| u.len() as u64)
            .sum::<u64>();
        let ctx_set: HashSet<&String> = session.context.iter().flatten().collect();
        let q_set: HashSet<&String> = session.last.iter().collect();
        let r_set: HashSet<&String> = session.response.iter().collect();
        for w in &ctx_set {
            *self.ctx_counts.entry((*w).clone()).or_insert(0) += 1;
        }
        for w in &q_set {
            *self.q_counts.entry((*w).clone()).or_insert(0) += 1;
        }
        for w in &r_set {
            *self.r_counts.entry((*w).clone()).or_insert(0) += 1;
        }
        for wc in &ctx_set {
            for wq in &q_set {
                *self
                    .pair_q
                    .entry(((*wc).clone(), (*wq).clone()))
                    .or_insert(0) += 1;
            }
            for wr in &r_set {
                *self
                    .pair_r
                    .entry(((*wc).clone(), (*wr).clone()))
                    .or_insert(0) += 1;
            }
        }
    }

    /// Merge another shard's counts into this table. Counts form a
    /// commutative monoid, so shard order does not matter.
    pub fn absorb(&mut self, other: CooccurrenceTable) {
        self.n_sessions += other.n_sessions;
        self.context_tokens_total += other.context_tokens_total;
        for (k, v) in other.ctx_counts {
            *self.ctx_counts.entry(k).or_insert(0) += v;
        }
        for (k, v) in other.q_counts {
            *self.q_counts.entry(k).or_insert(0) += v;
        }
        for (k, v) in other.r_counts {
            *self.r_counts.entry(k).or_insert(0) += v;
        }
        for (k, v) in other.pair_q {
            *self.pair_q.entry(k).or_insert(0) += v;
        }
        for (k, v) in other.pair_r {
            *self.pair_r.entry(k).or_insert(0) += v;
        }
    }

    pub fn n_sessions(&self) -> u64 {
        self.n_sessions
    }

    pub fn context_tokens_total(&self) -> u64 {
        self.context_tokens_total
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn context_count(&self, w: &str) -> u64 {
        self.ctx_counts.get(w).copied().unwrap_or(0)
    }

    pub fn target_count(&self, w: &str, side: Side) -> u64 {
        let map = match side {
            Side::Q => &self.q_counts,
            Side::R => &self.r_counts,
        };
        map.get(w).copied().unwrap_or(0)
    }

    pub fn pair_count(&self, w_c: &str, w_t: &str, side: Side) -> u64 {
        let map = match side {
            Side::Q => &self.pair_q,
            Side::R => &self.pair_r,
        };
        map.get(&(w_c.to_string(), w_t.to_string()))
            .copied()
            .unwrap_or(0)
    }

    /// A context word is scorable when it passes the seen/min_count gate.
    pub fn is_scorable_context_word(&self, w: &str) -> bool {
        self.context_count(w) >= self.min_count.max(1)
    }

    /// PMI of a context word against one target word:
    /// `ln( ((n(w_c,w_t)+ε)/n(w_t)) / (n(w_c)/N_s) )`.
    pub fn pmi(&self, w_c: &str, w_t: &str, side: Side) -> Result<f64, StatsError> {
        let n_c = self.context_count(w_c);
        if n_c == 0 {
            return Err(StatsError::UnseenWord(w_c.to_string()));
        }
        if n_c < self.min_count {
            return Err(StatsError::RareWord {
                word: w_c.to_string(),
                count: n_c,
                min_count: self.min_count,
            });
        }
        let n_t = self.target_count(w_t, side);
        if n_t == 0 {
            return Err(StatsError::UnseenWord(w_t.to_string()));
        }
        if n_t < self.min_count {
            return Err(StatsError::RareWord {
                word: w_t.to_string(),
                count: n_t,
                min_count: self.min_count,
            });
        }
        let pair = self.pair_count(w_c, w_t, side) as f64;
        let conditional = (pair + self.epsilon) / n_t as f64;
        let prior = n_c as f64 / self.n_sessions as f64;
        Ok((conditional / prior).ln())
    }

    /// Sum of [`CooccurrenceTable::pmi`] over the distinct words of a
    /// sentence. Words failing the gate are skipped, not errors; the skip
    /// count tallies tokens whose word was skipped.
    pub fn pmi_sentence(&self, w_c: &str, sentence: &[String], side: Side) -> (f64, usize) {
        let mut seen = HashSet::new();
        let mut total = 0.0;
        let mut skipped_words = HashSet::new();
        for w in sentence {
            if !seen.insert(w) {
                continue;
            }
            match self.pmi(w_c, w, side) {
                Ok(v) => total += v,
                Err(_) => {
                    skipped_words.insert(w.clone());
                }
            }
        }
        let skipped_tokens = sentence
            .iter()
            .filter(|w| skipped_words.contains(*w))
            .count();
        (total, skipped_tokens)
    }
}

/// Min-max normalization; degenerate inputs (fewer than two values, or all
/// values equal) normalize to all zeros so the side carries no signal.
pub(crate) fn min_max_norm(values: &[f64]) -> Vec<f64> {
    if values.len() < 2 {
        return vec![0.0; values.len()];
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - min) / (max - min)).collect()
}

/// Contribution score of every distinct scorable context word:
/// `norm(PMI(w_c, q)) + norm(PMI(w_c, r))`, min-max normalized per side over
/// the scorable words of this context. Scores lie in [0, 2].
pub fn contribution_score(
    table: &CooccurrenceTable,
    context: &[Vec<String>],
    q: &[String],
    r: &[String],
) -> BTreeMap<String, f64> {
    let words = distinct_scorable_words(table, context);
    let raw_q: Vec<f64> = words
        .iter()
        .map(|w| table.pmi_sentence(w, q, Side::Q).0)
        .collect();
    let raw_r: Vec<f64> = words
        .iter()
        .map(|w| table.pmi_sentence(w, r, Side::R).0)
        .collect();
    let norm_q = min_max_norm(&raw_q);
    let norm_r = min_max_norm(&raw_r);
    words
        .into_iter()
        .zip(norm_q.into_iter().zip(norm_r))
        .map(|(w, (nq, nr))| (w, nq + nr))
        .collect()
}

/// Distinct scorable context words in first-occurrence order.
fn distinct_scorable_words(table: &CooccurrenceTable, context: &[Vec<String>]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut words = Vec::new();
    for utt in context {
        for w in utt {
            if seen.insert(w.clone()) && table.is_scorable_context_word(w) {
                words.push(w.clone());
            }
        }
    }
    words
}

/// One selected keyword with every occurrence position in the context,
/// as (utterance index, token index) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyword {
    pub word: String,
    pub score: f64,
    pub positions: Vec<(usize, usize)>,
}

/// The scored context words and the top-ratio selection.
#[derive(Debug, Clone, PartialEq)]
pub struct KeywordSelection {
    pub scores: BTreeMap<String, f64>,
    pub selected: Vec<Keyword>,
}

/// Select the `ceil(ratio × |distinct scorable words|)` highest-scoring
/// context words. Ties break toward the earlier first occurrence in the
/// context, then lexicographically.
pub fn extract_keywords(
    table: &CooccurrenceTable,
    context: &[Vec<String>],
    q: &[String],
    r: &[String],
    ratio: f64,
) -> KeywordSelection {
    extract_keywords_with_stops(table, context, q, r, ratio, &HashSet::new())
}

/// [`extract_keywords`] with an optional stop list: stop words are dropped
/// from the candidate set before the ratio is applied. No stop filtering
/// happens by default; the PMI prior already penalizes common words.
pub fn extract_keywords_with_stops(
    table: &CooccurrenceTable,
    context: &[Vec<String>],
    q: &[String],
    r: &[String],
    ratio: f64,
    stop_words: &HashSet<String>,
) -> KeywordSelection {
    assert!(ratio > 0.0 && ratio <= 1.0, "ratio must be in (0, 1]");
    let scores = contribution_score(table, context, q, r);
    let mut order = distinct_scorable_words(table, context);
    order.retain(|w| !stop_words.contains(w));
    if order.is_empty() {
        return KeywordSelection {
            scores,
            selected: Vec::new(),
        };
    }
    let take = ((ratio * order.len() as f64).ceil() as usize).max(1);
    let first_occurrence: HashMap<&String, usize> =
        order.iter().enumerate().map(|(i, w)| (w, i)).collect();
    let mut ranked: Vec<&String> = order.iter().collect();
    ranked.sort_by(|a, b| {
        let sa = scores[*a];
        let sb = scores[*b];
        sb.partial_cmp(&sa)
            .unwrap()
            .then_with(|| first_occurrence[*a].cmp(&first_occurrence[*b]))
            .then_with(|| a.cmp(b))
    });
    let selected = ranked
        .into_iter()
        .take(take)
        .map(|w| {
            let mut positions = Vec::new();
            for (ui, utt) in context.iter().enumerate() {
                for (ti, tok) in utt.iter().enumerate() {
                    if tok == w {
                        positions.push((ui, ti));
                    }
                }
            }
            Keyword {
                word: w.clone(),
                score: scores[w],
                positions,
            }
        })
        .collect();
    KeywordSelection { scores, selected }
}

const DUMP_HEADER: &str = "crn-pmi v1";

impl CooccurrenceTable {
    /// Sorted-text dump; round-trips bit-exactly.
    pub fn save(&self, path: &Path) -> Result<(), StatsError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{DUMP_HEADER}")?;
        writeln!(w, "sessions\t{}", self.n_sessions)?;
        writeln!(w, "context_tokens\t{}", self.context_tokens_total)?;
        writeln!(w, "min_count\t{}", self.min_count)?;
        writeln!(w, "epsilon\t{}", self.epsilon)?;
        let write_counts =
            |w: &mut BufWriter<File>, name: &str, m: &HashMap<String, u64>| -> std::io::Result<()> {
                writeln!(w, "[{name}]")?;
                let mut entries: Vec<(&String, &u64)> = m.iter().collect();
                entries.sort_by(|a, b| a.0.cmp(b.0));
                for (k, v) in entries {
                    writeln!(w, "{k}\t{v}")?;
                }
                Ok(())
            };
        write_counts(&mut w, "context", &self.ctx_counts)?;
        write_counts(&mut w, "q", &self.q_counts)?;
        write_counts(&mut w, "r", &self.r_counts)?;
        let write_pairs = |w: &mut BufWriter<File>,
                           name: &str,
                           m: &HashMap<(String, String), u64>|
         -> std::io::Result<()> {
            writeln!(w, "[{name}]")?;
            let mut entries: Vec<(&(String, String), &u64)> = m.iter().collect();
            entries.sort_by(|a, b| a.0.cmp(b.0));
            for ((wc, wt), v) in entries {
                writeln!(w, "{wc}\t{wt}\t{v}")?;
            }
            Ok(())
        };
        write_pairs(&mut w, "pair_q", &self.pair_q)?;
        write_pairs(&mut w, "pair_r", &self.pair_r)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StatsError> {
        let mut lines = BufReader::new(File::open(path)?).lines();
        let header = lines
            .next()
            .ok_or_else(|| StatsError::Corrupt("empty file".into()))??;
        if header != DUMP_HEADER {
            return Err(StatsError::Corrupt(format!("bad header {header:?}")));
        }
        let mut table = CooccurrenceTable {
            n_sessions: 0,
            context_tokens_total: 0,
            ctx_counts: HashMap::new(),
            q_counts: HashMap::new(),
            r_counts: HashMap::new(),
            pair_q: HashMap::new(),
            pair_r: HashMap::new(),
            min_count: 0,
            epsilon: 0.0,
        };
        let mut section = String::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].to_string();
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let corrupt = |msg: &str| StatsError::Corrupt(format!("{msg}: {line:?}"));
            if section.is_empty() {
                match parts.as_slice() {
                    ["sessions", v] => {
                        table.n_sessions = v.parse().map_err(|_| corrupt("bad sessions"))?
                    }
                    ["context_tokens", v] => {
                        table.context_tokens_total =
                            v.parse().map_err(|_| corrupt("bad context_tokens"))?
                    }
                    ["min_count", v] => {
                        table.min_count = v.parse().map_err(|_| corrupt("bad min_count"))?
                    }
                    ["epsilon", v] => {
                        table.epsilon = v.parse().map_err(|_| corrupt("bad epsilon"))?
                    }
                    _ => return Err(corrupt("unknown header line")),
                }
                continue;
            }
            match (section.as_str(), parts.as_slice()) {
                ("context", [w, v]) => {
                    table
                        .ctx_counts
                        .insert(w.to_string(), v.parse().map_err(|_| corrupt("bad count"))?);
                }
                ("q", [w, v]) => {
                    table
                        .q_counts
                        .insert(w.to_string(), v.parse().map_err(|_| corrupt("bad count"))?);
                }
                ("r", [w, v]) => {
                    table
                        .r_counts
                        .insert(w.to_string(), v.parse().map_err(|_| corrupt("bad count"))?);
                }
                ("pair_q", [wc, wt, v]) => {
                    table.pair_q.insert(
                        (wc.to_string(), wt.to_string()),
                        v.parse().map_err(|_| corrupt("bad count"))?,
                    );
                }
                ("pair_r", [wc, wt, v]) => {
                    table.pair_r.insert(
                        (wc.to_string(), wt.to_string()),
                        v.parse().map_err(|_| corrupt("bad count"))?,
                    );
                }
                _ => return Err(corrupt("unknown section line")),
            }
        }
        if table.n_sessions == 0 {
            return Err(StatsError::Corrupt("missing sessions count".into()));
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, TokenizeMode};

    fn toks(s: &str) -> Vec<String> {
        tokenize(s, TokenizeMode::Whitespace)
    }

    fn session(context: &[&str], last: &str, response: &str) -> DialogueSession {
        DialogueSession {
            context: context.iter().map(|c| toks(c)).collect(),
            last: toks(last),
            response: toks(response),
        }
    }

    /// Ten sessions where "coffee" appears in 2 contexts, always with
    /// response word "drink".
    fn coffee_corpus() -> Vec<DialogueSession> {
        let mut corpus = vec![
            session(&["coffee"], "x", "drink"),
            session(&["coffee"], "x", "drink"),
        ];
        for _ in 0..8 {
            corpus.push(session(&["tea"], "x", "water"));
        }
        corpus
    }

    #[test]
    fn pmi_hand_example_is_ln_five() {
        let table = CooccurrenceTable::build(&coffee_corpus(), &StatsConfig::default()).unwrap();
        // p_c(coffee) = 2/10, p(coffee|drink) = 2/2 → PMI = ln 5
        let got = table.pmi("coffee", "drink", Side::R).unwrap();
        assert!((got - 5.0f64.ln()).abs() < 1e-8, "{got}");
    }

    #[test]
    fn independent_words_have_zero_pmi() {
        // "a" in half the contexts; "t" in half the responses; they overlap
        // exactly proportionally, so p(a|t) = p_c(a).
        let corpus = vec![
            session(&["a"], "x", "t"),
            session(&["a"], "x", "u"),
            session(&["b"], "x", "t"),
            session(&["b"], "x", "u"),
        ];
        let table = CooccurrenceTable::build(&corpus, &StatsConfig::default()).unwrap();
        let got = table.pmi("a", "t", Side::R).unwrap();
        assert!(got.abs() < 1e-8, "{got}");
    }

    #[test]
    fn zero_cooccurrence_is_large_negative_but_finite() {
        let corpus = vec![
            session(&["a"], "x", "t"),
            session(&["a"], "x", "t"),
            session(&["b"], "x", "u"),
            session(&["b"], "x", "u"),
        ];
        let table = CooccurrenceTable::build(&corpus, &StatsConfig::default()).unwrap();
        let got = table.pmi("a", "u", Side::R).unwrap();
        assert!(got.is_finite());
        assert!(got < -10.0, "{got}");
    }

    #[test]
    fn unseen_and_rare_words_are_typed_errors() {
        let table = CooccurrenceTable::build(&coffee_corpus(), &StatsConfig::default()).unwrap();
        assert!(matches!(
            table.pmi("nope", "drink", Side::R),
            Err(StatsError::UnseenWord(_))
        ));
        // With min_count 3 a twice-seen word is rare.
        let cfg = StatsConfig {
            min_count: 3,
            ..Default::default()
        };
        let table = CooccurrenceTable::build(&coffee_corpus(), &cfg).unwrap();
        assert!(matches!(
            table.pmi("coffee", "drink", Side::R),
            Err(StatsError::RareWord { .. })
        ));
    }

    #[test]
    fn repeated_word_in_context_counts_once() {
        let corpus = vec![session(&["coffee coffee coffee"], "x", "drink")];
        let table = CooccurrenceTable::build(&corpus, &StatsConfig::default()).unwrap();
        assert_eq!(table.context_count("coffee"), 1);
        assert_eq!(table.pair_count("coffee", "drink", Side::R), 1);
        // Token totals still count occurrences.
        assert_eq!(table.context_tokens_total(), 3);
    }

    #[test]
    fn shard_merge_equals_single_pass() {
        let corpus = coffee_corpus();
        let cfg = StatsConfig::default();
        let full = CooccurrenceTable::build(&corpus, &cfg).unwrap();
        let mut merged = CooccurrenceTable::build(&corpus[..3], &cfg).unwrap();
        merged.absorb(CooccurrenceTable::build(&corpus[3..], &cfg).unwrap());
        assert_eq!(full, merged);
    }

    #[test]
    fn pmi_sentence_sums_distinct_words_and_counts_skipped_tokens() {
        let table = CooccurrenceTable::build(&coffee_corpus(), &StatsConfig::default()).unwrap();
        // Single scorable word: equals the plain pmi call.
        let (v, skipped) = table.pmi_sentence("coffee", &toks("drink"), Side::R);
        assert_eq!(skipped, 0);
        assert!((v - table.pmi("coffee", "drink", Side::R).unwrap()).abs() < 1e-15);

        // Duplicated word contributes once.
        let (v2, _) = table.pmi_sentence("coffee", &toks("drink drink"), Side::R);
        assert!((v2 - v).abs() < 1e-15);

        // All words skipped → 0 with token-level skip count.
        let (v3, skipped3) = table.pmi_sentence("coffee", &toks("zz zz yy"), Side::R);
        assert_eq!(v3, 0.0);
        assert_eq!(skipped3, 3);

        // Multi-word sentence equals the brute-force sum of pmi calls;
        // "x" never appears in responses so it is skipped.
        let (v4, skipped4) = table.pmi_sentence("coffee", &toks("drink water x"), Side::R);
        let expect = table.pmi("coffee", "drink", Side::R).unwrap()
            + table.pmi("coffee", "water", Side::R).unwrap();
        assert_eq!(skipped4, 1);
        assert!((v4 - expect).abs() < 1e-12);
    }

    #[test]
    fn min_max_norm_hand_values_and_degenerate_rule() {
        assert_eq!(min_max_norm(&[1.0, 2.0, 3.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(min_max_norm(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(min_max_norm(&[7.0]), vec![0.0]);
        assert_eq!(min_max_norm(&[]), Vec::<f64>::new());
    }

    #[test]
    fn contribution_endpoints_are_zero_and_two() {
        let corpus = vec![
            session(&["a"], "t", "u"),
            session(&["a"], "t", "u"),
            session(&["b"], "p", "v"),
            session(&["b"], "p", "v"),
        ];
        let table = CooccurrenceTable::build(&corpus, &StatsConfig::default()).unwrap();
        let scores = contribution_score(&table, &[toks("a b")], &toks("t"), &toks("u"));
        assert!((scores["a"] - 2.0).abs() < 1e-12, "{scores:?}");
        assert!((scores["b"] - 0.0).abs() < 1e-12, "{scores:?}");
        for v in scores.values() {
            assert!((0.0..=2.0).contains(v));
        }
    }

    #[test]
    fn extract_top_twenty_percent_of_ten_is_two() {
        // Ten distinct scorable context words.
        let words: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        let ctx = words.join(" ");
        let mut corpus = vec![session(&[&ctx], "t", "u"), session(&[&ctx], "t", "u")];
        corpus.push(session(&["filler"], "t", "u"));
        corpus.push(session(&["filler"], "t", "u"));
        let table = CooccurrenceTable::build(&corpus, &StatsConfig::default()).unwrap();
        let sel = extract_keywords(&table, &[toks(&ctx)], &toks("t"), &toks("u"), 0.2);
        assert_eq!(sel.selected.len(), 2);
    }

    #[test]
    fn single_scorable_word_is_selected_by_ceiling() {
        let corpus = vec![
            session(&["only"], "t", "u"),
            session(&["only"], "t", "u"),
        ];
        let table = CooccurrenceTable::build(&corpus, &StatsConfig::default()).unwrap();
        let sel = extract_keywords(&table, &[toks("only")], &toks("t"), &toks("u"), 0.2);
        assert_eq!(sel.selected.len(), 1);
        assert_eq!(sel.selected[0].word, "only");
    }

    #[test]
    fn score_ties_break_by_earlier_occurrence_in_context() {
        // Symmetric corpus: "a" and "b" get identical scores.
        let corpus = vec![
            session(&["a b"], "t", "u"),
            session(&["a b"], "t", "u"),
        ];
        let table = CooccurrenceTable::build(&corpus, &StatsConfig::default()).unwrap();
        let sel = extract_keywords(&table, &[toks("b a")], &toks("t"), &toks("u"), 0.5);
        assert_eq!(sel.selected.len(), 1);
        // "b" occurs earlier in this context.
        assert_eq!(sel.selected[0].word, "b");
    }

    #[test]
    fn keyword_positions_record_every_occurrence() {
        let corpus = vec![
            session(&["k x", "y k"], "t", "u"),
            session(&["k"], "t", "u"),
        ];
        let table = CooccurrenceTable::build(&corpus, &StatsConfig::default()).unwrap();
        let ctx = vec![toks("k x"), toks("y k")];
        let sel = extract_keywords(&table, &ctx, &toks("t"), &toks("u"), 1.0);
        let k = sel.selected.iter().find(|kw| kw.word == "k").unwrap();
        assert_eq!(k.positions, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn increasing_pair_count_never_decreases_pmi() {
        let mut table =
            CooccurrenceTable::build(&coffee_corpus(), &StatsConfig::default()).unwrap();
        let before = table.pmi("tea", "water", Side::R).unwrap();
        let key = ("tea".to_string(), "water".to_string());
        *table.pair_r.get_mut(&key).unwrap() += 1;
        let after = table.pmi("tea", "water", Side::R).unwrap();
        assert!(after >= before);
    }

    #[test]
    fn same_table_gives_same_selection() {
        let table = CooccurrenceTable::build(&coffee_corpus(), &StatsConfig::default()).unwrap();
        let ctx = vec![toks("coffee tea")];
        let a = extract_keywords(&table, &ctx, &toks("x"), &toks("drink"), 0.5);
        let b = extract_keywords(&table, &ctx, &toks("x"), &toks("drink"), 0.5);
        assert_eq!(a, b);
    }

    #[test]
    fn stop_words_are_excluded_from_selection() {
        let table = CooccurrenceTable::build(&coffee_corpus(), &StatsConfig::default()).unwrap();
        let ctx = vec![toks("coffee tea")];
        let all = extract_keywords(&table, &ctx, &toks("x"), &toks("drink"), 1.0);
        assert_eq!(all.selected.len(), 2);
        let stops: HashSet<String> = ["coffee".to_string()].into_iter().collect();
        let filtered =
            extract_keywords_with_stops(&table, &ctx, &toks("x"), &toks("drink"), 1.0, &stops);
        assert_eq!(filtered.selected.len(), 1);
        assert_eq!(filtered.selected[0].word, "tea");
    }

    #[test]
    fn dump_round_trip_is_bit_exact() {
        let table = CooccurrenceTable::build(&coffee_corpus(), &StatsConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("t1.pmi");
        table.save(&p1).unwrap();
        let loaded = CooccurrenceTable::load(&p1).unwrap();
        assert_eq!(table, loaded);
        let p2 = dir.path().join("t2.pmi");
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
