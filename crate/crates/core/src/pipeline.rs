//! End-to-end orchestration: TF-IDF candidate retrieval over an
//! utterance–response index, rewrite-then-retrieve-then-rank selection, the
//! keyword-append retrieval baseline, and ranking metrics.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DialogueSession;
use crate::crn::{CrnError, CrnModel};
use crate::singleturn::{IrModel, SingleTurnError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot build an index from an empty pair list")]
    EmptyInput,
    #[error("retrieval returned no candidates, even after falling back to the raw last utterance")]
    EmptyRetrieval,
    #[error("rewriter: {0}")]
    Crn(#[from] CrnError),
    #[error("selector: {0}")]
    Selector(#[from] SingleTurnError),
    #[error("index io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt index file: {0}")]
    Corrupt(String),
}

/// One indexed utterance–response pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedPair {
    pub utterance: Vec<String>,
    pub response: Vec<String>,
}

/// Inverted index over the utterance side. Duplicate utterances are indexed
/// as distinct documents; postings are sorted by doc id.
#[derive(Debug, Clone)]
pub struct InvertedIndex {
    docs: Vec<IndexedPair>,
    postings: HashMap<String, Vec<(u32, u32)>>,
    idf: HashMap<String, f64>,
}

impl InvertedIndex {
    pub fn build(pairs: &[IndexedPair]) -> Result<Self, PipelineError> {
        if pairs.is_empty() {
            return Err(PipelineError::EmptyInput);
        }
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        for (doc_id, pair) in pairs.iter().enumerate() {
            let mut tf: HashMap<&String, u32> = HashMap::new();
            for tok in &pair.utterance {
                *tf.entry(tok).or_insert(0) += 1;
            }
            let mut entries: Vec<(&String, u32)> = tf.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(b.0));
            for (tok, count) in entries {
                postings
                    .entry(tok.clone())
                    .or_default()
                    .push((doc_id as u32, count));
            }
        }
        let n = pairs.len() as f64;
        let idf = postings
            .iter()
            .map(|(tok, list)| (tok.clone(), (n / list.len() as f64).ln()))
            .collect();
        Ok(InvertedIndex {
            docs: pairs.to_vec(),
            postings,
            idf,
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn doc(&self, id: u32) -> &IndexedPair {
        &self.docs[id as usize]
    }

    /// `ln(N / df)`; 0 for tokens absent from the index.
    pub fn idf(&self, token: &str) -> f64 {
        self.idf.get(token).copied().unwrap_or(0.0)
    }

    /// Distinct query tokens in first-occurrence order.
    fn distinct_query(query: &[String]) -> Vec<&String> {
        let mut seen = std::collections::HashSet::new();
        query.iter().filter(|t| seen.insert(*t)).collect()
    }

    /// Score every matching doc with `Σ tf(t,d)·idf(t)² / √|d|` over the
    /// distinct query tokens and return the top-k by (score desc, doc asc).
    /// An empty or fully-unindexed query returns an empty result.
    pub fn retrieve(&self, query: &[String], k: usize) -> Vec<(u32, f64)> {
        assert!(k >= 1, "k must be >= 1");
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for tok in Self::distinct_query(query) {
            if let Some(list) = self.postings.get(tok) {
                let idf = self.idf[tok];
                for &(doc, tf) in list {
                    *acc.entry(doc).or_insert(0.0) += tf as f64 * idf * idf;
                }
            }
        }
        let mut scored: Vec<(u32, f64)> = acc
            .into_iter()
            .map(|(doc, s)| {
                let len = self.docs[doc as usize].utterance.len() as f64;
                (doc, s / len.sqrt())
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }

    /// Versioned binary dump of the document store; postings and idf are
    /// rebuilt deterministically on load.
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"CRNIDX01")?;
        w.write_all(&(self.docs.len() as u32).to_le_bytes())?;
        for doc in &self.docs {
            write_tokens(&mut w, &doc.utterance)?;
            write_tokens(&mut w, &doc.response)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"CRNIDX01" {
            return Err(PipelineError::Corrupt("bad magic".into()));
        }
        let count = read_u32(&mut r)? as usize;
        let mut docs = Vec::with_capacity(count);
        for _ in 0..count {
            let utterance = read_tokens(&mut r)?;
            let response = read_tokens(&mut r)?;
            docs.push(IndexedPair {
                utterance,
                response,
            });
        }
        InvertedIndex::build(&docs)
    }
}

fn write_tokens<W: Write>(w: &mut W, tokens: &[String]) -> std::io::Result<()> {
    w.write_all(&(tokens.len() as u32).to_le_bytes())?;
    for t in tokens {
        let b = t.as_bytes();
        w.write_all(&(b.len() as u32).to_le_bytes())?;
        w.write_all(b)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, PipelineError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_tokens<R: Read>(r: &mut R) -> Result<Vec<String>, PipelineError> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        out.push(
            String::from_utf8(buf).map_err(|e| PipelineError::Corrupt(format!("token: {e}")))?,
        );
    }
    Ok(out)
}

/// The keyword-append retrieval baseline: the last utterance concatenated
/// with the top-n distinct context tokens by tf·idf, idf taken from the
/// index corpus, ties broken lexicographically.
pub fn keyword_append_baseline(
    session: &DialogueSession,
    index: &InvertedIndex,
    n: usize,
) -> Vec<String> {
    let mut tf: HashMap<&String, u32> = HashMap::new();
    for utt in &session.context {
        for tok in utt {
            *tf.entry(tok).or_insert(0) += 1;
        }
    }
    let mut scored: Vec<(&String, f64)> = tf
        .into_iter()
        .map(|(tok, count)| (tok, count as f64 * index.idf(tok)))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(b.0)));
    let mut query = session.last.clone();
    query.extend(scored.into_iter().take(n).map(|(t, _)| t.clone()));
    query
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceCandidate {
    pub doc: u32,
    pub retrieval_score: f64,
    pub selector_score: f64,
    pub response: Vec<String>,
}

/// Full per-query trace: the rewritten query, every candidate's scores, and
/// the winner. This is the explainability artifact of the selection path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub query: Vec<String>,
    pub used_fallback: bool,
    pub candidates: Vec<TraceCandidate>,
    pub winner_doc: u32,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub response: Vec<String>,
    pub trace: SelectionTrace,
}

/// Rewrite the last utterance with the CRN (beam search, rank 1), retrieve
/// `k` candidates with the rewritten query, and pick the response the
/// selector scores highest against it. Falls back to retrieving with the
/// raw last utterance when the rewritten query matches nothing.
pub fn end_to_end_select(
    session: &DialogueSession,
    crn: &CrnModel,
    index: &InvertedIndex,
    ir: &IrModel,
    k: usize,
    beam: usize,
    max_len: usize,
) -> Result<Selection, PipelineError> {
    let hyps = crn.beam_search(&session.last, &session.context, beam, max_len)?;
    // An empty rewrite (EOS emitted immediately) falls back to the raw last
    // utterance as the query.
    let query = hyps
        .first()
        .map(|h| h.tokens.clone())
        .filter(|t| !t.is_empty())
        .unwrap_or_else(|| session.last.clone());
    rank_retrieved(&query, &session.last, index, ir, k)
}

/// The baseline path: keyword-append query, same retrieve-then-rank.
pub fn baseline_select(
    session: &DialogueSession,
    index: &InvertedIndex,
    ir: &IrModel,
    k: usize,
    keywords: usize,
) -> Result<Selection, PipelineError> {
    let query = keyword_append_baseline(session, index, keywords);
    rank_retrieved(&query, &session.last, index, ir, k)
}

fn rank_retrieved(
    query: &[String],
    raw_last: &[String],
    index: &InvertedIndex,
    ir: &IrModel,
    k: usize,
) -> Result<Selection, PipelineError> {
    let mut used_fallback = false;
    let mut retrieved = index.retrieve(query, k);
    if retrieved.is_empty() {
        used_fallback = true;
        retrieved = index.retrieve(raw_last, k);
    }
    if retrieved.is_empty() {
        return Err(PipelineError::EmptyRetrieval);
    }
    let mut candidates = Vec::with_capacity(retrieved.len());
    for &(doc, retrieval_score) in &retrieved {
        candidates.push(TraceCandidate {
            doc,
            retrieval_score,
            selector_score: ir.score(query, &index.doc(doc).response)?,
            response: index.doc(doc).response.clone(),
        });
    }
    // Strict comparison keeps the earlier-retrieved candidate on ties.
    let mut winner = 0usize;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        if c.selector_score > candidates[winner].selector_score {
            winner = i;
        }
    }
    let winner_doc = candidates[winner].doc;
    Ok(Selection {
        response: candidates[winner].response.clone(),
        trace: SelectionTrace {
            query: query.to_vec(),
            used_fallback,
            candidates,
            winner_doc,
        },
    })
}

/// Standard ranking metrics over labeled candidate lists (true = relevant).
/// Lists without any relevant candidate are skipped and counted.
#[derive(Debug, Clone, PartialEq)]
pub struct RankMetrics {
    pub map: f64,
    pub mrr: f64,
    pub p_at_1: f64,
    /// `(m, value)` pairs: fraction of contexts with a relevant candidate in
    /// the top m.
    pub recall_at: Vec<(usize, f64)>,
    pub skipped: usize,
}

pub fn rank_metrics(ranked_labels: &[Vec<bool>], recall_cutoffs: &[usize]) -> RankMetrics {
    let mut map_sum = 0.0;
    let mut mrr_sum = 0.0;
    let mut p1_sum = 0.0;
    let mut recall_sums = vec![0.0; recall_cutoffs.len()];
    let mut used = 0usize;
    let mut skipped = 0usize;
    for labels in ranked_labels {
        let relevant = labels.iter().filter(|&&l| l).count();
        if relevant == 0 {
            skipped += 1;
            continue;
        }
        used += 1;
        let mut hits = 0usize;
        let mut ap = 0.0;
        let mut first_rank: Option<usize> = None;
        for (i, &label) in labels.iter().enumerate() {
            if label {
                hits += 1;
                ap += hits as f64 / (i + 1) as f64;
                if first_rank.is_none() {
                    first_rank = Some(i + 1);
                }
            }
        }
        map_sum += ap / relevant as f64;
        let first = first_rank.expect("relevant > 0");
        mrr_sum += 1.0 / first as f64;
        if labels[0] {
            p1_sum += 1.0;
        }
        for (j, &m) in recall_cutoffs.iter().enumerate() {
            if first <= m {
                recall_sums[j] += 1.0;
            }
        }
    }
    let denom = used.max(1) as f64;
    RankMetrics {
        map: map_sum / denom,
        mrr: mrr_sum / denom,
        p_at_1: p1_sum / denom,
        recall_at: recall_cutoffs
            .iter()
            .zip(recall_sums)
            .map(|(&m, s)| (m, s / denom))
            .collect(),
        skipped,
    }
}
