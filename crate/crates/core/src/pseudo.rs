//! Pseudo rewritten utterance synthesis: expand selected keywords into
//! context spans, enumerate insertions into the last utterance, keep the
//! top-3 by language-model score, and pick the winner with a downstream
//! single-turn reranker. Sessions where no candidate beats the un-rewritten
//! utterance keep `q* = q`, which reproduces the mixed rewritten /
//! un-rewritten training data.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{DialogueSession, PseudoQuadruplet};
use crate::lm::InsertionScorer;
use crate::singleturn::{IrModel, S2sModel, SingleTurnError};
use crate::stats::{extract_keywords_with_stops, CooccurrenceTable};

#[derive(Debug, Error)]
pub enum PseudoError {
    #[error("no rewrite candidates to rerank")]
    NoCandidates,
    #[error("selection reranking requires at least one negative response")]
    NoNegatives,
    #[error("reranker: {0}")]
    SingleTurn(#[from] SingleTurnError),
}

/// A contiguous slice of one context utterance anchored on a keyword, at
/// most two tokens on either side, never crossing utterance boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanCandidate {
    pub tokens: Vec<String>,
    pub utterance: usize,
    pub start: usize,
    pub end: usize,
    pub keyword: String,
}

/// Position of one keyword occurrence inside the context.
#[derive(Debug, Clone, Copy)]
pub struct KeywordOccurrence {
    pub utterance: usize,
    pub position: usize,
}

/// All clipped spans with 0..=2 tokens before and after the keyword
/// occurrence, duplicates removed; at most 9.
pub fn expand_spans(context: &[Vec<String>], occ: KeywordOccurrence) -> Vec<SpanCandidate> {
    let utt = &context[occ.utterance];
    assert!(occ.position < utt.len(), "keyword position out of range");
    let mut ranges = std::collections::BTreeSet::new();
    for before in 0..=2usize {
        for after in 0..=2usize {
            let start = occ.position.saturating_sub(before);
            let end = (occ.position + after).min(utt.len() - 1);
            ranges.insert((start, end));
        }
    }
    ranges
        .into_iter()
        .map(|(start, end)| SpanCandidate {
            tokens: utt[start..=end].to_vec(),
            utterance: occ.utterance,
            start,
            end,
            keyword: utt[occ.position].clone(),
        })
        .collect()
}

/// Where a candidate came from: the span and the insertion offset in `q`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub span: SpanCandidate,
    pub insert_pos: usize,
}

/// One rewrite candidate: `q` with exactly one span inserted.
#[derive(Debug, Clone, PartialEq)]
pub struct RewriteCandidate {
    pub tokens: Vec<String>,
    pub lm_score: f64,
    pub rerank_score: f64,
    pub provenance: Provenance,
}

/// Build every (span × insertion position) candidate, dedup identical
/// surfaces, score with the LM's length-normalized log-probability, and
/// return the global top-3. Ties break toward the earlier insertion
/// position, then the shorter span, then lexicographic token order.
pub fn enumerate_insertions(
    q: &[String],
    spans: &[SpanCandidate],
    lm: &dyn InsertionScorer,
) -> Vec<RewriteCandidate> {
    assert!(!q.is_empty(), "q must be non-empty");
    if spans.is_empty() {
        return Vec::new();
    }
    let mut raw: Vec<(Vec<String>, Provenance)> = Vec::new();
    for span in spans {
        for pos in 0..=q.len() {
            let mut tokens = Vec::with_capacity(q.len() + span.tokens.len());
            tokens.extend_from_slice(&q[..pos]);
            tokens.extend_from_slice(&span.tokens);
            tokens.extend_from_slice(&q[pos..]);
            raw.push((
                tokens,
                Provenance {
                    span: span.clone(),
                    insert_pos: pos,
                },
            ));
        }
    }
    // Dedup identical surfaces first, keeping the tie-break-smallest
    // provenance for reporting.
    raw.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then_with(|| a.1.insert_pos.cmp(&b.1.insert_pos))
            .then_with(|| a.1.span.tokens.len().cmp(&b.1.span.tokens.len()))
            .then_with(|| a.1.span.tokens.cmp(&b.1.span.tokens))
    });
    raw.dedup_by(|a, b| a.0 == b.0);

    let mut scored: Vec<RewriteCandidate> = raw
        .into_iter()
        .map(|(tokens, provenance)| RewriteCandidate {
            lm_score: lm.normalized_score(&tokens),
            rerank_score: 0.0,
            tokens,
            provenance,
        })
        .collect();
    scored.sort_by(|a, b| {
        b.lm_score
            .partial_cmp(&a.lm_score)
            .unwrap()
            .then_with(|| a.provenance.insert_pos.cmp(&b.provenance.insert_pos))
            .then_with(|| a.provenance.span.tokens.len().cmp(&b.provenance.span.tokens.len()))
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    scored.truncate(3);
    scored
}

/// Pick the candidate whose source best predicts the response: argmin of
/// the generator's teacher-forced loss `L(r | candidate)`. The first
/// candidate wins ties.
pub fn rerank_generation(
    candidates: &[RewriteCandidate],
    response: &[String],
    m_s2s: &S2sModel,
) -> Result<RewriteCandidate, PseudoError> {
    if candidates.is_empty() {
        return Err(PseudoError::NoCandidates);
    }
    let mut best: Option<RewriteCandidate> = None;
    for cand in candidates {
        let loss = m_s2s.loss(&cand.tokens, response)?;
        let better = best
            .as_ref()
            .map(|b| loss < b.rerank_score)
            .unwrap_or(true);
        if better {
            let mut chosen = cand.clone();
            chosen.rerank_score = loss;
            best = Some(chosen);
        }
    }
    Ok(best.expect("candidates non-empty"))
}

/// Pick the candidate that best separates the positive from the negatives:
/// argmax of the mean margin `M(po, s*) − M(ne, s*)`. The first candidate
/// wins ties.
pub fn rerank_selection(
    candidates: &[RewriteCandidate],
    positive: &[String],
    negatives: &[Vec<String>],
    m_ir: &IrModel,
) -> Result<RewriteCandidate, PseudoError> {
    if candidates.is_empty() {
        return Err(PseudoError::NoCandidates);
    }
    if negatives.is_empty() {
        return Err(PseudoError::NoNegatives);
    }
    let mut best: Option<RewriteCandidate> = None;
    for cand in candidates {
        let margin = mean_margin(&cand.tokens, positive, negatives, m_ir)?;
        let better = best
            .as_ref()
            .map(|b| margin > b.rerank_score)
            .unwrap_or(true);
        if better {
            let mut chosen = cand.clone();
            chosen.rerank_score = margin;
            best = Some(chosen);
        }
    }
    Ok(best.expect("candidates non-empty"))
}

fn mean_margin(
    utterance: &[String],
    positive: &[String],
    negatives: &[Vec<String>],
    m_ir: &IrModel,
) -> Result<f64, SingleTurnError> {
    let mut total = 0.0;
    for ne in negatives {
        total += m_ir.margin(positive, ne, utterance)?;
    }
    Ok(total / negatives.len() as f64)
}

/// Downstream reranker for pseudo-data synthesis.
pub enum Reranker<'a> {
    Generation(&'a S2sModel),
    Selection {
        model: &'a IrModel,
        negatives: &'a [Vec<String>],
    },
}

#[derive(Debug, Clone)]
pub struct PseudoOptions {
    /// Fraction of distinct scorable context words selected as keywords.
    pub ratio: f64,
    /// The best candidate must beat the un-rewritten utterance's own score
    /// by more than this margin or the session stays un-rewritten.
    pub delta: f64,
    /// Context words never selected as keywords; empty by default.
    pub stop_words: std::collections::HashSet<String>,
}

impl Default for PseudoOptions {
    fn default() -> Self {
        PseudoOptions {
            ratio: 0.2,
            delta: 0.0,
            stop_words: std::collections::HashSet::new(),
        }
    }
}

/// Outcome for one session: the quadruplet plus synthesis diagnostics.
#[derive(Debug, Clone)]
pub struct PseudoOutcome {
    pub quad: PseudoQuadruplet,
    pub was_rewritten: bool,
    pub chosen: Option<RewriteCandidate>,
}

/// Synthesize `q*` for one session. Pure: identical inputs give identical
/// outputs.
pub fn generate_pseudo(
    session: &DialogueSession,
    table: &CooccurrenceTable,
    lm: &dyn InsertionScorer,
    reranker: &Reranker<'_>,
    opts: &PseudoOptions,
) -> Result<PseudoOutcome, PseudoError> {
    let unrewritten = |session: &DialogueSession| PseudoOutcome {
        quad: PseudoQuadruplet {
            session: session.clone(),
            rewritten: session.last.clone(),
        },
        was_rewritten: false,
        chosen: None,
    };
    let selection = extract_keywords_with_stops(
        table,
        &session.context,
        &session.last,
        &session.response,
        opts.ratio,
        &opts.stop_words,
    );
    if selection.selected.is_empty() {
        return Ok(unrewritten(session));
    }
    let mut spans = Vec::new();
    for keyword in &selection.selected {
        for &(utterance, position) in &keyword.positions {
            spans.extend(expand_spans(
                &session.context,
                KeywordOccurrence {
                    utterance,
                    position,
                },
            ));
        }
    }
    let candidates = enumerate_insertions(&session.last, &spans, lm);
    if candidates.is_empty() {
        return Ok(unrewritten(session));
    }
    let (best, improves) = match reranker {
        Reranker::Generation(m_s2s) => {
            let best = rerank_generation(&candidates, &session.response, m_s2s)?;
            let q_loss = m_s2s.loss(&session.last, &session.response)?;
            let improves = best.rerank_score < q_loss - opts.delta;
            (best, improves)
        }
        Reranker::Selection { model, negatives } => {
            let best = rerank_selection(&candidates, &session.response, negatives, model)?;
            let q_margin = mean_margin(&session.last, &session.response, negatives, model)?;
            let improves = best.rerank_score > q_margin + opts.delta;
            (best, improves)
        }
    };
    if !improves {
        return Ok(unrewritten(session));
    }
    Ok(PseudoOutcome {
        quad: PseudoQuadruplet {
            session: session.clone(),
            rewritten: best.tokens.clone(),
        },
        was_rewritten: true,
        chosen: Some(best),
    })
}

/// Corpus-level synthesis task; selection negatives are drawn per session
/// from other sessions' responses with a seed derived from the session
/// index, so results do not depend on thread scheduling.
pub enum RerankTask<'a> {
    Generation(&'a S2sModel),
    Selection {
        model: &'a IrModel,
        negatives_per_example: usize,
    },
}

/// Sidecar statistics reported next to a synthesized corpus.
#[derive(Debug, Clone, Serialize)]
pub struct PseudoStats {
    pub sessions: usize,
    pub rewritten: usize,
    pub unrewritten: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rewritten_to_unrewritten_ratio: Option<f64>,
    pub mean_len_context: f64,
    pub mean_len_last: f64,
    pub mean_len_response: f64,
    pub mean_len_rewritten: f64,
}

pub struct PseudoRun {
    pub outcomes: Vec<PseudoOutcome>,
    pub stats: PseudoStats,
}

fn session_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Generate pseudo data for a whole corpus, in input order, parallel over
/// sessions.
pub fn generate_corpus(
    sessions: &[DialogueSession],
    table: &CooccurrenceTable,
    lm: &dyn InsertionScorer,
    task: &RerankTask<'_>,
    opts: &PseudoOptions,
    seed: u64,
) -> Result<PseudoRun, PseudoError> {
    let outcomes: Vec<PseudoOutcome> = sessions
        .par_iter()
        .enumerate()
        .map(|(i, session)| match task {
            RerankTask::Generation(m) => {
                generate_pseudo(session, table, lm, &Reranker::Generation(m), opts)
            }
            RerankTask::Selection {
                model,
                negatives_per_example,
            } => {
                let mut rng = StdRng::seed_from_u64(session_seed(seed, i));
                let negatives: Vec<Vec<String>> = (0..*negatives_per_example)
                    .map(|_| sample_other_response(sessions, i, &mut rng))
                    .collect();
                generate_pseudo(
                    session,
                    table,
                    lm,
                    &Reranker::Selection {
                        model,
                        negatives: &negatives,
                    },
                    opts,
                )
            }
        })
        .collect::<Result<_, _>>()?;

    let rewritten = outcomes.iter().filter(|o| o.was_rewritten).count();
    let unrewritten = outcomes.len() - rewritten;
    let mean = |f: &dyn Fn(&PseudoOutcome) -> usize| {
        outcomes.iter().map(|o| f(o) as f64).sum::<f64>() / outcomes.len().max(1) as f64
    };
    let stats = PseudoStats {
        sessions: outcomes.len(),
        rewritten,
        unrewritten,
        rewritten_to_unrewritten_ratio: if unrewritten > 0 {
            Some(rewritten as f64 / unrewritten as f64)
        } else {
            None
        },
        mean_len_context: mean(&|o| o.quad.session.context.iter().map(Vec::len).sum()),
        mean_len_last: mean(&|o| o.quad.session.last.len()),
        mean_len_response: mean(&|o| o.quad.session.response.len()),
        mean_len_rewritten: mean(&|o| o.quad.rewritten.len()),
    };
    Ok(PseudoRun { outcomes, stats })
}

fn sample_other_response(
    sessions: &[DialogueSession],
    own: usize,
    rng: &mut StdRng,
) -> Vec<String> {
    if sessions.len() <= 1 {
        return sessions[own].response.clone();
    }
    loop {
        let j = rng.random_range(0..sessions.len());
        if j != own {
            return sessions[j].response.clone();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, tokenize, TokenizeMode};
    use crate::lm::NgramLm;
    use crate::singleturn::{train_ir, FitConfig, IrConfig, S2sConfig};
    use crate::stats::StatsConfig;

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

    #[test]
    fn interior_keyword_yields_exactly_nine_spans() {
        let ctx = vec![toks("a b K c d")];
        let spans = expand_spans(&ctx, KeywordOccurrence { utterance: 0, position: 2 });
        assert_eq!(spans.len(), 9);
        let surfaces: Vec<String> = spans.iter().map(|s| s.tokens.join(" ")).collect();
        for expected in ["K", "b K", "a b K", "K c", "K c d", "b K c", "a b K c d"] {
            assert!(surfaces.contains(&expected.to_string()), "{expected} missing");
        }
        for s in &spans {
            assert!(s.tokens.contains(&"K".to_string()));
            assert!(s.end - s.start + 1 <= 5);
        }
    }

    #[test]
    fn keyword_at_start_clips_to_three_spans() {
        let ctx = vec![toks("K a b c")];
        let spans = expand_spans(&ctx, KeywordOccurrence { utterance: 0, position: 0 });
        assert_eq!(spans.len(), 3);
    }

    #[test]
    fn single_token_utterance_yields_one_span() {
        let ctx = vec![toks("K")];
        let spans = expand_spans(&ctx, KeywordOccurrence { utterance: 0, position: 0 });
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].tokens, toks("K"));
    }

    fn toy_lm() -> NgramLm {
        let corpus: Vec<Vec<String>> = vec![
            toks("i like strong coffee very much"),
            toks("i like tea"),
            toks("strong coffee is good"),
            toks("do you like coffee"),
        ];
        NgramLm::train(&corpus, 2, 1.0).unwrap()
    }

    #[test]
    fn insertion_pool_counts_and_top_three() {
        let lm = toy_lm();
        let q = toks("i like it so"); // |q| = 4 → 5 positions
        let ctx = vec![toks("a b K c d")];
        let spans = expand_spans(&ctx, KeywordOccurrence { utterance: 0, position: 2 });
        assert_eq!(spans.len(), 9);
        let top = enumerate_insertions(&q, &spans, &lm);
        assert!(top.len() <= 3);
        assert_eq!(top.len(), 3);
        for pair in top.windows(2) {
            assert!(pair[0].lm_score >= pair[1].lm_score);
        }
    }

    #[test]
    fn top_three_matches_exhaustive_enumeration() {
        let lm = toy_lm();
        let q = toks("you like tea");
        let ctx = vec![toks("strong coffee is good")];
        let spans = expand_spans(&ctx, KeywordOccurrence { utterance: 0, position: 1 });
        let got = enumerate_insertions(&q, &spans, &lm);

        // Oracle: brute-force every splice, dedup surfaces, rank by the
        // same key.
        let mut all: Vec<(Vec<String>, usize, usize)> = Vec::new();
        for span in &spans {
            for pos in 0..=q.len() {
                let mut t = q[..pos].to_vec();
                t.extend_from_slice(&span.tokens);
                t.extend_from_slice(&q[pos..]);
                all.push((t, pos, span.tokens.len()));
            }
        }
        all.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        all.dedup_by(|a, b| a.0 == b.0);
        let mut ranked: Vec<(f64, &(Vec<String>, usize, usize))> =
            all.iter().map(|c| (lm.normalized_score(&c.0), c)).collect();
        ranked.sort_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .unwrap()
                .then(x.1 .1.cmp(&y.1 .1))
                .then(x.1 .2.cmp(&y.1 .2))
                .then(x.1 .0.cmp(&y.1 .0))
        });
        for (i, cand) in got.iter().enumerate() {
            assert_eq!(cand.tokens, ranked[i].1 .0, "rank {i}");
            assert!((cand.lm_score - ranked[i].0).abs() < 1e-15);
        }
    }

    #[test]
    fn no_spans_yields_no_candidates() {
        let lm = toy_lm();
        assert!(enumerate_insertions(&toks("a b"), &[], &lm).is_empty());
    }

    #[test]
    fn any_insertion_scorer_can_replace_the_ngram_model() {
        // A scorer that prefers short candidates; the synthesis path only
        // sees the trait.
        struct ShortestFirst;
        impl InsertionScorer for ShortestFirst {
            fn normalized_score(&self, sentence: &[String]) -> f64 {
                -(sentence.len() as f64)
            }
        }
        let ctx = vec![toks("a b K c d")];
        let spans = expand_spans(&ctx, KeywordOccurrence { utterance: 0, position: 2 });
        let got = enumerate_insertions(&toks("x y"), &spans, &ShortestFirst);
        assert_eq!(got.len(), 3);
        // The single-token span [K] is the shortest insertion everywhere;
        // earliest position wins the tie-break.
        assert_eq!(got[0].tokens, toks("K x y"));
        assert_eq!(got[0].provenance.insert_pos, 0);
        assert_eq!(got[1].tokens, toks("x K y"));
        assert_eq!(got[2].tokens, toks("x y K"));
    }

    #[test]
    fn single_position_q_has_two_insertion_points() {
        let lm = toy_lm();
        let ctx = vec![toks("K")];
        let spans = expand_spans(&ctx, KeywordOccurrence { utterance: 0, position: 0 });
        let q = toks("hi");
        let got = enumerate_insertions(&q, &spans, &lm);
        // 1 span × 2 positions → 2 distinct candidates.
        assert_eq!(got.len(), 2);
    }

    /// A deterministic overlap-scoring selector for rerank oracles.
    fn overlap_ir() -> IrModel {
        // Trained so that utterance/response token overlap wins; built from
        // a separable synthetic task.
        let mut triples = Vec::new();
        let words: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        for (i, w) in words.iter().enumerate() {
            for _ in 0..6 {
                triples.push((
                    vec![w.clone(), "ask".to_string()],
                    vec![w.clone(), "yes".to_string()],
                    vec![words[(i + 3) % words.len()].clone(), "yes".to_string()],
                ));
            }
        }
        let fit = FitConfig {
            epochs: 25,
            lr: 0.02,
            batch_size: 12,
            ..Default::default()
        };
        train_ir(&triples, IrConfig { emb_dim: 8, hidden: 8 }, &fit).unwrap().0
    }

    #[test]
    fn rerank_generation_prefers_the_overfit_source() {
        // Overfit a generator on one (source, response) pair; the candidate
        // equal to that source must beat an unrelated candidate.
        let source = toks("strong coffee please");
        let response = toks("here you go");
        let fit = FitConfig {
            epochs: 150,
            lr: 0.01,
            batch_size: 1,
            val_fraction: 0.0,
            ..Default::default()
        };
        let (m_s2s, _) = crate::singleturn::train_s2s(
            &[(source.clone(), response.clone()), (toks("random words here"), toks("something else"))],
            S2sConfig::tiny(10, 10, 14),
            &fit,
        )
        .unwrap();
        let mk = |tokens: Vec<String>| RewriteCandidate {
            tokens,
            lm_score: 0.0,
            rerank_score: 0.0,
            provenance: Provenance {
                span: SpanCandidate {
                    tokens: toks("x"),
                    utterance: 0,
                    start: 0,
                    end: 0,
                    keyword: "x".into(),
                },
                insert_pos: 0,
            },
        };
        let cands = vec![mk(toks("random words here")), mk(source.clone())];
        let best = rerank_generation(&cands, &response, &m_s2s).unwrap();
        assert_eq!(best.tokens, source);

        // A single candidate is returned unchanged with its loss recorded.
        let single = vec![mk(toks("whatever"))];
        let got = rerank_generation(&single, &response, &m_s2s).unwrap();
        assert_eq!(got.tokens, toks("whatever"));
        assert!(got.rerank_score > 0.0);

        // Identical candidates: the first wins.
        let twins = vec![mk(toks("same same")), mk(toks("same same"))];
        let got = rerank_generation(&twins, &response, &m_s2s).unwrap();
        assert_eq!(got.provenance, twins[0].provenance);
    }

    #[test]
    fn rerank_selection_uses_margins_and_degenerates_to_first_on_equal_po_ne() {
        let ir = overlap_ir();
        let mk = |tokens: Vec<String>| RewriteCandidate {
            tokens,
            lm_score: 0.0,
            rerank_score: 0.0,
            provenance: Provenance {
                span: SpanCandidate {
                    tokens: toks("x"),
                    utterance: 0,
                    start: 0,
                    end: 0,
                    keyword: "x".into(),
                },
                insert_pos: 0,
            },
        };
        // Candidate sharing the positive's topic token should win; the
        // (t0, t3) pairing appears directly in the selector's training.
        let po = toks("t0 yes");
        let ne = toks("t3 yes");
        let cands = vec![mk(toks("t3 ask")), mk(toks("t0 ask"))];
        let best = rerank_selection(&cands, &po, &[ne.clone()], &ir).unwrap();
        assert_eq!(best.tokens, toks("t0 ask"));
        assert!(best.rerank_score > 0.0);

        // A single candidate is returned with its margin recorded.
        let single = rerank_selection(&cands[..1], &po, &[ne.clone()], &ir).unwrap();
        assert_eq!(single.tokens, cands[0].tokens);

        // po == ne → all margins zero, first candidate wins.
        let best = rerank_selection(&cands, &po, &[po.clone()], &ir).unwrap();
        assert_eq!(best.tokens, cands[0].tokens);
        assert_eq!(best.rerank_score, 0.0);

        // Errors.
        assert!(matches!(
            rerank_selection(&[], &po, &[ne.clone()], &ir),
            Err(PseudoError::NoCandidates)
        ));
        assert!(matches!(
            rerank_selection(&cands, &po, &[], &ir),
            Err(PseudoError::NoNegatives)
        ));
    }

    fn pseudo_fixture() -> (Vec<DialogueSession>, CooccurrenceTable, NgramLm) {
        // "duty" in context correlates with q-word "yes" and r-word "off";
        // filler sessions keep counts above min_count.
        let mut corpus = vec![
            session(&["go off duty now"], "yes i am", "off to the bus"),
            session(&["go off duty now"], "yes i am", "off to the bus"),
            session(&["the weather is bad"], "maybe so", "take an umbrella"),
            session(&["the weather is bad"], "maybe so", "take an umbrella"),
        ];
        corpus.push(session(&["go off duty now"], "maybe so", "take an umbrella"));
        let table = CooccurrenceTable::build(&corpus, &StatsConfig::default()).unwrap();
        let lm_sents: Vec<Vec<String>> = corpus
            .iter()
            .flat_map(|s| {
                let mut v = s.context.clone();
                v.push(s.last.clone());
                v
            })
            .collect();
        let lm = NgramLm::train(&lm_sents, 2, 0.5).unwrap();
        (corpus, table, lm)
    }

    #[test]
    fn generated_rewrite_differs_by_exactly_one_inserted_span_or_equals_q() {
        let (corpus, table, lm) = pseudo_fixture();
        let ir = overlap_ir();
        let negatives = vec![toks("unrelated noise")];
        let reranker = Reranker::Selection {
            model: &ir,
            negatives: &negatives,
        };
        for s in &corpus {
            let out = generate_pseudo(s, &table, &lm, &reranker, &PseudoOptions::default())
                .unwrap();
            let q = &s.last;
            let q_star = &out.quad.rewritten;
            if !out.was_rewritten {
                assert_eq!(q_star, q);
                continue;
            }
            let chosen = out.chosen.as_ref().unwrap();
            let p = chosen.provenance.insert_pos;
            let span = &chosen.provenance.span.tokens;
            let mut rebuilt = q[..p].to_vec();
            rebuilt.extend_from_slice(span);
            rebuilt.extend_from_slice(&q[p..]);
            assert_eq!(&rebuilt, q_star);
            // The inserted span is verbatim context material.
            let utt = &s.context[chosen.provenance.span.utterance];
            assert_eq!(
                &utt[chosen.provenance.span.start..=chosen.provenance.span.end],
                &span[..]
            );
        }
    }

    #[test]
    fn no_scorable_keywords_falls_through_to_q() {
        let (_, table, lm) = pseudo_fixture();
        let ir = overlap_ir();
        let negatives = vec![toks("zz")];
        // Every context word is unseen by the table.
        let s = session(&["qqq www eee"], "hello there", "fine");
        let out = generate_pseudo(
            &s,
            &table,
            &lm,
            &Reranker::Selection {
                model: &ir,
                negatives: &negatives,
            },
            &PseudoOptions::default(),
        )
        .unwrap();
        assert!(!out.was_rewritten);
        assert_eq!(out.quad.rewritten, s.last);
    }

    #[test]
    fn generation_is_deterministic() {
        let (corpus, table, lm) = pseudo_fixture();
        let ir = overlap_ir();
        let task = RerankTask::Selection {
            model: &ir,
            negatives_per_example: 1,
        };
        let a = generate_corpus(&corpus, &table, &lm, &task, &PseudoOptions::default(), 9)
            .unwrap();
        let b = generate_corpus(&corpus, &table, &lm, &task, &PseudoOptions::default(), 9)
            .unwrap();
        for (x, y) in a.outcomes.iter().zip(&b.outcomes) {
            assert_eq!(x.quad, y.quad);
            assert_eq!(x.was_rewritten, y.was_rewritten);
        }
        assert_eq!(a.stats.rewritten, b.stats.rewritten);
        // Stats are internally consistent.
        assert_eq!(a.stats.sessions, corpus.len());
        assert_eq!(a.stats.rewritten + a.stats.unrewritten, a.stats.sessions);
    }

    #[test]
    fn corpus_generation_with_generation_reranker_runs() {
        let (corpus, table, lm) = pseudo_fixture();
        let pairs: Vec<(Vec<String>, Vec<String>)> = corpus
            .iter()
            .map(|s| (s.last.clone(), s.response.clone()))
            .collect();
        let fit = FitConfig {
            epochs: 8,
            lr: 0.01,
            batch_size: 4,
            ..Default::default()
        };
        let (m_s2s, _) =
            crate::singleturn::train_s2s(&pairs, S2sConfig::tiny(6, 6, 8), &fit).unwrap();
        let run = generate_corpus(
            &corpus,
            &table,
            &lm,
            &RerankTask::Generation(&m_s2s),
            &PseudoOptions::default(),
            3,
        )
        .unwrap();
        assert_eq!(run.outcomes.len(), corpus.len());
        // Keyword tokens in any rewritten output appear verbatim.
        for out in &run.outcomes {
            if let Some(chosen) = &out.chosen {
                assert!(out
                    .quad
                    .rewritten
                    .windows(chosen.provenance.span.tokens.len())
                    .any(|w| w == &chosen.provenance.span.tokens[..]));
            }
        }
    }

    #[test]
    fn build_vocab_interops_with_pseudo_quads() {
        // Downstream smoke: the synthesized quadruplets encode cleanly.
        let (corpus, table, lm) = pseudo_fixture();
        let ir = overlap_ir();
        let task = RerankTask::Selection {
            model: &ir,
            negatives_per_example: 1,
        };
        let run =
            generate_corpus(&corpus, &table, &lm, &task, &PseudoOptions::default(), 1).unwrap();
        let sessions: Vec<DialogueSession> =
            run.outcomes.iter().map(|o| o.quad.session.clone()).collect();
        let vocab = build_vocab(&sessions, 200, 1).unwrap();
        for o in &run.outcomes {
            let (ids, _) = crate::corpus::encode(&o.quad.rewritten, &vocab, None);
            assert_eq!(ids.len(), o.quad.rewritten.len());
        }
    }
}
