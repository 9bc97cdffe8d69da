//! Unsupervised context rewriting for multi-turn dialogue.
//!
//! The pipeline turns raw dialogue sessions into a trained utterance
//! rewriter and evaluates it end to end:
//!
//! 1. [`corpus`] — load sessions, tokenize, build vocabularies.
//! 2. [`stats`] — co-occurrence counts and PMI contribution scores that
//!    pick which context words are worth inserting.
//! 3. [`lm`] — an n-gram language model that scores insertion positions.
//! 4. [`singleturn`] — single-turn generator and selector models used for
//!    reranking and as reward oracles.
//! 5. [`pseudo`] — synthesize pseudo rewritten utterances from keywords,
//!    spans, LM scores, and a downstream reranker.
//! 6. [`crn`] — the context rewriting network: dual biGRU encoders and a
//!    GRU decoder with dual attention and a copy/predict mixture output.
//! 7. [`train`] — MLE pretraining plus policy-gradient fine-tuning with
//!    task rewards.
//! 8. [`eval`] — BLEU, distinct-n, and embedding-based metrics.
//! 9. [`pipeline`] — TF-IDF retrieval, rewrite-then-rank selection, and
//!    ranking metrics.

pub mod corpus;
pub mod crn;
pub mod eval;
pub mod lm;
pub mod pipeline;
pub mod pseudo;
pub mod singleturn;
pub mod stats;
pub mod train;
