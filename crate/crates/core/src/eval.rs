//! Automatic metrics: corpus-level BLEU, distinct-n diversity, and
//! embedding-based Average / Extrema / Greedy similarity.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::rngs::StdRng;
use rand::SeedableRng;
use thiserror::Error;

use crn_tensor::Array;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("hypothesis and reference counts differ: {hyps} vs {refs}")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("no embeddable tokens in {side} sentence")]
    NoEmbeddableTokens { side: &'static str },
    #[error("vector file io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad vector file line {line}: {message}")]
    BadVectorLine { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BleuSmoothing {
    #[default]
    None,
    /// Add 1 to the numerator and denominator of zero-count orders.
    Add1,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with modified n-gram precision, geometric mean over
/// orders `1..=max_n`, and the brevity penalty. One reference per
/// hypothesis.
pub fn bleu(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    max_n: usize,
    smoothing: BleuSmoothing,
) -> Result<f64, EvalError> {
    if hyps.is_empty() || refs.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    assert!((1..=4).contains(&max_n), "max_n must be in 1..=4");
    let mut matched = vec![0u64; max_n];
    let mut total = vec![0u64; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in hyps.iter().zip(refs) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=max_n {
            let hyp_counts = ngram_counts(hyp, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in &hyp_counts {
                total[n - 1] += count;
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += (*count).min(clip);
            }
        }
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let (num, den) = match smoothing {
            BleuSmoothing::Add1 if matched[n] == 0 => (matched[n] + 1, total[n] + 1),
            _ => (matched[n], total[n]),
        };
        if num == 0 || den == 0 {
            return Ok(0.0);
        }
        log_sum += (num as f64 / den as f64).ln();
    }
    let precision = (log_sum / max_n as f64).exp();
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * precision)
}

/// Distinct n-grams across all hypotheses divided by total n-gram tokens;
/// 0 when no n-grams exist.
pub fn distinct_n(hyps: &[Vec<String>], n: usize) -> f64 {
    assert!(n >= 1, "n must be >= 1");
    let mut distinct: HashSet<&[String]> = HashSet::new();
    let mut total = 0usize;
    for hyp in hyps {
        if hyp.len() >= n {
            for window in hyp.windows(n) {
                distinct.insert(window);
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        distinct.len() as f64 / total as f64
    }
}

/// Token → fixed-dimension vector table. Pluggable: load from a text file
/// or derive from a PPMI co-occurrence factorization of a corpus.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, token: &str, vector: Vec<f64>) {
        assert_eq!(vector.len(), self.dim, "vector dimension mismatch");
        assert!(vector.iter().all(|v| v.is_finite()), "non-finite embedding");
        self.vectors.insert(token.to_string(), vector);
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    /// Text format: `token v1 v2 ... vD`, one per line.
    pub fn load_text(path: &Path) -> Result<Self, EvalError> {
        let reader = BufReader::new(File::open(path)?);
        let mut table: Option<EmbeddingTable> = None;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().ok_or(EvalError::BadVectorLine {
                line: idx + 1,
                message: "missing token".into(),
            })?;
            let vector: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|e| EvalError::BadVectorLine {
                        line: idx + 1,
                        message: e.to_string(),
                    })
                })
                .collect::<Result<_, _>>()?;
            if vector.is_empty() {
                return Err(EvalError::BadVectorLine {
                    line: idx + 1,
                    message: "no vector values".into(),
                });
            }
            let table = table.get_or_insert_with(|| EmbeddingTable::new(vector.len()));
            if vector.len() != table.dim {
                return Err(EvalError::BadVectorLine {
                    line: idx + 1,
                    message: format!("dimension {} != {}", vector.len(), table.dim),
                });
            }
            table.insert(token, vector);
        }
        table.ok_or(EvalError::EmptyCorpus)
    }

    /// Derive embeddings from a truncated factorization of the positive PMI
    /// co-occurrence matrix (symmetric window co-occurrence over sentences).
    /// Deterministic given the seed; meant for desk-scale vocabularies.
    pub fn from_ppmi(
        sentences: &[Vec<String>],
        dim: usize,
        window: usize,
        seed: u64,
    ) -> Result<Self, EvalError> {
        if sentences.is_empty() {
            return Err(EvalError::EmptyCorpus);
        }
        let mut vocab: Vec<String> = sentences
            .iter()
            .flatten()
            .cloned()
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        vocab.sort();
        let index: BTreeMap<&String, usize> =
            vocab.iter().enumerate().map(|(i, w)| (w, i)).collect();
        let v = vocab.len();
        let mut pair = vec![0f64; v * v];
        let mut occur = vec![0f64; v];
        let mut total_pairs = 0f64;
        for s in sentences {
            for (i, wi) in s.iter().enumerate() {
                occur[index[wi]] += 1.0;
                let hi = (i + window).min(s.len().saturating_sub(1));
                for j in (i + 1)..=hi {
                    let (a, b) = (index[wi], index[&s[j]]);
                    pair[a * v + b] += 1.0;
                    pair[b * v + a] += 1.0;
                    total_pairs += 2.0;
                }
            }
        }
        let total_occur: f64 = occur.iter().sum();
        let mut m = Array::zeros(v, v);
        if total_pairs > 0.0 {
            for a in 0..v {
                for b in 0..v {
                    let joint = pair[a * v + b] / total_pairs;
                    if joint > 0.0 {
                        let pa = occur[a] / total_occur;
                        let pb = occur[b] / total_occur;
                        let val = (joint / (pa * pb)).ln().max(0.0);
                        m.set(a, b, val);
                    }
                }
            }
        }
        let d = dim.min(v);
        let basis = symmetric_top_eigvecs(&m, d, seed);
        let mut table = EmbeddingTable::new(d);
        for (i, w) in vocab.iter().enumerate() {
            table.insert(w, basis[i].clone());
        }
        Ok(table)
    }
}

/// Top-d eigenpairs of a symmetric matrix by subspace iteration with
/// Gram-Schmidt re-orthogonalization; rows of the result are token
/// embeddings `q_i * sqrt(max(lambda_i, 0))`.
fn symmetric_top_eigvecs(m: &Array, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let v = m.rows();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut q: Vec<Vec<f64>> = (0..d)
        .map(|_| Array::uniform(1, v, -1.0, 1.0, &mut rng).data().to_vec())
        .collect();
    let orthonormalize = |q: &mut Vec<Vec<f64>>| {
        for i in 0..q.len() {
            for j in 0..i {
                let dot: f64 = q[i].iter().zip(&q[j]).map(|(a, b)| a * b).sum();
                let qj = q[j].clone();
                for (x, y) in q[i].iter_mut().zip(qj) {
                    *x -= dot * y;
                }
            }
            let norm: f64 = q[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                q[i].iter_mut().for_each(|x| *x /= norm);
            } else {
                // Degenerate direction: reset deterministically.
                for (k, x) in q[i].iter_mut().enumerate() {
                    *x = if k % (i + 2) == 0 { 1.0 } else { 0.0 };
                }
                let n: f64 = q[i].iter().map(|x| x * x).sum::<f64>().sqrt();
                q[i].iter_mut().for_each(|x| *x /= n);
            }
        }
    };
    let apply = |x: &[f64]| -> Vec<f64> {
        (0..v)
            .map(|r| (0..v).map(|c| m.get(r, c) * x[c]).sum())
            .collect()
    };
    orthonormalize(&mut q);
    for _ in 0..40 {
        for row in q.iter_mut() {
            *row = apply(row);
        }
        orthonormalize(&mut q);
    }
    let eigvals: Vec<f64> = q
        .iter()
        .map(|row| {
            let mx = apply(row);
            row.iter().zip(&mx).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    (0..v)
        .map(|tok| {
            (0..d)
                .map(|k| q[k][tok] * eigvals[k].max(0.0).sqrt())
                .collect()
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The three embedding similarities between one hypothesis and one
/// reference, each in [−1, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedMetrics {
    pub average: f64,
    pub extrema: f64,
    pub greedy: f64,
}

fn sentence_vectors<'t>(
    sentence: &[String],
    table: &'t EmbeddingTable,
) -> Vec<&'t [f64]> {
    sentence.iter().filter_map(|w| table.get(w)).collect()
}

fn mean_vector(vectors: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for v in vectors {
        for (o, x) in out.iter_mut().zip(*v) {
            *o += x;
        }
    }
    let n = vectors.len() as f64;
    out.iter_mut().for_each(|x| *x /= n);
    out
}

/// Per dimension, the value of greatest absolute magnitude among the
/// sentence's token vectors; ties toward the maximum.
fn extrema_vector(vectors: &[&[f64]], dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|d| {
            let mut best = vectors[0][d];
            for v in &vectors[1..] {
                let x = v[d];
                if x.abs() > best.abs() || (x.abs() == best.abs() && x > best) {
                    best = x;
                }
            }
            best
        })
        .collect()
}

fn greedy_direction(from: &[&[f64]], to: &[&[f64]]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|f| {
            to.iter()
                .map(|t| cosine(f, t))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    total / from.len() as f64
}

/// Embedding Average, Extrema, and symmetric Greedy matching. Errs when a
/// sentence has no embeddable tokens.
pub fn embed_metrics(
    hyp: &[String],
    reference: &[String],
    table: &EmbeddingTable,
) -> Result<EmbedMetrics, EvalError> {
    let hv = sentence_vectors(hyp, table);
    if hv.is_empty() {
        return Err(EvalError::NoEmbeddableTokens { side: "hypothesis" });
    }
    let rv = sentence_vectors(reference, table);
    if rv.is_empty() {
        return Err(EvalError::NoEmbeddableTokens { side: "reference" });
    }
    let dim = table.dim();
    let average = cosine(&mean_vector(&hv, dim), &mean_vector(&rv, dim));
    let extrema = cosine(&extrema_vector(&hv, dim), &extrema_vector(&rv, dim));
    let greedy = (greedy_direction(&hv, &rv) + greedy_direction(&rv, &hv)) / 2.0;
    Ok(EmbedMetrics {
        average,
        extrema,
        greedy,
    })
}
