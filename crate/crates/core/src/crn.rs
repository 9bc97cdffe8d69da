//! The context rewriting network: two bidirectional GRU encoders (last
//! utterance and context), a GRU decoder with dual attention, and a
//! copy/predict mixture output over the base vocabulary extended with the
//! context's out-of-vocab tokens.
//!
//! Per decode step `t` with previous decoder state `s`:
//!
//! ```text
//! z  = [s ; attend(s, H_Q) ; attend(s, H_C)]·W_f + b_f
//! p  = p_m(pr|z)·p_pr(·|z)  +  p_m(co|z)·p_co(·|z, H_C)
//! s' = GRU([embed(y_prev) ; z], s)
//! ```
//!
//! `p_pr` is a softmax over the vocabulary from an MLP on `z`; `p_co` is a
//! softmax over context positions from an MLP on `[z ; h_ci]`, with the
//! probabilities of positions holding the same token summed; the two-way
//! gate `p_m` is a softmax over two MLP scores of `z`, so the mixture sums
//! to one over base ∪ extended outcomes.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crn_tensor::{checkpoint, Adam, Array, BiGru, BiGruNodes, GruCell, GruNodes, NodeId, ParamId, ParamStore, Tape, TensorError};

use crate::corpus::{self, encode, ExtendedVocab, Vocab, BOS, EOS, UNK};

#[derive(Debug, Error)]
pub enum CrnError {
    #[error("empty {0} sequence")]
    EmptyInput(&'static str),
    #[error("copy map has {got} entries for a context of {expected} positions")]
    CopyMapMismatch { expected: usize, got: usize },
    #[error("target id {id} outside base+extended range {limit}")]
    BadTarget { id: usize, limit: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("checkpoint meta: {0}")]
    Meta(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CrnConfig {
    pub emb_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub predict_hidden: usize,
    pub copy_hidden: usize,
    pub gate_hidden: usize,
    pub dropout: f64,
}

impl Default for CrnConfig {
    fn default() -> Self {
        // Scaled-down defaults preserving the 512/512/1024 encoder/decoder
        // ratio of the full-size setup.
        CrnConfig {
            emb_dim: 64,
            enc_hidden: 64,
            dec_hidden: 128,
            predict_hidden: 128,
            copy_hidden: 64,
            gate_hidden: 32,
            dropout: 0.3,
        }
    }
}

impl CrnConfig {
    /// Tiny sizes for tests and toy tasks.
    pub fn tiny(emb: usize, enc: usize, dec: usize) -> Self {
        CrnConfig {
            emb_dim: emb,
            enc_hidden: enc,
            dec_hidden: dec,
            predict_hidden: dec,
            copy_hidden: enc,
            gate_hidden: enc.max(4),
            dropout: 0.0,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CrnMeta {
    kind: String,
    config: CrnConfig,
    vocab: Vec<String>,
}

/// The rewriter: configuration, vocabulary, and every trainable array.
pub struct CrnModel {
    pub config: CrnConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    q_enc: BiGru,
    c_enc: BiGru,
    dec: GruCell,
    emb: ParamId,
    init_w: ParamId,
    init_b: ParamId,
    fuse_w: ParamId,
    fuse_b: ParamId,
    attn_q: ParamId,
    attn_c: ParamId,
    pred_w1: ParamId,
    pred_b1: ParamId,
    pred_w2: ParamId,
    pred_b2: ParamId,
    copy_w1: ParamId,
    copy_b1: ParamId,
    copy_w2: ParamId,
    copy_b2: ParamId,
    gate_w1: ParamId,
    gate_b1: ParamId,
    gate_w2: ParamId,
    gate_b2: ParamId,
}

impl CrnModel {
    pub fn new(vocab: Vocab, config: CrnConfig, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let v = vocab.len();
        let e = config.emb_dim;
        let h = config.enc_hidden;
        let d = config.dec_hidden;
        let r = 0.08;
        let w = |ps: &mut ParamStore, name: &str, rows, cols, rng: &mut StdRng| {
            ps.add(name, Array::uniform(rows, cols, -r, r, rng))
        };
        let emb = w(&mut params, "emb", v, e, &mut rng);
        let q_enc = BiGru::init(&mut params, "q_enc", e, h, &mut rng);
        let c_enc = BiGru::init(&mut params, "c_enc", e, h, &mut rng);
        let init_w = w(&mut params, "init.w", 4 * h, d, &mut rng);
        let init_b = params.add("init.b", Array::zeros(1, d));
        let fuse_w = w(&mut params, "fuse.w", d + 4 * h, d, &mut rng);
        let fuse_b = params.add("fuse.b", Array::zeros(1, d));
        let attn_q = w(&mut params, "attn.q", 2 * h, d, &mut rng);
        let attn_c = w(&mut params, "attn.c", 2 * h, d, &mut rng);
        let dec = GruCell::init(&mut params, "dec", e + d, d, &mut rng);
        let p = config.predict_hidden;
        let pred_w1 = w(&mut params, "pred.w1", d, p, &mut rng);
        let pred_b1 = params.add("pred.b1", Array::zeros(1, p));
        let pred_w2 = w(&mut params, "pred.w2", p, v, &mut rng);
        let pred_b2 = params.add("pred.b2", Array::zeros(1, v));
        let c_hid = config.copy_hidden;
        let copy_w1 = w(&mut params, "copy.w1", d + 2 * h, c_hid, &mut rng);
        let copy_b1 = params.add("copy.b1", Array::zeros(1, c_hid));
        let copy_w2 = w(&mut params, "copy.w2", c_hid, 1, &mut rng);
        let copy_b2 = params.add("copy.b2", Array::zeros(1, 1));
        let g = config.gate_hidden;
        let gate_w1 = w(&mut params, "gate.w1", d, g, &mut rng);
        let gate_b1 = params.add("gate.b1", Array::zeros(1, g));
        let gate_w2 = w(&mut params, "gate.w2", g, 2, &mut rng);
        let gate_b2 = params.add("gate.b2", Array::zeros(1, 2));
        CrnModel {
            config,
            vocab,
            params,
            q_enc,
            c_enc,
            dec,
            emb,
            init_w,
            init_b,
            fuse_w,
            fuse_b,
            attn_q,
            attn_c,
            pred_w1,
            pred_b1,
            pred_w2,
            pred_b2,
            copy_w1,
            copy_b1,
            copy_w2,
            copy_b2,
            gate_w1,
            gate_b1,
            gate_w2,
            gate_b2,
        }
    }

    pub fn save(&self, path: &std::path::Path, adam: Option<&Adam>) -> Result<(), CrnError> {
        let meta = CrnMeta {
            kind: "crn".to_string(),
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
        };
        let meta = serde_json::to_string(&meta).expect("meta serialization");
        checkpoint::save(path, &meta, &self.params, adam)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, Option<Adam>), CrnError> {
        let (meta, store, adam) = checkpoint::load(path)?;
        let meta: CrnMeta =
            serde_json::from_str(&meta).map_err(|e| CrnError::Meta(e.to_string()))?;
        if meta.kind != "crn" {
            return Err(CrnError::Meta(format!(
                "expected a crn checkpoint, found {:?}",
                meta.kind
            )));
        }
        let vocab = Vocab::from_token_list(meta.vocab);
        let mut model = CrnModel::new(vocab, meta.config, 0);
        copy_params_by_name(&mut model.params, &store).map_err(CrnError::Meta)?;
        Ok((model, adam))
    }

    /// Flatten context utterances into a single encoder input with the
    /// reserved EOS token as the utterance separator.
    pub fn flatten_context(context: &[Vec<String>]) -> Vec<String> {
        let sep = corpus::RESERVED_TOKENS[EOS].to_string();
        let mut out = Vec::new();
        for (i, utt) in context.iter().enumerate() {
            if i > 0 {
                out.push(sep.clone());
            }
            out.extend(utt.iter().cloned());
        }
        out
    }

    /// Build the id-level example: base ids for both encoders, the copy map
    /// from context positions to output columns, and optional target ids
    /// (terminated with EOS, encoded against the copy-extended vocabulary).
    pub fn example(
        &self,
        q: &[String],
        context: &[Vec<String>],
        target: Option<&[String]>,
    ) -> Result<(CrnExample, ExtendedVocab), CrnError> {
        if q.is_empty() {
            return Err(CrnError::EmptyInput("last utterance"));
        }
        let c_tokens = Self::flatten_context(context);
        if c_tokens.is_empty() {
            return Err(CrnError::EmptyInput("context"));
        }
        let (q_ids, _) = encode(q, &self.vocab, None);
        let (copy_map, ext) = encode(&c_tokens, &self.vocab, Some(&c_tokens));
        let c_ids: Vec<usize> = c_tokens
            .iter()
            .map(|t| self.vocab.id(t).unwrap_or(UNK))
            .collect();
        let target_ids = match target {
            Some(t) => {
                let (mut ids, _) = encode(t, &self.vocab, Some(&c_tokens));
                ids.push(EOS);
                Some(ids)
            }
            None => None,
        };
        Ok((
            CrnExample {
                q_ids,
                c_ids,
                copy_map,
                n_ext: ext.len(),
                target_ids,
            },
            ext,
        ))
    }

    /// Snapshot every parameter onto the tape. `store` is normally
    /// `&self.params`; passing another store with the same layout (e.g. a
    /// perturbed copy during gradient checking) is supported because models
    /// register parameters in a fixed order.
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> CrnBinding {
        CrnBinding {
            emb: tape.param(store, self.emb),
            q_enc: self.q_enc.bind(tape, store),
            c_enc: self.c_enc.bind(tape, store),
            dec: self.dec.bind(tape, store),
            init_w: tape.param(store, self.init_w),
            init_b: tape.param(store, self.init_b),
            fuse_w: tape.param(store, self.fuse_w),
            fuse_b: tape.param(store, self.fuse_b),
            attn_q: tape.param(store, self.attn_q),
            attn_c: tape.param(store, self.attn_c),
            pred_w1: tape.param(store, self.pred_w1),
            pred_b1: tape.param(store, self.pred_b1),
            pred_w2: tape.param(store, self.pred_w2),
            pred_b2: tape.param(store, self.pred_b2),
            copy_w1: tape.param(store, self.copy_w1),
            copy_b1: tape.param(store, self.copy_b1),
            copy_w2: tape.param(store, self.copy_w2),
            copy_b2: tape.param(store, self.copy_b2),
            gate_w1: tape.param(store, self.gate_w1),
            gate_b1: tape.param(store, self.gate_b1),
            gate_w2: tape.param(store, self.gate_w2),
            gate_b2: tape.param(store, self.gate_b2),
        }
    }

    /// Encode both sequences; returns H_Q, H_C, and the decoder start state
    /// `s_0 = tanh([q_final ; c_final]·W + b)`.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        binding: &CrnBinding,
        q_ids: &[usize],
        c_ids: &[usize],
    ) -> Result<EncoderOutputs, CrnError> {
        if q_ids.is_empty() {
            return Err(CrnError::EmptyInput("last utterance"));
        }
        if c_ids.is_empty() {
            return Err(CrnError::EmptyInput("context"));
        }
        let embed_seq = |tape: &mut Tape, ids: &[usize]| -> Result<Vec<NodeId>, TensorError> {
            ids.iter().map(|&i| tape.embed(binding.emb, &[i])).collect()
        };
        let q_x = embed_seq(tape, q_ids)?;
        let (q_steps, q_final) = binding.q_enc.encode(tape, &q_x)?;
        let c_x = embed_seq(tape, c_ids)?;
        let (c_steps, c_final) = binding.c_enc.encode(tape, &c_x)?;
        let h_q = tape.concat_rows(&q_steps)?;
        let h_c = tape.concat_rows(&c_steps)?;
        let finals = tape.concat_cols(&[q_final, c_final])?;
        let s0_pre = affine(tape, finals, binding.init_w, binding.init_b)?;
        let s0 = tape.tanh(s0_pre);
        Ok(EncoderOutputs { h_q, h_c, s0 })
    }

    /// One decoder step. `y_prev` may be a base or extended id; extended ids
    /// fall back to the UNK embedding for the recurrence input.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        binding: &CrnBinding,
        enc: &EncoderOutputs,
        state: NodeId,
        y_prev: usize,
        copy_map: &[usize],
        n_ext: usize,
        train: bool,
        rng: &mut StdRng,
    ) -> Result<StepOutput, CrnError> {
        let n_c = tape.value(enc.h_c).rows();
        if copy_map.len() != n_c {
            return Err(CrnError::CopyMapMismatch {
                expected: n_c,
                got: copy_map.len(),
            });
        }
        let v = self.vocab.len();
        let (_, att_q) = attend(tape, state, enc.h_q, binding.attn_q)?;
        let (_, att_c) = attend(tape, state, enc.h_c, binding.attn_c)?;
        let fused_in = tape.concat_cols(&[state, att_q, att_c])?;
        let z_pre = affine(tape, fused_in, binding.fuse_w, binding.fuse_b)?;
        let z = tape.dropout(z_pre, self.config.dropout, train, rng);

        // Predict head: distribution over the base vocabulary.
        let p_h = affine(tape, z, binding.pred_w1, binding.pred_b1)?;
        let p_h = tape.tanh(p_h);
        let p_logits = affine(tape, p_h, binding.pred_w2, binding.pred_b2)?;
        let p_pr = tape.softmax(p_logits);

        // Copy head: per-position scores over the context.
        let z_rep = tape.repeat_rows(z, n_c)?;
        let copy_in = tape.concat_cols(&[z_rep, enc.h_c])?;
        let c_h = affine(tape, copy_in, binding.copy_w1, binding.copy_b1)?;
        let c_h = tape.tanh(c_h);
        let c_scores = affine(tape, c_h, binding.copy_w2, binding.copy_b2)?;
        let c_row = tape.transpose(c_scores);
        let p_co = tape.softmax(c_row);

        // Two-way mode gate.
        let g_h = affine(tape, z, binding.gate_w1, binding.gate_b1)?;
        let g_h = tape.tanh(g_h);
        let g_logits = affine(tape, g_h, binding.gate_w2, binding.gate_b2)?;
        let gate = tape.softmax(g_logits);
        let g_pr = tape.pick(gate, 0, 0)?;
        let g_co = tape.pick(gate, 0, 1)?;

        // Mixture over base ∪ extended outcomes. Positions holding the same
        // token pool their copy probability via the scatter map.
        let out_cols = v + n_ext;
        let base_map: Vec<usize> = (0..v).collect();
        let pr_big = tape.scatter_add_cols(p_pr, &base_map, out_cols)?;
        let co_big = tape.scatter_add_cols(p_co, copy_map, out_cols)?;
        let pr_part = tape.mul(pr_big, g_pr)?;
        let co_part = tape.mul(co_big, g_co)?;
        let dist = tape.add(pr_part, co_part)?;

        // Recurrence input: [embed(y_prev) ; z].
        let emb_id = if y_prev < v { y_prev } else { UNK };
        let y_emb = tape.embed(binding.emb, &[emb_id])?;
        let dec_in = tape.concat_cols(&[y_emb, z])?;
        let next_state = binding.dec.step(tape, dec_in, state)?;

        Ok(StepOutput {
            dist,
            next_state,
            gate_predict: tape.value(gate).get(0, 0),
            gate_copy: tape.value(gate).get(0, 1),
            predict_probs: tape.value(p_pr).data().to_vec(),
            copy_position_probs: tape.value(p_co).data().to_vec(),
        })
    }

    /// Teacher-forced mean negative log-likelihood over a batch, pooled over
    /// every (example, step) pair; the EOS step is included.
    pub fn mle_loss(
        &self,
        tape: &mut Tape,
        binding: &CrnBinding,
        batch: &[CrnExample],
        train: bool,
        rng: &mut StdRng,
    ) -> Result<NodeId, CrnError> {
        let mut step_losses = Vec::new();
        for ex in batch {
            let target = ex
                .target_ids
                .as_ref()
                .ok_or(CrnError::EmptyInput("target"))?;
            let limit = self.vocab.len() + ex.n_ext;
            if let Some(&bad) = target.iter().find(|&&id| id >= limit) {
                return Err(CrnError::BadTarget { id: bad, limit });
            }
            let enc = self.encode_on_tape(tape, binding, &ex.q_ids, &ex.c_ids)?;
            let mut state = enc.s0;
            let mut y_prev = BOS;
            for &y in target {
                let step = self.decode_step(
                    tape, binding, &enc, state, y_prev, &ex.copy_map, ex.n_ext, train, rng,
                )?;
                let nll = tape.cross_entropy(step.dist, y)?;
                step_losses.push(nll);
                state = step.next_state;
                y_prev = y;
            }
        }
        if step_losses.is_empty() {
            return Err(CrnError::EmptyInput("batch"));
        }
        let all = tape.concat_cols(&step_losses)?;
        Ok(tape.mean(all))
    }

    /// Beam search over the mixture distribution; hypotheses are ranked by
    /// length-normalized log-probability. Extended ids decode back to their
    /// surface context tokens.
    pub fn beam_search(
        &self,
        q: &[String],
        context: &[Vec<String>],
        beam: usize,
        max_len: usize,
    ) -> Result<Vec<RewriteHyp>, CrnError> {
        assert!(beam >= 1, "beam must be >= 1");
        let (ex, ext) = self.example(q, context, None)?;
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, &self.params);
        let enc = self.encode_on_tape(&mut tape, &binding, &ex.q_ids, &ex.c_ids)?;
        let mut rng = StdRng::seed_from_u64(0); // dropout is off in eval mode

        struct Hyp {
            ids: Vec<usize>,
            log_prob: f64,
            state: NodeId,
            finished: bool,
        }
        let mut beams = vec![Hyp {
            ids: Vec::new(),
            log_prob: 0.0,
            state: enc.s0,
            finished: false,
        }];
        let mut done: Vec<Hyp> = Vec::new();

        for _ in 0..max_len {
            let mut candidates: Vec<Hyp> = Vec::new();
            for hyp in std::mem::take(&mut beams) {
                if hyp.finished {
                    done.push(hyp);
                    continue;
                }
                let y_prev = hyp.ids.last().copied().unwrap_or(BOS);
                let step = self.decode_step(
                    &mut tape, &binding, &enc, hyp.state, y_prev, &ex.copy_map, ex.n_ext,
                    false, &mut rng,
                )?;
                let probs = tape.value(step.dist).data().to_vec();
                let mut order: Vec<usize> = (0..probs.len()).collect();
                order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
                for &id in order.iter().take(beam) {
                    let mut ids = hyp.ids.clone();
                    ids.push(id);
                    candidates.push(Hyp {
                        ids,
                        log_prob: hyp.log_prob + probs[id].max(f64::MIN_POSITIVE).ln(),
                        state: step.next_state,
                        finished: id == EOS,
                    });
                }
            }
            if candidates.is_empty() {
                break;
            }
            candidates.sort_by(|a, b| b.log_prob.partial_cmp(&a.log_prob).unwrap());
            candidates.truncate(beam);
            let all_finished = candidates.iter().all(|c| c.finished);
            beams = candidates;
            if all_finished {
                done.extend(beams.drain(..));
                break;
            }
        }
        done.extend(beams);

        let mut hyps: Vec<RewriteHyp> = done
            .into_iter()
            .map(|h| {
                let len = h.ids.len().max(1) as f64;
                let surface: Vec<usize> = h
                    .ids
                    .iter()
                    .copied()
                    .filter(|&id| id != EOS)
                    .collect();
                RewriteHyp {
                    tokens: corpus::decode(&surface, &self.vocab, Some(&ext)),
                    ids: h.ids.clone(),
                    log_prob: h.log_prob,
                    score: h.log_prob / len,
                }
            })
            .collect();
        hyps.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        Ok(hyps)
    }

    /// Ancestral sampling from the temperature-scaled mixture. EOS is
    /// excluded at the first step so samples are never empty; the returned
    /// log-probabilities are those of the sampled tokens under the
    /// unscaled policy (including the first-step renormalization).
    pub fn sample(
        &self,
        q: &[String],
        context: &[Vec<String>],
        temperature: f64,
        rng: &mut StdRng,
        max_len: usize,
    ) -> Result<SampleResult, CrnError> {
        let (ex, ext) = self.example(q, context, None)?;
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, &self.params);
        let out = self.sample_on_tape(&mut tape, &binding, &ex, temperature, rng, max_len)?;
        let surface: Vec<usize> = out.ids.iter().copied().filter(|&id| id != EOS).collect();
        Ok(SampleResult {
            tokens: corpus::decode(&surface, &self.vocab, Some(&ext)),
            ids: out.ids,
            log_probs: out.log_probs,
        })
    }

    /// Sampling pass that leaves the per-step log-probability nodes on the
    /// tape so a policy-gradient surrogate can backpropagate through them.
    pub fn sample_on_tape(
        &self,
        tape: &mut Tape,
        binding: &CrnBinding,
        ex: &CrnExample,
        temperature: f64,
        rng: &mut StdRng,
        max_len: usize,
    ) -> Result<TapeSample, CrnError> {
        assert!(temperature > 0.0, "temperature must be > 0");
        let enc = self.encode_on_tape(tape, binding, &ex.q_ids, &ex.c_ids)?;
        let mut state = enc.s0;
        let mut ids = Vec::new();
        let mut log_prob_nodes = Vec::new();
        let mut log_probs = Vec::new();
        let mut dropout_rng = StdRng::seed_from_u64(0); // eval mode
        for step_idx in 0..max_len {
            let y_prev = ids.last().copied().unwrap_or(BOS);
            let step = self.decode_step(
                tape, binding, &enc, state, y_prev, &ex.copy_map, ex.n_ext, false,
                &mut dropout_rng,
            )?;
            let probs = tape.value(step.dist).data().to_vec();
            let forbid_eos = step_idx == 0;
            let id = sample_index(&probs, temperature, forbid_eos, rng);
            // log-prob of the realized token under the unscaled policy.
            let picked = tape.pick(step.dist, 0, id)?;
            let lp_node = if forbid_eos {
                // policy renormalizes without EOS: log p − log(1 − p_eos)
                let p_eos = tape.pick(step.dist, 0, EOS)?;
                let neg = tape.neg(p_eos);
                let rest = tape.add_scalar(neg, 1.0);
                let log_rest = tape.log(rest);
                let log_p = tape.log(picked);
                tape.sub(log_p, log_rest)?
            } else {
                tape.log(picked)
            };
            log_probs.push(tape.value(lp_node).scalar_value());
            log_prob_nodes.push(lp_node);
            ids.push(id);
            state = step.next_state;
            if id == EOS {
                break;
            }
        }
        Ok(TapeSample {
            ids,
            log_prob_nodes,
            log_probs,
        })
    }

    /// Beam-1 rewrite convenience.
    pub fn greedy(&self, q: &[String], context: &[Vec<String>], max_len: usize) -> Result<Vec<String>, CrnError> {
        Ok(self
            .beam_search(q, context, 1, max_len)?
            .into_iter()
            .next()
            .map(|h| h.tokens)
            .unwrap_or_default())
    }
}

/// Sample an index from `probs^(1/temperature)`, optionally excluding EOS.
/// Computed in log space so tiny temperatures degrade to argmax.
fn sample_index(probs: &[f64], temperature: f64, forbid_eos: bool, rng: &mut StdRng) -> usize {
    let mut weights: Vec<f64> = probs
        .iter()
        .map(|&p| p.max(f64::MIN_POSITIVE).ln() / temperature)
        .collect();
    if forbid_eos {
        weights[EOS] = f64::NEG_INFINITY;
    }
    let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = weights.iter().map(|&w| (w - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut draw = rng.random::<f64>() * total;
    for (i, &e) in exps.iter().enumerate() {
        draw -= e;
        if draw <= 0.0 && e > 0.0 {
            return i;
        }
    }
    // Numerical fallback: the most probable admissible index.
    exps.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Copy parameters by name from `src` into `dst`; the stores must describe
/// the same parameter set.
fn copy_params_by_name(dst: &mut ParamStore, src: &ParamStore) -> Result<(), String> {
    if dst.len() != src.len() {
        return Err(format!(
            "parameter count mismatch: {} vs {}",
            dst.len(),
            src.len()
        ));
    }
    for id in dst.ids().collect::<Vec<_>>() {
        let name = dst.name(id).to_string();
        let src_id = src
            .by_name(&name)
            .ok_or_else(|| format!("missing parameter {name:?}"))?;
        if dst.value(id).shape() != src.value(src_id).shape() {
            return Err(format!("shape mismatch for {name:?}"));
        }
        *dst.value_mut(id) = src.value(src_id).clone();
    }
    Ok(())
}

/// Id-level training/inference example.
#[derive(Debug, Clone)]
pub struct CrnExample {
    pub q_ids: Vec<usize>,
    pub c_ids: Vec<usize>,
    pub copy_map: Vec<usize>,
    pub n_ext: usize,
    pub target_ids: Option<Vec<usize>>,
}

/// Tape-bound parameters for one forward pass.
pub struct CrnBinding {
    pub emb: NodeId,
    q_enc: BiGruNodes,
    c_enc: BiGruNodes,
    dec: GruNodes,
    init_w: NodeId,
    init_b: NodeId,
    fuse_w: NodeId,
    fuse_b: NodeId,
    attn_q: NodeId,
    attn_c: NodeId,
    pred_w1: NodeId,
    pred_b1: NodeId,
    pred_w2: NodeId,
    pred_b2: NodeId,
    copy_w1: NodeId,
    copy_b1: NodeId,
    copy_w2: NodeId,
    copy_b2: NodeId,
    gate_w1: NodeId,
    gate_b1: NodeId,
    gate_w2: NodeId,
    gate_b2: NodeId,
}

/// Encoder states: per-step matrices H_Q (n_q×2H), H_C (n_c×2H), and the
/// decoder start state.
pub struct EncoderOutputs {
    pub h_q: NodeId,
    pub h_c: NodeId,
    pub s0: NodeId,
}

/// One decode step's distribution node, next state, and diagnostics.
#[derive(Debug)]
pub struct StepOutput {
    pub dist: NodeId,
    pub next_state: NodeId,
    pub gate_predict: f64,
    pub gate_copy: f64,
    pub predict_probs: Vec<f64>,
    pub copy_position_probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RewriteHyp {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    pub log_prob: f64,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct SampleResult {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    pub log_probs: Vec<f64>,
}

/// Sampling output bound to a live tape.
pub struct TapeSample {
    pub ids: Vec<usize>,
    pub log_prob_nodes: Vec<NodeId>,
    pub log_probs: Vec<f64>,
}

/// Bilinear attention: `e_i = h_i·W_a·s`, `α = softmax(e)`,
/// `context = Σ α_i·h_i`.
pub fn attend(
    tape: &mut Tape,
    s: NodeId,
    h: NodeId,
    w_a: NodeId,
) -> Result<(NodeId, NodeId), TensorError> {
    let proj = tape.matmul(h, w_a)?;
    let st = tape.transpose(s);
    let e = tape.matmul(proj, st)?;
    let e_row = tape.transpose(e);
    let alpha = tape.softmax(e_row);
    let ctx = tape.matmul(alpha, h)?;
    Ok((alpha, ctx))
}

fn affine(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}
