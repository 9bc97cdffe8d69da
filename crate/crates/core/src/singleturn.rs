//! Single-turn downstream models: an attention encoder-decoder generator
//! and a dual-encoder response selector. Both rerank pseudo candidates and
//! serve as reward oracles for fine-tuning.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crn_tensor::{checkpoint, Adam, Array, BiGru, GruCell, NodeId, ParamId, ParamStore, Tape, TensorError};

use crate::corpus::{build_vocab, encode, DialogueSession, Vocab, BOS, EOS, UNK};
use crate::crn::attend;

#[derive(Debug, Error)]
pub enum SingleTurnError {
    #[error("empty {0}")]
    EmptyInput(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("checkpoint meta: {0}")]
    Meta(String),
    #[error("vocab: {0}")]
    Corpus(#[from] crate::corpus::CorpusError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct S2sConfig {
    pub emb_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
}

impl Default for S2sConfig {
    fn default() -> Self {
        S2sConfig {
            emb_dim: 64,
            enc_hidden: 64,
            dec_hidden: 128,
        }
    }
}

impl S2sConfig {
    pub fn tiny(emb: usize, enc: usize, dec: usize) -> Self {
        S2sConfig {
            emb_dim: emb,
            enc_hidden: enc,
            dec_hidden: dec,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct S2sMeta {
    kind: String,
    config: S2sConfig,
    vocab: Vec<String>,
}

/// Attention encoder-decoder scored by teacher-forced cross-entropy.
pub struct S2sModel {
    pub config: S2sConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    enc: BiGru,
    dec: GruCell,
    emb: ParamId,
    init_w: ParamId,
    init_b: ParamId,
    fuse_w: ParamId,
    fuse_b: ParamId,
    attn: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl S2sModel {
    pub fn new(vocab: Vocab, config: S2sConfig, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let v = vocab.len();
        let (e, h, d) = (config.emb_dim, config.enc_hidden, config.dec_hidden);
        let r = 0.08;
        let emb = params.add("emb", Array::uniform(v, e, -r, r, &mut rng));
        let enc = BiGru::init(&mut params, "enc", e, h, &mut rng);
        let init_w = params.add("init.w", Array::uniform(2 * h, d, -r, r, &mut rng));
        let init_b = params.add("init.b", Array::zeros(1, d));
        let fuse_w = params.add("fuse.w", Array::uniform(d + 2 * h, d, -r, r, &mut rng));
        let fuse_b = params.add("fuse.b", Array::zeros(1, d));
        let attn = params.add("attn.w", Array::uniform(2 * h, d, -r, r, &mut rng));
        let dec = GruCell::init(&mut params, "dec", e + d, d, &mut rng);
        let out_w = params.add("out.w", Array::uniform(d, v, -r, r, &mut rng));
        let out_b = params.add("out.b", Array::zeros(1, v));
        S2sModel {
            config,
            vocab,
            params,
            enc,
            dec,
            emb,
            init_w,
            init_b,
            fuse_w,
            fuse_b,
            attn,
            out_w,
            out_b,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SingleTurnError> {
        let meta = S2sMeta {
            kind: "s2s".into(),
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
        };
        checkpoint::save(
            path,
            &serde_json::to_string(&meta).expect("meta"),
            &self.params,
            None,
        )?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SingleTurnError> {
        let (meta, store, _) = checkpoint::load(path)?;
        let meta: S2sMeta =
            serde_json::from_str(&meta).map_err(|e| SingleTurnError::Meta(e.to_string()))?;
        if meta.kind != "s2s" {
            return Err(SingleTurnError::Meta(format!(
                "expected an s2s checkpoint, found {:?}",
                meta.kind
            )));
        }
        let mut model = S2sModel::new(Vocab::from_token_list(meta.vocab), meta.config, 0);
        copy_by_name(&mut model.params, &store).map_err(SingleTurnError::Meta)?;
        Ok(model)
    }

    fn ids(&self, tokens: &[String]) -> Vec<usize> {
        let (ids, _) = encode(tokens, &self.vocab, None);
        ids
    }

    /// Teacher-forced loss node on an existing tape; mean per-token negative
    /// log-likelihood of `target` (EOS appended) given `source`.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        source: &[String],
        target: &[String],
    ) -> Result<NodeId, SingleTurnError> {
        if source.is_empty() {
            return Err(SingleTurnError::EmptyInput("source"));
        }
        if target.is_empty() {
            return Err(SingleTurnError::EmptyInput("target"));
        }
        let emb_node = tape.param(store, self.emb);
        let enc_nodes = self.enc.bind(tape, store);
        let src_ids = self.ids(source);
        let xs: Vec<NodeId> = src_ids
            .iter()
            .map(|&i| tape.embed(emb_node, &[i]))
            .collect::<Result<_, _>>()?;
        let (steps, final_state) = enc_nodes.encode(tape, &xs)?;
        let h = tape.concat_rows(&steps)?;
        let init_w = tape.param(store, self.init_w);
        let init_b = tape.param(store, self.init_b);
        let s0_lin = tape.matmul(final_state, init_w)?;
        let s0_pre = tape.add(s0_lin, init_b)?;
        let mut state = tape.tanh(s0_pre);
        let fuse_w = tape.param(store, self.fuse_w);
        let fuse_b = tape.param(store, self.fuse_b);
        let attn_w = tape.param(store, self.attn);
        let out_w = tape.param(store, self.out_w);
        let out_b = tape.param(store, self.out_b);
        let dec_nodes = self.dec.bind(tape, store);

        let mut tgt_ids = self.ids(target);
        tgt_ids.push(EOS);
        let mut losses = Vec::with_capacity(tgt_ids.len());
        let mut y_prev = BOS;
        for &y in &tgt_ids {
            let (_, ctx) = attend(tape, state, h, attn_w)?;
            let fused_in = tape.concat_cols(&[state, ctx])?;
            let z_lin = tape.matmul(fused_in, fuse_w)?;
            let z = tape.add(z_lin, fuse_b)?;
            let logits_lin = tape.matmul(z, out_w)?;
            let logits = tape.add(logits_lin, out_b)?;
            let probs = tape.softmax(logits);
            losses.push(tape.cross_entropy(probs, y)?);
            let y_emb = tape.embed(emb_node, &[if y_prev < self.vocab.len() { y_prev } else { UNK }])?;
            let dec_in = tape.concat_cols(&[y_emb, z])?;
            state = dec_nodes.step(tape, dec_in, state)?;
            y_prev = y;
        }
        let all = tape.concat_cols(&losses)?;
        Ok(tape.mean(all))
    }

    /// `L(response | source)`: mean per-token cross-entropy, EOS included.
    /// Pure: repeated calls are identical.
    pub fn loss(&self, source: &[String], response: &[String]) -> Result<f64, SingleTurnError> {
        let mut tape = Tape::new();
        let node = self.loss_on_tape(&mut tape, &self.params, source, response)?;
        Ok(tape.value(node).scalar_value())
    }
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub vocab_max: usize,
    pub vocab_min_count: u64,
    pub val_fraction: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 5,
            lr: 0.0004,
            batch_size: 32,
            seed: 42,
            clip_norm: 5.0,
            vocab_max: 20_000,
            vocab_min_count: 1,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

fn deterministic_split<T: Clone>(items: &[T], val_fraction: f64) -> (Vec<T>, Vec<T>) {
    let n = items.len();
    let val_n = if n >= 5 && val_fraction > 0.0 {
        ((n as f64 * val_fraction).ceil() as usize).clamp(1, n / 2)
    } else {
        0
    };
    let split = n - val_n;
    (items[..split].to_vec(), items[split..].to_vec())
}

/// Train the generator on (source, response) pairs with Adam and teacher
/// forcing. Validation (when the set is big enough) is evaluated without
/// dropout and the best-validation parameters are kept.
pub fn train_s2s(
    pairs: &[(Vec<String>, Vec<String>)],
    model_config: S2sConfig,
    fit: &FitConfig,
) -> Result<(S2sModel, Vec<EpochStat>), SingleTurnError> {
    if pairs.is_empty() {
        return Err(SingleTurnError::EmptyInput("training pairs"));
    }
    let sessions: Vec<DialogueSession> = pairs
        .iter()
        .map(|(s, r)| DialogueSession {
            context: vec![s.clone()],
            last: s.clone(),
            response: r.clone(),
        })
        .collect();
    let vocab = build_vocab(&sessions, fit.vocab_max, fit.vocab_min_count)?;
    let mut model = S2sModel::new(vocab, model_config, fit.seed);
    let (train, val) = deterministic_split(pairs, fit.val_fraction);
    let mut adam = Adam::new(fit.lr, &model.params);
    let mut rng = StdRng::seed_from_u64(fit.seed);
    let mut stats = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 0..fit.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        let mut batches = 0.0f64;
        for chunk in order.chunks(fit.batch_size) {
            let mut tape = Tape::new();
            let mut losses = Vec::new();
            for &i in chunk {
                losses.push(self_loss(&model, &mut tape, &train[i].0, &train[i].1)?);
            }
            let all = tape.concat_cols(&losses)?;
            let loss = tape.mean(all);
            total_loss += tape.value(loss).scalar_value();
            batches += 1.0;
            tape.backward(loss, &mut model.params)?;
            model.params.clip_grad_norm(fit.clip_norm);
            adam.step(&mut model.params);
        }
        let train_loss = total_loss / batches.max(1.0);
        let val_loss = if val.is_empty() {
            None
        } else {
            let mut total = 0.0;
            for (s, r) in &val {
                total += model.loss(s, r)?;
            }
            Some(total / val.len() as f64)
        };
        let tracked = val_loss.unwrap_or(train_loss);
        if best.as_ref().map(|(b, _)| tracked < *b).unwrap_or(true) {
            best = Some((tracked, model.params.clone()));
        }
        stats.push(EpochStat {
            epoch,
            train_loss,
            val_loss,
        });
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, stats))
}

fn self_loss(
    model: &S2sModel,
    tape: &mut Tape,
    source: &[String],
    target: &[String],
) -> Result<NodeId, SingleTurnError> {
    model.loss_on_tape(tape, &model.params, source, target)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IrConfig {
    pub emb_dim: usize,
    pub hidden: usize,
}

impl Default for IrConfig {
    fn default() -> Self {
        IrConfig {
            emb_dim: 64,
            hidden: 64,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct IrMeta {
    kind: String,
    config: IrConfig,
    vocab: Vec<String>,
}

/// Twin biGRU encoders with a dot-product score. Larger scores mean a
/// better utterance/response match.
pub struct IrModel {
    pub config: IrConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    utt_enc: BiGru,
    resp_enc: BiGru,
    emb: ParamId,
}

impl IrModel {
    pub fn new(vocab: Vocab, config: IrConfig, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (e, h) = (config.emb_dim, config.hidden);
        let emb = params.add("emb", Array::uniform(vocab.len(), e, -0.08, 0.08, &mut rng));
        let utt_enc = BiGru::init(&mut params, "utt", e, h, &mut rng);
        let resp_enc = BiGru::init(&mut params, "resp", e, h, &mut rng);
        IrModel {
            config,
            vocab,
            params,
            utt_enc,
            resp_enc,
            emb,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SingleTurnError> {
        let meta = IrMeta {
            kind: "ir".into(),
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
        };
        checkpoint::save(
            path,
            &serde_json::to_string(&meta).expect("meta"),
            &self.params,
            None,
        )?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SingleTurnError> {
        let (meta, store, _) = checkpoint::load(path)?;
        let meta: IrMeta =
            serde_json::from_str(&meta).map_err(|e| SingleTurnError::Meta(e.to_string()))?;
        if meta.kind != "ir" {
            return Err(SingleTurnError::Meta(format!(
                "expected an ir checkpoint, found {:?}",
                meta.kind
            )));
        }
        let mut model = IrModel::new(Vocab::from_token_list(meta.vocab), meta.config, 0);
        copy_by_name(&mut model.params, &store).map_err(SingleTurnError::Meta)?;
        Ok(model)
    }

    fn score_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        utterance: &[String],
        response: &[String],
    ) -> Result<NodeId, SingleTurnError> {
        if utterance.is_empty() {
            return Err(SingleTurnError::EmptyInput("utterance"));
        }
        if response.is_empty() {
            return Err(SingleTurnError::EmptyInput("response"));
        }
        let emb_node = tape.param(store, self.emb);
        let encode_seq = |tape: &mut Tape,
                          enc: &BiGru,
                          tokens: &[String]|
         -> Result<NodeId, SingleTurnError> {
            let (ids, _) = encode(tokens, &self.vocab, None);
            let xs: Vec<NodeId> = ids
                .iter()
                .map(|&i| tape.embed(emb_node, &[i]))
                .collect::<Result<_, _>>()?;
            let nodes = enc.bind(tape, store);
            let (_, final_state) = nodes.encode(tape, &xs)?;
            Ok(final_state)
        };
        let u = encode_seq(tape, &self.utt_enc, utterance)?;
        let r = encode_seq(tape, &self.resp_enc, response)?;
        let rt = tape.transpose(r);
        Ok(tape.matmul(u, rt)?)
    }

    /// Relevance of a response to an utterance; pure.
    pub fn score(&self, utterance: &[String], response: &[String]) -> Result<f64, SingleTurnError> {
        let mut tape = Tape::new();
        let node = self.score_on_tape(&mut tape, &self.params, utterance, response)?;
        Ok(tape.value(node).scalar_value())
    }

    /// `score(s, po) − score(s, ne)`: positive when the positive response
    /// outranks the negative for utterance `s`. Antisymmetric in (po, ne).
    pub fn margin(
        &self,
        po: &[String],
        ne: &[String],
        utterance: &[String],
    ) -> Result<f64, SingleTurnError> {
        Ok(self.score(utterance, po)? - self.score(utterance, ne)?)
    }
}

/// Train the selector by maximizing `mean log σ(margin)` over
/// (utterance, positive, negative) triples.
pub fn train_ir(
    triples: &[(Vec<String>, Vec<String>, Vec<String>)],
    model_config: IrConfig,
    fit: &FitConfig,
) -> Result<(IrModel, Vec<EpochStat>), SingleTurnError> {
    if triples.is_empty() {
        return Err(SingleTurnError::EmptyInput("training triples"));
    }
    let sessions: Vec<DialogueSession> = triples
        .iter()
        .map(|(u, p, n)| DialogueSession {
            context: vec![n.clone()],
            last: u.clone(),
            response: p.clone(),
        })
        .collect();
    let vocab = build_vocab(&sessions, fit.vocab_max, fit.vocab_min_count)?;
    let mut model = IrModel::new(vocab, model_config, fit.seed);
    let mut adam = Adam::new(fit.lr, &model.params);
    let mut rng = StdRng::seed_from_u64(fit.seed);
    let mut stats = Vec::new();
    for epoch in 0..fit.epochs {
        let mut order: Vec<usize> = (0..triples.len()).collect();
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        let mut batches = 0.0f64;
        for chunk in order.chunks(fit.batch_size) {
            let mut tape = Tape::new();
            let mut losses = Vec::new();
            for &i in chunk {
                let (u, po, ne) = &triples[i];
                let s_po = model.score_on_tape(&mut tape, &model.params, u, po)?;
                let s_ne = model.score_on_tape(&mut tape, &model.params, u, ne)?;
                let margin = tape.sub(s_po, s_ne)?;
                let sig = tape.sigmoid(margin);
                let log_sig = tape.log(sig);
                losses.push(tape.neg(log_sig));
            }
            let all = tape.concat_cols(&losses)?;
            let loss = tape.mean(all);
            total_loss += tape.value(loss).scalar_value();
            batches += 1.0;
            tape.backward(loss, &mut model.params)?;
            model.params.clip_grad_norm(fit.clip_norm);
            adam.step(&mut model.params);
        }
        stats.push(EpochStat {
            epoch,
            train_loss: total_loss / batches.max(1.0),
            val_loss: None,
        });
    }
    Ok((model, stats))
}

/// Derive (source, response) generator pairs from sessions: the last
/// utterance paired with its response.
pub fn pairs_from_sessions(sessions: &[DialogueSession]) -> Vec<(Vec<String>, Vec<String>)> {
    sessions
        .iter()
        .map(|s| (s.last.clone(), s.response.clone()))
        .collect()
}

/// Derive (utterance, positive, negative) selector triples from sessions,
/// negatives sampled uniformly from other sessions' responses (1:1 ratio).
pub fn triples_from_sessions(
    sessions: &[DialogueSession],
    seed: u64,
) -> Vec<(Vec<String>, Vec<String>, Vec<String>)> {
    let mut rng = StdRng::seed_from_u64(seed);
    sessions
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let ne = sample_negative(sessions, i, &mut rng);
            (s.last.clone(), s.response.clone(), ne)
        })
        .collect()
}

/// A random other session's response; falls back to the own response when
/// the corpus has a single session.
pub fn sample_negative(
    sessions: &[DialogueSession],
    own_index: usize,
    rng: &mut StdRng,
) -> Vec<String> {
    if sessions.len() <= 1 {
        return sessions[own_index].response.clone();
    }
    loop {
        let j = rng.random_range(0..sessions.len());
        if j != own_index {
            return sessions[j].response.clone();
        }
    }
}

fn copy_by_name(dst: &mut ParamStore, src: &ParamStore) -> Result<(), String> {
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
        *dst.value_mut(id) = src.value(src_id).clone();
    }
    Ok(())
}
