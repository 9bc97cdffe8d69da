//! Two-stage training for the rewriter: teacher-forced MLE pretraining on
//! pseudo quadruplets, then policy-gradient fine-tuning that maximizes a
//! task reward while an MLE anchor keeps the policy near the pretrained
//! one: `L_com = L_rl + λ·L_MLE`.
//!
//! The policy-gradient surrogate is REINFORCE with the reward treated as a
//! constant per sampled sequence: `L_rl = mean(−R · Σ_t log p(y_t))`, with
//! log-probabilities taken from the sampling pass. Both task rewards are
//! differences against the pseudo target `q*`, which acts as an implicit
//! baseline.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::Serialize;
use thiserror::Error;

use crn_tensor::{Adam, ParamStore, Tape};

use crate::corpus::{self, DialogueSession, PseudoQuadruplet, EOS};
use crate::crn::{CrnError, CrnExample, CrnModel};
use crate::singleturn::{IrModel, S2sModel, SingleTurnError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training data")]
    EmptyData,
    #[error(transparent)]
    Crn(#[from] CrnError),
    #[error("reward oracle failed on session {index}: {source}")]
    RewardFailed {
        index: usize,
        source: SingleTurnError,
    },
    #[error("session {index} has no negative response for the selection reward")]
    MissingNegative { index: usize },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Harmonic weight of the MLE anchor in the combined objective.
    pub lambda: f64,
    pub samples_per_example: usize,
    pub temperature: f64,
    pub val_fraction: f64,
    pub max_decode_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.0004,
            batch_size: 32,
            epochs: 10,
            seed: 42,
            clip_norm: 5.0,
            lambda: 0.1,
            samples_per_example: 1,
            temperature: 1.0,
            val_fraction: 0.1,
            max_decode_len: 40,
        }
    }
}

/// One training-log record; serialized as JSONL by the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub perplexity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_reward: Option<f64>,
    pub lr: f64,
}

/// Halve the learning rate when validation perplexity begins to increase.
fn lr_after_validation(previous_val: Option<f64>, current_val: f64, lr: f64) -> f64 {
    match previous_val {
        Some(prev) if current_val > prev => lr / 2.0,
        _ => lr,
    }
}

pub struct PretrainReport {
    pub logs: Vec<EpochLog>,
    pub best_val_loss: f64,
}

/// Minimize the teacher-forced NLL of `q*` with Adam. Validation is scored
/// without dropout each epoch; the best-validation parameters are restored
/// at the end.
pub fn pretrain(
    model: &mut CrnModel,
    quads: &[PseudoQuadruplet],
    config: &TrainConfig,
) -> Result<PretrainReport, TrainError> {
    if quads.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let examples: Vec<CrnExample> = quads
        .iter()
        .map(|q| {
            model
                .example(&q.session.last, &q.session.context, Some(&q.rewritten))
                .map(|(ex, _)| ex)
        })
        .collect::<Result<_, _>>()?;
    let n = examples.len();
    let val_n = if n >= 5 && config.val_fraction > 0.0 {
        ((n as f64 * config.val_fraction).ceil() as usize).clamp(1, n / 2)
    } else {
        0
    };
    let (train, val) = examples.split_at(n - val_n);

    let mut adam = Adam::new(config.lr, &model.params);
    let mut rng = StdRng::seed_from_u64(config.seed);
    let mut logs = Vec::new();
    let mut prev_val: Option<f64> = None;
    let mut best: Option<(f64, ParamStore)> = None;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut token_weighted_loss = 0.0;
        let mut token_total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<CrnExample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let tokens: usize = batch
                .iter()
                .map(|ex| ex.target_ids.as_ref().map(Vec::len).unwrap_or(0))
                .sum();
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, &model.params);
            let loss = model.mle_loss(&mut tape, &binding, &batch, true, &mut rng)?;
            let loss_value = tape.value(loss).scalar_value();
            token_weighted_loss += loss_value * tokens as f64;
            token_total += tokens as f64;
            tape.backward(loss, &mut model.params).map_err(CrnError::from)?;
            model.params.clip_grad_norm(config.clip_norm);
            adam.step(&mut model.params);
        }
        let train_loss = token_weighted_loss / token_total.max(1.0);
        logs.push(EpochLog {
            epoch,
            split: "train".into(),
            loss: train_loss,
            perplexity: train_loss.exp(),
            mean_reward: None,
            lr: adam.lr,
        });

        let tracked = if val.is_empty() {
            train_loss
        } else {
            let val_loss = eval_loss(model, val)?;
            adam.lr = lr_after_validation(prev_val, val_loss, adam.lr);
            prev_val = Some(val_loss);
            logs.push(EpochLog {
                epoch,
                split: "val".into(),
                loss: val_loss,
                perplexity: val_loss.exp(),
                mean_reward: None,
                lr: adam.lr,
            });
            val_loss
        };
        if best.as_ref().map(|(b, _)| tracked < *b).unwrap_or(true) {
            best = Some((tracked, model.params.clone()));
        }
    }
    let (best_val_loss, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(PretrainReport {
        logs,
        best_val_loss,
    })
}

/// Dropout-free pooled mean NLL over a set of examples.
pub fn eval_loss(model: &CrnModel, examples: &[CrnExample]) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut rng = StdRng::seed_from_u64(0);
    let mut total = 0.0;
    let mut tokens = 0.0;
    for chunk in examples.chunks(16) {
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, &model.params);
        let loss = model.mle_loss(&mut tape, &binding, chunk, false, &mut rng)?;
        let n: usize = chunk
            .iter()
            .map(|ex| ex.target_ids.as_ref().map(Vec::len).unwrap_or(0))
            .sum();
        total += tape.value(loss).scalar_value() * n as f64;
        tokens += n as f64;
    }
    Ok(total / tokens.max(1.0))
}

/// `R_g = L(r | q*) − L(r | q_r)`: positive when the sampled rewrite is a
/// better generation source than the pseudo target. Antisymmetric under
/// swapping `q_r` and `q*`.
pub fn reward_generation(
    m_s2s: &S2sModel,
    response: &[String],
    q_star: &[String],
    q_r: &[String],
) -> Result<f64, SingleTurnError> {
    Ok(m_s2s.loss(q_star, response)? - m_s2s.loss(q_r, response)?)
}

/// `R_ir = margin(po, ne, q_r) − margin(po, ne, q*)`: positive when the
/// sampled rewrite separates positive from negative responses better than
/// the pseudo target.
pub fn reward_selection(
    m_ir: &IrModel,
    positive: &[String],
    negative: &[String],
    q_star: &[String],
    q_r: &[String],
) -> Result<f64, SingleTurnError> {
    Ok(m_ir.margin(positive, negative, q_r)? - m_ir.margin(positive, negative, q_star)?)
}

/// One fine-tuning example: the session, its pseudo target, and (for the
/// selection task) a sampled negative response.
#[derive(Debug, Clone)]
pub struct RlExample {
    pub session: DialogueSession,
    pub q_star: Vec<String>,
    pub negative: Option<Vec<String>>,
}

/// Build fine-tuning examples from quadruplets; negatives are drawn
/// uniformly from other sessions' responses when requested.
pub fn rl_examples_from_quads(
    quads: &[PseudoQuadruplet],
    with_negatives: bool,
    seed: u64,
) -> Vec<RlExample> {
    let sessions: Vec<DialogueSession> = quads.iter().map(|q| q.session.clone()).collect();
    let mut rng = StdRng::seed_from_u64(seed);
    quads
        .iter()
        .enumerate()
        .map(|(i, q)| RlExample {
            session: q.session.clone(),
            q_star: q.rewritten.clone(),
            negative: if with_negatives {
                Some(crate::singleturn::sample_negative(&sessions, i, &mut rng))
            } else {
                None
            },
        })
        .collect()
}

/// Scores a sampled rewrite for one example.
pub trait RewardOracle: Sync {
    fn reward(&self, example: &RlExample, q_r: &[String]) -> Result<f64, SingleTurnError>;
}

pub struct GenerationReward<'a>(pub &'a S2sModel);

impl RewardOracle for GenerationReward<'_> {
    fn reward(&self, example: &RlExample, q_r: &[String]) -> Result<f64, SingleTurnError> {
        reward_generation(self.0, &example.session.response, &example.q_star, q_r)
    }
}

pub struct SelectionReward<'a>(pub &'a IrModel);

impl RewardOracle for SelectionReward<'_> {
    fn reward(&self, example: &RlExample, q_r: &[String]) -> Result<f64, SingleTurnError> {
        let negative = example
            .negative
            .as_ref()
            .ok_or(SingleTurnError::EmptyInput("negative response"))?;
        reward_selection(
            self.0,
            &example.session.response,
            negative,
            &example.q_star,
            q_r,
        )
    }
}

/// Per-step statistics; `l_com == l_rl + lambda·l_mle` holds exactly.
#[derive(Debug, Clone, Copy)]
pub struct RlStepStats {
    pub l_com: f64,
    pub l_rl: f64,
    pub l_mle: f64,
    pub mean_reward: f64,
}

/// One combined policy-gradient + MLE update:
/// draw `k` samples per example, score them with the reward oracle, build
/// `L_com = mean(−R·Σ log p) + λ·L_MLE`, and take one clipped Adam step.
pub fn rl_step(
    model: &mut CrnModel,
    batch: &[RlExample],
    oracle: &dyn RewardOracle,
    config: &TrainConfig,
    adam: &mut Adam,
    rng: &mut StdRng,
) -> Result<RlStepStats, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, &model.params);
    let mut rl_terms = Vec::new();
    let mut rewards = Vec::new();
    let mut mle_examples = Vec::with_capacity(batch.len());
    let sample_count = (batch.len() * config.samples_per_example) as f64;
    for (index, example) in batch.iter().enumerate() {
        let (cex, ext) = model.example(
            &example.session.last,
            &example.session.context,
            Some(&example.q_star),
        )?;
        for _ in 0..config.samples_per_example {
            let sample = model.sample_on_tape(
                &mut tape,
                &binding,
                &cex,
                config.temperature,
                rng,
                config.max_decode_len,
            )?;
            let surface: Vec<usize> = sample
                .ids
                .iter()
                .copied()
                .filter(|&id| id != EOS)
                .collect();
            let q_r = corpus::decode(&surface, &model.vocab, Some(&ext));
            let reward = oracle
                .reward(example, &q_r)
                .map_err(|source| TrainError::RewardFailed { index, source })?;
            rewards.push(reward);
            let joined = tape.concat_cols(&sample.log_prob_nodes).map_err(CrnError::from)?;
            let sum_lp = tape.sum(joined);
            rl_terms.push(tape.scale(sum_lp, -reward / sample_count));
        }
        mle_examples.push(cex);
    }
    let rl_joined = tape.concat_cols(&rl_terms).map_err(CrnError::from)?;
    let l_rl = tape.sum(rl_joined);
    let l_mle = model.mle_loss(&mut tape, &binding, &mle_examples, false, rng)?;
    let weighted_mle = tape.scale(l_mle, config.lambda);
    let l_com = tape.add(l_rl, weighted_mle).map_err(CrnError::from)?;

    let stats = RlStepStats {
        l_com: tape.value(l_com).scalar_value(),
        l_rl: tape.value(l_rl).scalar_value(),
        l_mle: tape.value(l_mle).scalar_value(),
        mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
    };
    tape.backward(l_com, &mut model.params).map_err(CrnError::from)?;
    model.params.clip_grad_norm(config.clip_norm);
    adam.step(&mut model.params);
    Ok(stats)
}

pub struct FinetuneReport {
    pub logs: Vec<EpochLog>,
    /// Mean reward per epoch.
    pub reward_curve: Vec<f64>,
}

/// Iterate [`rl_step`] over the data; the best-mean-reward parameters are
/// restored at the end.
pub fn finetune(
    model: &mut CrnModel,
    data: &[RlExample],
    oracle: &dyn RewardOracle,
    config: &TrainConfig,
) -> Result<FinetuneReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut adam = Adam::new(config.lr, &model.params);
    let mut rng = StdRng::seed_from_u64(config.seed);
    let mut logs = Vec::new();
    let mut reward_curve = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_reward = 0.0;
        let mut epoch_lcom = 0.0;
        let mut epoch_lmle = 0.0;
        let mut steps = 0.0f64;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<RlExample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let stats = rl_step(model, &batch, oracle, config, &mut adam, &mut rng)?;
            epoch_reward += stats.mean_reward;
            epoch_lcom += stats.l_com;
            epoch_lmle += stats.l_mle;
            steps += 1.0;
        }
        let mean_reward = epoch_reward / steps.max(1.0);
        let mean_mle = epoch_lmle / steps.max(1.0);
        reward_curve.push(mean_reward);
        logs.push(EpochLog {
            epoch,
            split: "train".into(),
            loss: epoch_lcom / steps.max(1.0),
            perplexity: mean_mle.exp(),
            mean_reward: Some(mean_reward),
            lr: adam.lr,
        });
        if best.as_ref().map(|(b, _)| mean_reward > *b).unwrap_or(true) {
            best = Some((mean_reward, model.params.clone()));
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(FinetuneReport { logs, reward_curve })
}

/// Fraction of items whose beam-1 rewrite exactly matches the target.
pub fn exact_match_rate(
    model: &CrnModel,
    items: &[(Vec<String>, Vec<Vec<String>>, Vec<String>)],
    max_len: usize,
) -> Result<f64, TrainError> {
    if items.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut hits = 0usize;
    for (q, context, target) in items {
        let got = model.greedy(q, context, max_len)?;
        if &got == target {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}
