//! Self-critical rollouts and the single optimizer step on the joint loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, Example, Gradients, LossWeights, Rewards};
use crate::corpus::{Grid, Vocab};
use crate::diffmath::{Tape, Var};
use crate::error::{Error, Result};
use crate::m2trans::{encode, Bound, nll_on_tape, sequence_loss, DecodeContext, Decoded, ModelParams};
use crate::rewards::ReportReward;

/// One sampled and one greedy decode of the same study.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub sampled: Decoded,
    pub greedy: Decoded,
    pub sampled_text: String,
    pub greedy_text: String,
}

/// Decodes `images` greedily and by sampling at `temperature`.
pub fn rollout<R: Rng + ?Sized>(
    params: &ModelParams,
    images: &[Grid],
    vocab: &Vocab,
    temperature: f64,
    rng: &mut R,
) -> Result<Rollout> {
    let sampled = params.decode_sample(images, temperature, rng)?;
    let greedy = params.decode_greedy(images)?;
    Ok(Rollout {
        sampled_text: vocab.decode(&sampled.tokens),
        greedy_text: vocab.decode(&greedy.tokens),
        sampled,
        greedy,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScstSample {
    pub rollout: Rollout,
    pub reward_sampled: f64,
    pub reward_greedy: f64,
    /// `r(sampled) - r(greedy)`, a constant weight on `-log P(sampled)`.
    pub advantage: f64,
}

/// Self-critical advantage of one sampled decode at temperature 1.
pub fn scst_gradient_weight(
    params: &ModelParams,
    images: &[Grid],
    reference: &str,
    vocab: &Vocab,
    reward: &dyn ReportReward,
    seed: u64,
) -> Result<ScstSample> {
    let rollout = rollout(params, images, vocab, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let reward_sampled = reward.score(&rollout.sampled_text, reference)?;
    let reward_greedy = reward.score(&rollout.greedy_text, reference)?;
    Ok(ScstSample {
        rollout,
        reward_sampled,
        reward_greedy,
        advantage: reward_sampled - reward_greedy,
    })
}

/// Rewards of one rollout under both reward slots; unset slots score 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutRewards {
    pub nlg_sampled: f64,
    pub nlg_greedy: f64,
    pub fact_sampled: f64,
    pub fact_greedy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub lr: f64,
    pub clip_norm: f64,
    pub temperature: f64,
    /// Seeds the sampled rollouts of this step.
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    /// Weighted total loss.
    pub loss: f64,
    /// Mean token NLL of the references.
    pub nll: f64,
    /// Batch mean of `-a_nlg · log P(sampled)`.
    pub rl_nlg: f64,
    /// Batch mean of `-a_fact · log P(sampled)`.
    pub rl_fact: f64,
    /// Mean reward of the sampled decodes, when the slot is active.
    pub mean_reward_nlg: Option<f64>,
    pub mean_reward_fact: Option<f64>,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    /// Why the update was not applied, if it was not.
    pub skipped: Option<String>,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<RolloutRewards>,
}

fn skipped(reason: String, lr: f64) -> StepMetrics {
    log::warn!("training step skipped: {reason}");
    StepMetrics {
        lr,
        skipped: Some(reason),
        ..StepMetrics::default()
    }
}

/// Backpropagates `loss`, clips and applies the update; restores `params`
/// if the loss, gradients or updated values are not finite.
fn apply_step(
    params: &mut ModelParams,
    tape: &mut Tape,
    bound: &Bound,
    loss: Var,
    optimizer: &mut Adam,
    opts: &StepOptions,
    metrics: &mut StepMetrics,
) -> Result<()> {
    metrics.lr = opts.lr;
    metrics.loss = tape.value(loss).item();
    if !metrics.loss.is_finite() {
        *metrics = skipped(format!("non-finite loss {}", metrics.loss), opts.lr);
        return Ok(());
    }
    tape.backward(loss)?;
    let mut grads = Gradients::collect(tape, bound);
    if !grads.all_finite() {
        *metrics = skipped("non-finite gradient".into(), opts.lr);
        return Ok(());
    }
    metrics.grad_norm = grads.clip(opts.clip_norm);
    let backup = params.clone();
    let opt_backup = optimizer.clone();
    optimizer.apply(params, &grads, opts.lr)?;
    if !params.all_finite() {
        *params = backup;
        *optimizer = opt_backup;
        *metrics = skipped("update produced non-finite parameters".into(), opts.lr);
    }
    Ok(())
}

/// One optimizer step on the mean token NLL of `batch`.
pub fn nll_update(
    params: &mut ModelParams,
    batch: &[Example<'_>],
    optimizer: &mut Adam,
    opts: &StepOptions,
) -> Result<StepMetrics> {
    let pairs: Vec<(&[Grid], &[usize])> = batch.iter().map(|e| (e.images, e.targets.as_slice())).collect();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let loss = nll_on_tape(&mut tape, &bound, params.config(), &pairs)?;
    let mut metrics = StepMetrics {
        nll: tape.value(loss).item(),
        ..StepMetrics::default()
    };
    apply_step(params, &mut tape, &bound, loss, optimizer, opts, &mut metrics)?;
    Ok(metrics)
}

fn score_rollouts(
    rollouts: &[Rollout],
    batch: &[Example<'_>],
    weights: &LossWeights,
    rewards: &Rewards<'_>,
) -> Result<Vec<RolloutRewards>> {
    let score = |slot: Option<&dyn ReportReward>, active: bool, text: &str, reference: &str| -> Result<f64> {
        match slot {
            Some(r) if active => r.score(text, reference),
            _ => Ok(0.0),
        }
    };
    rollouts
        .iter()
        .zip(batch)
        .map(|(r, e)| {
            let nlg = weights.rl_nlg > 0.0;
            let fact = weights.rl_fact > 0.0;
            Ok(RolloutRewards {
                nlg_sampled: score(rewards.nlg, nlg, &r.sampled_text, e.reference)?,
                nlg_greedy: score(rewards.nlg, nlg, &r.greedy_text, e.reference)?,
                fact_sampled: score(rewards.fact, fact, &r.sampled_text, e.reference)?,
                fact_greedy: score(rewards.fact, fact, &r.greedy_text, e.reference)?,
            })
        })
        .collect()
}

/// One optimizer step on `λ1·NLL + λ2·RL_nlg + λ3·RL_fact`. Each RL term is
/// the batch mean of `(r(greedy) - r(sampled)) · log P(sampled)`, with the
/// advantage held constant. With no active RL weight no decoding happens
/// and the step is [`nll_update`] scaled by `λ1`.
pub fn joint_update(
    params: &mut ModelParams,
    batch: &[Example<'_>],
    vocab: &Vocab,
    weights: &LossWeights,
    rewards: &Rewards<'_>,
    optimizer: &mut Adam,
    opts: &StepOptions,
) -> Result<StepMetrics> {
    weights.validate()?;
    rewards.check(weights)?;
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut rollouts = Vec::new();
    let mut scores = Vec::new();
    if weights.uses_rl() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for e in batch {
            rollouts.push(rollout(params, e.images, vocab, opts.temperature, &mut rng)?);
        }
        scores = match score_rollouts(&rollouts, batch, weights, rewards) {
            Ok(s) => s,
            Err(e) => return Ok(skipped(format!("reward failed: {e}"), opts.lr)),
        };
    }

    let cfg = params.config().clone();
    let total: usize = batch.iter().map(|e| e.targets.iter().filter(|&&t| t != crate::corpus::PAD).count()).sum();
    if total == 0 {
        return Err(Error::Empty("batch targets"));
    }
    let w_nll = 1.0 / total as f64;
    let b = batch.len() as f64;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let mut nll: Option<Var> = None;
    let mut rl_terms: Vec<Var> = Vec::new();
    let mut metrics = StepMetrics::default();
    for (i, e) in batch.iter().enumerate() {
        let enc = encode(&mut tape, &bound, &cfg, e.images, None)?;
        let ctx = DecodeContext::new(&mut tape, &bound, enc)?;
        let (l, _) = sequence_loss(&mut tape, &bound, &cfg, &ctx, &e.targets, w_nll)?;
        nll = Some(match nll {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
        if let Some(r) = rollouts.get(i) {
            let s = scores[i];
            let a_nlg = s.nlg_sampled - s.nlg_greedy;
            let a_fact = s.fact_sampled - s.fact_greedy;
            let (ce, _) = sequence_loss(&mut tape, &bound, &cfg, &ctx, &r.sampled.targets(), 1.0)?;
            let ce_value = tape.value(ce).item();
            metrics.rl_nlg += a_nlg * ce_value / b;
            metrics.rl_fact += a_fact * ce_value / b;
            let coef = (weights.rl_nlg * a_nlg + weights.rl_fact * a_fact) / b;
            rl_terms.push(tape.scale(ce, coef)?);
        }
    }
    let nll = nll.expect("non-empty batch");
    metrics.nll = tape.value(nll).item();
    let mut loss = tape.scale(nll, weights.nll)?;
    for t in rl_terms {
        loss = tape.add(loss, t)?;
    }
    if weights.rl_nlg > 0.0 {
        metrics.mean_reward_nlg = Some(scores.iter().map(|s| s.nlg_sampled).sum::<f64>() / b);
    }
    if weights.rl_fact > 0.0 {
        metrics.mean_reward_fact = Some(scores.iter().map(|s| s.fact_sampled).sum::<f64>() / b);
    }
    apply_step(params, &mut tape, &bound, loss, optimizer, opts, &mut metrics)?;
    if metrics.skipped.is_none() {
        metrics.rollouts = rollouts;
        metrics.rewards = scores;
    }
    Ok(metrics)
}
