//! NLL pretraining and self-critical fine-tuning on the joint loss
//! `λ1·NLL + λ2·RL(nlg reward) + λ3·RL(fact reward)`.

mod optim;
mod run;
mod scst;

use serde::{Deserialize, Serialize};

use crate::corpus::{Grid, StudySet, EOS};
use crate::error::{Error, Result};
use crate::rewards::{ReportReward, RewardKind};

pub use optim::{Adam, Gradients};
pub use run::{
    clinical_micro, generate_reports, run_training, write_report_jsonl, EpochRecord, Phase, TrainReport, TrainRun,
};
pub use scst::{joint_update, nll_update, rollout, scst_gradient_weight, Rollout, RolloutRewards, ScstSample, StepMetrics, StepOptions};

/// Scaling factors of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub nll: f64,
    pub rl_nlg: f64,
    pub rl_fact: f64,
}

impl LossWeights {
    pub const NLL_ONLY: LossWeights = LossWeights {
        nll: 1.0,
        rl_nlg: 0.0,
        rl_fact: 0.0,
    };
    /// NLL plus the NLG reward.
    pub const NLL_BS: LossWeights = LossWeights {
        nll: 0.01,
        rl_nlg: 0.99,
        rl_fact: 0.0,
    };
    /// NLL plus the NLG and factual rewards.
    pub const NLL_BS_FC: LossWeights = LossWeights {
        nll: 0.01,
        rl_nlg: 0.495,
        rl_fact: 0.495,
    };

    pub fn new(nll: f64, rl_nlg: f64, rl_fact: f64) -> Result<Self> {
        let w = LossWeights { nll, rl_nlg, rl_fact };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.nll, self.rl_nlg, self.rl_fact];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights {all:?} must be non-negative")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("loss weights {all:?} sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Whether any reinforcement term is active.
    pub fn uses_rl(&self) -> bool {
        self.rl_nlg > 0.0 || self.rl_fact > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// `factor · d^-0.5 · min(s^-0.5, s · warmup^-1.5)` at step `s` (1-based).
    Noam { warmup: usize, factor: f64 },
    Fixed { rate: f64 },
}

impl LrSchedule {
    /// Learning rate for the zero-based optimizer step `step`.
    pub fn rate(&self, step: usize, d_model: usize) -> f64 {
        match *self {
            LrSchedule::Noam { warmup, factor } => {
                let s = (step + 1) as f64;
                let w = warmup as f64;
                factor * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
            }
            LrSchedule::Fixed { rate } => rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Noam { warmup, factor } => warmup > 0 && factor.is_finite() && factor > 0.0,
            LrSchedule::Fixed { rate } => rate.is_finite() && rate > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid learning-rate schedule {self:?}")))
        }
    }
}

/// Architecture of a freshly initialized model; vocabulary, grid and length
/// come from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSize {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub n_mem: usize,
    pub ff_dim: usize,
}

impl Default for ModelSize {
    fn default() -> Self {
        ModelSize {
            d: 64,
            heads: 4,
            layers: 2,
            n_mem: 8,
            ff_dim: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Reward behind the `rl_nlg` term.
    pub nlg_reward: RewardKind,
    /// Reward behind the `rl_fact` term; may be unset when `rl_fact` is 0.
    pub fact_reward: Option<RewardKind>,
    /// Sampling temperature of the SCST rollouts.
    pub temperature: f64,
    /// Beam width for validation decoding.
    pub eval_beam: usize,
    /// Architecture used when no initial parameters are given.
    pub model: ModelSize,
    /// Generation headroom over the longest reference, in tokens.
    pub length_margin: usize,
}

impl TrainConfig {
    /// Desk-scale NLL phase: warm-up of 500 steps, batch 8.
    pub fn desk_nll(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: 8,
            schedule: LrSchedule::Noam {
                warmup: 500,
                factor: 1.0,
            },
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            seed,
            weights: LossWeights::NLL_ONLY,
            nlg_reward: RewardKind::Bertscore,
            fact_reward: None,
            temperature: 1.0,
            eval_beam: 4,
            model: ModelSize::default(),
            length_margin: 8,
        }
    }

    /// Desk-scale joint phase: fixed rate 1e-4 with BERTScore and `fact_ent`.
    pub fn desk_joint(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            schedule: LrSchedule::Fixed { rate: 1e-4 },
            weights: LossWeights::NLL_BS_FC,
            fact_reward: Some(RewardKind::FactEnt),
            ..TrainConfig::desk_nll(epochs, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.schedule.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return fail(format!("clip norm {} must be positive", self.clip_norm));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail(format!("Adam betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return fail(format!("Adam epsilon {} must be positive", self.adam_eps));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        if self.eval_beam == 0 {
            return fail("validation beam width must be positive".into());
        }
        if self.weights.rl_fact > 0.0 && self.fact_reward.is_none() {
            return fail("rl_fact weight is positive but no factual reward is selected".into());
        }
        Ok(())
    }
}

/// The reward functions plugged into the two reinforcement terms.
#[derive(Clone, Copy, Default)]
pub struct Rewards<'a> {
    pub nlg: Option<&'a dyn ReportReward>,
    pub fact: Option<&'a dyn ReportReward>,
}

impl<'a> Rewards<'a> {
    /// Fails when a positive weight has no reward behind it.
    pub fn check(&self, weights: &LossWeights) -> Result<()> {
        if weights.rl_nlg > 0.0 && self.nlg.is_none() {
            return Err(Error::Config("rl_nlg weight is positive but no NLG reward is set".into()));
        }
        if weights.rl_fact > 0.0 && self.fact.is_none() {
            return Err(Error::Config("rl_fact weight is positive but no factual reward is set".into()));
        }
        Ok(())
    }
}

/// One training study: images, teacher-forcing targets ending in EOS, and the
/// reference text the rewards compare against.
#[derive(Clone, Debug)]
pub struct Example<'a> {
    pub images: &'a [Grid],
    pub targets: Vec<usize>,
    pub reference: &'a str,
}

/// Examples for every study of `set`, encoded with its vocabulary.
pub fn examples(set: &StudySet) -> Vec<Example<'_>> {
    set.studies
        .iter()
        .map(|s| {
            let mut targets = set.vocab.encode(&s.reference);
            targets.push(EOS);
            Example {
                images: &s.images,
                targets,
                reference: &s.reference,
            }
        })
        .collect()
}
