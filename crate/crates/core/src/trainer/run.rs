//! Epoch loop with per-epoch validation and best-checkpoint retention.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{examples, joint_update, nll_update, Adam, Example, Rewards, StepOptions, TrainConfig};
use crate::cliniceval::{label_observations, micro_metrics, MicroMetrics};
use crate::corpus::{StudySet, BOS, PAD};
use crate::error::{Error, Result};
use crate::m2trans::{save_checkpoint, DecodeMode, ModelConfig, ModelParams};
use crate::textproc::{analyze_report, Lexicon};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Teacher-forced maximum likelihood.
    Nll,
    /// Joint NLL and self-critical reward loss from an initial checkpoint.
    Joint,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Nll => "nll",
            Phase::Joint => "joint",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nll" => Ok(Phase::Nll),
            "joint" => Ok(Phase::Joint),
            other => Err(Error::Validation(format!("unknown phase {other:?}"))),
        }
    }
}

/// Data, rewards and output location of one training run.
#[derive(Clone, Copy)]
pub struct TrainRun<'a> {
    pub train: &'a StudySet,
    pub val: &'a StudySet,
    pub rewards: Rewards<'a>,
    pub lexicon: &'a Lexicon,
    /// Directory receiving `best.ckpt` and `last.ckpt`.
    pub checkpoint_dir: Option<&'a Path>,
}

/// One line of the training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    /// Mean token NLL of the references.
    pub nll: f64,
    pub mean_reward_nlg: Option<f64>,
    pub mean_reward_fact: Option<f64>,
    pub clinical_f1: Option<f64>,
    /// Teacher-forced next-token accuracy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped_steps: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Parameters of the best validation epoch, or the initial ones when no
    /// epoch ran.
    pub best: ModelParams,
    pub last: ModelParams,
    pub best_epoch: Option<usize>,
    pub records: Vec<EpochRecord>,
    pub steps: usize,
}

impl TrainReport {
    pub fn validation(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(|r| r.split == "val")
    }
}

pub fn write_report_jsonl(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Decodes every study of `set` and detokenizes the result.
pub fn generate_reports(params: &ModelParams, set: &StudySet, mode: DecodeMode) -> Result<Vec<String>> {
    set.studies
        .iter()
        .map(|s| Ok(set.vocab.decode(&params.decode(&s.images, mode)?.tokens)))
        .collect()
}

/// Micro-averaged clinical metrics of generated against reference texts.
pub fn clinical_micro(generated: &[String], references: &[String], lexicon: &Lexicon) -> Result<MicroMetrics> {
    let label = |texts: &[String]| -> Vec<_> {
        texts
            .iter()
            .map(|t| label_observations(&analyze_report(t, lexicon), lexicon))
            .collect()
    };
    micro_metrics(&label(generated), &label(references))
}

/// Token-weighted NLL and teacher-forced accuracy over `examples`.
fn teacher_forced(params: &ModelParams, examples: &[Example<'_>]) -> Result<(f64, f64)> {
    let mut nll = 0.0;
    let mut correct = 0usize;
    let mut counted = 0usize;
    for e in examples {
        let mut prefix = vec![BOS];
        prefix.extend_from_slice(&e.targets[..e.targets.len() - 1]);
        let logits = params.decode_logits(e.images, &prefix)?;
        for (i, &t) in e.targets.iter().enumerate() {
            if t == PAD {
                continue;
            }
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            nll += lse - row[t];
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += (best == t) as usize;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Empty("validation targets"));
    }
    Ok((nll / counted as f64, correct as f64 / counted as f64))
}

fn model_config(run: &TrainRun<'_>, config: &TrainConfig) -> ModelConfig {
    let longest = [run.train, run.val]
        .iter()
        .flat_map(|s| examples(s).into_iter().map(|e| e.targets.len()))
        .max()
        .unwrap_or(1);
    let m = config.model;
    ModelConfig {
        d: m.d,
        heads: m.heads,
        layers: m.layers,
        n_mem: m.n_mem,
        ff_dim: m.ff_dim,
        vocab: run.train.vocab.len(),
        max_len: longest + config.length_margin,
        k: run.train.k,
        grid: run.train.grid,
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Trains for `config.epochs` epochs. The NLL phase starts from `init` or a
/// fresh model; the joint phase requires `init`. Validation after each epoch
/// scores reference NLL and token accuracy, plus beam-decoded clinical
/// micro-F1 and mean rewards in the joint phase. The best epoch is the one
/// with the lowest validation NLL (NLL phase) or the highest clinical F1
/// (joint phase), earliest on ties.
pub fn run_training(
    run: &TrainRun<'_>,
    phase: Phase,
    config: &TrainConfig,
    init: Option<ModelParams>,
) -> Result<TrainReport> {
    config.validate()?;
    if phase == Phase::Joint {
        run.rewards.check(&config.weights)?;
    }
    if run.train.is_empty() || run.val.is_empty() {
        return Err(Error::Empty("training or validation split"));
    }
    let mut params = match (init, phase) {
        (Some(p), _) => p,
        (None, Phase::Nll) => ModelParams::init(&model_config(run, config), config.seed)?,
        (None, Phase::Joint) => {
            return Err(Error::Config("the joint phase needs an initial checkpoint".into()));
        }
    };
    if params.config().vocab < run.train.vocab.len() {
        return Err(Error::ConfigMismatch(format!(
            "model vocabulary {} is smaller than the data vocabulary {}",
            params.config().vocab,
            run.train.vocab.len()
        )));
    }
    let train = examples(run.train);
    let val = examples(run.val);
    let val_refs: Vec<String> = run.val.studies.iter().map(|s| s.reference.clone()).collect();
    let d = params.config().d;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Adam::new(config.beta1, config.beta2, config.adam_eps);
    let mut best = params.clone();
    let mut best_epoch = None;
    let mut best_score = f64::NEG_INFINITY;
    let mut records = Vec::new();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut nlls = Vec::new();
        let mut r_nlg = Vec::new();
        let mut r_fact = Vec::new();
        let mut skipped = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Example<'_>> = chunk.iter().map(|&i| train[i].clone()).collect();
            let opts = StepOptions {
                lr: config.schedule.rate(step, d),
                clip_norm: config.clip_norm,
                temperature: config.temperature,
                seed: rng.gen(),
            };
            let m = match phase {
                Phase::Nll => nll_update(&mut params, &batch, &mut optimizer, &opts)?,
                Phase::Joint => joint_update(
                    &mut params,
                    &batch,
                    &run.train.vocab,
                    &config.weights,
                    &run.rewards,
                    &mut optimizer,
                    &opts,
                )?,
            };
            step += 1;
            if m.skipped.is_some() {
                skipped += 1;
                continue;
            }
            nlls.push(m.nll);
            r_nlg.extend(m.mean_reward_nlg);
            r_fact.extend(m.mean_reward_fact);
        }
        records.push(EpochRecord {
            epoch,
            split: "train".into(),
            nll: mean(&nlls).unwrap_or(f64::NAN),
            mean_reward_nlg: mean(&r_nlg),
            mean_reward_fact: mean(&r_fact),
            clinical_f1: None,
            token_accuracy: None,
            skipped_steps: Some(skipped),
        });

        let (nll, acc) = teacher_forced(&params, &val)?;
        let mut record = EpochRecord {
            epoch,
            split: "val".into(),
            nll,
            mean_reward_nlg: None,
            mean_reward_fact: None,
            clinical_f1: None,
            token_accuracy: Some(acc),
            skipped_steps: None,
        };
        let score = match phase {
            Phase::Nll => -nll,
            Phase::Joint => {
                let generated = generate_reports(&params, run.val, DecodeMode::Beam { width: config.eval_beam })?;
                let score_all = |r: &dyn crate::rewards::ReportReward| -> Result<f64> {
                    let mut total = 0.0;
                    for (g, reference) in generated.iter().zip(&val_refs) {
                        total += r.score(g, reference)?;
                    }
                    Ok(total / generated.len() as f64)
                };
                record.mean_reward_nlg = run.rewards.nlg.map(score_all).transpose()?;
                record.mean_reward_fact = run.rewards.fact.map(score_all).transpose()?;
                let f1 = clinical_micro(&generated, &val_refs, run.lexicon)?.f1;
                record.clinical_f1 = Some(f1);
                f1
            }
        };
        log::info!(
            "{phase} epoch {epoch}: val nll {nll:.4}, token accuracy {acc:.4}{}",
            record.clinical_f1.map_or(String::new(), |f| format!(", clinical f1 {f:.4}"))
        );
        records.push(record);
        if score > best_score {
            best_score = score;
            best = params.clone();
            best_epoch = Some(epoch);
            if let Some(dir) = run.checkpoint_dir {
                save_checkpoint(&best, &dir.join("best.ckpt"))?;
            }
        }
    }
    if let Some(dir) = run.checkpoint_dir {
        save_checkpoint(&params, &dir.join("last.ckpt"))?;
        if best_epoch.is_none() {
            save_checkpoint(&best, &dir.join("best.ckpt"))?;
        }
    }
    Ok(TrainReport {
        best,
        last: params,
        best_epoch,
        records,
        steps: step,
    })
}
