//! Maximum-likelihood pre-training followed by self-critical fine-tuning
//! with a similarity reward and an entity-match reward.
//!
//! Run with `cargo run --release --example train_scst`.

use factharness::corpus::{split_dataset, synth_generate, SynthConfig};
use factharness::nli::{ConstantNli, NliLabel};
use factharness::rewards::{RewardKind, RewardScorer};
use factharness::simscore::EmbeddingProvider;
use factharness::textproc::Lexicon;
use factharness::trainer::{run_training, LrSchedule, ModelSize, Phase, Rewards, TrainConfig, TrainRun};

fn scorer(kind: RewardKind) -> RewardScorer {
    RewardScorer::new(
        kind,
        Lexicon::builtin(),
        EmbeddingProvider::hashed(256, 0.2),
        Box::new(ConstantNli(NliLabel::Neutral)),
    )
}

fn main() -> factharness::Result<()> {
    let set = synth_generate(&SynthConfig::desk(120, 5))?;
    let (train, val, _) = split_dataset(&set, (0.7, 0.15, 0.15), 1)?;
    let lexicon = Lexicon::builtin();
    let nlg = scorer(RewardKind::Bertscore);
    let fact = scorer(RewardKind::FactEnt);
    let run = TrainRun {
        train: &train,
        val: &val,
        rewards: Rewards {
            nlg: Some(&nlg),
            fact: Some(&fact),
        },
        lexicon: &lexicon,
        checkpoint_dir: None,
    };
    let small = ModelSize {
        d: 32,
        heads: 2,
        layers: 1,
        n_mem: 4,
        ff_dim: 64,
    };

    let nll = TrainConfig {
        schedule: LrSchedule::Fixed { rate: 3e-3 },
        model: small,
        ..TrainConfig::desk_nll(6, 0)
    };
    let pre = run_training(&run, Phase::Nll, &nll, None)?;
    for r in pre.validation() {
        println!("nll   epoch {} val nll {:.3}", r.epoch, r.nll);
    }

    let joint = TrainConfig {
        model: small,
        ..TrainConfig::desk_joint(2, 0)
    };
    let tuned = run_training(&run, Phase::Joint, &joint, Some(pre.best))?;
    for r in tuned.validation() {
        println!(
            "joint epoch {} val nll {:.3} reward nlg {:.3} fact {:.3} clinical F1 {:.3}",
            r.epoch,
            r.nll,
            r.mean_reward_nlg.unwrap_or(f64::NAN),
            r.mean_reward_fact.unwrap_or(f64::NAN),
            r.clinical_f1.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
