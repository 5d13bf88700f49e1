//! Rule-based NLI pair mining over a synthetic report corpus.
//!
//! Run with `cargo run --release --example weak_supervision`.

use factharness::corpus::{synth_generate, SynthConfig};
use factharness::nlipairs::{corpus_sentences, generate_training_pairs, match_rules, PairGenConfig, Quotas};
use factharness::simscore::EmbeddingProvider;
use factharness::textproc::{analyze_sentence, Lexicon};

fn main() -> factharness::Result<()> {
    let lexicon = Lexicon::builtin();
    let provider = EmbeddingProvider::hashed(256, 0.2);

    let examples = [
        ("There is a small left pleural effusion.", "There is a left pleural effusion."),
        ("The heart size is normal.", "There is no pneumothorax."),
        ("There is no pleural effusion.", "There is a small left pleural effusion."),
    ];
    for (s1, s2) in examples {
        let a = analyze_sentence(s1, &lexicon);
        let b = analyze_sentence(s2, &lexicon);
        match match_rules(&a, &b, &lexicon, &provider) {
            Some((rule, label)) => println!("{s1} | {s2} -> {} ({})", rule.as_str(), label.as_str()),
            None => println!("{s1} | {s2} -> no rule"),
        }
    }

    let set = synth_generate(&SynthConfig::varied(1500, 7))?;
    let sentences = corpus_sentences(&set);
    let config = PairGenConfig {
        quotas: Quotas::scaled(0.02)?,
        ..PairGenConfig::default()
    };
    let mined = generate_training_pairs(&sentences, &config, &lexicon, &provider, 0)?;
    println!("{} distinct sentences, {} ordered pairs examined", sentences.len(), mined.examined);
    for (rule, quota) in &config.quotas.0 {
        println!("  {:<3} {:>4} / {quota}", rule.as_str(), mined.count(*rule));
    }
    for s in &mined.shortfalls {
        println!("  shortfall {} found {} of {}", s.rule.as_str(), s.found, s.quota);
    }
    Ok(())
}
