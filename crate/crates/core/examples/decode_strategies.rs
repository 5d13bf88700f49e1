//! Greedy, sampled and beam decoding from a freshly initialized model.
//!
//! Run with `cargo run --release --example decode_strategies`.

use factharness::corpus::{synth_generate, SynthConfig};
use factharness::m2trans::{DecodeMode, ModelConfig, ModelParams};

fn main() -> factharness::Result<()> {
    let set = synth_generate(&SynthConfig::desk(20, 3))?;
    let config = ModelConfig::desk(set.vocab.len(), set.grid, set.k, 12);
    let params = ModelParams::init(&config, 0)?;
    println!("{} parameters", params.num_parameters());
    let images = &set.studies[0].images;
    let modes = [
        ("greedy", DecodeMode::Greedy),
        ("sample t=1", DecodeMode::Sample { seed: 1, temperature: 1.0 }),
        ("sample t=0.5", DecodeMode::Sample { seed: 1, temperature: 0.5 }),
        ("beam 1", DecodeMode::Beam { width: 1 }),
        ("beam 4", DecodeMode::Beam { width: 4 }),
    ];
    for (name, mode) in modes {
        let out = params.decode(images, mode)?;
        let words: Vec<&str> = out.tokens.iter().filter_map(|&t| set.vocab.token(t)).collect();
        println!(
            "{name:<13} log p {:>8.3} finished {:<5} {}",
            out.log_prob,
            out.finished,
            words.join(" ")
        );
    }
    Ok(())
}
