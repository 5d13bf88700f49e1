//! Greedy-matching similarity between token sequences.
//!
//! Run with `cargo run --example bertscore`.

use factharness::simscore::{bertscore, EmbeddingProvider};
use factharness::textproc::tokenize;

fn main() -> factharness::Result<()> {
    let provider = EmbeddingProvider::hashed(256, 0.2);
    let reference = tokenize("The lungs are clear without focal consolidation.");
    for candidate in [
        "The lungs are clear without focal consolidation.",
        "Lungs are clear. No focal consolidation.",
        "There is a right lower lobe consolidation.",
        "The heart is enlarged.",
    ] {
        let c = tokenize(candidate);
        let forward = bertscore(&c, &reference, &provider)?;
        let backward = bertscore(&reference, &c, &provider)?;
        println!(
            "{candidate:<50} P {:.3} R {:.3} F1 {:.3} (swapped F1 {:.3})",
            forward.precision, forward.recall, forward.f1, backward.f1
        );
    }
    Ok(())
}
