//! The synthetic image-report task and its deterministic split.
//!
//! Run with `cargo run --example synth_corpus`.

use factharness::corpus::{split_dataset, synth_generate_with_labels, SynthConfig};

fn main() -> factharness::Result<()> {
    let config = SynthConfig::desk(70, 42);
    let (set, planted) = synth_generate_with_labels(&config)?;
    println!(
        "{} studies, {} images of {}x{}x{} each, vocabulary of {}",
        set.len(),
        set.k,
        set.grid.rows,
        set.grid.cols,
        set.grid.dim,
        set.vocab.len()
    );
    for (study, labels) in set.studies.iter().zip(&planted).take(4) {
        println!("{}: positives {:?}, negated {:?}", study.id, labels.positives, labels.negated);
        println!("  {}", study.reference);
    }
    let (train, val, test) = split_dataset(&set, (0.7, 0.15, 0.15), 1)?;
    println!("split {} / {} / {}", train.len(), val.len(), test.len());
    println!("first test ids {:?}", &test.ids()[..3]);
    Ok(())
}
