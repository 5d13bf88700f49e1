//! Entity-match rewards on a pair of short chest X-ray reports.
//!
//! Run with `cargo run --example entity_rewards`.

use factharness::nli::HeuristicNli;
use factharness::rewards::{fact_ent, fact_entnli};
use factharness::simscore::EmbeddingProvider;
use factharness::textproc::{analyze_report, Lexicon};

fn main() {
    let lexicon = Lexicon::builtin();
    let provider = EmbeddingProvider::hashed(256, 0.2);
    let nli = HeuristicNli::new(lexicon.clone(), provider.clone());

    let reference = "There is a small left pleural effusion. The heart size is normal.";
    let candidates = [
        "There is a small left pleural effusion. The heart size is normal.",
        "There is no pleural effusion. The heart size is normal.",
        "Mild cardiomegaly. There is a left pleural effusion.",
        "No acute cardiopulmonary process.",
    ];

    let r = analyze_report(reference, &lexicon);
    println!("reference entities: {:?}", r.entity_set.iter().collect::<Vec<_>>());
    for c in candidates {
        let g = analyze_report(c, &lexicon);
        let ent = fact_ent(&g, &r);
        let entnli = fact_entnli(&g, &r, &nli, &provider);
        println!("{c}\n  fact_ent {ent:.3}  fact_entnli {entnli:.3}");
    }
}
