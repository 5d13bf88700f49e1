//! Observation labelling, micro metrics and rank correlation.
//!
//! Run with `cargo run --example clinical_eval`.

use factharness::cliniceval::{label_observations, micro_metrics, report_accuracy, spearman};
use factharness::simscore::{bertscore, EmbeddingProvider};
use factharness::textproc::{analyze_report, tokenize, Lexicon};

fn main() -> factharness::Result<()> {
    let lexicon = Lexicon::builtin();
    let provider = EmbeddingProvider::hashed(256, 0.2);
    let pairs = [
        ("There is mild cardiomegaly. No pleural effusion.", "The heart is mildly enlarged. No pleural effusion."),
        ("Small left pleural effusion.", "There is no pleural effusion."),
        ("Right lower lobe consolidation. No pneumothorax.", "Right lower lobe consolidation is present."),
        ("No acute cardiopulmonary process.", "There is bibasilar atelectasis."),
    ];

    let mut gen = Vec::new();
    let mut refs = Vec::new();
    let mut accuracy = Vec::new();
    let mut similarity = Vec::new();
    for (g, r) in pairs {
        let gl = label_observations(&analyze_report(g, &lexicon), &lexicon);
        let rl = label_observations(&analyze_report(r, &lexicon), &lexicon);
        accuracy.push(report_accuracy(&gl, &rl));
        similarity.push(bertscore(&tokenize(g), &tokenize(r), &provider)?.f1);
        println!("{g}\n  labels {:?}", gl.statuses);
        gen.push(gl);
        refs.push(rl);
    }
    let micro = micro_metrics(&gen, &refs)?;
    println!(
        "micro P {:.3} R {:.3} F1 {:.3} accuracy {:.3}",
        micro.precision, micro.recall, micro.f1, micro.accuracy
    );
    println!("spearman(similarity, accuracy) = {:.3}", spearman(&similarity, &accuracy)?);
    Ok(())
}
