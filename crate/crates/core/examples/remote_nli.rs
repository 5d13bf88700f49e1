//! Remote NLI client talking to the bundled stub server.
//!
//! Run with `cargo run --example remote_nli`.

use std::time::Duration;

use factharness::nli::stub::{StubReply, StubServer};
use factharness::nli::{NliLabel, RemoteNli};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let server = StubServer::start_with_delay(
        |request, attempt| {
            if attempt == 0 && request.premise.contains("flaky") {
                StubReply::Status(503)
            } else if request.premise.contains(" no ") != request.hypothesis.contains(" no ") {
                StubReply::Label(NliLabel::Contradiction)
            } else {
                StubReply::Label(NliLabel::Entailment)
            }
        },
        Duration::from_millis(10),
    )?;
    let client = RemoteNli::new(&server.url(), Duration::from_secs(2), 4);
    let pairs = [
        ("There is no pleural effusion.", "There is a pleural effusion."),
        ("The heart size is normal.", "The heart size is normal."),
        ("A flaky premise is retried once.", "A flaky premise is retried once."),
    ];
    let labels = client.classify_texts(&pairs)?;
    for ((p, h), label) in pairs.iter().zip(&labels) {
        println!("{p} / {h} -> {}", label.as_str());
    }
    println!(
        "requests {} (one retry), peak concurrency {}",
        server.request_count(),
        server.max_concurrent()
    );
    Ok(())
}
