use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{NliBackend, NliLabel};
use crate::error::{Error, Result};
use crate::textproc::AnalyzedSentence;

#[derive(Serialize)]
struct NliRequest<'a> {
    premise: &'a str,
    hypothesis: &'a str,
}

#[derive(Deserialize)]
struct NliResponse {
    label: String,
    #[serde(default)]
    #[allow(dead_code)]
    scores: Vec<f64>,
}

/// HTTP client for a `POST /nli` classification service.
#[derive(Clone, Debug)]
pub struct RemoteNli {
    url: String,
    agent: ureq::Agent,
    max_in_flight: usize,
}

impl RemoteNli {
    pub fn new(endpoint: &str, timeout: Duration, max_in_flight: usize) -> Self {
        let base = endpoint.trim_end_matches('/');
        let url = if base.ends_with("/nli") {
            base.to_string()
        } else {
            format!("{base}/nli")
        };
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        RemoteNli {
            url,
            agent,
            max_in_flight: max_in_flight.max(1),
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn request_once(&self, premise: &str, hypothesis: &str) -> Result<NliLabel> {
        let body = NliRequest { premise, hypothesis };
        let response = self.agent.post(&self.url).send_json(&body).map_err(|e| Error::Remote {
            endpoint: self.url.clone(),
            message: e.to_string(),
        })?;
        let protocol = |message: String| Error::Protocol {
            endpoint: self.url.clone(),
            message,
        };
        let parsed: NliResponse = response.into_json().map_err(|e| protocol(e.to_string()))?;
        parsed.label.parse().map_err(|_| protocol(format!("unknown label {:?}", parsed.label)))
    }

    /// One request with a single retry on transport or status failures.
    /// Protocol errors are not retried.
    pub fn classify_text(&self, premise: &str, hypothesis: &str) -> Result<NliLabel> {
        match self.request_once(premise, hypothesis) {
            Err(Error::Remote { .. }) => self.request_once(premise, hypothesis),
            other => other,
        }
    }

    /// Classifies all pairs with at most `max_in_flight` concurrent requests.
    /// Labels come back in input order; any pair that still fails after its
    /// retry is reported in an aggregate error.
    pub fn classify_texts(&self, pairs: &[(&str, &str)]) -> Result<Vec<NliLabel>> {
        let results: Vec<Mutex<Option<Result<NliLabel>>>> =
            pairs.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.max_in_flight.min(pairs.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((p, h)) = pairs.get(i) else { break };
                    let r = self.classify_text(p, h);
                    *results[i].lock().expect("result slot") = Some(r);
                });
            }
        });
        let mut labels = Vec::with_capacity(pairs.len());
        let mut failed = Vec::new();
        for (i, slot) in results.into_iter().enumerate() {
            match slot.into_inner().expect("result slot") {
                Some(Ok(label)) => labels.push(label),
                Some(Err(e)) => {
                    log::warn!("remote NLI pair {i} failed: {e}");
                    failed.push(i);
                }
                None => failed.push(i),
            }
        }
        if failed.is_empty() {
            Ok(labels)
        } else {
            Err(Error::Batch { indices: failed })
        }
    }
}

impl NliBackend for RemoteNli {
    fn classify(&self, premise: &AnalyzedSentence, hypothesis: &AnalyzedSentence) -> Result<NliLabel> {
        self.classify_text(&premise.text, &hypothesis.text)
    }

    fn classify_batch(&self, pairs: &[(&AnalyzedSentence, &AnalyzedSentence)]) -> Result<Vec<NliLabel>> {
        let texts: Vec<(&str, &str)> = pairs
            .iter()
            .map(|(p, h)| (p.text.as_str(), h.text.as_str()))
            .collect();
        self.classify_texts(&texts)
    }
}

/// Batch classification through a remote backend (see
/// [`RemoteNli::classify_texts`]).
pub fn remote_classify_batch(
    pairs: &[(&AnalyzedSentence, &AnalyzedSentence)],
    backend: &RemoteNli,
) -> Result<Vec<NliLabel>> {
    backend.classify_batch(pairs)
}
