//! Natural language inference behind a uniform backend trait: a rule-based
//! heuristic, constant-label backends and an HTTP client for an external
//! classifier service.

mod heuristic;
mod remote;
pub mod stub;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simscore::EmbeddingProvider;
use crate::textproc::{AnalyzedSentence, Lexicon};

pub use heuristic::HeuristicNli;
pub use remote::{remote_classify_batch, RemoteNli};

/// Environment variable that overrides the configured remote endpoint.
pub const NLI_URL_ENV: &str = "FACTHARNESS_NLI_URL";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl NliLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            NliLabel::Entailment => "entailment",
            NliLabel::Neutral => "neutral",
            NliLabel::Contradiction => "contradiction",
        }
    }
}

impl fmt::Display for NliLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NliLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "entailment" => Ok(NliLabel::Entailment),
            "neutral" => Ok(NliLabel::Neutral),
            "contradiction" => Ok(NliLabel::Contradiction),
            other => Err(Error::Validation(format!("unknown NLI label {other:?}"))),
        }
    }
}

/// A premise/hypothesis classifier. Implementations must be callable from
/// several threads at once.
pub trait NliBackend: Send + Sync {
    fn classify(&self, premise: &AnalyzedSentence, hypothesis: &AnalyzedSentence) -> Result<NliLabel>;

    /// Labels in input order. The default classifies sequentially and stops
    /// at the first error.
    fn classify_batch(&self, pairs: &[(&AnalyzedSentence, &AnalyzedSentence)]) -> Result<Vec<NliLabel>> {
        pairs.iter().map(|(p, h)| self.classify(p, h)).collect()
    }
}

/// Always returns the same label.
#[derive(Clone, Copy, Debug)]
pub struct ConstantNli(pub NliLabel);

impl NliBackend for ConstantNli {
    fn classify(&self, _: &AnalyzedSentence, _: &AnalyzedSentence) -> Result<NliLabel> {
        Ok(self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "label", rename_all = "lowercase")]
pub enum BackendKind {
    Heuristic,
    Remote,
    Constant(NliLabel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NliBackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
}

impl Default for NliBackendConfig {
    fn default() -> Self {
        NliBackendConfig {
            kind: BackendKind::Heuristic,
            endpoint: None,
            timeout_ms: 5_000,
            max_in_flight: 4,
        }
    }
}

impl NliBackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(Error::Config("NLI timeout must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max in-flight requests must be positive".into()));
        }
        if self.kind == BackendKind::Remote && self.resolved_endpoint().is_none() {
            return Err(Error::Config(format!(
                "remote NLI backend needs an endpoint (config or {NLI_URL_ENV})"
            )));
        }
        Ok(())
    }

    /// The environment variable wins over the configured endpoint.
    pub fn resolved_endpoint(&self) -> Option<String> {
        std::env::var(NLI_URL_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .or_else(|| self.endpoint.clone())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

pub fn build_backend(
    config: &NliBackendConfig,
    lexicon: &Lexicon,
    provider: &EmbeddingProvider,
) -> Result<Box<dyn NliBackend>> {
    config.validate()?;
    Ok(match &config.kind {
        BackendKind::Heuristic => Box::new(HeuristicNli::new(lexicon.clone(), provider.clone())),
        BackendKind::Constant(label) => Box::new(ConstantNli(*label)),
        BackendKind::Remote => Box::new(RemoteNli::new(
            &config.resolved_endpoint().expect("validated"),
            config.timeout(),
            config.max_in_flight,
        )),
    })
}

/// Classifies with `backend`, substituting `fallback` if the backend fails.
pub fn classify_or(
    backend: &dyn NliBackend,
    premise: &AnalyzedSentence,
    hypothesis: &AnalyzedSentence,
    fallback: NliLabel,
) -> NliLabel {
    match backend.classify(premise, hypothesis) {
        Ok(label) => label,
        Err(e) => {
            log::warn!("NLI backend failed, using {fallback}: {e}");
            fallback
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textproc::analyze_sentence;

    #[test]
    fn labels_round_trip_through_strings_and_json() {
        for l in [NliLabel::Entailment, NliLabel::Neutral, NliLabel::Contradiction] {
            assert_eq!(l.as_str().parse::<NliLabel>().unwrap(), l);
            let j = serde_json::to_string(&l).unwrap();
            assert_eq!(j, format!("\"{}\"", l.as_str()));
        }
        assert!("maybe".parse::<NliLabel>().is_err());
    }

    #[test]
    fn constant_backend_ignores_input() {
        let lex = Lexicon::builtin();
        let a = analyze_sentence("No effusion.", &lex);
        let b = analyze_sentence("The heart is enlarged.", &lex);
        assert_eq!(ConstantNli(NliLabel::Neutral).classify(&a, &b).unwrap(), NliLabel::Neutral);
    }

    #[test]
    fn config_validation() {
        let mut c = NliBackendConfig::default();
        assert!(c.validate().is_ok());
        c.timeout_ms = 0;
        assert!(c.validate().is_err());
        let c = NliBackendConfig {
            kind: BackendKind::Constant(NliLabel::Entailment),
            ..Default::default()
        };
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<NliBackendConfig>(&json).unwrap(), c);
    }
}
