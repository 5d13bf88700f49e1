//! Entity-match rewards: `fact_ent` (F-score of entity overlap) and
//! `fact_entnli`, which vetoes entity credit when the containing sentence is
//! contradicted by the counterpart report and grants it when entailed.

use std::collections::HashMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nli::{NliBackend, NliLabel};
use crate::simscore::{bertscore, bertscore_embedded, embed_tokens, EmbeddingProvider};
use crate::textproc::{analyze_report, AnalyzedReport, AnalyzedSentence, EntityType, Lexicon};

pub use crate::textproc::EntitySet;

/// Harmonic mean of `matched_gen / n_gen` and `matched_ref / n_ref` with the
/// empty-set conventions: both empty → 1, exactly one empty → 0.
pub fn entity_f_score(matched_gen: usize, n_gen: usize, matched_ref: usize, n_ref: usize) -> f64 {
    match (n_gen, n_ref) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => {
            let pr = matched_gen as f64 / n_gen as f64;
            let rc = matched_ref as f64 / n_ref as f64;
            if pr + rc == 0.0 {
                0.0
            } else {
                2.0 * pr * rc / (pr + rc)
            }
        }
    }
}

/// Entity-match reward over `(surface, type)` sets.
pub fn fact_ent_sets(gen: &EntitySet, reference: &EntitySet) -> f64 {
    let tp = gen.intersection_len(reference);
    entity_f_score(tp, gen.len(), tp, reference.len())
}

pub fn fact_ent(gen: &AnalyzedReport, reference: &AnalyzedReport) -> f64 {
    fact_ent_sets(&gen.entity_set, &reference.entity_set)
}

/// Classifies `hypothesis` against the premise most similar to it (BERTScore
/// F1). Ties go to the earliest premise.
pub fn nli_e(
    premises: &[AnalyzedSentence],
    hypothesis: &AnalyzedSentence,
    nli: &dyn NliBackend,
    provider: &EmbeddingProvider,
) -> Result<NliLabel> {
    let embedded: Vec<Vec<Vec<f64>>> = premises.iter().map(|p| embed_tokens(&p.tokens, provider)).collect();
    let hyp = embed_tokens(&hypothesis.tokens, provider);
    let best = most_similar(embedded.iter().map(Vec::as_slice), &hyp).ok_or(Error::Empty("premises"))?;
    nli.classify(&premises[best], hypothesis)
}

fn most_similar<'e, I: Iterator<Item = &'e [Vec<f64>]>>(premises: I, hyp: &[Vec<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in premises.enumerate() {
        let sim = bertscore_embedded(hyp, p).map_or(f64::NEG_INFINITY, |s| s.f1);
        if best.map_or(true, |(_, b)| sim > b) {
            best = Some((i, sim));
        }
    }
    best.map(|(i, _)| i)
}

/// One side of `fact_entnli`: how many entities of `side` are accepted by φ
/// against `counterpart`.
struct PhiCounter<'a> {
    counterpart: &'a AnalyzedReport,
    counterpart_emb: Vec<Vec<Vec<f64>>>,
    nli: &'a dyn NliBackend,
    provider: &'a EmbeddingProvider,
    fallback: NliLabel,
    cache: HashMap<usize, NliLabel>,
}

impl<'a> PhiCounter<'a> {
    fn new(
        counterpart: &'a AnalyzedReport,
        nli: &'a dyn NliBackend,
        provider: &'a EmbeddingProvider,
        fallback: NliLabel,
    ) -> Self {
        let counterpart_emb = counterpart
            .sentences
            .iter()
            .map(|s| embed_tokens(&s.tokens, provider))
            .collect();
        PhiCounter {
            counterpart,
            counterpart_emb,
            nli,
            provider,
            fallback,
            cache: HashMap::new(),
        }
    }

    fn label(&mut self, idx: usize, hypothesis: &AnalyzedSentence) -> NliLabel {
        if let Some(l) = self.cache.get(&idx) {
            return *l;
        }
        let label = if self.counterpart.sentences.is_empty() {
            NliLabel::Neutral
        } else {
            let h = embed_tokens(&hypothesis.tokens, self.provider);
            let best = most_similar(self.counterpart_emb.iter().map(Vec::as_slice), &h).expect("non-empty premises");
            match self.nli.classify(&self.counterpart.sentences[best], hypothesis) {
                Ok(l) => l,
                Err(e) => {
                    log::warn!("NLI failed, using {}: {e}", self.fallback);
                    self.fallback
                }
            }
        };
        self.cache.insert(idx, label);
        label
    }

    fn count(&mut self, side: &AnalyzedReport) -> usize {
        let mut accepted = 0;
        for (surface, etype) in side.entity_set.iter() {
            let member = self.counterpart.entity_set.contains(surface, *etype);
            let mut ok = false;
            for (idx, s) in side.sentences.iter().enumerate() {
                if !s.has_entity(surface, *etype) {
                    continue;
                }
                let label = self.label(idx, s);
                if (member && label != NliLabel::Contradiction) || label == NliLabel::Entailment {
                    ok = true;
                    break;
                }
            }
            accepted += ok as usize;
        }
        accepted
    }
}

/// `fact_entnli` with a configurable label for NLI calls that fail.
pub fn fact_entnli_with_fallback(
    gen: &AnalyzedReport,
    reference: &AnalyzedReport,
    nli: &dyn NliBackend,
    provider: &EmbeddingProvider,
    fallback: NliLabel,
) -> f64 {
    let n_gen = gen.entity_set.len();
    let n_ref = reference.entity_set.len();
    if n_gen == 0 || n_ref == 0 {
        return entity_f_score(0, n_gen, 0, n_ref);
    }
    let tp_gen = PhiCounter::new(reference, nli, provider, fallback).count(gen);
    let tp_ref = PhiCounter::new(gen, nli, provider, fallback).count(reference);
    entity_f_score(tp_gen, n_gen, tp_ref, n_ref)
}

/// Entailing-entity-match reward. Failed NLI calls count as neutral.
pub fn fact_entnli(
    gen: &AnalyzedReport,
    reference: &AnalyzedReport,
    nli: &dyn NliBackend,
    provider: &EmbeddingProvider,
) -> f64 {
    fact_entnli_with_fallback(gen, reference, nli, provider, NliLabel::Neutral)
}

/// Report-level reward selectable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Bertscore,
    FactEnt,
    FactEntnli,
}

impl RewardKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardKind::Bertscore => "bertscore",
            RewardKind::FactEnt => "fact_ent",
            RewardKind::FactEntnli => "fact_entnli",
        }
    }
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bertscore" => Ok(RewardKind::Bertscore),
            "fact_ent" => Ok(RewardKind::FactEnt),
            "fact_entnli" => Ok(RewardKind::FactEntnli),
            other => Err(Error::Validation(format!("unknown reward {other:?}"))),
        }
    }
}

/// Scores a generated report text against a reference text on `[0, 1]`.
pub trait ReportReward: Send + Sync {
    fn score(&self, generated: &str, reference: &str) -> Result<f64>;
}

/// Any closure over two texts is a reward.
impl<F> ReportReward for F
where
    F: Fn(&str, &str) -> Result<f64> + Send + Sync,
{
    fn score(&self, generated: &str, reference: &str) -> Result<f64> {
        self(generated, reference)
    }
}

/// The three built-in report rewards sharing one lexicon, embedding provider
/// and NLI backend.
pub struct RewardScorer {
    kind: RewardKind,
    lexicon: Lexicon,
    provider: EmbeddingProvider,
    nli: Box<dyn NliBackend>,
}

impl RewardScorer {
    pub fn new(kind: RewardKind, lexicon: Lexicon, provider: EmbeddingProvider, nli: Box<dyn NliBackend>) -> Self {
        RewardScorer {
            kind,
            lexicon,
            provider,
            nli,
        }
    }

    pub fn kind(&self) -> RewardKind {
        self.kind
    }

    /// BERTScore F1 over the full token sequences; an empty side scores 0.
    pub fn bertscore_f1(&self, generated: &str, reference: &str) -> f64 {
        let g = analyze_report(generated, &self.lexicon).tokens().into_iter().map(str::to_string).collect::<Vec<_>>();
        let r = analyze_report(reference, &self.lexicon).tokens().into_iter().map(str::to_string).collect::<Vec<_>>();
        bertscore(&g, &r, &self.provider).map_or(0.0, |s| s.f1)
    }
}

impl ReportReward for RewardScorer {
    fn score(&self, generated: &str, reference: &str) -> Result<f64> {
        Ok(match self.kind {
            RewardKind::Bertscore => self.bertscore_f1(generated, reference),
            RewardKind::FactEnt => fact_ent(
                &analyze_report(generated, &self.lexicon),
                &analyze_report(reference, &self.lexicon),
            ),
            RewardKind::FactEntnli => fact_entnli(
                &analyze_report(generated, &self.lexicon),
                &analyze_report(reference, &self.lexicon),
                self.nli.as_ref(),
                &self.provider,
            ),
        })
    }
}

/// Convenience for tests and examples: builds an entity set from
/// `(surface, type)` literals.
pub fn entity_set<'a, I: IntoIterator<Item = (&'a str, EntityType)>>(items: I) -> EntitySet {
    items.into_iter().map(|(s, t)| (s.to_string(), t)).collect()
}
