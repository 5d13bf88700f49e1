//! Rule-based mining of labeled NLI sentence pairs from a report corpus and
//! sampling of unlabeled evaluation candidates.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::StudySet;
use crate::error::{Error, Result};
use crate::nli::NliLabel;
use crate::simscore::{bertscore_embedded, embed_tokens, EmbeddingProvider};
use crate::textproc::{analyze_sentence, keyword_group_of, split_sentences, AnalyzedSentence, EntitySet, Lexicon};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rule {
    E1,
    N1,
    N2,
    N3,
    N4,
    C1,
}

impl Rule {
    /// Evaluation order.
    pub const ALL: [Rule; 6] = [Rule::E1, Rule::N1, Rule::N2, Rule::N3, Rule::N4, Rule::C1];

    pub fn label(self) -> NliLabel {
        match self {
            Rule::E1 => NliLabel::Entailment,
            Rule::C1 => NliLabel::Contradiction,
            _ => NliLabel::Neutral,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Rule::E1 => "E1",
            Rule::N1 => "N1",
            Rule::N2 => "N2",
            Rule::N3 => "N3",
            Rule::N4 => "N4",
            Rule::C1 => "C1",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Rule::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown rule {s:?}")))
    }
}

/// Which entity set must contain the other for the contradiction rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum C1Direction {
    /// NE(s2) ⊆ NE(s1).
    #[default]
    HypothesisInPremise,
    /// NE(s1) ⊆ NE(s2).
    PremiseInHypothesis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleConfig {
    /// Similarity threshold of the entailment and subset-neutral rules.
    pub sim_threshold: f64,
    /// Minimum hypothesis entity count where the rules require it.
    pub min_entities: usize,
    pub c1_direction: C1Direction,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            sim_threshold: 0.7,
            min_entities: 2,
            c1_direction: C1Direction::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NliPair {
    pub premise: AnalyzedSentence,
    pub hypothesis: AnalyzedSentence,
    pub label: NliLabel,
    pub rule: Rule,
    /// BERTScore F1 between premise and hypothesis.
    pub sim: f64,
}

/// Target number of pairs per rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quotas(pub BTreeMap<Rule, usize>);

impl Default for Quotas {
    fn default() -> Self {
        Quotas::new(2000, 500, 2000)
    }
}

impl Quotas {
    /// `entail` for E1, `neutral` for each of N1..N4, `contradict` for C1.
    pub fn new(entail: usize, neutral: usize, contradict: usize) -> Self {
        Quotas(
            Rule::ALL
                .into_iter()
                .map(|r| {
                    let q = match r {
                        Rule::E1 => entail,
                        Rule::C1 => contradict,
                        _ => neutral,
                    };
                    (r, q)
                })
                .collect(),
        )
    }

    pub fn zero() -> Self {
        Quotas::new(0, 0, 0)
    }

    /// Every default quota multiplied by `factor` and rounded.
    pub fn scaled(factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor >= 0.0) {
            return Err(Error::Validation(format!("quota scale {factor} must be finite and non-negative")));
        }
        Ok(Quotas(
            Quotas::default()
                .0
                .into_iter()
                .map(|(r, q)| (r, (q as f64 * factor).round() as usize))
                .collect(),
        ))
    }

    pub fn get(&self, rule: Rule) -> usize {
        self.0.get(&rule).copied().unwrap_or(0)
    }

    pub fn set(&mut self, rule: Rule, quota: usize) {
        self.0.insert(rule, quota);
    }

    pub fn total(&self) -> usize {
        self.0.values().sum()
    }
}

/// A sentence with everything the rules look at precomputed.
struct Prepared {
    sentence: AnalyzedSentence,
    ne: EntitySet,
    embeddings: Vec<Vec<f64>>,
}

impl Prepared {
    fn new(sentence: AnalyzedSentence, provider: &EmbeddingProvider) -> Self {
        Prepared {
            ne: sentence.named_entities(),
            embeddings: embed_tokens(&sentence.tokens, provider),
            sentence,
        }
    }
}

fn similarity(a: &Prepared, b: &Prepared) -> f64 {
    bertscore_embedded(&b.embeddings, &a.embeddings).map(|s| s.f1).unwrap_or(0.0)
}

fn has_antonym_modifier(s1: &AnalyzedSentence, s2: &AnalyzedSentence, lexicon: &Lexicon) -> bool {
    s1.modifiers().any(|m1| s2.modifiers().any(|m2| lexicon.is_antonym(m1, m2)))
}

fn match_prepared(s1: &Prepared, s2: &Prepared, lexicon: &Lexicon, config: &RuleConfig) -> Option<Rule> {
    let (ne1, ne2) = (&s1.ne, &s2.ne);
    let parity = s1.sentence.negated == s2.sentence.negated;
    let enough = ne2.len() >= config.min_entities;
    let mut sim = None;
    let mut sim_ok = || *sim.get_or_insert_with(|| similarity(s1, s2)) >= config.sim_threshold;

    if parity && enough && ne2.is_subset(ne1) && sim_ok() {
        return Some(Rule::E1);
    }
    if parity && enough && ne1.is_subset(ne2) && ne1 != ne2 && sim_ok() {
        return Some(Rule::N1);
    }
    if parity && ne1 == ne2 && has_antonym_modifier(&s1.sentence, &s2.sentence, lexicon) {
        return Some(Rule::N2);
    }
    if parity && enough && ne1.types() == ne2.types() && ne1.is_disjoint(ne2) {
        return Some(Rule::N3);
    }
    if ne1 == ne2 {
        if let (Some(g1), Some(g2)) = (
            keyword_group_of(&s1.sentence, lexicon),
            keyword_group_of(&s2.sentence, lexicon),
        ) {
            if g1 != g2 {
                return Some(Rule::N4);
            }
        }
    }
    let nested = match config.c1_direction {
        C1Direction::HypothesisInPremise => ne2.is_subset(ne1),
        C1Direction::PremiseInHypothesis => ne1.is_subset(ne2),
    };
    if !parity && enough && nested {
        return Some(Rule::C1);
    }
    None
}

/// First rule in E1, N1, N2, N3, N4, C1 order that holds for the ordered
/// pair (s1, s2), with default thresholds.
pub fn match_rules(
    s1: &AnalyzedSentence,
    s2: &AnalyzedSentence,
    lexicon: &Lexicon,
    provider: &EmbeddingProvider,
) -> Option<(Rule, NliLabel)> {
    match_rules_with(s1, s2, lexicon, provider, &RuleConfig::default())
}

pub fn match_rules_with(
    s1: &AnalyzedSentence,
    s2: &AnalyzedSentence,
    lexicon: &Lexicon,
    provider: &EmbeddingProvider,
    config: &RuleConfig,
) -> Option<(Rule, NliLabel)> {
    let a = Prepared::new(s1.clone(), provider);
    let b = Prepared::new(s2.clone(), provider);
    match_prepared(&a, &b, lexicon, config).map(|r| (r, r.label()))
}

/// Distinct sentence texts of a study set in order of first appearance.
pub fn corpus_sentences(set: &StudySet) -> Vec<String> {
    let mut seen = HashSet::new();
    set.studies
        .iter()
        .flat_map(|s| split_sentences(&s.reference))
        .filter(|s| seen.insert(s.to_string()))
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairGenConfig {
    pub quotas: Quotas,
    pub rules: RuleConfig,
    /// Maximum number of ordered pairs examined.
    pub budget: usize,
}

impl Default for PairGenConfig {
    fn default() -> Self {
        PairGenConfig {
            quotas: Quotas::default(),
            rules: RuleConfig::default(),
            budget: 2_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub rule: Rule,
    pub quota: usize,
    pub found: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairGeneration {
    pub pairs: Vec<NliPair>,
    /// Rules whose quota was not reached within the budget.
    pub shortfalls: Vec<Shortfall>,
    /// Ordered pairs examined.
    pub examined: usize,
}

impl PairGeneration {
    pub fn count(&self, rule: Rule) -> usize {
        self.pairs.iter().filter(|p| p.rule == rule).count()
    }
}

/// Maps a flat index in `0..m·(m−1)` to an ordered pair of distinct indices.
fn ordered_pair(flat: usize, m: usize) -> (usize, usize) {
    let i = flat / (m - 1);
    let j = flat % (m - 1);
    (i, if j >= i { j + 1 } else { j })
}

fn sample_order(m: usize, budget: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let total = m * (m - 1);
    index::sample(rng, total, budget.min(total)).into_vec()
}

/// Samples ordered pairs of distinct sentences without replacement and keeps
/// those matching a rule whose quota is still open.
pub fn generate_training_pairs(
    sentences: &[String],
    config: &PairGenConfig,
    lexicon: &Lexicon,
    provider: &EmbeddingProvider,
    seed: u64,
) -> Result<PairGeneration> {
    let mut pairs = Vec::new();
    let mut counts: BTreeMap<Rule, usize> = BTreeMap::new();
    let open = |counts: &BTreeMap<Rule, usize>, r: Rule| counts.get(&r).copied().unwrap_or(0) < config.quotas.get(r);
    if config.quotas.total() == 0 {
        return Ok(PairGeneration {
            pairs,
            shortfalls: Vec::new(),
            examined: 0,
        });
    }
    let m = sentences.len();
    if m < 2 {
        return Err(Error::Validation(format!("need at least 2 sentences, got {m}")));
    }
    let prepared: Vec<Prepared> = sentences
        .iter()
        .map(|s| Prepared::new(analyze_sentence(s, lexicon), provider))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examined = 0;
    for flat in sample_order(m, config.budget, &mut rng) {
        if !Rule::ALL.into_iter().any(|r| open(&counts, r)) {
            break;
        }
        examined += 1;
        let (i, j) = ordered_pair(flat, m);
        let (a, b) = (&prepared[i], &prepared[j]);
        let Some(rule) = match_prepared(a, b, lexicon, &config.rules) else {
            continue;
        };
        if !open(&counts, rule) {
            continue;
        }
        *counts.entry(rule).or_default() += 1;
        pairs.push(NliPair {
            premise: a.sentence.clone(),
            hypothesis: b.sentence.clone(),
            label: rule.label(),
            rule,
            sim: similarity(a, b),
        });
    }
    let shortfalls: Vec<Shortfall> = Rule::ALL
        .into_iter()
        .filter(|&r| open(&counts, r))
        .map(|rule| Shortfall {
            rule,
            quota: config.quotas.get(rule),
            found: counts.get(&rule).copied().unwrap_or(0),
        })
        .collect();
    for s in &shortfalls {
        log::warn!("rule {}: found {} of {} pairs after {examined} samples", s.rule, s.found, s.quota);
    }
    Ok(PairGeneration {
        pairs,
        shortfalls,
        examined,
    })
}

/// Unlabeled ordered pair for external annotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub premise: String,
    pub hypothesis: String,
    pub sim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSample {
    /// Each selected pair followed by its swap.
    pub pairs: Vec<CandidatePair>,
    /// Base pairs requested but not found.
    pub shortfall: usize,
}

/// Minimum similarity of an evaluation candidate.
pub const CANDIDATE_SIM: f64 = 0.5;

/// Samples `n` unordered sentence pairs with similarity at least
/// [`CANDIDATE_SIM`], emitting each in both orders.
pub fn sample_eval_candidates(
    sentences: &[String],
    n: usize,
    provider: &EmbeddingProvider,
    seed: u64,
    budget: usize,
) -> Result<CandidateSample> {
    if n == 0 {
        return Err(Error::Validation("candidate count must be at least 1".into()));
    }
    let m = sentences.len();
    let mut pairs = Vec::new();
    let mut found = 0;
    if m >= 2 {
        let embedded: Vec<Vec<Vec<f64>>> = sentences
            .iter()
            .map(|s| embed_tokens(&crate::textproc::tokenize(s), provider))
            .collect();
        let mut used = HashSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for flat in sample_order(m, budget, &mut rng) {
            if found == n {
                break;
            }
            let (i, j) = ordered_pair(flat, m);
            if !used.insert((i.min(j), i.max(j))) {
                continue;
            }
            let sim = bertscore_embedded(&embedded[j], &embedded[i]).map(|s| s.f1).unwrap_or(0.0);
            if sim < CANDIDATE_SIM {
                continue;
            }
            found += 1;
            for (p, h) in [(i, j), (j, i)] {
                pairs.push(CandidatePair {
                    premise: sentences[p].clone(),
                    hypothesis: sentences[h].clone(),
                    sim,
                });
            }
        }
    }
    if found < n {
        log::warn!("found {found} of {n} candidate pairs with similarity >= {CANDIDATE_SIM}");
    }
    Ok(CandidateSample {
        pairs,
        shortfall: n - found,
    })
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    premise: String,
    hypothesis: String,
    label: NliLabel,
    rule: Rule,
    sim: f64,
}

/// Writes pairs as JSON Lines with premise, hypothesis, label, rule and sim.
pub fn write_pairs_jsonl(pairs: &[NliPair], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in pairs {
        let rec = PairRecord {
            premise: p.premise.text.clone(),
            hypothesis: p.hypothesis.text.clone(),
            label: p.label,
            rule: p.rule,
            sim: p.sim,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads pairs written by [`write_pairs_jsonl`], re-analyzing the sentences.
pub fn read_pairs_jsonl(path: &Path, lexicon: &Lexicon) -> Result<Vec<NliPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let rec: PairRecord = serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok(NliPair {
                premise: analyze_sentence(&rec.premise, lexicon),
                hypothesis: analyze_sentence(&rec.hypothesis, lexicon),
                label: rec.label,
                rule: rec.rule,
                sim: rec.sim,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
