use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenize::tokenize;
use crate::error::{Error, Result};

/// Entity categories recognized by the lexicon matcher.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EntityType {
    Anatomy,
    Observation,
    AnatomyModifier,
    Uncertainty,
}

impl EntityType {
    /// Anatomy and observation entities form the named-entity set used by
    /// the rewards and the weak-supervision rules.
    pub fn is_named(self) -> bool {
        matches!(self, EntityType::Anatomy | EntityType::Observation)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KeywordGroup {
    pub id: String,
    pub keywords: Vec<String>,
}

/// Keyword patterns for one evaluated observation. A sentence mentions the
/// observation when every token of at least one pattern occurs in it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObservationKeywords {
    pub name: String,
    pub patterns: Vec<Vec<String>>,
}

#[derive(Deserialize)]
struct LexiconFile {
    terms: BTreeMap<String, EntityType>,
    negation_cues: Vec<String>,
    antonyms: Vec<(String, String)>,
    keyword_groups: Vec<KeywordGroup>,
    #[serde(default)]
    observations: Vec<ObservationKeywords>,
}

/// Term dictionary, negation cues, antonym table, keyword groups and
/// observation keyword lists.
#[derive(Clone, Debug)]
pub struct Lexicon {
    terms: HashMap<Vec<String>, EntityType>,
    max_term_len: usize,
    negation_cues: Vec<Vec<String>>,
    antonyms: HashSet<(String, String)>,
    keyword_groups: Vec<KeywordGroup>,
    observations: Vec<ObservationKeywords>,
}

const BUILTIN: &str = include_str!("../../data/lexicon.json");

impl Lexicon {
    /// The lexicon shipped with the crate.
    pub fn builtin() -> Self {
        Lexicon::from_json(BUILTIN).expect("bundled lexicon is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Lexicon::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Parse {
                path: path.to_path_buf(),
                line: j.line(),
                message: j.to_string(),
            },
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LexiconFile = serde_json::from_str(text)?;
        if file.terms.is_empty() {
            return Err(Error::Validation("lexicon has no terms".into()));
        }
        let mut terms = HashMap::new();
        for (term, etype) in file.terms {
            let toks = tokenize(&term);
            if toks.is_empty() {
                return Err(Error::Validation(format!("empty lexicon term {term:?}")));
            }
            terms.insert(toks, etype);
        }
        let max_term_len = terms.keys().map(Vec::len).max().unwrap_or(0);
        let negation_cues = file
            .negation_cues
            .iter()
            .map(|c| tokenize(c))
            .filter(|t| !t.is_empty())
            .collect();
        let mut antonyms = HashSet::new();
        for (a, b) in file.antonyms {
            let (a, b) = (a.to_lowercase(), b.to_lowercase());
            if a == b {
                return Err(Error::Validation(format!("antonym pair ({a}, {b}) is reflexive")));
            }
            antonyms.insert((b.clone(), a.clone()));
            antonyms.insert((a, b));
        }
        let mut seen = HashMap::new();
        for g in &file.keyword_groups {
            for k in &g.keywords {
                if let Some(other) = seen.insert(k.to_lowercase(), g.id.clone()) {
                    return Err(Error::Validation(format!(
                        "keyword {k:?} appears in groups {other} and {}",
                        g.id
                    )));
                }
            }
        }
        Ok(Lexicon {
            terms,
            max_term_len,
            negation_cues,
            antonyms,
            keyword_groups: file.keyword_groups,
            observations: file.observations,
        })
    }

    pub fn term_type(&self, tokens: &[String]) -> Option<EntityType> {
        self.terms.get(tokens).copied()
    }

    pub fn max_term_len(&self) -> usize {
        self.max_term_len
    }

    pub fn negation_cues(&self) -> &[Vec<String>] {
        &self.negation_cues
    }

    pub fn is_antonym(&self, a: &str, b: &str) -> bool {
        self.antonyms.contains(&(a.to_string(), b.to_string()))
    }

    pub fn keyword_groups(&self) -> &[KeywordGroup] {
        &self.keyword_groups
    }

    pub fn keyword_group(&self, token: &str) -> Option<&str> {
        self.keyword_groups
            .iter()
            .find(|g| g.keywords.iter().any(|k| k == token))
            .map(|g| g.id.as_str())
    }

    pub fn observations(&self) -> &[ObservationKeywords] {
        &self.observations
    }
}
