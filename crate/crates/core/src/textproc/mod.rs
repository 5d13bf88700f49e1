//! Tokenization, sentence splitting, lexicon-based clinical entity
//! recognition, sentence-scope negation, antonym lookup and observation
//! keyword groups.

mod lexicon;
mod tokenize;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use lexicon::{EntityType, KeywordGroup, Lexicon, ObservationKeywords};
pub use tokenize::{detokenize, is_punct_token, split_sentences, tokenize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub surface: String,
    pub etype: EntityType,
    /// Half-open token range within the sentence.
    pub token_span: (usize, usize),
}

/// Set of `(surface, type)` pairs with set semantics.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySet(BTreeSet<(String, EntityType)>);

impl EntitySet {
    pub fn new() -> Self {
        EntitySet::default()
    }

    pub fn insert(&mut self, surface: impl Into<String>, etype: EntityType) -> bool {
        self.0.insert((surface.into(), etype))
    }

    pub fn contains(&self, surface: &str, etype: EntityType) -> bool {
        self.0.contains(&(surface.to_string(), etype))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, EntityType)> {
        self.0.iter()
    }

    pub fn intersection_len(&self, other: &EntitySet) -> usize {
        self.0.intersection(&other.0).count()
    }

    pub fn is_subset(&self, other: &EntitySet) -> bool {
        self.0.is_subset(&other.0)
    }

    pub fn is_disjoint(&self, other: &EntitySet) -> bool {
        self.0.is_disjoint(&other.0)
    }

    pub fn types(&self) -> BTreeSet<EntityType> {
        self.0.iter().map(|(_, t)| *t).collect()
    }
}

impl FromIterator<(String, EntityType)> for EntitySet {
    fn from_iter<I: IntoIterator<Item = (String, EntityType)>>(iter: I) -> Self {
        EntitySet(iter.into_iter().collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzedSentence {
    pub text: String,
    pub tokens: Vec<String>,
    pub entities: Vec<Entity>,
    pub negated: bool,
}

impl AnalyzedSentence {
    /// Anatomy and observation entities of the sentence.
    pub fn named_entities(&self) -> EntitySet {
        self.entities
            .iter()
            .filter(|e| e.etype.is_named())
            .map(|e| (e.surface.clone(), e.etype))
            .collect()
    }

    pub fn modifiers(&self) -> impl Iterator<Item = &str> {
        self.entities
            .iter()
            .filter(|e| e.etype == EntityType::AnatomyModifier)
            .map(|e| e.surface.as_str())
    }

    pub fn has_entity(&self, surface: &str, etype: EntityType) -> bool {
        self.entities.iter().any(|e| e.etype == etype && e.surface == surface)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalyzedReport {
    pub sentences: Vec<AnalyzedSentence>,
    pub entity_set: EntitySet,
}

impl AnalyzedReport {
    pub fn tokens(&self) -> Vec<&str> {
        self.sentences
            .iter()
            .flat_map(|s| s.tokens.iter().map(String::as_str))
            .collect()
    }
}

/// Analyzes a single sentence: tokens, longest-match entities and the
/// negation flag.
pub fn analyze_sentence(text: &str, lexicon: &Lexicon) -> AnalyzedSentence {
    let tokens = tokenize(text);
    let entities = find_entities(&tokens, lexicon);
    let has_cue = lexicon
        .negation_cues()
        .iter()
        .any(|cue| tokens.windows(cue.len()).any(|w| w == cue.as_slice()));
    let uncertain = entities.iter().any(|e| e.etype == EntityType::Uncertainty);
    AnalyzedSentence {
        text: text.to_string(),
        tokens,
        entities,
        negated: has_cue || uncertain,
    }
}

fn find_entities(tokens: &[String], lexicon: &Lexicon) -> Vec<Entity> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let longest = (1..=lexicon.max_term_len().min(tokens.len() - i))
            .rev()
            .find_map(|n| lexicon.term_type(&tokens[i..i + n]).map(|t| (n, t)));
        match longest {
            Some((n, etype)) => {
                out.push(Entity {
                    surface: tokens[i..i + n].join(" "),
                    etype,
                    token_span: (i, i + n),
                });
                i += n;
            }
            None => i += 1,
        }
    }
    out
}

pub fn analyze_report(text: &str, lexicon: &Lexicon) -> AnalyzedReport {
    let sentences: Vec<AnalyzedSentence> = split_sentences(text)
        .into_iter()
        .map(|s| analyze_sentence(s, lexicon))
        .collect();
    let entity_set = sentences
        .iter()
        .flat_map(|s| s.entities.iter().map(|e| (e.surface.clone(), e.etype)))
        .collect();
    AnalyzedReport {
        sentences,
        entity_set,
    }
}

pub fn antonym_of(a: &str, b: &str, lexicon: &Lexicon) -> bool {
    lexicon.is_antonym(a, b)
}

/// Group id of the first keyword token in the sentence, if any.
pub fn keyword_group_of<'l>(sentence: &AnalyzedSentence, lexicon: &'l Lexicon) -> Option<&'l str> {
    sentence.tokens.iter().find_map(|t| lexicon.keyword_group(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lex() -> Lexicon {
        Lexicon::builtin()
    }

    #[test]
    fn negated_left_pleural_effusion() {
        let r = analyze_report("There is no left pleural effusion.", &lex());
        assert_eq!(r.sentences.len(), 1);
        let s = &r.sentences[0];
        assert!(s.negated);
        let mut expected = EntitySet::new();
        expected.insert("pleural", EntityType::Anatomy);
        expected.insert("effusion", EntityType::Observation);
        expected.insert("left", EntityType::AnatomyModifier);
        assert_eq!(r.entity_set, expected);
    }

    #[test]
    fn empty_text_gives_empty_report() {
        let r = analyze_report("", &lex());
        assert!(r.sentences.is_empty());
        assert!(r.entity_set.is_empty());
    }

    #[test]
    fn enlarged_heart() {
        let r = analyze_report("The heart is mildly enlarged.", &lex());
        assert!(r.entity_set.contains("heart", EntityType::Anatomy));
        assert!(r.entity_set.contains("enlarged", EntityType::Observation));
        assert!(!r.sentences[0].negated);
    }

    #[test]
    fn uncertainty_counts_as_negation() {
        let s = analyze_sentence("Atelectasis cannot be excluded.", &lex());
        assert!(s.negated);
        assert!(s.has_entity("cannot be excluded", EntityType::Uncertainty));
    }

    #[test]
    fn multiword_terms_win_over_prefixes() {
        let s = analyze_sentence("Normal cardiomediastinal silhouette.", &lex());
        assert_eq!(s.entities.len(), 1);
        assert_eq!(s.entities[0].surface, "cardiomediastinal silhouette");
        assert_eq!(s.entities[0].token_span, (1, 3));
    }

    #[test]
    fn antonyms_are_symmetric_and_irreflexive() {
        let l = lex();
        assert!(antonym_of("left", "right", &l));
        assert!(antonym_of("right", "left", &l));
        assert!(!antonym_of("left", "left", &l));
        assert!(antonym_of("upper", "lower", &l));
    }

    #[test]
    fn keyword_groups() {
        let l = lex();
        let g = |t: &str| keyword_group_of(&analyze_sentence(t, &l), &l).map(str::to_string);
        assert_eq!(g("Normal cardiomediastinal silhouette.").as_deref(), Some("G1"));
        assert_eq!(g("Cardiomediastinal silhouette is unchanged.").as_deref(), Some("G2"));
        assert_eq!(g("There is a small effusion."), None);
        assert_eq!(g("Lungs are clear and stable.").as_deref(), Some("G3"));
    }

    fn word() -> impl Strategy<Value = String> {
        prop::sample::select(vec![
            "no", "left", "pleural", "effusion", "heart", "is", "enlarged", "cardiac", "silhouette",
            "cardiomediastinal", "possible", "free", "of", "edema", ".", ",", "mild", "right",
        ])
        .prop_map(str::to_string)
    }

    proptest! {
        #[test]
        fn spans_never_overlap_and_match_surfaces(words in prop::collection::vec(word(), 0..20)) {
            let text = words.join(" ");
            let l = lex();
            let r = analyze_report(&text, &l);
            for s in &r.sentences {
                let mut last_end = 0;
                for e in &s.entities {
                    prop_assert!(e.token_span.0 >= last_end);
                    prop_assert!(e.token_span.0 < e.token_span.1);
                    prop_assert!(e.token_span.1 <= s.tokens.len());
                    prop_assert_eq!(&e.surface, &s.tokens[e.token_span.0..e.token_span.1].join(" "));
                    last_end = e.token_span.1;
                }
            }
        }

        #[test]
        fn trailing_whitespace_is_irrelevant(words in prop::collection::vec(word(), 0..20), pad in "[ \t\n]{0,4}") {
            let text = words.join(" ");
            let l = lex();
            let a = analyze_report(&text, &l);
            let b = analyze_report(&format!("{text}{pad}"), &l);
            prop_assert_eq!(a.entity_set, b.entity_set);
        }

        #[test]
        fn entity_set_is_union_of_sentence_entities(words in prop::collection::vec(word(), 0..30)) {
            let r = analyze_report(&words.join(" "), &lex());
            let union: EntitySet = r
                .sentences
                .iter()
                .flat_map(|s| s.entities.iter().map(|e| (e.surface.clone(), e.etype)))
                .collect();
            prop_assert_eq!(union, r.entity_set);
        }
    }
}
