use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::corpus::{synth_generate, SynthConfig};

fn lex() -> Lexicon {
    Lexicon::builtin()
}

fn rule_of(s1: &str, s2: &str) -> Option<(Rule, NliLabel)> {
    let lex = lex();
    match_rules(
        &analyze_sentence(s1, &lex),
        &analyze_sentence(s2, &lex),
        &lex,
        &EmbeddingProvider::default(),
    )
}

#[test]
fn example_pairs() {
    assert_eq!(
        rule_of("The heart is mildly enlarged.", "The heart appears again mild-to-moderately enlarged."),
        Some((Rule::E1, NliLabel::Entailment))
    );
    assert_eq!(
        rule_of("Normal cardiomediastinal silhouette.", "Cardiomediastinal silhouette is unchanged."),
        Some((Rule::N4, NliLabel::Neutral))
    );
    assert_eq!(
        rule_of("There are also small bilateral pleural effusions.", "No pleural effusions."),
        Some((Rule::C1, NliLabel::Contradiction))
    );
}

#[test]
fn subset_neutral_and_antonym_rules() {
    // the premise entities are a proper subset of the hypothesis entities
    assert_eq!(
        rule_of("There is mild pulmonary edema.", "There is mild pulmonary edema and a pleural effusion."),
        Some((Rule::N1, NliLabel::Neutral))
    );
    assert_eq!(
        rule_of("Small left pneumothorax.", "Tiny right pneumothorax."),
        Some((Rule::N2, NliLabel::Neutral))
    );
    assert_eq!(rule_of("Small left pneumothorax.", "No pulmonary edema."), None);
}

#[test]
fn c1_direction_switch() {
    let lex = lex();
    let p = EmbeddingProvider::default();
    let big = analyze_sentence("There is no pleural effusion or pulmonary edema.", &lex);
    let small = analyze_sentence("There is a pleural effusion.", &lex);
    let hyp_in_prem = RuleConfig::default();
    let prem_in_hyp = RuleConfig {
        c1_direction: C1Direction::PremiseInHypothesis,
        ..RuleConfig::default()
    };
    assert_eq!(match_rules_with(&big, &small, &lex, &p, &hyp_in_prem).map(|m| m.0), Some(Rule::C1));
    assert_eq!(match_rules_with(&small, &big, &lex, &p, &hyp_in_prem), None);
    assert_eq!(match_rules_with(&small, &big, &lex, &p, &prem_in_hyp).map(|m| m.0), Some(Rule::C1));
    assert_eq!(match_rules_with(&big, &small, &lex, &p, &prem_in_hyp), None);
}

const FIXTURE: [&str; 12] = [
    "The heart is mildly enlarged.",
    "The heart appears again mild-to-moderately enlarged.",
    "There are also small bilateral pleural effusions.",
    "No pleural effusions.",
    "Normal cardiomediastinal silhouette.",
    "Cardiomediastinal silhouette is unchanged.",
    "The lungs are clear.",
    "There is no pneumothorax.",
    "The osseous structures are intact.",
    "Mild pulmonary edema.",
    "There is focal consolidation in the left lower lobe.",
    "No acute osseous abnormality.",
];

/// Hand labels for every ordered fixture pair that matches a rule (0-based).
fn hand_labels() -> BTreeSet<(usize, usize, Rule)> {
    let mut out = BTreeSet::new();
    // same two entities, same polarity, paraphrase
    out.insert((0, 1, Rule::E1));
    out.insert((1, 0, Rule::E1));
    // disjoint {anatomy, observation} pairs with the same polarity
    let two_type_positive = [0, 1, 2, 9, 10];
    for &a in &two_type_positive {
        for &b in &two_type_positive {
            if a != b && !(a <= 1 && b <= 1) {
                out.insert((a, b, Rule::N3));
            }
        }
    }
    // same single entity, different status keyword groups
    out.insert((4, 5, Rule::N4));
    out.insert((5, 4, Rule::N4));
    // same two entities, opposite polarity
    out.insert((2, 3, Rule::C1));
    out.insert((3, 2, Rule::C1));
    out
}

#[test]
fn fixture_matches_hand_labels() {
    let lex = lex();
    let p = EmbeddingProvider::default();
    let analyzed: Vec<_> = FIXTURE.iter().map(|s| analyze_sentence(s, &lex)).collect();
    let mut found = BTreeSet::new();
    for (i, a) in analyzed.iter().enumerate() {
        for (j, b) in analyzed.iter().enumerate() {
            if i != j {
                if let Some((rule, _)) = match_rules(a, b, &lex, &p) {
                    found.insert((i, j, rule));
                }
            }
        }
    }
    assert_eq!(found, hand_labels());
}

#[test]
fn fixture_generation_fills_small_quotas() {
    let lex = lex();
    let p = EmbeddingProvider::default();
    let sentences: Vec<String> = FIXTURE.iter().map(|s| s.to_string()).collect();
    let mut quotas = Quotas::zero();
    quotas.set(Rule::E1, 1);
    quotas.set(Rule::C1, 1);
    quotas.set(Rule::N4, 1);
    let config = PairGenConfig {
        quotas,
        ..PairGenConfig::default()
    };
    let hand = hand_labels();
    for seed in 0..5 {
        let gen = generate_training_pairs(&sentences, &config, &lex, &p, seed).unwrap();
        assert!(gen.shortfalls.is_empty());
        let rules: Vec<Rule> = gen.pairs.iter().map(|p| p.rule).collect();
        assert_eq!(rules.len(), 3);
        for r in [Rule::E1, Rule::C1, Rule::N4] {
            assert_eq!(gen.count(r), 1);
        }
        for pair in &gen.pairs {
            let i = FIXTURE.iter().position(|s| *s == pair.premise.text).unwrap();
            let j = FIXTURE.iter().position(|s| *s == pair.hypothesis.text).unwrap();
            assert!(hand.contains(&(i, j, pair.rule)));
            assert_eq!(pair.label, pair.rule.label());
        }
        let again = generate_training_pairs(&sentences, &config, &lex, &p, seed).unwrap();
        assert_eq!(again.pairs, gen.pairs);
    }
}

#[test]
fn zero_quotas_and_short_corpora() {
    let lex = lex();
    let p = EmbeddingProvider::default();
    let config = PairGenConfig {
        quotas: Quotas::zero(),
        ..PairGenConfig::default()
    };
    let gen = generate_training_pairs(&["a.".to_string(), "b.".to_string()], &config, &lex, &p, 0).unwrap();
    assert!(gen.pairs.is_empty());
    let one = generate_training_pairs(&["a.".to_string()], &PairGenConfig::default(), &lex, &p, 0);
    assert!(matches!(one, Err(Error::Validation(_))));
}

#[test]
fn exhausted_budget_reports_shortfall() {
    let lex = lex();
    let p = EmbeddingProvider::default();
    let sentences: Vec<String> = FIXTURE.iter().map(|s| s.to_string()).collect();
    let mut quotas = Quotas::zero();
    quotas.set(Rule::N2, 3);
    quotas.set(Rule::N4, 5);
    let config = PairGenConfig {
        quotas,
        ..PairGenConfig::default()
    };
    let gen = generate_training_pairs(&sentences, &config, &lex, &p, 3).unwrap();
    assert_eq!(gen.examined, 12 * 11);
    assert_eq!(
        gen.shortfalls,
        vec![
            Shortfall {
                rule: Rule::N2,
                quota: 3,
                found: 0
            },
            Shortfall {
                rule: Rule::N4,
                quota: 5,
                found: 2
            },
        ]
    );
}

#[test]
fn ordered_pair_enumerates_all_distinct_pairs() {
    for m in 2..7 {
        let all: BTreeSet<(usize, usize)> = (0..m * (m - 1)).map(|f| ordered_pair(f, m)).collect();
        let expected: BTreeSet<(usize, usize)> =
            (0..m).flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j))).collect();
        assert_eq!(all, expected);
    }
}

#[test]
fn eval_candidates_are_swapped_pairs() {
    let p = EmbeddingProvider::default();
    let sentences: Vec<String> = FIXTURE.iter().map(|s| s.to_string()).collect();
    let one = sample_eval_candidates(&sentences, 1, &p, 0, 10_000).unwrap();
    assert_eq!(one.pairs.len(), 2);
    assert_eq!(one.pairs[0].premise, one.pairs[1].hypothesis);
    assert_eq!(one.pairs[0].hypothesis, one.pairs[1].premise);
    assert!(one.pairs[0].sim >= CANDIDATE_SIM);
    assert_eq!(one.shortfall, 0);
    assert!(sample_eval_candidates(&sentences, 0, &p, 0, 10).is_err());
}

#[test]
fn eval_candidates_filter_dissimilar_pairs() {
    let p = EmbeddingProvider::default();
    let sentences = vec!["aaaa bbbb.".to_string(), "zzzz yyyy!".to_string()];
    let sample = sample_eval_candidates(&sentences, 1, &p, 0, 100).unwrap();
    assert!(sample.pairs.is_empty());
    assert_eq!(sample.shortfall, 1);
}

#[test]
fn eval_candidates_from_synthetic_corpus() {
    let set = synth_generate(&SynthConfig::varied(400, 1)).unwrap();
    let all: Vec<String> = set
        .studies
        .iter()
        .flat_map(|s| split_sentences(&s.reference))
        .map(str::to_string)
        .take(1000)
        .collect();
    assert_eq!(all.len(), 1000);
    let mut distinct = all.clone();
    distinct.sort();
    distinct.dedup();
    let sample = sample_eval_candidates(&distinct, 240, &EmbeddingProvider::default(), 4, 1_000_000).unwrap();
    assert_eq!(sample.pairs.len(), 480);
    let bases: BTreeSet<(String, String)> = sample
        .pairs
        .iter()
        .map(|c| {
            let (a, b) = (c.premise.clone(), c.hypothesis.clone());
            if a < b {
                (a, b)
            } else {
                (b, a)
            }
        })
        .collect();
    assert_eq!(bases.len(), 240);
}

#[test]
fn jsonl_round_trip() {
    let lex = lex();
    let p = EmbeddingProvider::default();
    let sentences: Vec<String> = FIXTURE.iter().map(|s| s.to_string()).collect();
    let gen = generate_training_pairs(
        &sentences,
        &PairGenConfig {
            quotas: Quotas::new(2, 2, 2),
            ..PairGenConfig::default()
        },
        &lex,
        &p,
        9,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    write_pairs_jsonl(&gen.pairs, &path).unwrap();
    let first: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(&path).unwrap().lines().next().unwrap()).unwrap();
    for key in ["premise", "hypothesis", "label", "rule", "sim"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let back = read_pairs_jsonl(&path, &lex).unwrap();
    assert_eq!(back.len(), gen.pairs.len());
    for (a, b) in back.iter().zip(&gen.pairs) {
        assert_eq!((a.rule, a.label, &a.premise, &a.hypothesis), (b.rule, b.label, &b.premise, &b.hypothesis));
    }
}

#[test]
fn rule_names_parse() {
    for r in Rule::ALL {
        assert_eq!(r.as_str().parse::<Rule>().unwrap(), r);
    }
    assert!("N5".parse::<Rule>().is_err());
    assert_eq!(Quotas::default().total(), 6000);
    assert_eq!(Quotas::scaled(0.1).unwrap(), Quotas::new(200, 50, 200));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn emitted_pairs_revalidate(seed in 0u64..1000) {
        let lex = lex();
        let p = EmbeddingProvider::default();
        let set = synth_generate(&SynthConfig::varied(60, seed)).unwrap();
        let sentences = corpus_sentences(&set);
        let config = PairGenConfig { quotas: Quotas::new(10, 5, 10), budget: 20_000, ..PairGenConfig::default() };
        let gen = generate_training_pairs(&sentences, &config, &lex, &p, seed).unwrap();
        for pair in &gen.pairs {
            prop_assert_eq!(match_rules(&pair.premise, &pair.hypothesis, &lex, &p), Some((pair.rule, pair.label)));
        }
        for r in Rule::ALL {
            prop_assert!(gen.count(r) <= config.quotas.get(r));
            if gen.shortfalls.iter().all(|s| s.rule != r) {
                prop_assert_eq!(gen.count(r), config.quotas.get(r));
            }
        }
    }
}
