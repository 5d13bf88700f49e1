use super::{NliBackend, NliLabel};
use crate::error::Result;
use crate::simscore::{bertscore, EmbeddingProvider};
use crate::textproc::{antonym_of, AnalyzedSentence, Lexicon};

/// Similarity required for an entailment decision.
pub const ENTAILMENT_SIM: f64 = 0.7;

/// Deterministic classifier mirroring the weak-supervision rules:
///
/// 1. exactly one side negated and one named-entity set contains the other
///    → contradiction;
/// 2. same negation, hypothesis entities within the premise's and
///    similarity ≥ 0.7 → entailment;
/// 3. an anatomy-modifier antonym pair links the two → neutral;
/// 4. otherwise neutral.
#[derive(Clone, Debug)]
pub struct HeuristicNli {
    lexicon: Lexicon,
    provider: EmbeddingProvider,
}

impl HeuristicNli {
    pub fn new(lexicon: Lexicon, provider: EmbeddingProvider) -> Self {
        HeuristicNli { lexicon, provider }
    }

    fn modifier_antonyms(&self, a: &AnalyzedSentence, b: &AnalyzedSentence) -> bool {
        a.modifiers()
            .any(|m| b.modifiers().any(|n| antonym_of(m, n, &self.lexicon)))
    }
}

impl NliBackend for HeuristicNli {
    fn classify(&self, premise: &AnalyzedSentence, hypothesis: &AnalyzedSentence) -> Result<NliLabel> {
        let ne_p = premise.named_entities();
        let ne_h = hypothesis.named_entities();
        let nested = ne_h.is_subset(&ne_p) || ne_p.is_subset(&ne_h);
        if premise.negated != hypothesis.negated && nested {
            return Ok(NliLabel::Contradiction);
        }
        if premise.negated == hypothesis.negated && ne_h.is_subset(&ne_p) {
            let sim = match bertscore(&hypothesis.tokens, &premise.tokens, &self.provider) {
                Ok(s) => s.f1,
                Err(_) => 0.0,
            };
            if sim >= ENTAILMENT_SIM {
                return Ok(NliLabel::Entailment);
            }
        }
        if self.modifier_antonyms(premise, hypothesis) {
            return Ok(NliLabel::Neutral);
        }
        Ok(NliLabel::Neutral)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textproc::analyze_sentence;

    fn classify(p: &str, h: &str) -> NliLabel {
        let lex = Lexicon::builtin();
        let nli = HeuristicNli::new(lex.clone(), EmbeddingProvider::default());
        nli.classify(&analyze_sentence(p, &lex), &analyze_sentence(h, &lex))
            .unwrap()
    }

    #[test]
    fn self_pair_is_entailment() {
        let s = "There is mild pulmonary edema.";
        assert_eq!(classify(s, s), NliLabel::Entailment);
    }

    #[test]
    fn bilateral_effusions_contradict_their_negation() {
        assert_eq!(
            classify("There are also small bilateral pleural effusions.", "No pleural effusions."),
            NliLabel::Contradiction
        );
    }

    #[test]
    fn negated_effusion_contradicts_growing_effusion() {
        assert_eq!(
            classify(
                "There is no left pleural effusion.",
                "The left-sided pleural effusion has increased in size and is now moderate in size."
            ),
            NliLabel::Contradiction
        );
    }

    #[test]
    fn unrelated_sentences_are_neutral() {
        assert_eq!(
            classify("The heart is mildly enlarged.", "There is a small pneumothorax."),
            NliLabel::Neutral
        );
    }

    #[test]
    fn antonym_check_runs_after_entailment() {
        // rule order: a close left/right paraphrase is already entailed
        assert_eq!(
            classify("Small left pleural effusion.", "Small right pleural effusion."),
            NliLabel::Entailment
        );
        // without the similarity match the antonym rule yields neutral
        assert_eq!(
            classify("Left lower lobe atelectasis.", "Right upper lobe atelectasis and effusion."),
            NliLabel::Neutral
        );
    }
}
