//! Per-utterance prediction: query every slot type, parse the generations,
//! align values to spans and resolve values claimed by several slot types.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{SlotTypeRegistry, Utterance};
use crate::model::{Generation, Model};
use crate::prompting::{build_main_input, parse_answer, render, PromptTemplate};

/// Anything that maps a prompt to a generated answer with per-token
/// probabilities.
pub trait Generator {
    fn generate(&self, input_tokens: &[String]) -> Generation;
}

/// A trained model decoding greedily up to `max_len` tokens.
pub struct GreedyGenerator<'a> {
    pub model: &'a Model,
    pub max_len: usize,
}

impl Generator for GreedyGenerator<'_> {
    fn generate(&self, input_tokens: &[String]) -> Generation {
        self.model.generate_tokens(input_tokens, self.max_len)
    }
}

/// Which slot types are queried per utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryScope {
    /// Every registry type.
    All,
    /// Only the types that occur in the utterance's domain.
    #[default]
    Domain,
}

impl QueryScope {
    pub fn queried<'r>(self, registry: &'r SlotTypeRegistry, domain: &str) -> Vec<&'r str> {
        match self {
            QueryScope::All => registry.names().collect(),
            QueryScope::Domain => registry.types_in_domain(domain),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotPrediction {
    pub slot_type: String,
    pub value: String,
    pub span: Option<(usize, usize)>,
    pub first_token_prob: f64,
}

/// One generation per queried slot type. `none` and empty answers are
/// dropped; a multi-value answer yields one prediction per value, all
/// sharing the answer's first-token probability.
pub fn predict_slots(
    generator: &dyn Generator,
    utterance: &Utterance,
    registry: &SlotTypeRegistry,
    template: &PromptTemplate,
    scope: QueryScope,
) -> Vec<SlotPrediction> {
    let mut predictions = Vec::new();
    for slot_type in scope.queried(registry, &utterance.domain) {
        let input = build_main_input(utterance, slot_type, registry, template).expect("queried types come from the registry");
        let generation = generator.generate(&input);
        let Some(first_token_prob) = generation.first_token_prob() else {
            continue;
        };
        for value in parse_answer(&render(&generation.tokens)) {
            predictions.push(SlotPrediction {
                slot_type: slot_type.to_string(),
                span: align_value_to_span(&value, utterance),
                value,
                first_token_prob,
            });
        }
    }
    predictions
}

/// Leftmost exact token-sequence match of `value` in the utterance.
pub fn align_value_to_span(value: &str, utterance: &Utterance) -> Option<(usize, usize)> {
    let needle: Vec<&str> = value.split_whitespace().collect();
    if needle.is_empty() || needle.len() > utterance.len() {
        return None;
    }
    utterance
        .tokens
        .windows(needle.len())
        .position(|w| w.iter().map(String::as_str).eq(needle.iter().copied()))
        .map(|start| (start, start + needle.len()))
}

/// Keeps, for each value claimed more than once, only the prediction with
/// the highest first-token probability; exact ties go to the
/// lexicographically smallest slot type. Survivors keep their input order.
pub fn resolve_conflicts(predictions: &[SlotPrediction]) -> Vec<SlotPrediction> {
    let mut winners: HashMap<(&str, Option<(usize, usize)>), usize> = HashMap::new();
    for (i, p) in predictions.iter().enumerate() {
        winners
            .entry((p.value.as_str(), p.span))
            .and_modify(|best| {
                let current = &predictions[*best];
                let better = match p.first_token_prob.total_cmp(&current.first_token_prob) {
                    Ordering::Greater => true,
                    Ordering::Less => false,
                    Ordering::Equal => p.slot_type < current.slot_type,
                };
                if better {
                    *best = i;
                }
            })
            .or_insert(i);
    }
    let mut keep: Vec<usize> = winners.into_values().collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| predictions[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SlotSpan;
    use crate::prompting::{build_main_target, QUESTION_MARK};
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn pred(slot_type: &str, value: &str, p: f64) -> SlotPrediction {
        SlotPrediction {
            slot_type: slot_type.into(),
            value: value.into(),
            span: None,
            first_token_prob: p,
        }
    }

    /// Answers each query from a fixed table keyed by the queried type.
    struct Table(Vec<(&'static str, &'static str, f64)>);

    impl Generator for Table {
        fn generate(&self, input: &[String]) -> Generation {
            let q = input.iter().position(|t| t == QUESTION_MARK).unwrap();
            let asked = input[..q].join(" ");
            let (_, answer, p) = self.0.iter().find(|(ty, _, _)| asked.ends_with(ty)).copied().unwrap_or(("", "none", 0.5));
            let tokens = crate::prompting::text_tokens(answer)
                .flat_map(|t| match t.strip_suffix(',') {
                    Some(w) => vec![w.to_string(), ",".to_string()],
                    None => vec![t],
                })
                .collect::<Vec<_>>();
            Generation {
                ids: vec![0; tokens.len()],
                probs: vec![p; tokens.len()],
                tokens,
            }
        }
    }

    fn sugarfoot() -> (Utterance, SlotTypeRegistry) {
        let u = Utterance::new(
            "s",
            toks("play the game sugarfoot"),
            "SearchCreativeWork",
            vec![SlotSpan::new(2, 3, "object type"), SlotSpan::new(3, 4, "object name")],
        )
        .unwrap();
        let registry = SlotTypeRegistry::from_utterances([&u]);
        (u, registry)
    }

    #[test]
    fn predicts_fixture_values() {
        let (u, reg) = sugarfoot();
        let generator = Table(vec![("object type", "game", 0.9), ("object name", "sugarfoot", 0.8)]);
        let preds = predict_slots(&generator, &u, &reg, &PromptTemplate::default(), QueryScope::All);
        let pairs: Vec<_> = preds.iter().map(|p| (p.slot_type.as_str(), p.value.as_str(), p.span)).collect();
        assert_eq!(pairs, vec![("object name", "sugarfoot", Some((3, 4))), ("object type", "game", Some((2, 3)))]);
    }

    #[test]
    fn all_none_yields_nothing() {
        let (u, reg) = sugarfoot();
        assert!(predict_slots(&Table(vec![]), &u, &reg, &PromptTemplate::default(), QueryScope::All).is_empty());
    }

    #[test]
    fn multi_value_answer_shares_probability() {
        let u = Utterance::new(
            "m",
            toks("play a b and c"),
            "PlayMusic",
            vec![SlotSpan::new(1, 3, "artist"), SlotSpan::new(4, 5, "artist")],
        )
        .unwrap();
        let reg = SlotTypeRegistry::from_utterances([&u]);
        assert_eq!(render(&build_main_target(&u, "artist")), "a b, c");
        let preds = predict_slots(&Table(vec![("artist", "a b, c", 0.7)]), &u, &reg, &PromptTemplate::default(), QueryScope::All);
        assert_eq!(preds.len(), 2);
        assert_eq!(preds[0].value, "a b");
        assert_eq!(preds[1].value, "c");
        assert_eq!(preds[0].first_token_prob, preds[1].first_token_prob);
    }

    #[test]
    fn query_counts_per_scope() {
        let (u, mut reg) = sugarfoot();
        reg.insert("artist", "PlayMusic");
        struct Counter(std::cell::Cell<usize>);
        impl Generator for Counter {
            fn generate(&self, _: &[String]) -> Generation {
                self.0.set(self.0.get() + 1);
                Generation {
                    ids: vec![],
                    tokens: vec![],
                    probs: vec![],
                }
            }
        }
        let c = Counter(std::cell::Cell::new(0));
        predict_slots(&c, &u, &reg, &PromptTemplate::default(), QueryScope::All);
        assert_eq!(c.0.get(), 3);
        let c = Counter(std::cell::Cell::new(0));
        predict_slots(&c, &u, &reg, &PromptTemplate::default(), QueryScope::Domain);
        assert_eq!(c.0.get(), 2);
    }

    #[test]
    fn alignment() {
        let (u, _) = sugarfoot();
        assert_eq!(align_value_to_span("game", &u), Some((2, 3)));
        assert_eq!(align_value_to_span("banana", &u), None);
        let v = Utterance::new("p", toks("add ilse delange to my journey playlist"), "A", vec![]).unwrap();
        assert_eq!(align_value_to_span("ilse delange", &v), Some((1, 3)));
    }

    #[test]
    fn appendix_conflict_keeps_artist() {
        let preds = vec![pred("music_item", "ilse delange", 0.40), pred("artist", "ilse delange", 0.90), pred("playlist", "journey", 0.8)];
        let out = resolve_conflicts(&preds);
        assert_eq!(out, vec![preds[1].clone(), preds[2].clone()]);
    }

    #[test]
    fn disjoint_values_unchanged_and_ties_lexicographic() {
        let preds = vec![pred("playlist", "journey", 0.3), pred("artist", "ilse delange", 0.2)];
        assert_eq!(resolve_conflicts(&preds), preds);
        let tie = vec![pred("music_item", "x", 0.5), pred("artist", "x", 0.5)];
        assert_eq!(resolve_conflicts(&tie), vec![tie[1].clone()]);
    }

    fn prediction_set() -> impl Strategy<Value = Vec<SlotPrediction>> {
        let types = prop::sample::select(vec!["artist", "album", "playlist", "music_item"]);
        let values = prop::sample::select(vec!["a", "b", "c d", "e"]);
        // Probabilities on a coarse grid so exact ties are common.
        let probs = (1u32..=4).prop_map(|k| k as f64 / 4.0);
        proptest::collection::vec((types, values, probs, prop::bool::ANY), 0..12).prop_map(|items| {
            items
                .into_iter()
                .map(|(t, v, p, aligned)| SlotPrediction {
                    slot_type: t.into(),
                    value: v.into(),
                    span: aligned.then(|| (0, v.split(' ').count())),
                    first_token_prob: p,
                })
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn resolution_is_idempotent_and_conservative(preds in prediction_set()) {
            let once = resolve_conflicts(&preds);
            prop_assert_eq!(resolve_conflicts(&once), once.clone());
            for p in &once {
                prop_assert!(preds.contains(p));
            }
            let mut groups = std::collections::BTreeSet::new();
            for p in &preds {
                groups.insert((p.value.clone(), p.span));
            }
            prop_assert_eq!(once.len(), groups.len());
            for p in &once {
                let best = preds
                    .iter()
                    .filter(|q| q.value == p.value && q.span == p.span)
                    .map(|q| q.first_token_prob)
                    .fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(p.first_token_prob, best);
            }
        }
    }
}
