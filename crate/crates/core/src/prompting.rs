//! Construction of the generative QA examples.
//!
//! Main task input: `[question words] [slot type] ? [all slot types, comma
//! separated] [query tokens]`, target: the slot's values joined by `, ` or
//! `none`. Inverse task input puts an entity span where the slot type goes
//! and expects the slot type (or `none` for a random non-entity span).

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{SlotTypeRegistry, Utterance};
use crate::error::{Error, Result};

pub const QUESTION_MARK: &str = "?";
pub const COMMA: &str = ",";
pub const SEPARATOR: &str = ", ";
pub const NONE: &str = "none";

/// Longest random window used for inverse-task negatives.
const MAX_NEGATIVE_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub question_words: Vec<String>,
    #[serde(default = "default_true")]
    pub include_label_prompt: bool,
}

fn default_true() -> bool {
    true
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            question_words: ["what", "is", "the"].map(String::from).to_vec(),
            include_label_prompt: true,
        }
    }
}

impl PromptTemplate {
    pub fn without_label_prompt(mut self) -> Self {
        self.include_label_prompt = false;
        self
    }
}

/// Test-time template deletions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateDeletion {
    None,
    DelWhat,
    DelWhatIs,
    DelWhatIsThe,
}

impl TemplateDeletion {
    pub const PERTURBATIONS: [TemplateDeletion; 3] = [Self::DelWhat, Self::DelWhatIs, Self::DelWhatIsThe];

    fn removed(self) -> usize {
        match self {
            Self::None => 0,
            Self::DelWhat => 1,
            Self::DelWhatIs => 2,
            Self::DelWhatIsThe => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::DelWhat => "del \"what\"",
            Self::DelWhatIs => "del \"what is\"",
            Self::DelWhatIsThe => "del \"what is the\"",
        }
    }
}

/// Drops the first 1, 2 or 3 question words. The label prompt flag and
/// everything after the question mark are left alone.
pub fn perturb_template(template: &PromptTemplate, deletion: TemplateDeletion) -> PromptTemplate {
    let skip = deletion.removed().min(template.question_words.len());
    PromptTemplate {
        question_words: template.question_words[skip..].to_vec(),
        include_label_prompt: template.include_label_prompt,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Main,
    Inverse,
}

/// One generative QA pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub kind: TaskKind,
    #[serde(rename = "input")]
    pub input_tokens: Vec<String>,
    #[serde(rename = "target")]
    pub target_tokens: Vec<String>,
    /// Slot type name for main examples, span text for inverse ones.
    pub queried_key: String,
    pub utterance_id: String,
}

/// Splits a slot type name or value into prompt tokens.
pub fn text_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(String::from)
}

/// Joins tokens with spaces, attaching commas to the preceding token.
pub fn render(tokens: &[String]) -> String {
    let mut out = String::new();
    for (i, tok) in tokens.iter().enumerate() {
        if i > 0 && tok != COMMA {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

fn label_block(registry: &SlotTypeRegistry) -> Vec<String> {
    let mut block = Vec::new();
    for (i, name) in registry.names().enumerate() {
        if i > 0 {
            block.push(COMMA.to_string());
        }
        block.extend(text_tokens(name));
    }
    block
}

fn assemble(question: &[String], utterance: &Utterance, registry: &SlotTypeRegistry, template: &PromptTemplate) -> Vec<String> {
    let mut input = template.question_words.clone();
    input.extend_from_slice(question);
    input.push(QUESTION_MARK.to_string());
    if template.include_label_prompt {
        input.extend(label_block(registry));
    }
    input.extend(utterance.tokens.iter().cloned());
    input
}

pub fn build_main_input(
    utterance: &Utterance,
    slot_type: &str,
    registry: &SlotTypeRegistry,
    template: &PromptTemplate,
) -> Result<Vec<String>> {
    if !registry.contains(slot_type) {
        return Err(Error::UnknownSlotType(slot_type.to_string()));
    }
    let question: Vec<String> = text_tokens(slot_type).collect();
    Ok(assemble(&question, utterance, registry, template))
}

pub fn build_main_target(utterance: &Utterance, slot_type: &str) -> Vec<String> {
    let values = utterance.values_of(slot_type);
    if values.is_empty() {
        return vec![NONE.to_string()];
    }
    let mut target = Vec::new();
    for (i, value) in values.iter().enumerate() {
        if i > 0 {
            target.push(COMMA.to_string());
        }
        target.extend(text_tokens(value));
    }
    target
}

/// One main example per registry slot type.
pub fn build_main_examples(
    utterance: &Utterance,
    registry: &SlotTypeRegistry,
    template: &PromptTemplate,
) -> Vec<TaskExample> {
    let queried: Vec<&str> = registry.names().collect();
    build_main_examples_for(utterance, &queried, registry, template)
}

/// Main examples for an explicit list of queried slot types; the label block
/// still lists the whole registry.
pub fn build_main_examples_for(
    utterance: &Utterance,
    queried: &[&str],
    registry: &SlotTypeRegistry,
    template: &PromptTemplate,
) -> Vec<TaskExample> {
    queried
        .iter()
        .filter(|s| registry.contains(s))
        .map(|&slot_type| TaskExample {
            kind: TaskKind::Main,
            input_tokens: assemble(&text_tokens(slot_type).collect::<Vec<_>>(), utterance, registry, template),
            target_tokens: build_main_target(utterance, slot_type),
            queried_key: slot_type.to_string(),
            utterance_id: utterance.id.clone(),
        })
        .collect()
}

/// Positives map each gold span to its slot type; `⌊neg_ratio × positives⌋`
/// negatives map random 1–3 token windows that are not gold spans to `none`.
pub fn build_inverse_examples(
    utterance: &Utterance,
    registry: &SlotTypeRegistry,
    template: &PromptTemplate,
    neg_ratio: f64,
    seed: u64,
) -> Vec<TaskExample> {
    let mut examples: Vec<TaskExample> = utterance
        .spans
        .iter()
        .map(|span| {
            let span_tokens = utterance.tokens[span.start..span.end].to_vec();
            TaskExample {
                kind: TaskKind::Inverse,
                input_tokens: assemble(&span_tokens, utterance, registry, template),
                target_tokens: text_tokens(&span.slot_type).collect(),
                queried_key: utterance.span_text(span),
                utterance_id: utterance.id.clone(),
            }
        })
        .collect();

    let wanted = (neg_ratio.max(0.0) * examples.len() as f64).floor() as usize;
    if wanted == 0 {
        return examples;
    }
    let gold: BTreeSet<String> = utterance.spans.iter().map(|s| utterance.span_text(s)).collect();
    // Distinct window strings in first-occurrence order, so sampling is a
    // pure function of the seed.
    let mut seen = BTreeSet::new();
    let mut windows: Vec<(usize, usize)> = Vec::new();
    for start in 0..utterance.len() {
        for len in 1..=MAX_NEGATIVE_WINDOW {
            let end = start + len;
            if end > utterance.len() {
                break;
            }
            let text = utterance.tokens[start..end].join(" ");
            if !gold.contains(&text) && seen.insert(text) {
                windows.push((start, end));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &(start, end) in windows.choose_multiple(&mut rng, wanted) {
        let span_tokens = utterance.tokens[start..end].to_vec();
        examples.push(TaskExample {
            kind: TaskKind::Inverse,
            queried_key: span_tokens.join(" "),
            input_tokens: assemble(&span_tokens, utterance, registry, template),
            target_tokens: vec![NONE.to_string()],
            utterance_id: utterance.id.clone(),
        });
    }
    examples
}

/// Splits a generated answer into values. `none` and empty output yield no
/// values; pieces are whitespace-normalized and stray commas trimmed.
pub fn parse_answer(generated: &str) -> Vec<String> {
    let trimmed = generated.trim();
    if trimmed.is_empty() || trimmed == NONE {
        return Vec::new();
    }
    trimmed
        .split(SEPARATOR)
        .map(|piece| {
            piece
                .trim_matches(|c: char| c == ',' || c.is_whitespace())
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ")
        })
        .filter(|piece| !piece.is_empty())
        .collect()
}

pub fn write_examples(path: impl AsRef<Path>, examples: &[TaskExample]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for example in examples {
        serde_json::to_writer(&mut out, example)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_examples(path: impl AsRef<Path>) -> Result<Vec<TaskExample>> {
    let mut examples = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            examples.push(serde_json::from_str(&line)?);
        }
    }
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SlotSpan;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn sugarfoot() -> (Utterance, SlotTypeRegistry) {
        let u = Utterance::new(
            "scw-1",
            toks("play the game sugarfoot"),
            "SearchCreativeWork",
            vec![SlotSpan::new(2, 3, "object type"), SlotSpan::new(3, 4, "object name")],
        )
        .unwrap();
        let registry = SlotTypeRegistry::from_utterances([&u]);
        (u, registry)
    }

    fn playlist() -> Utterance {
        Utterance::new(
            "atp-1",
            toks("add ilse delange to my journey playlist"),
            "AddToPlaylist",
            vec![SlotSpan::new(1, 3, "artist"), SlotSpan::new(5, 6, "playlist")],
        )
        .unwrap()
    }

    #[test]
    fn main_input_fixture() {
        let (u, reg) = sugarfoot();
        let t = PromptTemplate::default();
        assert_eq!(
            render(&build_main_input(&u, "object type", &reg, &t).unwrap()),
            "what is the object type ? object name, object type play the game sugarfoot"
        );
        assert_eq!(
            render(&build_main_input(&u, "object type", &reg, &t.clone().without_label_prompt()).unwrap()),
            "what is the object type ? play the game sugarfoot"
        );
        let bare = perturb_template(&t, TemplateDeletion::DelWhatIsThe);
        assert_eq!(
            render(&build_main_input(&u, "object type", &reg, &bare).unwrap()),
            "object type ? object name, object type play the game sugarfoot"
        );
        assert!(matches!(
            build_main_input(&u, "artist", &reg, &t),
            Err(Error::UnknownSlotType(_))
        ));
    }

    #[test]
    fn main_target_fixture() {
        let (u, _) = sugarfoot();
        assert_eq!(render(&build_main_target(&u, "object type")), "game");
        assert_eq!(render(&build_main_target(&u, "object name")), "sugarfoot");
        assert_eq!(render(&build_main_target(&u, "artist")), "none");
    }

    #[test]
    fn two_span_target_is_left_to_right() {
        let u = Utterance::new(
            "m",
            toks("play c and a b"),
            "PlayMusic",
            vec![SlotSpan::new(3, 5, "artist"), SlotSpan::new(1, 2, "artist")],
        )
        .unwrap();
        // Gold order by position: "c" (1..2) precedes "a b" (3..5).
        assert_eq!(render(&build_main_target(&u, "artist")), "c, a b");

        let v = Utterance::new(
            "m2",
            toks("play a b and c"),
            "PlayMusic",
            vec![SlotSpan::new(1, 3, "artist"), SlotSpan::new(4, 5, "artist")],
        )
        .unwrap();
        let target = render(&build_main_target(&v, "artist"));
        assert_eq!(target, "a b, c");
        assert_eq!(parse_answer(&target), vec!["a b", "c"]);
    }

    #[test]
    fn main_example_counts() {
        let (u, reg) = sugarfoot();
        let examples = build_main_examples(&u, &reg, &PromptTemplate::default());
        assert_eq!(examples.len(), 2);
        assert_eq!(render(&examples[1].target_tokens), "game");

        let mut big = SlotTypeRegistry::default();
        for i in 0..39 {
            big.insert(&format!("slot{i:02}"), "D");
        }
        assert_eq!(build_main_examples(&u, &big, &PromptTemplate::default()).len(), 39);

        let empty = Utterance::new("e", toks("hello there"), "D", vec![]).unwrap();
        let mut three = SlotTypeRegistry::default();
        ["a", "b", "c"].iter().for_each(|s| three.insert(s, "D"));
        let examples = build_main_examples(&empty, &three, &PromptTemplate::default());
        assert_eq!(examples.len(), 3);
        assert!(examples.iter().all(|e| e.target_tokens == [NONE]));
    }

    #[test]
    fn inverse_fixture() {
        let u = playlist();
        let reg = SlotTypeRegistry::from_utterances([&u]);
        let t = PromptTemplate::default();
        let only_pos = build_inverse_examples(&u, &reg, &t, 0.0, 1);
        assert_eq!(only_pos.len(), 2);
        assert_eq!(
            render(&only_pos[0].input_tokens),
            "what is the ilse delange ? artist, playlist add ilse delange to my journey playlist"
        );
        assert_eq!(only_pos[0].target_tokens, ["artist"]);
        assert_eq!(render(&only_pos[1].input_tokens)[..24], *"what is the journey ? ar");
        assert_eq!(only_pos[1].target_tokens, ["playlist"]);

        let with_neg = build_inverse_examples(&u, &reg, &t, 1.0, 1);
        let negatives: Vec<_> = with_neg.iter().filter(|e| e.target_tokens == [NONE]).collect();
        assert_eq!(negatives.len(), 2);
        for n in negatives {
            assert!(n.queried_key != "ilse delange" && n.queried_key != "journey");
            let words = n.queried_key.split(' ').count();
            assert!((1..=3).contains(&words));
        }
        assert_eq!(with_neg, build_inverse_examples(&u, &reg, &t, 1.0, 1));
    }

    #[test]
    fn inverse_negatives_degrade_gracefully() {
        let u = Utterance::new("s", toks("jazz"), "D", vec![SlotSpan::new(0, 1, "genre")]).unwrap();
        let reg = SlotTypeRegistry::from_utterances([&u]);
        let examples = build_inverse_examples(&u, &reg, &PromptTemplate::default(), 1.0, 0);
        assert_eq!(examples.len(), 1);
    }

    #[test]
    fn deletions_truncate_from_the_left() {
        let t = PromptTemplate::default();
        assert_eq!(perturb_template(&t, TemplateDeletion::DelWhat).question_words, ["is", "the"]);
        assert_eq!(perturb_template(&t, TemplateDeletion::DelWhatIs).question_words, ["the"]);
        assert!(perturb_template(&t, TemplateDeletion::DelWhatIsThe).question_words.is_empty());
        assert_eq!(perturb_template(&t, TemplateDeletion::None), t);
    }

    #[test]
    fn answer_parsing() {
        assert_eq!(parse_answer("game"), vec!["game"]);
        assert!(parse_answer("none").is_empty());
        assert!(parse_answer("  ").is_empty());
        assert_eq!(parse_answer("a b, c"), vec!["a b", "c"]);
        assert_eq!(parse_answer(", a,"), vec!["a"]);
    }

    #[test]
    fn example_file_round_trip() {
        let u = playlist();
        let reg = SlotTypeRegistry::from_utterances([&u]);
        let mut examples = build_main_examples(&u, &reg, &PromptTemplate::default());
        examples.extend(build_inverse_examples(&u, &reg, &PromptTemplate::default(), 1.0, 3));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ex.jsonl");
        write_examples(&path, &examples).unwrap();
        assert_eq!(read_examples(&path).unwrap(), examples);
        let first = std::fs::read_to_string(&path).unwrap();
        assert!(first.starts_with(r#"{"kind":"main","input":["what""#));
    }

    fn random_utterance() -> impl Strategy<Value = Utterance> {
        let words = prop::sample::select(vec!["a", "b", "c", "play", "the", "song", "x"]);
        let types = prop::sample::select(vec!["artist", "album", "object type"]);
        proptest::collection::vec((prop::bool::ANY, 1usize..3, words, types), 1..10).prop_map(|steps| {
            let mut tokens = Vec::new();
            let mut spans = Vec::new();
            for (is_span, len, word, ty) in steps {
                let start = tokens.len();
                let n = if is_span { len } else { 1 };
                for k in 0..n {
                    tokens.push(format!("{word}{k}"));
                }
                if is_span {
                    spans.push(SlotSpan::new(start, tokens.len(), ty));
                }
            }
            Utterance::new("p", tokens, "D", spans).unwrap()
        })
    }

    proptest! {
        #[test]
        fn target_parse_round_trip(u in random_utterance()) {
            for ty in ["artist", "album", "object type"] {
                let parsed = parse_answer(&render(&build_main_target(&u, ty)));
                prop_assert_eq!(parsed, u.values_of(ty));
            }
        }

        #[test]
        fn negatives_never_match_gold(u in random_utterance(), seed in 0u64..1000) {
            let reg = SlotTypeRegistry::from_utterances([&u]);
            let gold: BTreeSet<String> = u.spans.iter().map(|s| u.span_text(s)).collect();
            let examples = build_inverse_examples(&u, &reg, &PromptTemplate::default(), 1.0, seed);
            prop_assert!(examples.len() <= 2 * u.spans.len());
            for e in examples.iter().filter(|e| e.target_tokens == [NONE]) {
                prop_assert!(!gold.contains(&e.queried_key));
            }
            prop_assert_eq!(examples, build_inverse_examples(&u, &reg, &PromptTemplate::default(), 1.0, seed));
        }

        #[test]
        fn main_count_law(u in random_utterance()) {
            let mut reg = SlotTypeRegistry::from_utterances([&u]);
            reg.insert("extra", "E");
            prop_assert_eq!(build_main_examples(&u, &reg, &PromptTemplate::default()).len(), reg.len());
        }
    }
}
