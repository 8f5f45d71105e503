//! Slot-filling corpora: utterances with gold spans, the slot type registry,
//! JSONL ingestion, leave-one-domain-out splits and synthetic generation.

mod bio;
mod split;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bio::{bio_to_spans, spans_to_bio};
pub use split::{categorize_slots, make_leave_one_out_split, subsample_few_shot, DomainSplit, SlotCategorization};
pub use synth::{generate_synthetic_corpus, DomainSpec, SynthSpec};

/// One annotated entity occurrence, `[start, end)` over token indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotSpan {
    pub start: usize,
    pub end: usize,
    pub slot_type: String,
}

impl SlotSpan {
    pub fn new(start: usize, end: usize, slot_type: impl Into<String>) -> Self {
        Self {
            start,
            end,
            slot_type: slot_type.into(),
        }
    }
}

/// A tokenized user query with its domain and gold slot spans.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub tokens: Vec<String>,
    pub domain: String,
    pub spans: Vec<SlotSpan>,
}

impl Utterance {
    /// Builds an utterance, sorting spans by start and checking bounds and
    /// overlap.
    pub fn new(
        id: impl Into<String>,
        tokens: Vec<String>,
        domain: impl Into<String>,
        mut spans: Vec<SlotSpan>,
    ) -> Result<Self> {
        let id = id.into();
        let invalid = |reason: String| Error::InvalidUtterance {
            id: id.clone(),
            reason,
        };
        if tokens.is_empty() {
            return Err(invalid("no tokens".into()));
        }
        spans.sort();
        let mut prev_end = 0;
        for span in &spans {
            if span.start >= span.end || span.end > tokens.len() {
                return Err(invalid(format!(
                    "span [{}, {}) out of bounds for {} tokens",
                    span.start,
                    span.end,
                    tokens.len()
                )));
            }
            if span.slot_type.is_empty() {
                return Err(invalid("empty slot type".into()));
            }
            if span.start < prev_end {
                return Err(invalid(format!("span starting at {} overlaps its predecessor", span.start)));
            }
            prev_end = span.end;
        }
        Ok(Self {
            id,
            tokens,
            domain: domain.into(),
            spans,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Surface text of a span, tokens joined by single spaces.
    pub fn span_text(&self, span: &SlotSpan) -> String {
        self.tokens[span.start..span.end].join(" ")
    }

    /// Gold values of one slot type in left-to-right order.
    pub fn values_of(&self, slot_type: &str) -> Vec<String> {
        self.spans
            .iter()
            .filter(|s| s.slot_type == slot_type)
            .map(|s| self.span_text(s))
            .collect()
    }

    /// All gold `(slot_type, value)` pairs.
    pub fn gold_pairs(&self) -> Vec<(String, String)> {
        self.spans
            .iter()
            .map(|s| (s.slot_type.clone(), self.span_text(s)))
            .collect()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// The universe of slot types with the domains each occurs in, ordered
/// lexicographically by name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotTypeRegistry {
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl SlotTypeRegistry {
    pub fn from_utterances<'a>(utterances: impl IntoIterator<Item = &'a Utterance>) -> Self {
        let mut registry = Self::default();
        for u in utterances {
            for span in &u.spans {
                registry.insert(&span.slot_type, &u.domain);
            }
        }
        registry
    }

    pub fn insert(&mut self, slot_type: &str, domain: &str) {
        self.entries
            .entry(slot_type.to_string())
            .or_default()
            .insert(domain.to_string());
    }

    /// Number of slot types (`m`).
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, slot_type: &str) -> bool {
        self.entries.contains_key(slot_type)
    }

    /// Slot type names in canonical order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn domains_of(&self, slot_type: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(slot_type)
    }

    /// Slot types that occur in `domain`, in canonical order.
    pub fn types_in_domain(&self, domain: &str) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, domains)| domains.contains(domain))
            .map(|(name, _)| name.as_str())
            .collect()
    }

    pub fn domains(&self) -> BTreeSet<&str> {
        self.entries
            .values()
            .flat_map(|d| d.iter().map(String::as_str))
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusRecord {
    id: String,
    tokens: Vec<String>,
    bio: Vec<String>,
    domain: String,
}

/// Reads a line-delimited JSON corpus (`{"id", "tokens", "bio", "domain"}`).
pub fn load_corpus(path: impl AsRef<Path>) -> Result<(Vec<Utterance>, SlotTypeRegistry)> {
    let file = File::open(path)?;
    parse_corpus(BufReader::new(file))
}

/// Parses corpus records from any reader. Blank lines are skipped; record
/// indices in errors count non-blank lines from zero.
pub fn parse_corpus(reader: impl BufRead) -> Result<(Vec<Utterance>, SlotTypeRegistry)> {
    let mut utterances = Vec::new();
    let mut index = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedRecord { index, reason };
        let record: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if record.tokens.len() != record.bio.len() {
            return Err(malformed(format!(
                "{} tokens but {} BIO tags",
                record.tokens.len(),
                record.bio.len()
            )));
        }
        let spans = bio_to_spans(&record.bio).map_err(|e| malformed(e.to_string()))?;
        let utterance = Utterance::new(record.id, record.tokens, record.domain, spans)
            .map_err(|e| malformed(e.to_string()))?;
        utterances.push(utterance);
        index += 1;
    }
    let registry = SlotTypeRegistry::from_utterances(&utterances);
    Ok((utterances, registry))
}

/// Writes utterances in the JSONL corpus format read by [`load_corpus`].
pub fn write_corpus(path: impl AsRef<Path>, utterances: &[Utterance]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for u in utterances {
        let record = CorpusRecord {
            id: u.id.clone(),
            tokens: u.tokens.clone(),
            bio: spans_to_bio(u),
            domain: u.domain.clone(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn loads_appendix_fixture() {
        let line = r#"{"id":"u1","tokens":["play","the","game","sugarfoot"],"domain":"SearchCreativeWork","bio":["O","O","B-object type","B-object name"]}"#;
        let (utts, registry) = parse_corpus(line.as_bytes()).unwrap();
        assert_eq!(utts.len(), 1);
        assert_eq!(
            utts[0].spans,
            vec![SlotSpan::new(2, 3, "object type"), SlotSpan::new(3, 4, "object name")]
        );
        assert_eq!(registry.names().collect::<Vec<_>>(), vec!["object name", "object type"]);
        assert_eq!(registry.types_in_domain("SearchCreativeWork").len(), 2);
    }

    #[test]
    fn all_outside_tags_give_no_spans() {
        let line = r#"{"id":"u","tokens":["hello","there"],"domain":"D","bio":["O","O"]}"#;
        let (utts, registry) = parse_corpus(line.as_bytes()).unwrap();
        assert!(utts[0].spans.is_empty());
        assert!(registry.is_empty());
    }

    #[test]
    fn rejects_inside_without_begin_with_record_index() {
        let text = concat!(
            r#"{"id":"a","tokens":["x"],"domain":"D","bio":["O"]}"#,
            "\n\n",
            r#"{"id":"b","tokens":["x","y"],"domain":"D","bio":["I-artist","O"]}"#
        );
        match parse_corpus(text.as_bytes()) {
            Err(Error::MalformedRecord { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        let first = r#"{"id":"b","tokens":["x","y"],"domain":"D","bio":["I-artist","O"]}"#;
        assert!(matches!(
            parse_corpus(first.as_bytes()),
            Err(Error::MalformedRecord { index: 0, .. })
        ));
    }

    #[test]
    fn rejects_length_mismatch() {
        let line = r#"{"id":"a","tokens":["x","y"],"domain":"D","bio":["O"]}"#;
        assert!(matches!(
            parse_corpus(line.as_bytes()),
            Err(Error::MalformedRecord { index: 0, .. })
        ));
    }

    #[test]
    fn utterance_rejects_overlap_and_out_of_bounds() {
        let spans = vec![SlotSpan::new(0, 2, "a"), SlotSpan::new(1, 3, "b")];
        assert!(Utterance::new("x", toks("a b c"), "D", spans).is_err());
        assert!(Utterance::new("x", toks("a b"), "D", vec![SlotSpan::new(1, 3, "a")]).is_err());
        assert!(Utterance::new("x", toks("a b"), "D", vec![SlotSpan::new(1, 1, "a")]).is_err());
        assert!(Utterance::new("x", vec![], "D", vec![]).is_err());
    }

    #[test]
    fn corpus_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let u = Utterance::new(
            "u1",
            toks("add ilse delange to my journey playlist"),
            "AddToPlaylist",
            vec![SlotSpan::new(1, 3, "artist"), SlotSpan::new(5, 6, "playlist")],
        )
        .unwrap();
        write_corpus(&path, std::slice::from_ref(&u)).unwrap();
        let (back, registry) = load_corpus(&path).unwrap();
        assert_eq!(back, vec![u]);
        assert_eq!(registry.len(), 2);
    }
}
