//! Template-and-lexicon corpus synthesis.
//!
//! A template is a whitespace-separated string where a whole token of the
//! form `{slot}` is a placeholder, e.g. `add {artist} to my {playlist}
//! playlist`. Each placeholder is filled with a value drawn from the slot's
//! lexicon and becomes one gold span.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SlotSpan, SlotTypeRegistry, Utterance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Slot types this domain may share with other domains.
    #[serde(default)]
    pub slots: Vec<String>,
    /// Slot types that must not occur in any other domain.
    pub exclusive_slots: Vec<String>,
    pub templates: Vec<String>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub domains: BTreeMap<String, DomainSpec>,
    pub lexicons: BTreeMap<String, Vec<String>>,
}

enum Piece<'a> {
    Word(&'a str),
    Slot(&'a str),
}

fn parse_template(template: &str) -> Vec<Piece<'_>> {
    template
        .split_whitespace()
        .map(|tok| match tok.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
            Some(slot) => Piece::Slot(slot),
            None => Piece::Word(tok),
        })
        .collect()
}

impl SynthSpec {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSynthSpec(msg));
        if self.domains.is_empty() {
            return bad("no domains declared".into());
        }
        for (name, domain) in &self.domains {
            if domain.exclusive_slots.is_empty() {
                return bad(format!("domain {name} declares no exclusive slot"));
            }
            if domain.templates.is_empty() {
                return bad(format!("domain {name} has no templates"));
            }
            if domain.count == 0 {
                return bad(format!("domain {name} has count 0"));
            }
            let declared: BTreeSet<&str> = domain
                .slots
                .iter()
                .chain(&domain.exclusive_slots)
                .map(String::as_str)
                .collect();
            for slot in &declared {
                match self.lexicons.get(*slot) {
                    Some(values) if values.iter().any(|v| !v.trim().is_empty()) => {}
                    _ => return bad(format!("slot {slot} has an empty lexicon")),
                }
            }
            let mut used = BTreeSet::new();
            for template in &domain.templates {
                let pieces = parse_template(template);
                if pieces.is_empty() {
                    return bad(format!("domain {name} has an empty template"));
                }
                for piece in pieces {
                    if let Piece::Slot(slot) = piece {
                        if !declared.contains(slot) {
                            return bad(format!("template `{template}` uses undeclared slot {slot} in {name}"));
                        }
                        used.insert(slot);
                    }
                }
            }
            if let Some(unused) = declared.difference(&used).next() {
                return bad(format!("slot {unused} of domain {name} appears in no template"));
            }
            for exclusive in &domain.exclusive_slots {
                let elsewhere = self.domains.iter().any(|(other, d)| {
                    other != name && d.slots.iter().chain(&d.exclusive_slots).any(|s| s == exclusive)
                });
                if elsewhere {
                    return bad(format!("exclusive slot {exclusive} of {name} occurs in another domain"));
                }
            }
        }
        Ok(())
    }
}

/// Generates `count` utterances per domain. Templates are used round-robin,
/// so every template appears once `count` reaches the template count;
/// placeholder values are drawn from the seeded generator.
pub fn generate_synthetic_corpus(spec: &SynthSpec, seed: u64) -> Result<(Vec<Utterance>, SlotTypeRegistry)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicons: BTreeMap<&str, Vec<&String>> = spec
        .lexicons
        .iter()
        .map(|(k, v)| (k.as_str(), v.iter().filter(|s| !s.trim().is_empty()).collect()))
        .collect();

    let mut utterances = Vec::new();
    for (domain_name, domain) in &spec.domains {
        let templates: Vec<Vec<Piece>> = domain.templates.iter().map(|t| parse_template(t)).collect();
        for i in 0..domain.count {
            let mut tokens = Vec::new();
            let mut spans = Vec::new();
            for piece in &templates[i % templates.len()] {
                match piece {
                    Piece::Word(w) => tokens.push(w.to_string()),
                    Piece::Slot(slot) => {
                        let value = lexicons[slot].choose(&mut rng).expect("validated non-empty");
                        let start = tokens.len();
                        tokens.extend(value.split_whitespace().map(String::from));
                        spans.push(SlotSpan::new(start, tokens.len(), *slot));
                    }
                }
            }
            utterances.push(Utterance::new(format!("{domain_name}-{i:04}"), tokens, domain_name.clone(), spans)?);
        }
    }
    let registry = SlotTypeRegistry::from_utterances(&utterances);
    Ok((utterances, registry))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{categorize_slots, make_leave_one_out_split, spans_to_bio};

    pub(crate) fn five_domain_spec(count: usize) -> SynthSpec {
        let mut domains = BTreeMap::new();
        let mut lexicons = BTreeMap::new();
        for d in 0..5 {
            let own = format!("only_{d}");
            let shared = format!("shared_{}", d % 2);
            domains.insert(
                format!("D{d}"),
                DomainSpec {
                    slots: vec![shared.clone()],
                    exclusive_slots: vec![own.clone()],
                    templates: vec![format!("go {{{shared}}} now"), format!("ask {{{own}}} and {{{shared}}}")],
                    count,
                },
            );
            lexicons.insert(own, vec![format!("v{d}a"), format!("v{d}b c")]);
            lexicons.insert(shared, vec!["s1".into(), "s2 s3".into()]);
        }
        SynthSpec { domains, lexicons }
    }

    #[test]
    fn counts_and_registry() {
        let (utts, registry) = generate_synthetic_corpus(&five_domain_spec(200), 1).unwrap();
        assert_eq!(utts.len(), 1000);
        assert_eq!(registry.len(), 7);
        for u in &utts {
            for s in &u.spans {
                assert!(registry.domains_of(&s.slot_type).unwrap().contains(&u.domain));
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = five_domain_spec(30);
        let dump = |seed| {
            let (utts, _) = generate_synthetic_corpus(&spec, seed).unwrap();
            utts.iter()
                .map(|u| format!("{} {} {:?}\n", u.id, u.text(), spans_to_bio(u)))
                .collect::<String>()
        };
        assert_eq!(dump(4), dump(4));
        assert_ne!(dump(4), dump(5));
    }

    #[test]
    fn rejects_empty_lexicon() {
        let mut spec = five_domain_spec(5);
        spec.lexicons.insert("only_0".into(), vec![]);
        assert!(matches!(generate_synthetic_corpus(&spec, 0), Err(Error::InvalidSynthSpec(_))));
    }

    #[test]
    fn rejects_shared_exclusive_slot() {
        let mut spec = five_domain_spec(5);
        spec.domains.get_mut("D1").unwrap().slots.push("only_0".into());
        spec.domains.get_mut("D1").unwrap().templates.push("{only_0}".into());
        assert!(generate_synthetic_corpus(&spec, 0).is_err());
    }

    #[test]
    fn every_leave_one_out_split_has_unseen_slots() {
        let (utts, registry) = generate_synthetic_corpus(&five_domain_spec(20), 2).unwrap();
        for domain in registry.domains() {
            let split = make_leave_one_out_split(&utts, &registry, domain, 0.1, 0).unwrap();
            assert!(!categorize_slots(&split, &registry).unseen.is_empty(), "{domain}");
        }
    }
}
