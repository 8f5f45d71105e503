use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SlotTypeRegistry, Utterance};
use crate::error::{Error, Result};

/// Source/target partition of a corpus. `train` and `dev` hold only
/// source-domain utterances, `test` only target-domain ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSplit {
    pub source_domains: BTreeSet<String>,
    pub target_domain: String,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl DomainSplit {
    /// Checks that no target-domain utterance leaked into train/dev and that
    /// test is target-only.
    pub fn validate(&self) -> Result<()> {
        if self.source_domains.contains(&self.target_domain) {
            return Err(Error::Leakage(format!(
                "target domain {} listed as a source",
                self.target_domain
            )));
        }
        if let Some(u) = self
            .train
            .iter()
            .chain(&self.dev)
            .find(|u| u.domain == self.target_domain || !self.source_domains.contains(&u.domain))
        {
            return Err(Error::Leakage(u.id.clone()));
        }
        if let Some(u) = self.test.iter().find(|u| u.domain != self.target_domain) {
            return Err(Error::Leakage(u.id.clone()));
        }
        Ok(())
    }
}

/// Seen/unseen partition of the slot types that occur in a split's test
/// data.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCategorization {
    pub seen: BTreeSet<String>,
    pub unseen: BTreeSet<String>,
}

/// Holds out `target_domain` as test data and carves a seeded
/// `dev_fraction` sample of the remaining utterances as dev.
pub fn make_leave_one_out_split(
    corpus: &[Utterance],
    registry: &SlotTypeRegistry,
    target_domain: &str,
    dev_fraction: f64,
    seed: u64,
) -> Result<DomainSplit> {
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(Error::config("dev_fraction", format!("{dev_fraction} is not in (0, 1)")));
    }
    let mut domains: BTreeSet<String> = corpus.iter().map(|u| u.domain.clone()).collect();
    domains.extend(registry.domains().into_iter().map(String::from));
    if !corpus.iter().any(|u| u.domain == target_domain) {
        return Err(Error::UnknownDomain(target_domain.to_string()));
    }
    domains.remove(target_domain);

    let test: Vec<Utterance> = corpus
        .iter()
        .filter(|u| u.domain == target_domain)
        .cloned()
        .collect();
    let source: Vec<&Utterance> = corpus.iter().filter(|u| u.domain != target_domain).collect();

    let n = source.len();
    let mut dev_count = (n as f64 * dev_fraction).round() as usize;
    if n >= 2 {
        dev_count = dev_count.clamp(1, n - 1);
    } else {
        dev_count = 0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut dev_idx = order[..dev_count].to_vec();
    let mut train_idx = order[dev_count..].to_vec();
    dev_idx.sort_unstable();
    train_idx.sort_unstable();

    let split = DomainSplit {
        source_domains: domains,
        target_domain: target_domain.to_string(),
        train: train_idx.iter().map(|&i| source[i].clone()).collect(),
        dev: dev_idx.iter().map(|&i| source[i].clone()).collect(),
        test,
    };
    split.validate()?;
    Ok(split)
}

/// Keeps at most `k` training utterances per source domain. Dev and test are
/// untouched; domains with `k` or fewer utterances are kept whole.
pub fn subsample_few_shot(split: &DomainSplit, k: usize, seed: u64) -> DomainSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; split.train.len()];
    for domain in &split.source_domains {
        let idx: Vec<usize> = split
            .train
            .iter()
            .enumerate()
            .filter(|(_, u)| &u.domain == domain)
            .map(|(i, _)| i)
            .collect();
        if idx.len() <= k {
            idx.iter().for_each(|&i| keep[i] = true);
        } else {
            for pick in rand::seq::index::sample(&mut rng, idx.len(), k) {
                keep[idx[pick]] = true;
            }
        }
    }
    DomainSplit {
        train: split
            .train
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(u, _)| u.clone())
            .collect(),
        ..split.clone()
    }
}

/// A test-data slot type is unseen when it occurs in no source domain.
pub fn categorize_slots(split: &DomainSplit, registry: &SlotTypeRegistry) -> SlotCategorization {
    let in_source = |slot_type: &str| {
        registry
            .domains_of(slot_type)
            .is_some_and(|d| d.iter().any(|d| split.source_domains.contains(d)))
            || split
                .train
                .iter()
                .chain(&split.dev)
                .any(|u| u.spans.iter().any(|s| s.slot_type == slot_type))
    };
    let mut categorization = SlotCategorization::default();
    for u in &split.test {
        for span in &u.spans {
            if in_source(&span.slot_type) {
                categorization.seen.insert(span.slot_type.clone());
            } else {
                categorization.unseen.insert(span.slot_type.clone());
            }
        }
    }
    categorization
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SlotSpan;

    fn utt(id: &str, domain: &str, spans: &[(usize, usize, &str)]) -> Utterance {
        let tokens = (0..6).map(|i| format!("t{i}")).collect();
        let spans = spans.iter().map(|&(s, e, t)| SlotSpan::new(s, e, t)).collect();
        Utterance::new(id, tokens, domain, spans).unwrap()
    }

    fn corpus(domains: &[&str], per_domain: usize) -> Vec<Utterance> {
        domains
            .iter()
            .flat_map(|d| (0..per_domain).map(move |i| utt(&format!("{d}-{i}"), d, &[(0, 1, "shared")])))
            .collect()
    }

    #[test]
    fn seven_domain_leave_one_out() {
        let domains = [
            "AddToPlaylist",
            "BookRestaurant",
            "GetWeather",
            "PlayMusic",
            "RateBook",
            "SearchCreativeWork",
            "SearchScreeningEvent",
        ];
        let c = corpus(&domains, 10);
        let reg = SlotTypeRegistry::from_utterances(&c);
        let split = make_leave_one_out_split(&c, &reg, "AddToPlaylist", 0.1, 3).unwrap();
        assert_eq!(split.source_domains.len(), 6);
        assert!(!split.source_domains.contains("AddToPlaylist"));
        assert_eq!(split.test.len(), 10);
        assert!(split.test.iter().all(|u| u.domain == "AddToPlaylist"));
        assert_eq!(split.train.len() + split.dev.len(), 60);
        assert_eq!(split.dev.len(), 6);
    }

    #[test]
    fn two_domain_split_and_determinism() {
        let c = corpus(&["A", "B"], 20);
        let reg = SlotTypeRegistry::from_utterances(&c);
        let a = make_leave_one_out_split(&c, &reg, "B", 0.25, 9).unwrap();
        assert_eq!(a.source_domains, BTreeSet::from(["A".to_string()]));
        let b = make_leave_one_out_split(&c, &reg, "B", 0.25, 9).unwrap();
        assert_eq!(a, b);
        let other = make_leave_one_out_split(&c, &reg, "B", 0.25, 10).unwrap();
        assert_ne!(a.dev, other.dev);
    }

    #[test]
    fn rejects_unknown_target_and_bad_fraction() {
        let c = corpus(&["A", "B"], 5);
        let reg = SlotTypeRegistry::from_utterances(&c);
        assert!(matches!(
            make_leave_one_out_split(&c, &reg, "Z", 0.1, 0),
            Err(Error::UnknownDomain(_))
        ));
        assert!(make_leave_one_out_split(&c, &reg, "A", 0.0, 0).is_err());
        assert!(make_leave_one_out_split(&c, &reg, "A", 1.0, 0).is_err());
    }

    #[test]
    fn few_shot_subsampling() {
        let c = corpus(&["A", "B", "C"], 200);
        let reg = SlotTypeRegistry::from_utterances(&c);
        let split = make_leave_one_out_split(&c, &reg, "C", 0.1, 1).unwrap();
        let small = subsample_few_shot(&split, 20, 5);
        for d in ["A", "B"] {
            assert_eq!(small.train.iter().filter(|u| u.domain == d).count(), 20);
        }
        assert_eq!(small.dev, split.dev);
        assert_eq!(small.test, split.test);
        assert_eq!(small, subsample_few_shot(&split, 20, 5));
        assert_eq!(subsample_few_shot(&split, 10_000, 5), split);
    }

    #[test]
    fn categorization_by_membership() {
        let c = vec![
            utt("a0", "A", &[(0, 1, "artist"), (1, 2, "a_only")]),
            utt("b0", "B", &[(0, 1, "artist"), (2, 3, "object name")]),
        ];
        let reg = SlotTypeRegistry::from_utterances(&c);
        let split = make_leave_one_out_split(&c, &reg, "B", 0.5, 0).unwrap();
        let cat = categorize_slots(&split, &reg);
        assert_eq!(cat.seen, BTreeSet::from(["artist".to_string()]));
        assert_eq!(cat.unseen, BTreeSet::from(["object name".to_string()]));
    }

    #[test]
    fn five_domain_fixture_with_two_exclusive_types() {
        // Target E holds two exclusive types; every other type is shared.
        let mut c = Vec::new();
        for (i, d) in ["A", "B", "C", "D"].iter().enumerate() {
            c.push(utt(&format!("{d}0"), d, &[(0, 1, "shared"), (1, 2, ["x", "y", "x", "y"][i])]));
        }
        c.push(utt("E0", "E", &[(0, 1, "shared"), (1, 2, "e1")]));
        c.push(utt("E1", "E", &[(0, 1, "x"), (2, 4, "e2")]));
        let reg = SlotTypeRegistry::from_utterances(&c);
        let split = make_leave_one_out_split(&c, &reg, "E", 0.25, 0).unwrap();
        let cat = categorize_slots(&split, &reg);

        // Brute-force scan: a test type is unseen iff no source utterance
        // anywhere carries it.
        let mut unseen = BTreeSet::new();
        for u in &split.test {
            for s in &u.spans {
                let found = c
                    .iter()
                    .filter(|v| v.domain != "E")
                    .any(|v| v.spans.iter().any(|t| t.slot_type == s.slot_type));
                if !found {
                    unseen.insert(s.slot_type.clone());
                }
            }
        }
        assert_eq!(unseen.len(), 2);
        assert_eq!(cat.unseen, unseen);
        assert!(cat.seen.is_disjoint(&cat.unseen));
    }
}
