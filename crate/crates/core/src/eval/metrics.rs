use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::SlotCategorization;

/// One `(slot_type, value)` pair.
pub type Pair = (String, String);

/// Per-utterance predicted and gold pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredUtterance {
    pub utterance_id: String,
    pub predicted: Vec<Pair>,
    pub gold: Vec<Pair>,
}

/// Raw micro counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.true_positives += other.true_positives;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }

    pub fn prf(&self) -> Prf {
        if self.predicted == 0 && self.gold == 0 {
            return Prf::new(1.0, 1.0);
        }
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        Prf::new(ratio(self.true_positives, self.predicted), ratio(self.true_positives, self.gold))
    }
}

/// Precision, recall and their harmonic mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

/// Size of the multiset intersection of two pair lists.
pub fn multiset_overlap(predicted: &[Pair], gold: &[Pair]) -> usize {
    let mut remaining: HashMap<&Pair, usize> = HashMap::new();
    for pair in gold {
        *remaining.entry(pair).or_default() += 1;
    }
    predicted
        .iter()
        .filter(|pair| match remaining.get_mut(pair) {
            Some(n) if *n > 0 => {
                *n -= 1;
                true
            }
            _ => false,
        })
        .count()
}

pub fn count(utterances: &[ScoredUtterance]) -> Counts {
    let mut counts = Counts::default();
    for u in utterances {
        counts.add(Counts {
            true_positives: multiset_overlap(&u.predicted, &u.gold),
            predicted: u.predicted.len(),
            gold: u.gold.len(),
        });
    }
    counts
}

/// Micro precision/recall/F1 over `(slot_type, value)` pairs. With nothing
/// predicted and nothing gold anywhere the score is perfect.
pub fn slot_f1(utterances: &[ScoredUtterance]) -> Prf {
    count(utterances).prf()
}

/// Keeps only the pairs whose slot type is in `types`, on both sides.
pub fn restrict(utterances: &[ScoredUtterance], types: &BTreeSet<String>) -> Vec<ScoredUtterance> {
    let keep = |pairs: &[Pair]| pairs.iter().filter(|(t, _)| types.contains(t)).cloned().collect();
    utterances
        .iter()
        .map(|u| ScoredUtterance {
            utterance_id: u.utterance_id.clone(),
            predicted: keep(&u.predicted),
            gold: keep(&u.gold),
        })
        .collect()
}

/// `(seen, unseen)` scores.
pub fn evaluate_seen_unseen(utterances: &[ScoredUtterance], categorization: &SlotCategorization) -> (Prf, Prf) {
    (
        slot_f1(&restrict(utterances, &categorization.seen)),
        slot_f1(&restrict(utterances, &categorization.unseen)),
    )
}
