use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::metrics::{count, evaluate_seen_unseen, Counts, Prf, ScoredUtterance};
use super::pipeline::{score_utterance, train_pipeline, PipelineConfig, SlotFiller, TrainedPipeline};
use crate::corpus::{categorize_slots, make_leave_one_out_split, subsample_few_shot, DomainSplit, SlotTypeRegistry, Utterance};
use crate::error::{Error, Result};
use crate::inference::SlotPrediction;
use crate::model::mix_seed;
use crate::prompting::{perturb_template, PromptTemplate, TemplateDeletion};

/// Test-set predictions and micro scores for one target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainEvaluation {
    pub domain: String,
    pub counts: Counts,
    pub metrics: Prf,
    pub utterances: Vec<ScoredUtterance>,
    pub predictions: Vec<(String, Vec<SlotPrediction>)>,
}

/// Runs the filler over every target-domain test utterance. Fails if the
/// filler was trained on any of them.
pub fn evaluate_zero_shot(filler: &dyn SlotFiller, split: &DomainSplit, registry: &SlotTypeRegistry, template: &PromptTemplate) -> Result<DomainEvaluation> {
    let trained = filler.training_ids();
    if let Some(u) = split.test.iter().find(|u| trained.contains(&u.id)) {
        return Err(Error::Leakage(format!("trained on target-domain utterance {}", u.id)));
    }
    let mut utterances = Vec::with_capacity(split.test.len());
    let mut predictions = Vec::with_capacity(split.test.len());
    for u in &split.test {
        let (scored, preds) = score_utterance(filler, u, registry, template);
        utterances.push(scored);
        predictions.push((u.id.clone(), preds));
    }
    let counts = count(&utterances);
    Ok(DomainEvaluation {
        domain: split.target_domain.clone(),
        counts,
        metrics: counts.prf(),
        utterances,
        predictions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessResult {
    pub deletion: TemplateDeletion,
    pub f1: f64,
    /// Full-template F1 minus perturbed F1.
    pub delta: f64,
}

/// Re-evaluates with each question-word deletion. `baseline` is the
/// full-template evaluation and is reused for the `none` row.
pub fn robustness_from(filler: &dyn SlotFiller, split: &DomainSplit, registry: &SlotTypeRegistry, baseline: &DomainEvaluation) -> Result<Vec<RobustnessResult>> {
    let mut rows = vec![RobustnessResult {
        deletion: TemplateDeletion::None,
        f1: baseline.metrics.f1,
        delta: 0.0,
    }];
    for deletion in TemplateDeletion::PERTURBATIONS {
        let template = perturb_template(filler.template(), deletion);
        let f1 = evaluate_zero_shot(filler, split, registry, &template)?.metrics.f1;
        rows.push(RobustnessResult {
            deletion,
            f1,
            delta: baseline.metrics.f1 - f1,
        });
    }
    Ok(rows)
}

pub fn robustness_suite(filler: &dyn SlotFiller, split: &DomainSplit, registry: &SlotTypeRegistry) -> Result<Vec<RobustnessResult>> {
    let baseline = evaluate_zero_shot(filler, split, registry, filler.template())?;
    robustness_from(filler, split, registry, &baseline)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseDelta {
    pub with: Prf,
    pub without: Prf,
    pub delta_precision: f64,
    pub delta_recall: f64,
    pub delta_f1: f64,
}

impl InverseDelta {
    pub fn new(with: Prf, without: Prf) -> Self {
        Self {
            with,
            without,
            delta_precision: with.precision - without.precision,
            delta_recall: with.recall - without.recall,
            delta_f1: with.f1 - without.f1,
        }
    }
}

/// Scores two fillers that differ only in inverse warm-up on the same split.
pub fn inverse_task_analysis(with: &dyn SlotFiller, without: &dyn SlotFiller, split: &DomainSplit, registry: &SlotTypeRegistry) -> Result<InverseDelta> {
    let a = evaluate_zero_shot(with, split, registry, with.template())?;
    let b = evaluate_zero_shot(without, split, registry, without.template())?;
    Ok(InverseDelta::new(a.metrics, b.metrics))
}

/// Training-set configurations compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// No label prompt.
    WithoutLp,
    /// No inverse warm-up.
    WithoutRp,
    WithoutBoth,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::WithoutLp, Variant::WithoutRp, Variant::WithoutBoth];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutLp => "w/o LP",
            Variant::WithoutRp => "w/o RP",
            Variant::WithoutBoth => "w/o both",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutLp => "without_lp",
            Variant::WithoutRp => "without_rp",
            Variant::WithoutBoth => "without_both",
        }
    }

    pub fn apply(self, config: &PipelineConfig) -> PipelineConfig {
        let mut config = config.clone();
        if matches!(self, Variant::WithoutLp | Variant::WithoutBoth) {
            config.template.include_label_prompt = false;
        }
        if matches!(self, Variant::WithoutRp | Variant::WithoutBoth) {
            config.inverse_warmup = false;
        }
        config
    }
}

/// Per-source-domain training budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Budget {
    Count(usize),
    All,
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Count(n) => write!(f, "{n}"),
            Budget::All => f.write_str("all"),
        }
    }
}

impl FromStr for Budget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Budget::All);
        }
        s.parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Budget::Count)
            .ok_or_else(|| Error::config("few_shot_budgets", format!("{s:?} is neither a positive count nor \"all\"")))
    }
}

impl Serialize for Budget {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Budget::Count(n) => serializer.serialize_u64(*n as u64),
            Budget::All => serializer.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Count(n) => Budget::from_str(&n.to_string()),
            Raw::Text(s) => Budget::from_str(&s),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// One (target, variant, budget, seed) training-and-evaluation run.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitSpec {
    pub target: String,
    pub variant: Variant,
    pub budget: Budget,
    pub seed: u64,
}

/// Scores of one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitResult {
    pub spec: UnitSpec,
    pub counts: Counts,
    pub metrics: Prf,
    pub seen: Prf,
    pub unseen: Prf,
    pub seen_types: Vec<String>,
    pub unseen_types: Vec<String>,
    pub train_utterances: usize,
    pub warmup_epochs: Option<usize>,
    pub main_epochs: usize,
    pub robustness: Option<Vec<RobustnessResult>>,
}

/// The split a unit trains and tests on.
pub fn unit_split(corpus: &[Utterance], registry: &SlotTypeRegistry, spec: &UnitSpec, dev_fraction: f64) -> Result<DomainSplit> {
    let split = make_leave_one_out_split(corpus, registry, &spec.target, dev_fraction, mix_seed(spec.seed, 0x5b17, 0))?;
    Ok(match spec.budget {
        Budget::All => split,
        Budget::Count(k) => subsample_few_shot(&split, k, mix_seed(spec.seed, 0xf5, k as u64)),
    })
}

/// Scores an already trained pipeline on the unit's split.
pub fn evaluate_unit(pipeline: &TrainedPipeline, split: &DomainSplit, registry: &SlotTypeRegistry, spec: &UnitSpec, with_robustness: bool) -> Result<(UnitResult, DomainEvaluation)> {
    let evaluation = evaluate_zero_shot(pipeline, split, registry, pipeline.template())?;
    let categorization = categorize_slots(split, registry);
    let (seen, unseen) = evaluate_seen_unseen(&evaluation.utterances, &categorization);
    let robustness = if with_robustness {
        Some(robustness_from(pipeline, split, registry, &evaluation)?)
    } else {
        None
    };
    let result = UnitResult {
        spec: spec.clone(),
        counts: evaluation.counts,
        metrics: evaluation.metrics,
        seen,
        unseen,
        seen_types: categorization.seen.into_iter().collect(),
        unseen_types: categorization.unseen.into_iter().collect(),
        train_utterances: split.train.len(),
        warmup_epochs: pipeline.warmup_log.as_ref().map(|l| l.epochs.len()),
        main_epochs: pipeline.main_log.epochs.len(),
        robustness,
    };
    Ok((result, evaluation))
}

/// Trains and scores one unit.
pub fn run_unit(corpus: &[Utterance], registry: &SlotTypeRegistry, spec: &UnitSpec, config: &PipelineConfig, dev_fraction: f64, with_robustness: bool) -> Result<(UnitResult, TrainedPipeline, DomainEvaluation)> {
    let split = unit_split(corpus, registry, spec, dev_fraction)?;
    let pipeline = train_pipeline(&split, registry, &spec.variant.apply(config), spec.seed)?;
    let (result, evaluation) = evaluate_unit(&pipeline, &split, registry, spec, with_robustness)?;
    Ok((result, pipeline, evaluation))
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean target F1 per budget over every (target, seed).
pub fn few_shot_suite(
    corpus: &[Utterance],
    registry: &SlotTypeRegistry,
    targets: &[String],
    budgets: &[Budget],
    seeds: &[u64],
    config: &PipelineConfig,
    dev_fraction: f64,
) -> Result<Vec<(Budget, f64)>> {
    budgets
        .iter()
        .map(|&budget| {
            let mut f1s = Vec::new();
            for target in targets {
                for &seed in seeds {
                    let spec = UnitSpec {
                        target: target.clone(),
                        variant: Variant::Full,
                        budget,
                        seed,
                    };
                    f1s.push(run_unit(corpus, registry, &spec, config, dev_fraction, false)?.0.metrics.f1);
                }
            }
            Ok((budget, mean(f1s)))
        })
        .collect()
}

/// Mean target F1 per ablation variant over every (target, seed).
pub fn ablation_suite(
    corpus: &[Utterance],
    registry: &SlotTypeRegistry,
    targets: &[String],
    seeds: &[u64],
    config: &PipelineConfig,
    dev_fraction: f64,
) -> Result<Vec<(Variant, f64)>> {
    Variant::ALL
        .iter()
        .map(|&variant| {
            let mut f1s = Vec::new();
            for target in targets {
                for &seed in seeds {
                    let spec = UnitSpec {
                        target: target.clone(),
                        variant,
                        budget: Budget::All,
                        seed,
                    };
                    f1s.push(run_unit(corpus, registry, &spec, config, dev_fraction, false)?.0.metrics.f1);
                }
            }
            Ok((variant, mean(f1s)))
        })
        .collect()
}
