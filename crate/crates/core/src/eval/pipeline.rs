//! Two-stage training (inverse warm-up, then main task) and the
//! [`SlotFiller`] abstraction the protocols evaluate.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::metrics::{slot_f1, ScoredUtterance};
use crate::corpus::{DomainSplit, SlotTypeRegistry, Utterance};
use crate::error::{Error, Result};
use crate::inference::{predict_slots, resolve_conflicts, GreedyGenerator, QueryScope, SlotPrediction};
use crate::model::{init_model, mix_seed, train, Model, ModelConfig, TrainConfig, TrainingLog, Vocab};
use crate::prompting::{build_inverse_examples, build_main_examples_for, PromptTemplate, TaskExample};

/// Everything that decides how a pipeline is trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub template: PromptTemplate,
    pub model: ModelConfig,
    /// Inverse-task stage.
    pub warmup: TrainConfig,
    /// Main-task stage.
    pub main: TrainConfig,
    pub inverse_warmup: bool,
    /// Inverse negatives per positive.
    pub neg_ratio: f64,
    pub query_scope: QueryScope,
    /// Longest generated answer, in tokens.
    pub max_answer_len: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            template: PromptTemplate::default(),
            model: ModelConfig::default(),
            warmup: TrainConfig::default(),
            main: TrainConfig::default(),
            inverse_warmup: true,
            neg_ratio: 1.0,
            query_scope: QueryScope::Domain,
            max_answer_len: 8,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.warmup.validate()?;
        self.main.validate()?;
        if !(self.neg_ratio >= 0.0) {
            return Err(Error::config("pipeline.neg_ratio", "must be non-negative"));
        }
        if self.max_answer_len == 0 {
            return Err(Error::config("pipeline.max_answer_len", "must be at least 1"));
        }
        Ok(())
    }
}

/// Something that fills slots for one utterance at a time.
pub trait SlotFiller {
    /// Conflict-resolved predictions under `template`.
    fn predict(&self, utterance: &Utterance, registry: &SlotTypeRegistry, template: &PromptTemplate) -> Vec<SlotPrediction>;

    /// Ids of every utterance the filler was trained on.
    fn training_ids(&self) -> BTreeSet<String>;

    /// The template used in training.
    fn template(&self) -> &PromptTemplate;
}

/// A model trained by [`train_pipeline`].
#[derive(Debug, Clone)]
pub struct TrainedPipeline {
    pub model: Model,
    pub config: PipelineConfig,
    pub warmup_log: Option<TrainingLog>,
    pub main_log: TrainingLog,
}

fn predict_with(model: &Model, config: &PipelineConfig, utterance: &Utterance, registry: &SlotTypeRegistry, template: &PromptTemplate) -> Vec<SlotPrediction> {
    let generator = GreedyGenerator {
        model,
        max_len: config.max_answer_len,
    };
    resolve_conflicts(&predict_slots(&generator, utterance, registry, template, config.query_scope))
}

impl SlotFiller for TrainedPipeline {
    fn predict(&self, utterance: &Utterance, registry: &SlotTypeRegistry, template: &PromptTemplate) -> Vec<SlotPrediction> {
        predict_with(&self.model, &self.config, utterance, registry, template)
    }

    fn training_ids(&self) -> BTreeSet<String> {
        let mut ids = self.main_log.utterance_ids.clone();
        if let Some(log) = &self.warmup_log {
            ids.extend(log.utterance_ids.iter().cloned());
        }
        ids
    }

    fn template(&self) -> &PromptTemplate {
        &self.config.template
    }
}

/// Echoes the gold annotation; the ceiling every protocol must score 1.0 on.
#[derive(Debug, Clone, Default)]
pub struct GoldEcho {
    pub template: PromptTemplate,
}

impl SlotFiller for GoldEcho {
    fn predict(&self, utterance: &Utterance, _: &SlotTypeRegistry, _: &PromptTemplate) -> Vec<SlotPrediction> {
        utterance
            .spans
            .iter()
            .map(|s| SlotPrediction {
                slot_type: s.slot_type.clone(),
                value: utterance.span_text(s),
                span: Some((s.start, s.end)),
                first_token_prob: 1.0,
            })
            .collect()
    }

    fn training_ids(&self) -> BTreeSet<String> {
        BTreeSet::new()
    }

    fn template(&self) -> &PromptTemplate {
        &self.template
    }
}

/// Predictions for one utterance next to its gold pairs.
pub fn score_utterance(filler: &dyn SlotFiller, utterance: &Utterance, registry: &SlotTypeRegistry, template: &PromptTemplate) -> (ScoredUtterance, Vec<SlotPrediction>) {
    let predictions = filler.predict(utterance, registry, template);
    let scored = ScoredUtterance {
        utterance_id: utterance.id.clone(),
        predicted: predictions.iter().map(|p| (p.slot_type.clone(), p.value.clone())).collect(),
        gold: utterance.gold_pairs(),
    };
    (scored, predictions)
}

pub fn main_examples(utterances: &[Utterance], registry: &SlotTypeRegistry, config: &PipelineConfig) -> Vec<TaskExample> {
    utterances
        .iter()
        .flat_map(|u| {
            let queried = config.query_scope.queried(registry, &u.domain);
            build_main_examples_for(u, &queried, registry, &config.template)
        })
        .collect()
}

pub fn inverse_examples(utterances: &[Utterance], registry: &SlotTypeRegistry, config: &PipelineConfig, seed: u64) -> Vec<TaskExample> {
    utterances
        .iter()
        .enumerate()
        .flat_map(|(i, u)| build_inverse_examples(u, registry, &config.template, config.neg_ratio, mix_seed(seed, i as u64, 0x1e5)))
        .collect()
}

/// Trains on the split's source-domain training data: optional inverse
/// warm-up early-stopped on dev loss, then the main task early-stopped on
/// dev slot F1. `seed` is mixed into every configured seed.
pub fn train_pipeline(split: &DomainSplit, registry: &SlotTypeRegistry, config: &PipelineConfig, seed: u64) -> Result<TrainedPipeline> {
    config.validate()?;
    split.validate()?;
    let main_train = main_examples(&split.train, registry, config);
    if main_train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let (inverse_train, inverse_dev) = if config.inverse_warmup {
        (
            inverse_examples(&split.train, registry, config, mix_seed(seed, 1, 0)),
            inverse_examples(&split.dev, registry, config, mix_seed(seed, 2, 0)),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    let vocab = Vocab::build(
        main_train
            .iter()
            .chain(&inverse_train)
            .flat_map(|e| e.input_tokens.iter().chain(&e.target_tokens))
            .map(String::as_str),
    );
    let model_config = ModelConfig {
        seed: mix_seed(config.model.seed, seed, 3),
        ..config.model.clone()
    };
    let mut model = init_model(&model_config, vocab)?;

    let warmup_log = if config.inverse_warmup && !inverse_train.is_empty() {
        let stage = TrainConfig {
            seed: mix_seed(config.warmup.seed, seed, 4),
            ..config.warmup.clone()
        };
        Some(train(&mut model, &inverse_train, &inverse_dev, &stage, |m, dev| {
            -m.mean_loss(dev).unwrap_or(f64::INFINITY)
        })?)
    } else {
        None
    };

    let stage = TrainConfig {
        seed: mix_seed(config.main.seed, seed, 5),
        ..config.main.clone()
    };
    let dev = &split.dev;
    let main_log = train(&mut model, &main_train, &[], &stage, |m, _| {
        let scored: Vec<ScoredUtterance> = dev
            .iter()
            .map(|u| {
                let predicted = predict_with(m, config, u, registry, &config.template);
                ScoredUtterance {
                    utterance_id: u.id.clone(),
                    predicted: predicted.into_iter().map(|p| (p.slot_type, p.value)).collect(),
                    gold: u.gold_pairs(),
                }
            })
            .collect();
        slot_f1(&scored).f1
    })?;

    Ok(TrainedPipeline {
        model,
        config: config.clone(),
        warmup_log,
        main_log,
    })
}
