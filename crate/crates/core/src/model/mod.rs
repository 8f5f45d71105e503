//! A small encoder-decoder transformer with per-layer prefix banks.
//!
//! Every attention layer (encoder self, decoder self, decoder cross) can
//! carry `prefix_length` trainable key and value rows that are prepended to
//! its keys and values. In [`TuningMode::Prefix`] only those rows train and
//! the backbone stays frozen.

mod checkpoint;
mod gradcheck;
mod layers;
pub mod params;
mod train;
mod transformer;
mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompting::TaskExample;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport, GradSample};
pub use params::{ParamGroup, ParameterStore, TensorSpec};
pub use train::{mix_seed, train, EpochRecord, TrainConfig, TrainingLog};
pub use vocab::{Vocab, BOS, EOS, PAD, UNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuningMode {
    /// All parameters train.
    Finetune,
    /// Only the prefix banks train.
    #[default]
    Prefix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_input_len: usize,
    /// Maximum decoder length, counting the end-of-sequence position.
    pub max_output_len: usize,
    pub prefix_length: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ff: 128,
            dropout: 0.1,
            max_input_len: 128,
            max_output_len: 16,
            prefix_length: 5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "model.d_model",
                format!("{} is not divisible by n_heads = {}", self.d_model, self.n_heads),
            ));
        }
        if self.n_encoder_layers == 0 || self.n_decoder_layers == 0 {
            return Err(Error::config("model.n_layers", "need at least one encoder and one decoder layer"));
        }
        if self.d_ff == 0 {
            return Err(Error::config("model.d_ff", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", format!("{} is not in [0, 1)", self.dropout)));
        }
        if self.max_input_len == 0 || self.max_output_len == 0 {
            return Err(Error::config("model.max_len", "maximum lengths must be positive"));
        }
        Ok(())
    }

    /// Number of attention layers that carry a prefix bank.
    pub fn attention_layers(&self) -> usize {
        self.n_encoder_layers + 2 * self.n_decoder_layers
    }
}

/// A training-ready example in vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub input: Vec<usize>,
    /// BOS followed by the target.
    pub decoder: Vec<usize>,
    /// The target followed by EOS.
    pub labels: Vec<usize>,
}

/// Greedy decoding result; `probs[i]` is the probability of `tokens[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
    pub probs: Vec<f64>,
}

impl Generation {
    /// Probability of the first generated word.
    pub fn first_token_prob(&self) -> Option<f64> {
        self.probs.first().copied()
    }
}

/// Vocabulary plus parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub vocab: Vocab,
    pub params: ParameterStore,
}

/// Seeded initialization of a model over `vocab`.
pub fn init_model(config: &ModelConfig, vocab: Vocab) -> Result<Model> {
    let params = ParameterStore::init(config, vocab.len())?;
    Ok(Model { vocab, params })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    fn check_ids(&self, ids: &[usize], max: usize) -> Result<()> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab.len()) {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.vocab.len(),
            });
        }
        if ids.len() > max {
            return Err(Error::SequenceTooLong { len: ids.len(), max });
        }
        Ok(())
    }

    fn teacher_forcing(&self, input_ids: &[usize], target_ids: &[usize]) -> Result<EncodedExample> {
        if input_ids.is_empty() {
            return Err(Error::SequenceTooLong { len: 0, max: 0 });
        }
        self.check_ids(input_ids, self.config().max_input_len)?;
        self.check_ids(target_ids, self.config().max_output_len.saturating_sub(1))?;
        let mut decoder = vec![Vocab::BOS_ID];
        decoder.extend_from_slice(target_ids);
        let mut labels = target_ids.to_vec();
        labels.push(Vocab::EOS_ID);
        Ok(EncodedExample {
            input: input_ids.to_vec(),
            decoder,
            labels,
        })
    }

    pub fn encode_example(&self, example: &TaskExample) -> Result<EncodedExample> {
        let input = self.vocab.encode(&example.input_tokens);
        let target = self.vocab.encode(&example.target_tokens);
        self.teacher_forcing(&input, &target)
    }

    /// Teacher-forced log-probabilities of `target_ids` followed by EOS.
    /// Returns the total and one term per position (target length + 1).
    pub fn score_target(&self, input_ids: &[usize], target_ids: &[usize]) -> Result<(f64, Vec<f64>)> {
        let ex = self.teacher_forcing(input_ids, target_ids)?;
        let per_token = transformer::label_log_probs(&self.params, &ex.input, &ex.decoder, &ex.labels);
        Ok((per_token.iter().sum(), per_token))
    }

    /// Mean per-token negative log-likelihood over `examples`.
    pub fn mean_loss(&self, examples: &[TaskExample]) -> Result<f64> {
        let mut total = 0.0;
        let mut tokens = 0;
        for example in examples {
            let ex = self.encode_example(example)?;
            let lp = transformer::label_log_probs(&self.params, &ex.input, &ex.decoder, &ex.labels);
            total -= lp.iter().sum::<f64>();
            tokens += lp.len();
        }
        Ok(if tokens == 0 { 0.0 } else { total / tokens as f64 })
    }

    /// Raw teacher-forced logits, one row per decoder position.
    pub fn logits(&self, input_ids: &[usize], target_ids: &[usize]) -> Result<ndarray::Array2<f64>> {
        let ex = self.teacher_forcing(input_ids, target_ids)?;
        Ok(transformer::forward_logits(&self.params, &ex.input, &ex.decoder))
    }

    /// Argmax decoding from BOS until EOS or `max_len` emitted tokens. EOS is
    /// not part of the output. PAD and BOS are never emitted.
    pub fn generate_greedy(&self, input_ids: &[usize], max_len: usize) -> Result<Generation> {
        self.check_ids(input_ids, self.config().max_input_len)?;
        let max_len = max_len.min(self.config().max_output_len);
        let memory = transformer::memory(&self.params, input_ids);
        let mut decoder = vec![Vocab::BOS_ID];
        let mut ids = Vec::new();
        let mut probs = Vec::new();
        while ids.len() < max_len {
            let logits = transformer::next_logits(&self.params, &memory, &decoder);
            let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let z: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
            let mut best = Vocab::EOS_ID;
            for id in 0..logits.len() {
                if id != Vocab::PAD_ID && id != Vocab::BOS_ID && logits[id] > logits[best] {
                    best = id;
                }
            }
            if best == Vocab::EOS_ID {
                break;
            }
            ids.push(best);
            probs.push((logits[best] - max).exp() / z);
            decoder.push(best);
        }
        Ok(Generation {
            tokens: self.vocab.decode(&ids),
            ids,
            probs,
        })
    }

    /// Generates from a token sequence, truncating the input to the
    /// configured maximum length.
    pub fn generate_tokens(&self, input_tokens: &[String], max_len: usize) -> Generation {
        let mut ids = self.vocab.encode(input_tokens);
        ids.truncate(self.config().max_input_len);
        self.generate_greedy(&ids, max_len).expect("ids come from the vocabulary")
    }

    /// `(trainable, total)` scalar counts.
    pub fn count_trainable_params(&self) -> (usize, usize) {
        self.params.count_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model(config: &ModelConfig) -> Model {
        let words = ["what", "is", "the", "?", "play", "game", "none", ","];
        init_model(config, Vocab::build(words)).unwrap()
    }

    #[test]
    fn rejects_heads_not_dividing_width() {
        let config = ModelConfig {
            d_model: 30,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert!(matches!(init_model(&config, Vocab::build([])), Err(Error::InvalidConfig { .. })));
    }

    #[test]
    fn init_is_deterministic() {
        let config = ModelConfig::default();
        assert_eq!(toy_model(&config).params.data(), toy_model(&config).params.data());
        let other = ModelConfig { seed: 1, ..config };
        assert_ne!(toy_model(&other).params.data(), toy_model(&ModelConfig::default()).params.data());
    }

    #[test]
    fn prefix_mode_freezes_backbone() {
        let mut model = toy_model(&ModelConfig::default());
        model.params.set_mode(TuningMode::Prefix);
        for spec in model.params.specs() {
            assert_eq!(model.params.is_trainable(spec.group), spec.group == ParamGroup::Prefix, "{}", spec.name);
        }
        model.params.set_mode(TuningMode::Finetune);
        let (trainable, total) = model.count_trainable_params();
        assert_eq!(trainable, total);
    }

    #[test]
    fn score_target_sums_and_rejects_bad_ids() {
        let model = toy_model(&ModelConfig::default());
        let input = model.vocab.encode(&["what", "is", "the", "game", "?", "play", "game"]);
        let target = model.vocab.encode(&["game"]);
        let (total, per_token) = model.score_target(&input, &target).unwrap();
        assert_eq!(per_token.len(), 2);
        assert!(per_token.iter().all(|&lp| lp <= 0.0));
        assert!((total - per_token.iter().sum::<f64>()).abs() <= 1e-9);
        assert!(matches!(
            model.score_target(&[999], &target),
            Err(Error::TokenOutOfRange { id: 999, .. })
        ));
    }

    #[test]
    fn greedy_probabilities_and_length() {
        let model = toy_model(&ModelConfig::default());
        let input = model.vocab.encode(&["play", "the", "game"]);
        let generation = model.generate_greedy(&input, 5).unwrap();
        assert_eq!(generation.tokens.len(), generation.probs.len());
        assert!(generation.probs.iter().all(|&p| p > 0.0 && p <= 1.0));
        assert!(generation.ids.iter().all(|&id| id != Vocab::PAD_ID && id != Vocab::BOS_ID));
        let one = model.generate_greedy(&input, 1).unwrap();
        assert!(one.tokens.len() <= 1);
    }
}
