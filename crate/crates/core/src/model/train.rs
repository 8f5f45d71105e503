//! Mini-batch AdamW training with early stopping on a caller-supplied dev
//! metric.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{transformer, EncodedExample, Model, TuningMode};
use crate::error::{Error, Result};
use crate::prompting::TaskExample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps, checked inside an epoch.
    pub max_steps: Option<usize>,
    pub max_grad_norm: Option<f64>,
    /// Optimizer steps over which the learning rate ramps linearly from 0.
    pub warmup_steps: usize,
    pub seed: u64,
    pub mode: TuningMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 8,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 10,
            max_epochs: 200,
            max_steps: None,
            max_grad_norm: None,
            warmup_steps: 0,
            seed: 0,
            mode: TuningMode::Prefix,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::config("train.patience", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-token training loss over the epoch.
    pub train_loss: f64,
    pub dev_metric: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub steps: usize,
    pub stopped_early: bool,
    /// Ids of the utterances the training examples came from.
    pub utterance_ids: BTreeSet<String>,
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], ranges: &[std::ops::Range<usize>], cfg: &TrainConfig) {
        self.t += 1;
        let lr = if (self.t as usize) <= cfg.warmup_steps {
            cfg.learning_rate * self.t as f64 / cfg.warmup_steps as f64
        } else {
            cfg.learning_rate
        };
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for range in ranges {
            for i in range.clone() {
                let g = grads[i];
                self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
                self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
                let update = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + cfg.adam_eps);
                params[i] -= lr * (update + cfg.weight_decay * params[i]);
            }
        }
    }
}

/// Splitmix-style hash of three words, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(c.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Minimizes mean token cross-entropy over the trainable parameters.
///
/// After every epoch `eval_hook` scores the model on `dev` (higher is
/// better). Training stops once `patience` consecutive evaluations fail to
/// improve on the best one, and the model is left at the best checkpoint.
/// Batch order and dropout masks are pure functions of `config.seed`.
pub fn train<H>(model: &mut Model, train: &[TaskExample], dev: &[TaskExample], config: &TrainConfig, mut eval_hook: H) -> Result<TrainingLog>
where
    H: FnMut(&Model, &[TaskExample]) -> f64,
{
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    model.params.set_mode(config.mode);
    let encoded: Vec<EncodedExample> = train.iter().map(|e| model.encode_example(e)).collect::<Result<_>>()?;
    let ranges = model.params.trainable_ranges();
    let n = model.params.data().len();
    let mut optimizer = AdamW::new(n);
    let mut grads = vec![0.0; n];

    let mut log = TrainingLog {
        utterance_ids: train.iter().map(|e| e.utterance_id.clone()).collect(),
        best_metric: f64::NEG_INFINITY,
        ..TrainingLog::default()
    };
    let mut best_params: Option<Vec<f64>> = None;
    let mut bad_evals = 0;
    let mut order: Vec<usize> = (0..encoded.len()).collect();

    'epochs: for epoch in 1..=config.max_epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64, 0)));
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        let mut hit_step_cap = false;
        for batch in order.chunks(config.batch_size) {
            grads.fill(0.0);
            let tokens: usize = batch.iter().map(|&i| encoded[i].labels.len()).sum();
            let scale = 1.0 / tokens as f64;
            for (k, &i) in batch.iter().enumerate() {
                let ex = &encoded[i];
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, log.steps as u64 + 1, k as u64 + 1));
                epoch_loss += transformer::loss_and_grad(&model.params, &ex.input, &ex.decoder, &ex.labels, Some(&mut rng), scale, &mut grads);
            }
            epoch_tokens += tokens;
            if let Some(max_norm) = config.max_grad_norm {
                let norm = ranges
                    .iter()
                    .flat_map(|r| grads[r.clone()].iter())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > max_norm {
                    let c = max_norm / norm;
                    grads.iter_mut().for_each(|g| *g *= c);
                }
            }
            optimizer.step(model.params.data_mut(), &grads, &ranges, config);
            log.steps += 1;
            if config.max_steps.is_some_and(|cap| log.steps >= cap) {
                hit_step_cap = true;
                break;
            }
        }

        let metric = eval_hook(model, dev);
        let improved = metric > log.best_metric;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / epoch_tokens.max(1) as f64,
            dev_metric: metric,
            improved,
        });
        if improved {
            log.best_metric = metric;
            log.best_epoch = epoch;
            best_params = Some(model.params.data().to_vec());
            bad_evals = 0;
        } else {
            bad_evals += 1;
            if bad_evals >= config.patience {
                log.stopped_early = true;
                break 'epochs;
            }
        }
        if hit_step_cap {
            break;
        }
    }
    if let Some(best) = best_params {
        model.params.data_mut().copy_from_slice(&best);
    }
    Ok(log)
}
