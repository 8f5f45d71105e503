//! Central-difference verification of the analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{transformer, Model};
use crate::error::Result;
use crate::prompting::TaskExample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSample {
    /// Index into the flat parameter buffer.
    pub index: usize,
    pub tensor: String,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub samples: Vec<GradSample>,
}

/// `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares the gradient of the example's summed token NLL against central
/// differences on `sample_size` trainable scalars drawn with `seed`. Dropout
/// is off for both passes.
pub fn finite_difference_check(
    model: &Model,
    example: &TaskExample,
    epsilon: f64,
    sample_size: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let ex = model.encode_example(example)?;
    let mut grads = vec![0.0; model.params.data().len()];
    transformer::loss_and_grad(&model.params, &ex.input, &ex.decoder, &ex.labels, None, 1.0, &mut grads);

    let ranges = model.params.trainable_ranges();
    let candidates: usize = ranges.iter().map(|r| r.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, candidates, sample_size.min(candidates));

    let mut probe = model.params.clone();
    let loss = |store: &super::ParameterStore| -> f64 {
        -transformer::label_log_probs(store, &ex.input, &ex.decoder, &ex.labels)
            .iter()
            .sum::<f64>()
    };
    let mut samples = Vec::with_capacity(picks.len());
    for pick in picks.into_vec() {
        let mut rest = pick;
        let index = ranges
            .iter()
            .find_map(|r| {
                if rest < r.len() {
                    Some(r.start + rest)
                } else {
                    rest -= r.len();
                    None
                }
            })
            .expect("pick within trainable scalars");
        let original = probe.data()[index];
        probe.data_mut()[index] = original + epsilon;
        let plus = loss(&probe);
        probe.data_mut()[index] = original - epsilon;
        let minus = loss(&probe);
        probe.data_mut()[index] = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grads[index];
        let tensor = model
            .params
            .specs()
            .iter()
            .find(|s| s.range().contains(&index))
            .map(|s| s.name.clone())
            .unwrap_or_default();
        samples.push(GradSample {
            index,
            tensor,
            analytic,
            numeric,
            relative_error: relative_error(analytic, numeric),
        });
    }
    let max_relative_error = samples.iter().map(|s| s.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        samples,
    })
}
