//! Flat parameter storage with named tensors.
//!
//! Every tensor lives in one contiguous `Vec<f64>`; backbone tensors come
//! first, prefix tensors after them. Handles into the buffer are built
//! deterministically from the [`ModelConfig`], so a checkpoint only needs the
//! config, the vocabulary and the raw values.

use std::ops::Range;

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, TuningMode};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Prefix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub group: ParamGroup,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct TensorId(usize);

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIds {
    pub w: TensorId,
    pub b: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIds {
    pub gain: TensorId,
    pub bias: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PrefixIds {
    pub key: TensorId,
    pub value: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttentionIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub prefix: Option<PrefixIds>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FeedForwardIds {
    pub up: LinearIds,
    pub down: LinearIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderLayerIds {
    pub norm1: NormIds,
    pub attn: AttentionIds,
    pub norm2: NormIds,
    pub ff: FeedForwardIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderLayerIds {
    pub norm1: NormIds,
    pub self_attn: AttentionIds,
    pub norm2: NormIds,
    pub cross_attn: AttentionIds,
    pub norm3: NormIds,
    pub ff: FeedForwardIds,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embedding: TensorId,
    pub encoder: Vec<EncoderLayerIds>,
    pub encoder_norm: NormIds,
    pub decoder: Vec<DecoderLayerIds>,
    pub decoder_norm: NormIds,
}

struct Builder {
    specs: Vec<TensorSpec>,
    inits: Vec<Init>,
    offset: usize,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, group: ParamGroup, init: Init) -> TensorId {
        let id = TensorId(self.specs.len());
        self.specs.push(TensorSpec {
            name,
            rows,
            cols,
            offset: self.offset,
            group,
        });
        self.inits.push(init);
        self.offset += rows * cols;
        id
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        LinearIds {
            w: self.add(format!("{name}.weight"), fan_in, fan_out, ParamGroup::Backbone, Init::Uniform(bound)),
            b: self.add(format!("{name}.bias"), 1, fan_out, ParamGroup::Backbone, Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.add(format!("{name}.gain"), 1, d, ParamGroup::Backbone, Init::Ones),
            bias: self.add(format!("{name}.bias"), 1, d, ParamGroup::Backbone, Init::Zeros),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> AttentionIds {
        AttentionIds {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
            prefix: None,
        }
    }

    fn feed_forward(&mut self, name: &str, d: usize, ff: usize) -> FeedForwardIds {
        FeedForwardIds {
            up: self.linear(&format!("{name}.up"), d, ff),
            down: self.linear(&format!("{name}.down"), ff, d),
        }
    }

    fn prefix(&mut self, name: &str, len: usize, d: usize) -> Option<PrefixIds> {
        if len == 0 {
            return None;
        }
        let init = Init::Uniform(1.0);
        Some(PrefixIds {
            key: self.add(format!("{name}.prefix_key"), len, d, ParamGroup::Prefix, init),
            value: self.add(format!("{name}.prefix_value"), len, d, ParamGroup::Prefix, init),
        })
    }
}

fn build_layout(config: &ModelConfig, vocab_size: usize) -> (Layout, Vec<TensorSpec>, Vec<Init>) {
    let d = config.d_model;
    let mut b = Builder {
        specs: Vec::new(),
        inits: Vec::new(),
        offset: 0,
    };
    let embedding = b.add(
        "embedding".into(),
        vocab_size,
        d,
        ParamGroup::Backbone,
        Init::Uniform((3.0 / d as f64).sqrt()),
    );
    let mut encoder: Vec<EncoderLayerIds> = (0..config.n_encoder_layers)
        .map(|l| EncoderLayerIds {
            norm1: b.norm(&format!("encoder.{l}.norm1"), d),
            attn: b.attention(&format!("encoder.{l}.self_attn"), d),
            norm2: b.norm(&format!("encoder.{l}.norm2"), d),
            ff: b.feed_forward(&format!("encoder.{l}.ff"), d, config.d_ff),
        })
        .collect();
    let encoder_norm = b.norm("encoder.final_norm", d);
    let mut decoder: Vec<DecoderLayerIds> = (0..config.n_decoder_layers)
        .map(|l| DecoderLayerIds {
            norm1: b.norm(&format!("decoder.{l}.norm1"), d),
            self_attn: b.attention(&format!("decoder.{l}.self_attn"), d),
            norm2: b.norm(&format!("decoder.{l}.norm2"), d),
            cross_attn: b.attention(&format!("decoder.{l}.cross_attn"), d),
            norm3: b.norm(&format!("decoder.{l}.norm3"), d),
            ff: b.feed_forward(&format!("decoder.{l}.ff"), d, config.d_ff),
        })
        .collect();
    let decoder_norm = b.norm("decoder.final_norm", d);

    let len = config.prefix_length;
    for (l, layer) in encoder.iter_mut().enumerate() {
        layer.attn.prefix = b.prefix(&format!("encoder.{l}.self_attn"), len, d);
    }
    for (l, layer) in decoder.iter_mut().enumerate() {
        layer.self_attn.prefix = b.prefix(&format!("decoder.{l}.self_attn"), len, d);
        layer.cross_attn.prefix = b.prefix(&format!("decoder.{l}.cross_attn"), len, d);
    }
    let layout = Layout {
        embedding,
        encoder,
        encoder_norm,
        decoder,
        decoder_norm,
    };
    (layout, b.specs, b.inits)
}

/// Backbone tensors, prefix banks and the per-group trainable flags.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    config: ModelConfig,
    vocab_size: usize,
    specs: Vec<TensorSpec>,
    pub(crate) layout: Layout,
    data: Vec<f64>,
    mode: TuningMode,
    pub(crate) positions: Array2<f64>,
}

impl ParameterStore {
    /// Seeded initialization: scaled uniform projections, zero biases, unit
    /// norm gains. Starts in fine-tuning mode.
    pub fn init(config: &ModelConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let (layout, specs, inits) = build_layout(config, vocab_size);
        let total = specs.last().map_or(0, |s| s.offset + s.len());
        let mut data = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for (spec, init) in specs.iter().zip(&inits) {
            let slot = &mut data[spec.range()];
            match *init {
                Init::Zeros => {}
                Init::Ones => slot.fill(1.0),
                Init::Uniform(bound) => slot.iter_mut().for_each(|x| *x = rng.gen_range(-bound..bound)),
            }
        }
        Ok(Self {
            positions: sinusoidal_positions(config.max_input_len.max(config.max_output_len + 1), config.d_model),
            config: config.clone(),
            vocab_size,
            specs,
            layout,
            data,
            mode: TuningMode::Finetune,
        })
    }

    /// Rebuilds a store from raw values saved by a checkpoint.
    pub(crate) fn from_parts(config: &ModelConfig, vocab_size: usize, specs: &[TensorSpec], data: Vec<f64>, mode: TuningMode) -> Result<Self> {
        let mut store = Self::init(config, vocab_size)?;
        if store.specs != specs || store.data.len() != data.len() {
            return Err(crate::Error::Checkpoint("tensor layout does not match the config".into()));
        }
        store.data = data;
        store.mode = mode;
        Ok(store)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn mode(&self) -> TuningMode {
        self.mode
    }

    /// Prefix mode freezes every backbone tensor; fine-tuning trains all.
    pub fn set_mode(&mut self, mode: TuningMode) {
        self.mode = mode;
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        match (self.mode, group) {
            (TuningMode::Finetune, _) => true,
            (TuningMode::Prefix, ParamGroup::Prefix) => true,
            (TuningMode::Prefix, ParamGroup::Backbone) => false,
        }
    }

    /// `(trainable scalars, all scalars)`.
    pub fn count_params(&self) -> (usize, usize) {
        let total = self.data.len();
        let trainable = self
            .specs
            .iter()
            .filter(|s| self.is_trainable(s.group))
            .map(TensorSpec::len)
            .sum();
        (trainable, total)
    }

    /// Indices of every trainable scalar, grouped as contiguous ranges.
    pub fn trainable_ranges(&self) -> Vec<Range<usize>> {
        self.specs
            .iter()
            .filter(|s| self.is_trainable(s.group))
            .map(TensorSpec::range)
            .collect()
    }

    /// Concatenated values of all backbone tensors.
    pub fn backbone_values(&self) -> Vec<f64> {
        self.specs
            .iter()
            .filter(|s| s.group == ParamGroup::Backbone)
            .flat_map(|s| self.data[s.range()].iter().copied())
            .collect()
    }

    pub fn tensor(&self, name: &str) -> Option<ArrayView2<'_, f64>> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| self.mat(TensorId(i)))
    }

    pub(crate) fn mat(&self, id: TensorId) -> ArrayView2<'_, f64> {
        let spec = &self.specs[id.0];
        ArrayView2::from_shape((spec.rows, spec.cols), &self.data[spec.range()]).expect("spec shape")
    }

    pub(crate) fn vector(&self, id: TensorId) -> ArrayView1<'_, f64> {
        let spec = &self.specs[id.0];
        ArrayView1::from(&self.data[spec.range()])
    }

    pub(crate) fn grad_sink<'a>(&'a self, buf: &'a mut [f64]) -> GradSink<'a> {
        GradSink {
            specs: &self.specs,
            data: buf,
            backbone: self.is_trainable(ParamGroup::Backbone),
        }
    }
}

/// Mutable gradient buffer shaped like a [`ParameterStore`].
pub(crate) struct GradSink<'a> {
    specs: &'a [TensorSpec],
    data: &'a mut [f64],
    /// Whether backbone weight gradients are wanted at all.
    pub backbone: bool,
}

impl GradSink<'_> {
    pub fn mat(&mut self, id: TensorId) -> ArrayViewMut2<'_, f64> {
        let spec = &self.specs[id.0];
        ArrayViewMut2::from_shape((spec.rows, spec.cols), &mut self.data[spec.range()]).expect("spec shape")
    }

    pub fn vector(&mut self, id: TensorId) -> ArrayViewMut1<'_, f64> {
        let spec = &self.specs[id.0];
        ArrayViewMut1::from(&mut self.data[spec.range()])
    }
}

fn sinusoidal_positions(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
