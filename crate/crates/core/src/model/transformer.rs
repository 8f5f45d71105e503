//! Pre-norm encoder-decoder transformer over a single sequence pair.
//!
//! Token embeddings are scaled by `sqrt(d_model)` and summed with fixed
//! sinusoidal positions. The output head is tied to the embedding matrix.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    attention, attention_backward, dropout, dropout_backward, feed_forward, feed_forward_backward, layer_norm,
    layer_norm_backward, log_softmax_rows, AttentionCache, FeedForwardCache, NormCache,
};
use super::params::{GradSink, ParameterStore};

struct EncoderLayerCache {
    norm1: NormCache,
    attn: AttentionCache,
    drop1: Option<Array2<f64>>,
    norm2: NormCache,
    ff: FeedForwardCache,
    drop2: Option<Array2<f64>>,
}

struct DecoderLayerCache {
    norm1: NormCache,
    self_attn: AttentionCache,
    drop1: Option<Array2<f64>>,
    norm2: NormCache,
    cross_attn: AttentionCache,
    drop2: Option<Array2<f64>>,
    norm3: NormCache,
    ff: FeedForwardCache,
    drop3: Option<Array2<f64>>,
}

pub(crate) struct EncoderCache {
    ids: Vec<usize>,
    embed_drop: Option<Array2<f64>>,
    layers: Vec<EncoderLayerCache>,
    final_norm: NormCache,
}

pub(crate) struct DecoderCache {
    ids: Vec<usize>,
    embed_drop: Option<Array2<f64>>,
    layers: Vec<DecoderLayerCache>,
    final_norm: NormCache,
    output: Array2<f64>,
}

fn embed(store: &ParameterStore, ids: &[usize]) -> Array2<f64> {
    let d = store.config().d_model;
    let table = store.mat(store.layout.embedding);
    let scale = (d as f64).sqrt();
    let mut x = Array2::zeros((ids.len(), d));
    for (i, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(i);
        row.assign(&store.positions.row(i));
        row.scaled_add(scale, &table.row(id));
    }
    x
}

fn embed_backward(store: &ParameterStore, ids: &[usize], dx: &Array2<f64>, sink: &mut GradSink) {
    if !sink.backbone {
        return;
    }
    let scale = (store.config().d_model as f64).sqrt();
    let mut table = sink.mat(store.layout.embedding);
    for (i, &id) in ids.iter().enumerate() {
        table.row_mut(id).scaled_add(scale, &dx.row(i));
    }
}

pub(crate) fn encode(store: &ParameterStore, ids: &[usize], mut rng: Option<&mut ChaCha8Rng>) -> (Array2<f64>, EncoderCache) {
    let rate = store.config().dropout;
    let mut x = embed(store, ids);
    let embed_drop = dropout(&mut x, rate, rng.as_deref_mut());
    let mut layers = Vec::with_capacity(store.layout.encoder.len());
    for layer in &store.layout.encoder {
        let (n1, norm1) = layer_norm(store, layer.norm1, &x);
        let (mut a, attn) = attention(store, layer.attn, n1.clone(), n1, false);
        let drop1 = dropout(&mut a, rate, rng.as_deref_mut());
        x += &a;
        let (n2, norm2) = layer_norm(store, layer.norm2, &x);
        let (mut f, ff) = feed_forward(store, layer.ff, n2);
        let drop2 = dropout(&mut f, rate, rng.as_deref_mut());
        x += &f;
        layers.push(EncoderLayerCache {
            norm1,
            attn,
            drop1,
            norm2,
            ff,
            drop2,
        });
    }
    let (memory, final_norm) = layer_norm(store, store.layout.encoder_norm, &x);
    (
        memory,
        EncoderCache {
            ids: ids.to_vec(),
            embed_drop,
            layers,
            final_norm,
        },
    )
}

fn encode_backward(store: &ParameterStore, cache: &EncoderCache, dmemory: &Array2<f64>, sink: &mut GradSink) {
    let mut dx = layer_norm_backward(store, store.layout.encoder_norm, &cache.final_norm, dmemory, sink);
    for (ids, c) in store.layout.encoder.iter().zip(&cache.layers).rev() {
        let df = dropout_backward(&dx, &c.drop2);
        let dn2 = feed_forward_backward(store, ids.ff, &c.ff, &df, sink);
        dx += &layer_norm_backward(store, ids.norm2, &c.norm2, &dn2, sink);
        let da = dropout_backward(&dx, &c.drop1);
        let (dq, dkv) = attention_backward(store, ids.attn, &c.attn, &da, sink);
        let dn1 = dq + dkv;
        dx += &layer_norm_backward(store, ids.norm1, &c.norm1, &dn1, sink);
    }
    let dx = dropout_backward(&dx, &cache.embed_drop);
    embed_backward(store, &cache.ids, &dx, sink);
}

/// Runs the decoder over `ids` (starting with BOS) and returns logits, one
/// row per decoder position.
pub(crate) fn decode(
    store: &ParameterStore,
    memory: &Array2<f64>,
    ids: &[usize],
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Array2<f64>, DecoderCache) {
    let rate = store.config().dropout;
    let mut x = embed(store, ids);
    let embed_drop = dropout(&mut x, rate, rng.as_deref_mut());
    let mut layers = Vec::with_capacity(store.layout.decoder.len());
    for layer in &store.layout.decoder {
        let (n1, norm1) = layer_norm(store, layer.norm1, &x);
        let (mut a, self_attn) = attention(store, layer.self_attn, n1.clone(), n1, true);
        let drop1 = dropout(&mut a, rate, rng.as_deref_mut());
        x += &a;
        let (n2, norm2) = layer_norm(store, layer.norm2, &x);
        let (mut c, cross_attn) = attention(store, layer.cross_attn, n2, memory.clone(), false);
        let drop2 = dropout(&mut c, rate, rng.as_deref_mut());
        x += &c;
        let (n3, norm3) = layer_norm(store, layer.norm3, &x);
        let (mut f, ff) = feed_forward(store, layer.ff, n3);
        let drop3 = dropout(&mut f, rate, rng.as_deref_mut());
        x += &f;
        layers.push(DecoderLayerCache {
            norm1,
            self_attn,
            drop1,
            norm2,
            cross_attn,
            drop2,
            norm3,
            ff,
            drop3,
        });
    }
    let (output, final_norm) = layer_norm(store, store.layout.decoder_norm, &x);
    let logits = output.dot(&store.mat(store.layout.embedding).t());
    (
        logits,
        DecoderCache {
            ids: ids.to_vec(),
            embed_drop,
            layers,
            final_norm,
            output,
        },
    )
}

/// Backpropagates `dlogits` through the decoder; returns the gradient with
/// respect to the encoder memory.
fn decode_backward(store: &ParameterStore, cache: &DecoderCache, dlogits: &Array2<f64>, sink: &mut GradSink) -> Array2<f64> {
    let table = store.mat(store.layout.embedding);
    if sink.backbone {
        general_mat_mul(1.0, &dlogits.t(), &cache.output, 1.0, &mut sink.mat(store.layout.embedding));
    }
    let doutput = dlogits.dot(&table);
    let mut dx = layer_norm_backward(store, store.layout.decoder_norm, &cache.final_norm, &doutput, sink);
    let mut dmemory: Option<Array2<f64>> = None;
    for (ids, c) in store.layout.decoder.iter().zip(&cache.layers).rev() {
        let df = dropout_backward(&dx, &c.drop3);
        let dn3 = feed_forward_backward(store, ids.ff, &c.ff, &df, sink);
        dx += &layer_norm_backward(store, ids.norm3, &c.norm3, &dn3, sink);

        let dc = dropout_backward(&dx, &c.drop2);
        let (dn2, dmem) = attention_backward(store, ids.cross_attn, &c.cross_attn, &dc, sink);
        match dmemory.as_mut() {
            Some(acc) => *acc += &dmem,
            None => dmemory = Some(dmem),
        }
        dx += &layer_norm_backward(store, ids.norm2, &c.norm2, &dn2, sink);

        let da = dropout_backward(&dx, &c.drop1);
        let (dq, dkv) = attention_backward(store, ids.self_attn, &c.self_attn, &da, sink);
        let dn1 = dq + dkv;
        dx += &layer_norm_backward(store, ids.norm1, &c.norm1, &dn1, sink);
    }
    let dx = dropout_backward(&dx, &cache.embed_drop);
    embed_backward(store, &cache.ids, &dx, sink);
    dmemory.expect("decoder has at least one layer")
}

/// Teacher-forced logits for `decoder_ids` (BOS followed by the target).
pub(crate) fn forward_logits(store: &ParameterStore, input_ids: &[usize], decoder_ids: &[usize]) -> Array2<f64> {
    let (memory, _) = encode(store, input_ids, None);
    decode(store, &memory, decoder_ids, None).0
}

/// Summed negative log-likelihood of `labels` given the decoder inputs, with
/// gradients (multiplied by `scale`) accumulated into `grads`.
pub(crate) fn loss_and_grad(
    store: &ParameterStore,
    input_ids: &[usize],
    decoder_ids: &[usize],
    labels: &[usize],
    mut rng: Option<&mut ChaCha8Rng>,
    scale: f64,
    grads: &mut [f64],
) -> f64 {
    let (memory, enc_cache) = encode(store, input_ids, rng.as_deref_mut());
    let (logits, dec_cache) = decode(store, &memory, decoder_ids, rng.as_deref_mut());
    let log_probs = log_softmax_rows(&logits);
    let mut loss = 0.0;
    // d(-log p_label)/d logits = softmax - onehot
    let mut dlogits = log_probs.mapv(f64::exp);
    for (t, &label) in labels.iter().enumerate() {
        loss -= log_probs[[t, label]];
        dlogits[[t, label]] -= 1.0;
    }
    dlogits *= scale;
    let mut sink = store.grad_sink(grads);
    let dmemory = decode_backward(store, &dec_cache, &dlogits, &mut sink);
    encode_backward(store, &enc_cache, &dmemory, &mut sink);
    loss
}

/// Per-position log-probabilities of `labels` under the teacher-forced
/// decoder, evaluation mode.
pub(crate) fn label_log_probs(store: &ParameterStore, input_ids: &[usize], decoder_ids: &[usize], labels: &[usize]) -> Vec<f64> {
    let log_probs = log_softmax_rows(&forward_logits(store, input_ids, decoder_ids));
    labels
        .iter()
        .enumerate()
        .map(|(t, &label)| log_probs[[t, label]])
        .collect()
}

/// Encoder memory for repeated decoding.
pub(crate) fn memory(store: &ParameterStore, input_ids: &[usize]) -> Array2<f64> {
    encode(store, input_ids, None).0
}

/// Logits of the last decoder position.
pub(crate) fn next_logits(store: &ParameterStore, memory: &Array2<f64>, decoder_ids: &[usize]) -> ndarray::Array1<f64> {
    let (logits, _) = decode(store, memory, decoder_ids, None);
    logits.index_axis(Axis(0), logits.nrows() - 1).to_owned()
}
