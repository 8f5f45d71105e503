//! Forward and backward passes for the transformer building blocks.
//!
//! Activations are `(positions, features)` matrices for a single sequence.
//! Each forward returns a cache that its backward consumes; backward
//! accumulates parameter gradients into a [`GradSink`] and returns the
//! gradient with respect to the layer input.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{AttentionIds, FeedForwardIds, GradSink, LinearIds, NormIds, ParameterStore};

const NORM_EPS: f64 = 1e-5;

pub(crate) fn linear(store: &ParameterStore, ids: LinearIds, x: &ArrayView2<f64>) -> Array2<f64> {
    let mut y = x.dot(&store.mat(ids.w));
    y += &store.vector(ids.b);
    y
}

/// Returns `dx`; weight gradients are skipped when the backbone is frozen.
pub(crate) fn linear_backward(
    store: &ParameterStore,
    ids: LinearIds,
    x: &ArrayView2<f64>,
    dy: &Array2<f64>,
    sink: &mut GradSink,
) -> Array2<f64> {
    if sink.backbone {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut sink.mat(ids.w));
        sink.vector(ids.b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    }
    dy.dot(&store.mat(ids.w).t())
}

pub(crate) struct NormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

pub(crate) fn layer_norm(store: &ParameterStore, ids: NormIds, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
    let normalized = centered * &inv_std.view().insert_axis(Axis(1));
    let mut y = &normalized * &store.vector(ids.gain);
    y += &store.vector(ids.bias);
    (y, NormCache { normalized, inv_std })
}

pub(crate) fn layer_norm_backward(
    store: &ParameterStore,
    ids: NormIds,
    cache: &NormCache,
    dy: &Array2<f64>,
    sink: &mut GradSink,
) -> Array2<f64> {
    if sink.backbone {
        sink.vector(ids.gain).scaled_add(1.0, &(dy * &cache.normalized).sum_axis(Axis(0)));
        sink.vector(ids.bias).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    }
    let d = dy.ncols() as f64;
    let dxhat = dy * &store.vector(ids.gain);
    let mean_d = dxhat.sum_axis(Axis(1)) / d;
    let mean_dx = (&dxhat * &cache.normalized).sum_axis(Axis(1)) / d;
    let mut dx = dxhat;
    Zip::from(dx.rows_mut())
        .and(cache.normalized.rows())
        .and(&mean_d)
        .and(&mean_dx)
        .and(&cache.inv_std)
        .for_each(|mut row, xhat, &m, &mx, &inv| {
            Zip::from(&mut row).and(&xhat).for_each(|g, &xh| *g = inv * (*g - m - xh * mx));
        });
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) struct FeedForwardCache {
    input: Array2<f64>,
    pre_activation: Array2<f64>,
    hidden: Array2<f64>,
}

pub(crate) fn feed_forward(store: &ParameterStore, ids: FeedForwardIds, x: Array2<f64>) -> (Array2<f64>, FeedForwardCache) {
    let pre_activation = linear(store, ids.up, &x.view());
    let hidden = pre_activation.mapv(gelu);
    let y = linear(store, ids.down, &hidden.view());
    (
        y,
        FeedForwardCache {
            input: x,
            pre_activation,
            hidden,
        },
    )
}

pub(crate) fn feed_forward_backward(
    store: &ParameterStore,
    ids: FeedForwardIds,
    cache: &FeedForwardCache,
    dy: &Array2<f64>,
    sink: &mut GradSink,
) -> Array2<f64> {
    let mut dh = linear_backward(store, ids.down, &cache.hidden.view(), dy, sink);
    Zip::from(&mut dh).and(&cache.pre_activation).for_each(|g, &z| *g *= gelu_grad(z));
    linear_backward(store, ids.up, &cache.input.view(), &dh, sink)
}

/// Inverted dropout. Returns the scaled keep-mask, or `None` when disabled.
pub(crate) fn dropout(x: &mut Array2<f64>, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Array2<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = Array2::from_shape_simple_fn(x.raw_dim(), || if rng.gen::<f64>() < rate { 0.0 } else { keep });
    *x *= &mask;
    Some(mask)
}

pub(crate) fn dropout_backward(dy: &Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => dy * m,
        None => dy.clone(),
    }
}

pub(crate) struct AttentionCache {
    query_input: Array2<f64>,
    kv_input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    heads: Array2<f64>,
    prefix_len: usize,
}

/// Multi-head attention. Prefix key/value rows (if any) are prepended to the
/// projected keys and values and are visible to every query; `causal` only
/// masks future positions among the non-prefix keys.
pub(crate) fn attention(
    store: &ParameterStore,
    ids: AttentionIds,
    query_input: Array2<f64>,
    kv_input: Array2<f64>,
    causal: bool,
) -> (Array2<f64>, AttentionCache) {
    let n_heads = store.config().n_heads;
    let d = query_input.ncols();
    let head_dim = d / n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = linear(store, ids.q, &query_input.view());
    let mut k = linear(store, ids.k, &kv_input.view());
    let mut v = linear(store, ids.v, &kv_input.view());
    let prefix_len = match ids.prefix {
        Some(prefix) => {
            k = ndarray::concatenate(Axis(0), &[store.mat(prefix.key), k.view()]).expect("prefix width");
            v = ndarray::concatenate(Axis(0), &[store.mat(prefix.value), v.view()]).expect("prefix width");
            store.mat(prefix.key).nrows()
        }
        None => 0,
    };

    let tq = q.nrows();
    let tk = k.nrows();
    let mut heads = Array2::zeros((tq, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
            if causal {
                for j in (prefix_len + i + 1)..tk {
                    row[j] = f64::NEG_INFINITY;
                }
            }
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        heads.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let out = linear(store, ids.o, &heads.view());
    (
        out,
        AttentionCache {
            query_input,
            kv_input,
            q,
            k,
            v,
            probs,
            heads,
            prefix_len,
        },
    )
}

/// Returns `(d_query_input, d_kv_input)`.
pub(crate) fn attention_backward(
    store: &ParameterStore,
    ids: AttentionIds,
    cache: &AttentionCache,
    dy: &Array2<f64>,
    sink: &mut GradSink,
) -> (Array2<f64>, Array2<f64>) {
    let n_heads = store.config().n_heads;
    let d = cache.q.ncols();
    let head_dim = d / n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let dheads = linear_backward(store, ids.o, &cache.heads.view(), dy, sink);
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (h, probs) in cache.probs.iter().enumerate() {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let dout = dheads.slice(cols);
        let dprobs = dout.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&dout));
        // softmax backward, row-wise: ds = p * (dp - <dp, p>)
        let mut dscores = &dprobs * probs;
        let dots = dscores.sum_axis(Axis(1));
        Zip::from(dscores.rows_mut())
            .and(probs.rows())
            .and(&dots)
            .for_each(|mut row, p, &dot| {
                Zip::from(&mut row).and(&p).for_each(|g, &pv| *g = (*g - pv * dot) * scale);
            });
        dq.slice_mut(cols).assign(&dscores.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&dscores.t().dot(&cache.q.slice(cols)));
    }

    let p = cache.prefix_len;
    if let Some(prefix) = ids.prefix {
        sink.mat(prefix.key).scaled_add(1.0, &dk.slice(s![..p, ..]));
        sink.mat(prefix.value).scaled_add(1.0, &dv.slice(s![..p, ..]));
    }
    let dk_x = dk.slice(s![p.., ..]).to_owned();
    let dv_x = dv.slice(s![p.., ..]).to_owned();

    let dquery = linear_backward(store, ids.q, &cache.query_input.view(), &dq, sink);
    let mut dkv = linear_backward(store, ids.k, &cache.kv_input.view(), &dk_x, sink);
    dkv += &linear_backward(store, ids.v, &cache.kv_input.view(), &dv_x, sink);
    (dquery, dkv)
}

/// Row-wise log-softmax.
pub(crate) fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let log_sum = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|x| x - log_sum);
    }
    out
}
