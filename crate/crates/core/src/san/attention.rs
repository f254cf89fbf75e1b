use rand::Rng;

use crate::error::Result;
use crate::graph::{AttnKind, AttnSpec, Graph, Var};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    None,
    Causal,
}

pub(crate) fn init_dense(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut impl Rng,
) {
    store.init_matrix(&format!("{prefix}.w"), d_in, d_out, rng);
    store.init_const(&format!("{prefix}.b"), &[d_out], 0.0);
}

pub(crate) fn init_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.init_const(&format!("{prefix}.g"), &[d], 1.0);
    store.init_const(&format!("{prefix}.b"), &[d], 0.0);
}

/// Projections `q, k, v, o`, plus per-head `log_tau` when `init_tau` is given.
pub(crate) fn init_attention(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    heads: usize,
    init_tau: Option<f64>,
    rng: &mut impl Rng,
) {
    init_dense(store, &format!("{prefix}.q"), d, d, rng);
    // No key bias: it would shift every logit of a row equally.
    store.init_matrix(&format!("{prefix}.k.w"), d, d, rng);
    init_dense(store, &format!("{prefix}.v"), d, d, rng);
    init_dense(store, &format!("{prefix}.o"), d, d, rng);
    if let Some(tau) = init_tau {
        store.init_const(&format!("{prefix}.log_tau"), &[heads], tau.ln());
    }
}

pub(crate) fn init_feed_forward(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    d_ff: usize,
    rng: &mut impl Rng,
) {
    init_norm(store, &format!("{prefix}.ln"), d);
    init_dense(store, &format!("{prefix}.ff1"), d, d_ff, rng);
    init_dense(store, &format!("{prefix}.ff2"), d_ff, d, rng);
}

/// Parameters of one SAN layer: pre-norm proximity self-attention then
/// a pre-norm feed-forward block.
pub(crate) fn init_san_layer(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    d_ff: usize,
    heads: usize,
    init_tau: f64,
    rng: &mut impl Rng,
) {
    init_norm(store, &format!("{prefix}.ln1"), d);
    init_attention(
        store,
        &format!("{prefix}.self"),
        d,
        heads,
        Some(init_tau),
        rng,
    );
    init_feed_forward(store, &format!("{prefix}.ffn"), d, d_ff, rng);
}

/// Attention over parameters under `prefix`: projects `query`, `key` and
/// `value`, attends per head and applies the output projection. Proximity
/// requires `{prefix}.log_tau` and only makes sense for self-attention.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    prefix: &str,
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
    mask: Mask,
    proximity: bool,
) -> Result<Var> {
    let q = g.dense(query, &format!("{prefix}.q"))?;
    let k = key_projection(g, key, prefix)?;
    let v = g.dense(value, &format!("{prefix}.v"))?;
    let tau = proximity.then(|| g.param(&format!("{prefix}.log_tau")));
    let kind = if query == key {
        AttnKind::SelfAttn
    } else {
        AttnKind::Cross
    };
    let spec = AttnSpec {
        heads,
        causal: mask == Mask::Causal,
        query_offset: 0,
        kind,
    };
    let a = g.attention(q, k, v, tau, spec)?;
    g.dense(a, &format!("{prefix}.o"))
}

pub(crate) fn key_projection(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.k.w"));
    g.matmul(x, w)
}

pub(crate) fn feed_forward(g: &mut Graph<'_>, prefix: &str, x: Var, dropout: f64) -> Result<Var> {
    let h = g.norm(x, &format!("{prefix}.ln"))?;
    let h = g.dense(h, &format!("{prefix}.ff1"))?;
    let h = g.relu(h);
    let h = g.dense(h, &format!("{prefix}.ff2"))?;
    let h = g.dropout(h, dropout);
    g.add(x, h)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct SanLayerOpts {
    pub heads: usize,
    pub mask: Mask,
    pub dropout: f64,
}

pub(crate) fn san_layer(
    g: &mut Graph<'_>,
    prefix: &str,
    x: Var,
    opts: SanLayerOpts,
) -> Result<Var> {
    let h = g.norm(x, &format!("{prefix}.ln1"))?;
    let a = multi_head_attention(
        g,
        &format!("{prefix}.self"),
        h,
        h,
        h,
        opts.heads,
        opts.mask,
        true,
    )?;
    let a = g.dropout(a, opts.dropout);
    let x = g.add(x, a)?;
    feed_forward(g, &format!("{prefix}.ffn"), x, opts.dropout)
}

/// Cached keys and values of one self-attention layer.
#[derive(Debug, Clone, Default)]
pub(crate) struct KvRows {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub len: usize,
}

/// One incremental step of a causal SAN layer for the row `x` at position
/// `cache.len`, appending its key and value to `cache`.
pub(crate) fn san_layer_step(
    g: &mut Graph<'_>,
    prefix: &str,
    x: Var,
    heads: usize,
    cache: &mut KvRows,
) -> Result<Var> {
    let h = g.norm(x, &format!("{prefix}.ln1"))?;
    let a = self_attention_step(g, &format!("{prefix}.self"), h, heads, cache)?;
    let x = g.add(x, a)?;
    feed_forward(g, &format!("{prefix}.ffn"), x, 0.0)
}

pub(crate) fn self_attention_step(
    g: &mut Graph<'_>,
    prefix: &str,
    h: Var,
    heads: usize,
    cache: &mut KvRows,
) -> Result<Var> {
    let q = g.dense(h, &format!("{prefix}.q"))?;
    let k = key_projection(g, h, prefix)?;
    let v = g.dense(h, &format!("{prefix}.v"))?;
    let d = g.value(q).last_dim();
    cache.k.extend_from_slice(g.value(k).data());
    cache.v.extend_from_slice(g.value(v).data());
    let pos = cache.len;
    cache.len += 1;
    let keys = g.constant(crate::Tensor::matrix(cache.len, d, cache.k.clone()));
    let values = g.constant(crate::Tensor::matrix(cache.len, d, cache.v.clone()));
    let tau = g.param(&format!("{prefix}.log_tau"));
    let spec = AttnSpec {
        heads,
        causal: true,
        query_offset: pos,
        kind: AttnKind::SelfAttn,
    };
    let a = g.attention(q, keys, values, Some(tau), spec)?;
    g.dense(a, &format!("{prefix}.o"))
}
