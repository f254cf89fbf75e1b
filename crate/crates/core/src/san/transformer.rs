use std::sync::Arc;

use rand::Rng;

use super::attention::{
    feed_forward, init_attention, init_dense, init_feed_forward, init_norm, key_projection,
    multi_head_attention, self_attention_step, KvRows, Mask,
};
use super::encoder::{encoder_forward, init_encoder, EncodedSequence};
use super::SanConfig;
use crate::error::{Error, Result};
use crate::graph::{AttnKind, AttnSpec, Graph, Var};
use crate::instrument;
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Tensor;

/// Label-synchronous encoder-decoder: SAN encoder, `N_d` decoder blocks
/// (causal self-attention, encoder-decoder attention, feed-forward) and an
/// auxiliary CTC projection on the encoder output.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub cfg: SanConfig,
    pub params: ParamStore,
}

/// Incremental decoding state. Self-attention rows grow by one per step;
/// encoder-side keys/values are computed once and shared between clones.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    layers: Vec<KvRows>,
    cross: Arc<Vec<(Tensor, Tensor)>>,
    enc_len: usize,
}

impl DecoderCache {
    /// Number of decoding steps taken so far.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Self-attention cache length per layer.
    pub fn layer_lens(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.len).collect()
    }
}

pub(crate) fn init_embedding(
    store: &mut ParamStore,
    name: &str,
    vocab: usize,
    d: usize,
    rng: &mut impl Rng,
) {
    store.init_uniform(name, &[vocab, d], 1.0, rng);
}

impl Transformer {
    pub fn new(cfg: SanConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, "init", 0);
        let mut params = ParamStore::new();
        let (d, v) = (cfg.d_model, cfg.vocab().size());
        init_encoder(&mut params, &cfg, &mut rng);
        init_dense(&mut params, "ctc", d, v, &mut rng);
        init_embedding(&mut params, "dec.embed", v, d, &mut rng);
        for i in 0..cfg.decoder_layers {
            let p = format!("dec.layer{i}");
            init_norm(&mut params, &format!("{p}.ln1"), d);
            init_attention(
                &mut params,
                &format!("{p}.self"),
                d,
                cfg.n_heads,
                Some(cfg.init_tau),
                &mut rng,
            );
            init_norm(&mut params, &format!("{p}.ln2"), d);
            init_attention(
                &mut params,
                &format!("{p}.cross"),
                d,
                cfg.n_heads,
                None,
                &mut rng,
            );
            init_feed_forward(&mut params, &format!("{p}.ffn"), d, cfg.d_ff, &mut rng);
        }
        init_norm(&mut params, "dec.ln_out", d);
        init_dense(&mut params, "dec.out", d, v, &mut rng);
        Ok(Transformer { cfg, params })
    }

    /// Model with `cfg`'s layout and the weights in `params`.
    pub fn with_params(cfg: SanConfig, params: ParamStore) -> Result<Self> {
        let mut m = Transformer::new(cfg, 0)?;
        m.params.load_from(&params)?;
        Ok(m)
    }

    pub fn encode(&self, features: &Tensor) -> Result<EncodedSequence> {
        encoder_forward(&self.params, &self.cfg, features)
    }

    /// Decoder logits for every position of `inputs` (start symbol followed
    /// by the teacher-forced prefix), one row per input.
    pub fn decoder_graph(&self, g: &mut Graph<'_>, enc: Var, inputs: &[usize]) -> Result<Var> {
        let cfg = &self.cfg;
        for &y in inputs {
            cfg.vocab().check(y)?;
        }
        let emb = g.param("dec.embed");
        let mut x = g.gather(emb, inputs)?;
        for i in 0..cfg.decoder_layers {
            let p = format!("dec.layer{i}");
            let h = g.norm(x, &format!("{p}.ln1"))?;
            let a = multi_head_attention(
                g,
                &format!("{p}.self"),
                h,
                h,
                h,
                cfg.n_heads,
                Mask::Causal,
                true,
            )?;
            let a = g.dropout(a, cfg.dropout);
            x = g.add(x, a)?;
            let h = g.norm(x, &format!("{p}.ln2"))?;
            let a = multi_head_attention(
                g,
                &format!("{p}.cross"),
                h,
                enc,
                enc,
                cfg.n_heads,
                Mask::None,
                false,
            )?;
            let a = g.dropout(a, cfg.dropout);
            x = g.add(x, a)?;
            x = feed_forward(g, &format!("{p}.ffn"), x, cfg.dropout)?;
        }
        let x = g.norm(x, "dec.ln_out")?;
        g.dense(x, "dec.out")
    }

    /// Full recomputation of the decoder logits for `inputs` (no cache).
    pub fn full_logits(&self, enc: &EncodedSequence, inputs: &[usize]) -> Result<Tensor> {
        let mut g = Graph::eval(&self.params);
        let e = g.constant(enc.h.clone());
        let y = self.decoder_graph(&mut g, e, inputs)?;
        Ok(g.value(y).clone())
    }

    pub fn start(&self, enc: &EncodedSequence) -> Result<DecoderCache> {
        let mut g = Graph::eval(&self.params);
        let e = g.constant(enc.h.clone());
        let mut cross = Vec::with_capacity(self.cfg.decoder_layers);
        for i in 0..self.cfg.decoder_layers {
            let p = format!("dec.layer{i}.cross");
            let k = key_projection(&mut g, e, &p)?;
            let v = g.dense(e, &format!("{p}.v"))?;
            cross.push((g.value(k).clone(), g.value(v).clone()));
        }
        Ok(DecoderCache {
            layers: vec![KvRows::default(); self.cfg.decoder_layers],
            cross: Arc::new(cross),
            enc_len: enc.len(),
        })
    }

    /// One cached decoder step: consumes the last label of `prefix` (or the
    /// start symbol when empty) and returns logits for the next label.
    pub fn decoder_step(
        &self,
        prefix: &[usize],
        cache: &mut DecoderCache,
        enc: &EncodedSequence,
    ) -> Result<Tensor> {
        if cache.len() != prefix.len() {
            return Err(Error::Contract(format!(
                "decoder cache holds {} steps but the prefix has {} labels",
                cache.len(),
                prefix.len()
            )));
        }
        if cache.enc_len != enc.len() {
            return Err(Error::Contract(format!(
                "decoder cache built for {} encoder steps, got {}",
                cache.enc_len,
                enc.len()
            )));
        }
        let vocab = self.cfg.vocab();
        let y_prev = prefix.last().copied().unwrap_or(vocab.eos());
        vocab.check(y_prev)?;
        let heads = self.cfg.n_heads;
        let mut g = Graph::eval(&self.params);
        let emb = g.param("dec.embed");
        let mut x = g.gather(emb, &[y_prev])?;
        for (i, layer) in cache.layers.iter_mut().enumerate() {
            let p = format!("dec.layer{i}");
            let h = g.norm(x, &format!("{p}.ln1"))?;
            let a = self_attention_step(&mut g, &format!("{p}.self"), h, heads, layer)?;
            x = g.add(x, a)?;
            let h = g.norm(x, &format!("{p}.ln2"))?;
            let (ck, cv) = &cache.cross[i];
            let q = g.dense(h, &format!("{p}.cross.q"))?;
            let k = g.constant(ck.clone());
            let v = g.constant(cv.clone());
            let spec = AttnSpec {
                heads,
                causal: false,
                query_offset: 0,
                kind: AttnKind::Cross,
            };
            let a = g.attention(q, k, v, None, spec)?;
            let a = g.dense(a, &format!("{p}.cross.o"))?;
            x = g.add(x, a)?;
            x = feed_forward(&mut g, &format!("{p}.ffn"), x, 0.0)?;
        }
        let x = g.norm(x, "dec.ln_out")?;
        let y = g.dense(x, "dec.out")?;
        instrument::bump(|c| c.decoder_steps += 1);
        Ok(g.value(y).clone().reshape(&[vocab.size()])?)
    }
}
