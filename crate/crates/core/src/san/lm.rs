use super::attention::{
    init_dense, init_norm, init_san_layer, san_layer, san_layer_step, KvRows, Mask, SanLayerOpts,
};
use super::transformer::init_embedding;
use super::SanConfig;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::{log_softmax_in_place, Tensor};

/// Decoder-only SAN language model over the recognizer vocabulary. Uses
/// `decoder_layers` causal SAN layers.
#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub cfg: SanConfig,
    pub params: ParamStore,
}

#[derive(Debug, Clone)]
pub struct LmCache {
    layers: Vec<KvRows>,
}

impl LmCache {
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LanguageModel {
    pub fn new(cfg: SanConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, "init", 1);
        let mut params = ParamStore::new();
        let (d, v) = (cfg.d_model, cfg.vocab().size());
        init_embedding(&mut params, "lm.embed", v, d, &mut rng);
        for i in 0..cfg.decoder_layers {
            init_san_layer(
                &mut params,
                &format!("lm.layer{i}"),
                d,
                cfg.d_ff,
                cfg.n_heads,
                cfg.init_tau,
                &mut rng,
            );
        }
        init_norm(&mut params, "lm.ln_out", d);
        init_dense(&mut params, "lm.out", d, v, &mut rng);
        Ok(LanguageModel { cfg, params })
    }

    pub fn with_params(cfg: SanConfig, params: ParamStore) -> Result<Self> {
        let mut m = LanguageModel::new(cfg, 0)?;
        m.params.load_from(&params)?;
        Ok(m)
    }

    /// Logits after each of `inputs` (start symbol first), one row per input.
    pub fn logits_graph(&self, g: &mut Graph<'_>, inputs: &[usize]) -> Result<Var> {
        for &y in inputs {
            self.cfg.vocab().check(y)?;
        }
        let opts = SanLayerOpts {
            heads: self.cfg.n_heads,
            mask: Mask::Causal,
            dropout: self.cfg.dropout,
        };
        let emb = g.param("lm.embed");
        let mut x = g.gather(emb, inputs)?;
        for i in 0..self.cfg.decoder_layers {
            x = san_layer(g, &format!("lm.layer{i}"), x, opts)?;
        }
        let x = g.norm(x, "lm.ln_out")?;
        g.dense(x, "lm.out")
    }

    /// Next-label log-probabilities after every prefix of `labels`:
    /// row `i` conditions on `labels[..i]`, so there are `len + 1` rows.
    pub fn log_probs(&self, labels: &[usize]) -> Result<Tensor> {
        let mut inputs = Vec::with_capacity(labels.len() + 1);
        inputs.push(self.cfg.vocab().eos());
        inputs.extend_from_slice(labels);
        let mut g = Graph::eval(&self.params);
        let y = self.logits_graph(&mut g, &inputs)?;
        let mut t = g.value(y).clone();
        let v = t.last_dim();
        t.data_mut().chunks_mut(v).for_each(log_softmax_in_place);
        Ok(t)
    }

    /// `Σ log p(y_i | y_<i)` over `labels`, without end-of-sentence.
    pub fn prefix_score(&self, labels: &[usize]) -> Result<f64> {
        let lp = self.log_probs(labels)?;
        Ok(labels.iter().enumerate().map(|(i, &y)| lp.row(i)[y]).sum())
    }

    /// Sequence log-probability including the closing end-of-sentence.
    pub fn lm_score(&self, labels: &[usize]) -> Result<f64> {
        for &y in labels {
            self.cfg.vocab().check(y)?;
        }
        let lp = self.log_probs(labels)?;
        let body: f64 = labels.iter().enumerate().map(|(i, &y)| lp.row(i)[y]).sum();
        Ok(body + lp.row(labels.len())[self.cfg.vocab().eos()])
    }

    pub fn start(&self) -> LmCache {
        LmCache {
            layers: vec![KvRows::default(); self.cfg.decoder_layers],
        }
    }

    /// Cached step: next-label log-probabilities after `prefix`.
    pub fn step(&self, prefix: &[usize], cache: &mut LmCache) -> Result<Tensor> {
        if cache.len() != prefix.len() {
            return Err(crate::Error::Contract(format!(
                "LM cache holds {} steps but the prefix has {} labels",
                cache.len(),
                prefix.len()
            )));
        }
        let vocab = self.cfg.vocab();
        let y_prev = prefix.last().copied().unwrap_or(vocab.eos());
        vocab.check(y_prev)?;
        let mut g = Graph::eval(&self.params);
        let emb = g.param("lm.embed");
        let mut x = g.gather(emb, &[y_prev])?;
        for (i, layer) in cache.layers.iter_mut().enumerate() {
            x = san_layer_step(&mut g, &format!("lm.layer{i}"), x, self.cfg.n_heads, layer)?;
        }
        let x = g.norm(x, "lm.ln_out")?;
        let y = g.dense(x, "lm.out")?;
        let mut out = g.value(y).clone().reshape(&[vocab.size()])?;
        log_softmax_in_place(out.data_mut());
        Ok(out)
    }
}
