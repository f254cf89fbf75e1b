use super::fire::{
    integrate_and_fire, integrate_and_fire_graph, scale_weights_graph, FiringPlan, ResidualPolicy,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Padding, Var};
use crate::instrument;
use crate::params::ParamStore;
use crate::rng;
use crate::san::{
    encoder_forward, encoder_graph, init_dense, init_embedding, init_encoder, init_norm,
    init_san_layer, san_layer, san_layer_step, EncodedSequence, KvRows, Mask, SanConfig,
    SanLayerOpts,
};
use crate::tensor::Tensor;

/// Frame-synchronous recognizer: SAN encoder, a weight predictor, CIF, and
/// an autoregressive SAN decoder fed `[c_i ; emb(y_{i-1})]`. Its output
/// layer sees `[decoder state ; c_i]`.
#[derive(Debug, Clone)]
pub struct CifModel {
    pub cfg: SanConfig,
    pub params: ParamStore,
}

/// Training-graph handles for one utterance.
#[derive(Debug)]
pub struct CifGraph {
    /// `S × vocab` decoder logits.
    pub logits: Var,
    /// Unscaled weights, length U.
    pub alpha: Var,
    /// `U × vocab` auxiliary CTC logits.
    pub ctc_logits: Var,
    pub plan: FiringPlan,
}

/// Inference result of [`CifModel::forward`].
#[derive(Debug, Clone)]
pub struct CifOutput {
    pub logits: Tensor,
    pub plan: FiringPlan,
    pub alpha: Vec<f64>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CifDecoderCache {
    layers: Vec<KvRows>,
}

impl CifDecoderCache {
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const WINDOW: usize = 3;

/// Start symbol followed by all but the last reference label.
pub(crate) fn teacher_inputs(start: usize, labels: &[usize]) -> Vec<usize> {
    let mut inputs = vec![start];
    inputs.extend_from_slice(&labels[..labels.len().saturating_sub(1)]);
    inputs
}

impl CifModel {
    pub fn new(cfg: SanConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, "init", 2);
        let mut params = ParamStore::new();
        let (d, v) = (cfg.d_model, cfg.vocab().size());
        init_encoder(&mut params, &cfg, &mut rng);
        init_dense(&mut params, "ctc", d, v, &mut rng);
        init_dense(&mut params, "cif.conv", WINDOW * d, d, &mut rng);
        init_norm(&mut params, "cif.ln", d);
        init_dense(&mut params, "cif.fc", d, 1, &mut rng);
        init_embedding(&mut params, "cifdec.embed", v, d, &mut rng);
        init_dense(&mut params, "cifdec.in", 2 * d, d, &mut rng);
        for i in 0..cfg.decoder_layers {
            init_san_layer(
                &mut params,
                &format!("cifdec.layer{i}"),
                d,
                cfg.d_ff,
                cfg.n_heads,
                cfg.init_tau,
                &mut rng,
            );
        }
        init_norm(&mut params, "cifdec.ln_out", d);
        init_dense(&mut params, "cifdec.out", 2 * d, v, &mut rng);
        Ok(CifModel { cfg, params })
    }

    pub fn with_params(cfg: SanConfig, params: ParamStore) -> Result<Self> {
        let mut m = CifModel::new(cfg, 0)?;
        m.params.load_from(&params)?;
        Ok(m)
    }

    pub fn encode(&self, features: &Tensor) -> Result<EncodedSequence> {
        encoder_forward(&self.params, &self.cfg, features)
    }

    /// Width-3 convolution, layer norm, ReLU, one-unit projection, sigmoid.
    pub fn weights_graph(&self, g: &mut Graph<'_>, enc: Var) -> Result<Var> {
        let w = g.param("cif.conv.w");
        let b = g.param("cif.conv.b");
        let x = g.conv1d(enc, w, b, WINDOW, 1, Padding::Same)?;
        let x = g.norm(x, "cif.ln")?;
        let x = g.relu(x);
        let x = g.dense(x, "cif.fc")?;
        let x = g.sigmoid(x);
        let u = g.shape(x)[0];
        g.reshape(x, &[u])
    }

    pub fn predict_weights(&self, enc: &EncodedSequence) -> Result<Vec<f64>> {
        let mut g = Graph::eval(&self.params);
        let e = g.constant(enc.h.clone());
        let a = self.weights_graph(&mut g, e)?;
        Ok(g.value(a).data().to_vec())
    }

    /// Decoder logits for integrated embeddings `c: S×d` with teacher-forced
    /// `inputs` (start symbol then the first S−1 labels).
    pub fn decoder_graph(&self, g: &mut Graph<'_>, c: Var, inputs: &[usize]) -> Result<Var> {
        let vocab = self.cfg.vocab();
        for &y in inputs {
            vocab.check(y)?;
        }
        if g.shape(c)[0] != inputs.len() {
            return Err(Error::dim(
                "CIF decoder inputs",
                g.shape(c),
                &[inputs.len()],
            ));
        }
        let opts = SanLayerOpts {
            heads: self.cfg.n_heads,
            mask: Mask::Causal,
            dropout: self.cfg.dropout,
        };
        let emb = g.param("cifdec.embed");
        let e = g.gather(emb, inputs)?;
        let x = g.concat_cols(&[c, e])?;
        let mut x = g.dense(x, "cifdec.in")?;
        for i in 0..self.cfg.decoder_layers {
            x = san_layer(g, &format!("cifdec.layer{i}"), x, opts)?;
        }
        let x = g.norm(x, "cifdec.ln_out")?;
        let x = g.concat_cols(&[x, c])?;
        g.dense(x, "cifdec.out")
    }

    /// Training-time forward for one utterance: weights are scaled to the
    /// reference length so exactly `labels.len()` labels fire.
    pub fn train_graph(
        &self,
        g: &mut Graph<'_>,
        features: Var,
        labels: &[usize],
    ) -> Result<CifGraph> {
        self.train_graph_with_inputs(g, features, labels, None)
    }

    /// As [`CifModel::train_graph`] with explicit decoder inputs (for
    /// scheduled sampling); `None` uses the shifted reference.
    pub fn train_graph_with_inputs(
        &self,
        g: &mut Graph<'_>,
        features: Var,
        labels: &[usize],
        inputs: Option<&[usize]>,
    ) -> Result<CifGraph> {
        let vocab = self.cfg.vocab();
        for &y in labels {
            if !vocab.is_label(y) {
                return Err(Error::LabelOutOfVocab {
                    label: y,
                    vocab: vocab.labels,
                });
            }
        }
        let enc = encoder_graph(g, &self.cfg, features)?;
        let ctc_logits = g.dense(enc, "ctc")?;
        let alpha = self.weights_graph(g, enc)?;
        let scaled = scale_weights_graph(g, alpha, labels.len())?;
        let (c, plan) = integrate_and_fire_graph(g, enc, scaled)?;
        if plan.labels.len() != labels.len() {
            return Err(Error::Contract(format!(
                "scaled weights fired {} labels for a {}-label reference",
                plan.labels.len(),
                labels.len()
            )));
        }
        let inputs = match inputs {
            Some(x) => x.to_vec(),
            None => teacher_inputs(vocab.eos(), labels),
        };
        let logits = self.decoder_graph(g, c, &inputs)?;
        Ok(CifGraph {
            logits,
            alpha,
            ctc_logits,
            plan,
        })
    }

    /// Encoder, weights and firing in inference mode.
    pub fn fire(
        &self,
        features: &Tensor,
        policy: ResidualPolicy,
    ) -> Result<(Tensor, FiringPlan, Vec<f64>)> {
        let enc = self.encode(features)?;
        let alpha = self.predict_weights(&enc)?;
        let (c, plan) = integrate_and_fire(&enc.h, &alpha, policy)?;
        Ok((c, plan, alpha))
    }

    /// `labels = Some(refs)`: teacher-forced logits over scaled weights.
    /// `None`: inference firing with greedy decoding over the fired steps.
    pub fn forward(&self, features: &Tensor, labels: Option<&[usize]>) -> Result<CifOutput> {
        match labels {
            Some(refs) => {
                let mut g = Graph::eval(&self.params);
                let f = g.constant(features.clone());
                let out = self.train_graph(&mut g, f, refs)?;
                Ok(CifOutput {
                    logits: g.value(out.logits).clone(),
                    alpha: g.value(out.alpha).data().to_vec(),
                    plan: out.plan,
                    labels: refs.to_vec(),
                })
            }
            None => {
                let (c, plan, alpha) = self.fire(features, ResidualPolicy::Round)?;
                let mut cache = self.decoder_start();
                let mut labels = Vec::with_capacity(c.rows());
                let mut rows = Vec::with_capacity(c.rows());
                for i in 0..c.rows() {
                    let logits = self.decoder_step(&labels, &mut cache, c.row(i))?;
                    labels.push(argmax_label(logits.data(), self.cfg.labels));
                    rows.push(logits.into_data());
                }
                let v = self.cfg.vocab().size();
                Ok(CifOutput {
                    logits: Tensor::matrix(rows.len(), v, rows.concat()),
                    plan,
                    alpha,
                    labels,
                })
            }
        }
    }

    pub fn decoder_start(&self) -> CifDecoderCache {
        CifDecoderCache {
            layers: vec![KvRows::default(); self.cfg.decoder_layers],
        }
    }

    /// One cached decoder step for fired embedding `c` after `prefix`.
    pub fn decoder_step(
        &self,
        prefix: &[usize],
        cache: &mut CifDecoderCache,
        c: &[f64],
    ) -> Result<Tensor> {
        if cache.len() != prefix.len() {
            return Err(Error::Contract(format!(
                "CIF decoder cache holds {} steps but the prefix has {} labels",
                cache.len(),
                prefix.len()
            )));
        }
        let vocab = self.cfg.vocab();
        let y_prev = prefix.last().copied().unwrap_or(vocab.eos());
        vocab.check(y_prev)?;
        let mut g = Graph::eval(&self.params);
        let cv = g.constant(Tensor::matrix(1, c.len(), c.to_vec()));
        let emb = g.param("cifdec.embed");
        let e = g.gather(emb, &[y_prev])?;
        let x = g.concat_cols(&[cv, e])?;
        let mut x = g.dense(x, "cifdec.in")?;
        for (i, layer) in cache.layers.iter_mut().enumerate() {
            x = san_layer_step(
                &mut g,
                &format!("cifdec.layer{i}"),
                x,
                self.cfg.n_heads,
                layer,
            )?;
        }
        let x = g.norm(x, "cifdec.ln_out")?;
        let x = g.concat_cols(&[x, cv])?;
        let y = g.dense(x, "cifdec.out")?;
        instrument::bump(|c| c.decoder_steps += 1);
        g.value(y).clone().reshape(&[vocab.size()])
    }
}

/// Best real label (specials excluded).
pub(crate) fn argmax_label(logits: &[f64], labels: usize) -> usize {
    let mut best = 0;
    for (y, &l) in logits.iter().enumerate().take(labels) {
        if l > logits[best] {
            best = y;
        }
    }
    best
}
