use rand::Rng;

use super::attention::{init_dense, init_norm, init_san_layer, san_layer, Mask, SanLayerOpts};
use super::SanConfig;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::graph::{Graph, Padding, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Total frame-rate reduction of the encoder.
pub const REDUCTION: usize = 8;
const CONV_WIDTH: usize = 3;

/// Encoder output `h_1..h_U` for an utterance of `frames` input frames.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub h: Tensor,
    pub frames: usize,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.h.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn init_encoder(store: &mut ParamStore, cfg: &SanConfig, rng: &mut impl Rng) {
    let d = cfg.d_model;
    init_dense(store, "enc.conv1", CONV_WIDTH * cfg.d_feat, d, rng);
    init_dense(store, "enc.conv2", CONV_WIDTH * d, d, rng);
    for i in 0..cfg.encoder_layers {
        init_san_layer(
            store,
            &format!("enc.layer{i}"),
            d,
            cfg.d_ff,
            cfg.n_heads,
            cfg.init_tau,
            rng,
        );
    }
    init_dense(store, "enc.reduce", 2 * d, d, rng);
    init_norm(store, "enc.ln_out", d);
}

fn conv(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"));
    let b = g.param(&format!("{prefix}.b"));
    let y = g.conv1d(x, w, b, CONV_WIDTH, 2, Padding::Same)?;
    Ok(g.relu(y))
}

/// Convolutional front-end (÷4), SAN layers, adjacent-pair concatenation
/// (÷2, odd lengths zero-padded), remaining SAN layers and a final norm.
pub fn encoder_graph(g: &mut Graph<'_>, cfg: &SanConfig, features: Var) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 2 || shape[1] != cfg.d_feat {
        return Err(Error::dim("encoder input", &shape, &[0, cfg.d_feat]));
    }
    if shape[0] < REDUCTION {
        return Err(Error::UtteranceTooShort {
            frames: shape[0],
            min: REDUCTION,
        });
    }
    let opts = SanLayerOpts {
        heads: cfg.n_heads,
        mask: Mask::None,
        dropout: cfg.dropout,
    };
    let mut x = conv(g, features, "enc.conv1")?;
    x = conv(g, x, "enc.conv2")?;
    for i in 0..cfg.encoder_layers_before_reduce {
        x = san_layer(g, &format!("enc.layer{i}"), x, opts)?;
    }
    let l = g.shape(x)[0];
    x = g.pad_rows(x, l % 2);
    x = g.reshape(x, &[l.div_ceil(2), 2 * cfg.d_model])?;
    x = g.dense(x, "enc.reduce")?;
    for i in cfg.encoder_layers_before_reduce..cfg.encoder_layers {
        x = san_layer(g, &format!("enc.layer{i}"), x, opts)?;
    }
    g.norm(x, "enc.ln_out")
}

/// Inference-mode encoder over the `enc.*` parameters of `store`.
pub fn encoder_forward(
    store: &ParamStore,
    cfg: &SanConfig,
    features: &Tensor,
) -> Result<EncodedSequence> {
    let mut g = Graph::eval(store);
    let x = g.constant(features.clone());
    let h = encoder_graph(&mut g, cfg, x)?;
    Ok(EncodedSequence {
        h: g.value(h).clone(),
        frames: features.rows(),
    })
}

/// Encodes each utterance independently; outputs follow input order.
pub fn encode_batch(
    store: &ParamStore,
    cfg: &SanConfig,
    batch: &[Tensor],
    exec: Execution,
) -> Result<Vec<EncodedSequence>> {
    exec.try_map(batch, |f| encoder_forward(store, cfg, f))
}
