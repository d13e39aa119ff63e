//! Event-dependence encoder: triplet embeddings plus causal multi-head
//! self-attention and a position-wise feed-forward network.
//!
//! Row i of the encoder output depends only on events 1..=i. The mask allows
//! attention to the event itself and everything earlier; later events and
//! padded key positions are cut off. Residual connections and layer
//! normalization wrap both sub-layers by default and can be switched off for
//! a plain two-dense-layer head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeId, NumericsError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn default_embed_dim() -> usize {
    64
}
fn default_key_dim() -> usize {
    64
}
fn default_value_dim() -> usize {
    32
}
fn default_heads() -> usize {
    2
}
fn default_components() -> usize {
    16
}
fn default_layers() -> usize {
    1
}
fn default_true() -> bool {
    true
}

/// Model dimensions. `type_count` and `covariate_dim` come from the dataset;
/// everything else is configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_key_dim")]
    pub key_dim: usize,
    #[serde(default = "default_value_dim")]
    pub value_dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_heads")]
    pub importance_heads: usize,
    #[serde(default = "default_components")]
    pub mixture_components: usize,
    /// Width of the hidden dense layer between the importance-weighted
    /// covariates and the auxiliary representation; 0 means `embed_dim`.
    #[serde(default)]
    pub aux_dim: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Feed-forward inner width; 0 means `embed_dim`.
    #[serde(default)]
    pub ff_dim: usize,
    #[serde(default = "default_true")]
    pub residual_layer_norm: bool,
    /// Rescale times so the mean training inter-event gap is 1 before the
    /// temporal encoding. Recommended for datasets with large absolute times.
    #[serde(default)]
    pub rescale_times: bool,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub type_count: usize,
    #[serde(default)]
    pub covariate_dim: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            embed_dim: default_embed_dim(),
            key_dim: default_key_dim(),
            value_dim: default_value_dim(),
            heads: default_heads(),
            importance_heads: default_heads(),
            mixture_components: default_components(),
            aux_dim: 0,
            layers: default_layers(),
            ff_dim: 0,
            residual_layer_norm: true,
            rescale_times: false,
            dropout: 0.0,
            type_count: 0,
            covariate_dim: 0,
        }
    }
}

impl HyperParams {
    pub fn aux_dim(&self) -> usize {
        if self.aux_dim == 0 {
            self.embed_dim
        } else {
            self.aux_dim
        }
    }

    pub fn ff_dim(&self) -> usize {
        if self.ff_dim == 0 {
            self.embed_dim
        } else {
            self.ff_dim
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.embed_dim == 0 || self.key_dim == 0 || self.value_dim == 0 {
            return Err("embedding dimensions must be positive".into());
        }
        if self.embed_dim % 2 != 0 {
            return Err("embed_dim must be even (sine/cosine pairs)".into());
        }
        if self.heads == 0 || self.importance_heads == 0 {
            return Err("head counts must be positive".into());
        }
        if self.mixture_components == 0 {
            return Err("mixture_components must be positive".into());
        }
        if self.layers == 0 {
            return Err("layers must be positive".into());
        }
        if self.type_count == 0 || self.covariate_dim == 0 {
            return Err("type_count and covariate_dim must be set from the dataset".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must be in [0, 1)".into());
        }
        Ok(())
    }

    /// The tiny configuration used by gradient-check runs.
    pub fn tiny() -> Self {
        HyperParams {
            embed_dim: 8,
            key_dim: 8,
            value_dim: 4,
            heads: 2,
            importance_heads: 2,
            mixture_components: 2,
            aux_dim: 8,
            layers: 1,
            ff_dim: 8,
            residual_layer_norm: true,
            rescale_times: false,
            dropout: 0.0,
            type_count: 2,
            covariate_dim: 3,
        }
    }
}

/// Sinusoidal encoding of one timestamp. Entry j (1-indexed) is
/// `cos(t / 10000^((j-1)/M))` for odd j and `sin(t / 10000^(j/M))` for even j.
pub fn temporal_encode(t: f64, m: usize) -> Vec<f64> {
    assert!(m >= 2, "temporal encoding needs M >= 2");
    (1..=m)
        .map(|j| {
            if j % 2 == 1 {
                (t / 10000f64.powf((j - 1) as f64 / m as f64)).cos()
            } else {
                (t / 10000f64.powf(j as f64 / m as f64)).sin()
            }
        })
        .collect()
}

/// Stack of temporal encodings for a slice of timestamps, as an (L, M) tensor.
pub fn temporal_encoding_rows(times: &[f64], m: usize) -> Tensor {
    let mut data = Vec::with_capacity(times.len() * m);
    for &t in times {
        data.extend(temporal_encode(t, m));
    }
    Tensor::from_vec(&[times.len(), m], data)
}

pub fn init_params(store: &mut ParamStore, hp: &HyperParams, rng: &mut impl Rng) {
    let m = hp.embed_dim;
    store.insert_weight("emb.type", hp.type_count, m, rng);
    store.insert_weight("emb.cov", hp.covariate_dim, m, rng);
    for l in 0..hp.layers {
        for h in 0..hp.heads {
            store.insert_weight(&format!("enc.l{l}.h{h}.wq"), m, hp.key_dim, rng);
            store.insert_weight(&format!("enc.l{l}.h{h}.wk"), m, hp.key_dim, rng);
            store.insert_weight(&format!("enc.l{l}.h{h}.wv"), m, hp.value_dim, rng);
        }
        store.insert_weight(&format!("enc.l{l}.wo"), hp.heads * hp.value_dim, m, rng);
        store.insert_weight(&format!("enc.l{l}.ffn.w1"), m, hp.ff_dim(), rng);
        store.insert_zeros(&format!("enc.l{l}.ffn.b1"), &[hp.ff_dim()]);
        store.insert_weight(&format!("enc.l{l}.ffn.w2"), hp.ff_dim(), m, rng);
        store.insert_zeros(&format!("enc.l{l}.ffn.b2"), &[m]);
    }
}

/// Key mask for one sequence padded to `padded_len` rows: row i may attend to
/// positions j <= i that hold real events. Padded query rows attend to the
/// valid keys (all earlier), keeping every softmax row non-empty.
pub fn causal_key_mask(padded_len: usize, valid: usize) -> Vec<bool> {
    assert!(valid >= 1 && valid <= padded_len);
    let mut mask = vec![false; padded_len * padded_len];
    for i in 0..padded_len {
        for j in 0..=i.min(valid - 1) {
            mask[i * padded_len + j] = true;
        }
    }
    mask
}

/// Summed triplet embedding: temporal encoding + type embedding + covariate
/// embedding, shape (L, M).
pub fn embed_sequence(
    g: &mut Graph,
    store: &ParamStore,
    hp: &HyperParams,
    times_scaled: &[f64],
    types: &[usize],
    covariates: Tensor,
) -> NodeId {
    let z = g.input(temporal_encoding_rows(times_scaled, hp.embed_dim));
    let u = g.param(store, "emb.type");
    let e = g.embed_rows(u, types);
    let w = g.param(store, "emb.cov");
    let cov = g.input(covariates);
    let f = g.matmul(cov, w);
    let ze = g.add(z, e);
    g.add(ze, f)
}

/// One attention + feed-forward block over (L, M) states.
pub fn encoder_layer(
    g: &mut Graph,
    store: &ParamStore,
    hp: &HyperParams,
    layer: usize,
    x: NodeId,
    mask: &[bool],
) -> Result<NodeId, NumericsError> {
    let scale = 1.0 / (hp.key_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(hp.heads);
    for h in 0..hp.heads {
        let wq = g.param(store, &format!("enc.l{layer}.h{h}.wq"));
        let wk = g.param(store, &format!("enc.l{layer}.h{h}.wk"));
        let wv = g.param(store, &format!("enc.l{layer}.h{h}.wv"));
        let q = g.matmul(x, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let scores = g.matmul_nt(q, k);
        let scaled = g.scale(scores, scale);
        let attn = g.masked_softmax(scaled, mask)?;
        heads.push(g.matmul(attn, v));
    }
    let stacked = g.concat_cols(&heads);
    let wo = g.param(store, &format!("enc.l{layer}.wo"));
    let s = g.matmul(stacked, wo);

    let w1 = g.param(store, &format!("enc.l{layer}.ffn.w1"));
    let b1 = g.param(store, &format!("enc.l{layer}.ffn.b1"));
    let w2 = g.param(store, &format!("enc.l{layer}.ffn.w2"));
    let b2 = g.param(store, &format!("enc.l{layer}.ffn.b2"));

    if hp.residual_layer_norm {
        let xs = g.add(x, s);
        let x1 = g.layer_norm_rows(xs);
        let pre = g.matmul(x1, w1);
        let pre = g.add_bias(pre, b1);
        let act = g.relu(pre);
        let ff = g.matmul(act, w2);
        let ff = g.add_bias(ff, b2);
        let out = g.add(x1, ff);
        Ok(g.layer_norm_rows(out))
    } else {
        let pre = g.matmul(s, w1);
        let pre = g.add_bias(pre, b1);
        let act = g.relu(pre);
        let ff = g.matmul(act, w2);
        Ok(g.add_bias(ff, b2))
    }
}

/// Full encoder: embeddings through every attention block.
pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    hp: &HyperParams,
    times_scaled: &[f64],
    types: &[usize],
    covariates: Tensor,
    mask: &[bool],
) -> Result<NodeId, NumericsError> {
    let mut x = embed_sequence(g, store, hp, times_scaled, types, covariates);
    for l in 0..hp.layers {
        x = encoder_layer(g, store, hp, l, x, mask)?;
    }
    Ok(x)
}
