//! Intensity-free decoding of the next event.
//!
//! The inter-event time `tau` follows a log-normal mixture: a Gaussian
//! mixture on `z = (ln tau - b) / a` with per-event weights, means and scales
//! produced from the hidden state, plus a global affine `(a, b)` whose
//! initialization comes from the training gaps. The density carries the
//! change-of-variables factor `1 / (tau * a)`. The next type is a softmax
//! dense layer over the concatenated encoder and auxiliary states. The two
//! losses combine through learnable uncertainty weights:
//! `exp(-rho1) L1 + rho1 + exp(-rho2) L2 + rho2`.

use rand::Rng;

use crate::encoder::HyperParams;
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, thiserror::Error)]
pub enum DecoderError {
    #[error("inter-event time must be positive, got {0}")]
    NonPositiveTau(f64),
}

/// Mixture over the next inter-event time: simplex weights, component means
/// and scales on the z-scale, and the global affine transform.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub affine_scale: f64,
    pub affine_shift: f64,
}

impl MixtureParams {
    pub fn components(&self) -> usize {
        self.weights.len()
    }
}

pub fn init_params(
    store: &mut ParamStore,
    hp: &HyperParams,
    affine: Option<(f64, f64)>,
    rng: &mut impl Rng,
) {
    let m = hp.embed_dim;
    let c = hp.mixture_components;
    store.insert_weight("dec.weight.w", m, c, rng);
    store.insert_zeros("dec.weight.b", &[c]);
    store.insert_weight("dec.mean.w", m, c, rng);
    store.insert_zeros("dec.mean.b", &[c]);
    store.insert_weight("dec.scale.w", m, c, rng);
    store.insert_zeros("dec.scale.b", &[c]);
    store.insert_weight("dec.type.w", 2 * m, hp.type_count, rng);
    store.insert_zeros("dec.type.b", &[hp.type_count]);
    // a = exp(log_a) keeps the affine scale positive; defaults are the
    // mean/std of log gaps on the training split when available
    let (shift, scale) = affine.unwrap_or((0.0, 1.0));
    let scale = scale.max(1e-3);
    store.insert_scalar("dec.log_a", scale.ln());
    store.insert_scalar("dec.b", shift);
}

/// Mixture parameters for one hidden state, outside any graph.
pub fn mixture_params(h: &[f64], store: &ParamStore, hp: &HyperParams) -> MixtureParams {
    let c = hp.mixture_components;
    let hrow = Tensor::from_vec(&[1, h.len()], h.to_vec());
    let project = |w: &str, b: &str| -> Vec<f64> {
        let mut out = crate::tensor::matmul(&hrow, store.value(w));
        for (v, bias) in out.data_mut().iter_mut().zip(store.value(b).data()) {
            *v += bias;
        }
        out.data().to_vec()
    };
    let wl = project("dec.weight.w", "dec.weight.b");
    let mu = project("dec.mean.w", "dec.mean.b");
    let sl = project("dec.scale.w", "dec.scale.b");

    debug_assert_eq!(wl.len(), c);
    let max = wl.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = wl.iter().map(|&v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    MixtureParams {
        weights: exps.iter().map(|e| e / denom).collect(),
        means: mu,
        scales: sl.iter().map(|&v| v.exp()).collect(),
        affine_scale: store.value("dec.log_a").item().exp(),
        affine_shift: store.value("dec.b").item(),
    }
}

/// Negative log density of `tau` under the mixture, computed in log space
/// with log-sum-exp. Includes the `1 / (tau * a)` change-of-variables factor.
pub fn lognormal_mixture_nll(tau: f64, mp: &MixtureParams) -> Result<f64, DecoderError> {
    if tau <= 0.0 {
        return Err(DecoderError::NonPositiveTau(tau));
    }
    let z = (tau.ln() - mp.affine_shift) / mp.affine_scale;
    let mut max = f64::NEG_INFINITY;
    let comps: Vec<f64> = mp
        .weights
        .iter()
        .zip(mp.means.iter().zip(&mp.scales))
        .map(|(&w, (&mu, &s))| {
            let d = (z - mu) / s;
            let lp = w.ln() - s.ln() - 0.5 * LN_2PI - 0.5 * d * d;
            if lp > max {
                max = lp;
            }
            lp
        })
        .collect();
    let lse = max + comps.iter().map(|&c| (c - max).exp()).sum::<f64>().ln();
    let log_density = lse - mp.affine_scale.ln() - tau.ln();
    Ok(-log_density)
}

/// Closed-form mean of the mixture:
/// `sum_c w_c exp(a mu_c + b + (a s_c)^2 / 2)`.
pub fn expected_time(mp: &MixtureParams) -> f64 {
    let a = mp.affine_scale;
    let b = mp.affine_shift;
    mp.weights
        .iter()
        .zip(mp.means.iter().zip(&mp.scales))
        .map(|(&w, (&mu, &s))| w * (a * mu + b + (a * s) * (a * s) / 2.0).exp())
        .sum()
}

/// Type probabilities from the concatenated encoder and auxiliary states.
pub fn type_head(h1: &[f64], h2: &[f64], store: &ParamStore) -> Vec<f64> {
    let mut cat = h1.to_vec();
    cat.extend_from_slice(h2);
    let row = Tensor::from_vec(&[1, cat.len()], cat);
    let mut logits = crate::tensor::matmul(&row, store.value("dec.type.w"));
    for (v, b) in logits.data_mut().iter_mut().zip(store.value("dec.type.b").data()) {
        *v += b;
    }
    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|&v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}

/// Uncertainty-weighted combination of the two losses.
pub fn total_loss(l1: f64, l2: f64, rho: (f64, f64)) -> f64 {
    (-rho.0).exp() * l1 + rho.0 + (-rho.1).exp() * l2 + rho.1
}

/// Graph node for the per-row mixture negative log-likelihood, shape [n].
/// `gaps[r]` is the target inter-event time for row r; rows the caller masks
/// out may carry any positive placeholder.
pub fn mixture_nll_rows(
    g: &mut Graph,
    store: &ParamStore,
    hp: &HyperParams,
    h_pred: NodeId,
    gaps: &[f64],
) -> Result<NodeId, DecoderError> {
    let c = hp.mixture_components;
    let n = g.value(h_pred).dims2().0;
    assert_eq!(n, gaps.len());
    if let Some(&bad) = gaps.iter().find(|&&t| t <= 0.0) {
        return Err(DecoderError::NonPositiveTau(bad));
    }

    let ww = g.param(store, "dec.weight.w");
    let wb = g.param(store, "dec.weight.b");
    let mw = g.param(store, "dec.mean.w");
    let mb = g.param(store, "dec.mean.b");
    let sw = g.param(store, "dec.scale.w");
    let sb = g.param(store, "dec.scale.b");
    let log_a = g.param(store, "dec.log_a");
    let b = g.param(store, "dec.b");

    let wl = g.matmul(h_pred, ww);
    let wl = g.add_bias(wl, wb);
    let log_w = g.log_softmax_rows(wl);
    let mu = g.matmul(h_pred, mw);
    let mu = g.add_bias(mu, mb);
    let s_log = g.matmul(h_pred, sw);
    let s_log = g.add_bias(s_log, sb);

    // z = (ln tau - b) * exp(-log_a), expanded across components
    let ln_tau = g.input(Tensor::from_vec(
        &[n],
        gaps.iter().map(|&t| t.ln()).collect(),
    ));
    let neg_b = g.scale(b, -1.0);
    let centered = g.add_scalar(ln_tau, neg_b);
    let neg_log_a = g.scale(log_a, -1.0);
    let inv_a = g.exp(neg_log_a);
    let z = g.mul_scalar(centered, inv_a);
    let zc = g.expand_cols(z, c);

    let diff = g.sub(zc, mu);
    let diff2 = g.mul(diff, diff);
    let neg2s = g.scale(s_log, -2.0);
    let inv_var = g.exp(neg2s);
    let quad = g.mul(diff2, inv_var);
    let quad = g.scale(quad, 0.5);

    let t = g.sub(log_w, s_log);
    let t = g.sub(t, quad);
    let t = g.shift(t, -0.5 * LN_2PI);
    let lse = g.logsumexp_rows(t);

    // log p(tau) = lse - ln a - ln tau
    let with_a = g.add_scalar(lse, neg_log_a);
    let neg_ln_tau = g.input(Tensor::from_vec(
        &[n],
        gaps.iter().map(|&t| -t.ln()).collect(),
    ));
    let log_p = g.add(with_a, neg_ln_tau);
    Ok(g.scale(log_p, -1.0))
}

/// Graph node for the per-row log-probability of the true types, shape [n].
pub fn type_logprob_rows(
    g: &mut Graph,
    store: &ParamStore,
    h1_pred: NodeId,
    h2_pred: NodeId,
    types: &[usize],
) -> NodeId {
    let cat = g.concat_cols(&[h1_pred, h2_pred]);
    let w = g.param(store, "dec.type.w");
    let b = g.param(store, "dec.type.b");
    let logits = g.matmul(cat, w);
    let logits = g.add_bias(logits, b);
    let lp = g.log_softmax_rows(logits);
    g.gather_cols(lp, types)
}

/// Graph node for the weighted total loss from per-event mean losses.
pub fn total_loss_node(g: &mut Graph, store: &ParamStore, l1: NodeId, l2: NodeId) -> NodeId {
    let rho1 = g.param(store, "loss.rho1");
    let rho2 = g.param(store, "loss.rho2");
    let neg_r1 = g.scale(rho1, -1.0);
    let w1 = g.exp(neg_r1);
    let t1 = g.mul(w1, l1);
    let t1 = g.add(t1, rho1);
    let neg_r2 = g.scale(rho2, -1.0);
    let w2 = g.exp(neg_r2);
    let t2 = g.mul(w2, l2);
    let t2 = g.add(t2, rho2);
    g.add(t1, t2)
}
