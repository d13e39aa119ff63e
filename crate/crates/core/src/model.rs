//! Full model assembly and the prediction-time indexing convention.
//!
//! For a sequence of L events the model makes L predictions: position p
//! (0-based) predicts event p's inter-event gap and type. The hidden state
//! feeding position p is the encoder output for event p-1; position 0 uses a
//! learned initial state and a zero auxiliary row, so the first gap
//! (measured from the time origin) is modeled too. Causal masking in the
//! encoder plus this one-row shift keep every prediction a function of
//! strictly earlier events.
//!
//! Sequences may be padded to a common length: padded rows carry time 0,
//! type 0 and zero covariates, the attention mask hides padded keys, and the
//! loss mask zeroes padded positions, so padded and unpadded evaluations
//! agree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{EventSequence, Standardization};
use crate::decoder::{self, DecoderError};
use crate::encoder::{self, HyperParams};
use crate::graph::{Graph, NodeId, NumericsError};
use crate::importance;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
}

/// The covariate TPP model: configuration plus graph builders. Parameters
/// live in a [`ParamStore`] created by [`CovariateTpp::init_params`].
#[derive(Clone, Debug)]
pub struct CovariateTpp {
    pub hp: HyperParams,
}

/// One sequence prepared for the graph: optionally padded, with times
/// already rescaled for the temporal encoding.
#[derive(Clone, Debug)]
pub struct SeqInput {
    pub times_scaled: Vec<f64>,
    pub types: Vec<usize>,
    pub covariates: Tensor,
    /// Target inter-event gaps in raw time units; padded rows hold 1.0.
    pub gaps: Vec<f64>,
    pub valid: usize,
}

impl SeqInput {
    pub fn from_sequence(seq: &EventSequence, pad_to: usize, time_scale: f64) -> SeqInput {
        let l = seq.len();
        assert!(pad_to >= l);
        let f = seq.covariate_dim();
        let mut times_scaled: Vec<f64> = seq.times().iter().map(|&t| t * time_scale).collect();
        times_scaled.resize(pad_to, 0.0);
        let mut types = seq.types().to_vec();
        types.resize(pad_to, 0);
        let mut flat: Vec<f64> = seq.covariates().iter().flatten().copied().collect();
        flat.resize(pad_to * f, 0.0);
        let mut gaps = seq.gaps();
        gaps.resize(pad_to, 1.0);
        SeqInput {
            times_scaled,
            types,
            covariates: Tensor::from_vec(&[pad_to, f], flat),
            gaps,
            valid: l,
        }
    }

    pub fn padded_len(&self) -> usize {
        self.times_scaled.len()
    }
}

/// Graph handles for one sequence's forward pass.
pub struct SeqNodes {
    /// Hidden states feeding each prediction position, (Lp, M).
    pub h_pred: NodeId,
    /// Auxiliary states feeding each prediction position, (Lp, M).
    pub h2_pred: NodeId,
    /// Per-position time negative log-likelihood, [Lp].
    pub time_nll: NodeId,
    /// Per-position log-probability of the true type, [Lp].
    pub type_logprob: NodeId,
    /// Per-event feature-importance scores, (Lp, F).
    pub fi: NodeId,
}

/// Batch-level loss handles.
pub struct BatchNodes {
    pub total: NodeId,
    /// Mean time NLL per predicted event.
    pub time_mean: NodeId,
    /// Mean type NLL per predicted event.
    pub type_mean: NodeId,
    pub event_count: usize,
}

/// Per-position prediction versus truth.
#[derive(Clone, Debug)]
pub struct PositionPrediction {
    pub expected_gap: f64,
    pub true_gap: f64,
    pub predicted_type: usize,
    pub true_type: usize,
    pub time_log_likelihood: f64,
    pub type_log_likelihood: f64,
}

/// A parameter store with everything needed to run it on new data.
pub struct TrainedModel {
    pub hp: HyperParams,
    pub store: ParamStore,
    pub time_scale: f64,
    pub standardization: Option<Standardization>,
}

impl CovariateTpp {
    pub fn new(hp: HyperParams) -> Self {
        hp.validate().expect("invalid hyperparameters");
        CovariateTpp { hp }
    }

    /// Fresh parameters. `affine` is the (mean, std) of log training gaps
    /// used to initialize the decoder's global transform.
    pub fn init_params(&self, seed: u64, affine: Option<(f64, f64)>) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        encoder::init_params(&mut store, &self.hp, &mut rng);
        importance::init_params(&mut store, &self.hp, &mut rng);
        decoder::init_params(&mut store, &self.hp, affine, &mut rng);
        store.insert_zeros("model.h0", &[self.hp.embed_dim]);
        store.insert_scalar("loss.rho1", 0.0);
        store.insert_scalar("loss.rho2", 0.0);
        store
    }

    /// Forward pass for one (possibly padded) sequence.
    pub fn sequence_nodes(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &SeqInput,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<SeqNodes, ModelError> {
        let hp = &self.hp;
        let lp = input.padded_len();
        let mask = encoder::causal_key_mask(lp, input.valid);
        let mut h1 = encoder::encode(
            g,
            store,
            hp,
            &input.times_scaled,
            &input.types,
            input.covariates.clone(),
            &mask,
        )?;
        let cov = g.input(input.covariates.clone());
        let (fi, mut h2) = importance::importance_nodes(g, store, hp, cov)?;

        if let Some(rng) = dropout_rng {
            if hp.dropout > 0.0 {
                h1 = apply_dropout(g, h1, hp.dropout, rng);
                h2 = apply_dropout(g, h2, hp.dropout, rng);
            }
        }

        let h0 = g.param(store, "model.h0");
        let h_pred = g.shift_rows(h1, lp, h0);
        let zero_row = g.input(Tensor::zeros(&[hp.embed_dim]));
        let h2_pred = g.shift_rows(h2, lp, zero_row);

        let time_nll = decoder::mixture_nll_rows(g, store, hp, h_pred, &input.gaps)?;
        let type_logprob = decoder::type_logprob_rows(g, store, h_pred, h2_pred, &input.types);
        Ok(SeqNodes {
            h_pred,
            h2_pred,
            time_nll,
            type_logprob,
            fi,
        })
    }

    /// Pooled uncertainty-weighted loss over a batch of sequences. The two
    /// component losses are per-event means over all unpadded positions.
    pub fn batch_loss_nodes(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &[SeqInput],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<BatchNodes, ModelError> {
        assert!(!inputs.is_empty());
        let mut time_total: Option<NodeId> = None;
        let mut type_total: Option<NodeId> = None;
        let mut count = 0usize;
        for input in inputs {
            let nodes = self.sequence_nodes(g, store, input, dropout_rng.as_deref_mut())?;
            let lp = input.padded_len();
            let mut mask = vec![0.0; lp];
            mask[..input.valid].fill(1.0);
            let mask = g.input(Tensor::from_vec(&[lp], mask));
            let masked_time = g.mul(nodes.time_nll, mask);
            let t_sum = g.sum(masked_time);
            let masked_type = g.mul(nodes.type_logprob, mask);
            let y_sum = g.sum(masked_type);
            time_total = Some(match time_total {
                Some(acc) => g.add(acc, t_sum),
                None => t_sum,
            });
            type_total = Some(match type_total {
                Some(acc) => g.add(acc, y_sum),
                None => y_sum,
            });
            count += input.valid;
        }
        let time_mean = g.scale(time_total.unwrap(), 1.0 / count as f64);
        let type_mean = g.scale(type_total.unwrap(), -1.0 / count as f64);
        let total = decoder::total_loss_node(g, store, time_mean, type_mean);
        Ok(BatchNodes {
            total,
            time_mean,
            type_mean,
            event_count: count,
        })
    }

    /// Run one sequence and read off every position's prediction.
    pub fn eval_sequence(
        &self,
        store: &ParamStore,
        seq: &EventSequence,
        time_scale: f64,
    ) -> Result<Vec<PositionPrediction>, ModelError> {
        let input = SeqInput::from_sequence(seq, seq.len(), time_scale);
        let mut g = Graph::new();
        let nodes = self.sequence_nodes(&mut g, store, &input, None)?;
        let h_pred = g.value(nodes.h_pred).clone();
        let h2_pred = g.value(nodes.h2_pred).clone();
        let time_nll = g.value(nodes.time_nll).clone();
        let type_lp = g.value(nodes.type_logprob).clone();

        let mut out = Vec::with_capacity(seq.len());
        for p in 0..seq.len() {
            let mp = decoder::mixture_params(h_pred.row(p), store, &self.hp);
            let probs = decoder::type_head(h_pred.row(p), h2_pred.row(p), store);
            let predicted_type = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(ix, _)| ix)
                .unwrap();
            out.push(PositionPrediction {
                expected_gap: decoder::expected_time(&mp),
                true_gap: input.gaps[p],
                predicted_type,
                true_type: seq.types()[p],
                time_log_likelihood: -time_nll.data()[p],
                type_log_likelihood: type_lp.data()[p],
            });
        }
        Ok(out)
    }
}

fn apply_dropout(g: &mut Graph, x: NodeId, p: f64, rng: &mut ChaCha8Rng) -> NodeId {
    let shape = g.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - p);
    let mask = Tensor::from_fn(&shape, |_| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    });
    let mask = g.input(mask);
    g.mul(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_check, relu_kink_margin};
    use crate::graph::forward_value;

    fn tiny_model() -> CovariateTpp {
        CovariateTpp::new(HyperParams::tiny())
    }

    fn random_sequence(l: usize, f: usize, seed: u64) -> EventSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = 0.0;
        let mut times = Vec::with_capacity(l);
        for _ in 0..l {
            t += rng.random_range(0.2..1.5);
            times.push(t);
        }
        let types: Vec<usize> = (0..l).map(|_| rng.random_range(0..2)).collect();
        let covs: Vec<Vec<f64>> = (0..l)
            .map(|_| (0..f).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        EventSequence::new(times, types, covs, None).unwrap()
    }

    #[test]
    fn causality_perturbing_a_late_event_leaves_earlier_rows_unchanged() {
        let model = tiny_model();
        let store = model.init_params(0, None);
        let seq = random_sequence(6, 3, 1);
        let input = SeqInput::from_sequence(&seq, 6, 1.0);

        let mut bumped = input.clone();
        let j = 4usize;
        let f = model.hp.covariate_dim;
        bumped.covariates.data_mut()[j * f] += 0.5;
        // the temporal side too: nudge event j's timestamp
        bumped.times_scaled[j] += 0.01;

        let run = |input: &SeqInput| {
            let mut g = Graph::new();
            let nodes = model.sequence_nodes(&mut g, &store, input, None).unwrap();
            (
                g.value(nodes.h_pred).clone(),
                g.value(nodes.time_nll).clone(),
                g.value(nodes.type_logprob).clone(),
            )
        };
        let (h_a, t_a, y_a) = run(&input);
        let (h_b, t_b, y_b) = run(&bumped);
        // h_pred row p depends on events < p, so rows 0..=j are untouched
        for p in 0..=j {
            assert_eq!(h_a.row(p), h_b.row(p), "h_pred row {p} changed");
            assert_eq!(t_a.data()[p], t_b.data()[p], "time nll row {p} changed");
            assert_eq!(y_a.data()[p], y_b.data()[p], "type logprob row {p} changed");
        }
        assert_ne!(h_a.row(j + 1), h_b.row(j + 1));
    }

    #[test]
    fn plain_feedforward_mode_is_still_causal() {
        // residual connections and layer normalization switched off
        let mut hp = HyperParams::tiny();
        hp.residual_layer_norm = false;
        let model = CovariateTpp::new(hp);
        let store = model.init_params(1, None);
        let seq = random_sequence(5, 3, 2);
        let input = SeqInput::from_sequence(&seq, 5, 1.0);
        let mut bumped = input.clone();
        bumped.covariates.data_mut()[3 * model.hp.covariate_dim] += 0.4;

        let run = |input: &SeqInput| {
            let mut g = Graph::new();
            let nodes = model.sequence_nodes(&mut g, &store, input, None).unwrap();
            g.value(nodes.h_pred).clone()
        };
        let a = run(&input);
        let b = run(&bumped);
        for p in 0..=3 {
            assert_eq!(a.row(p), b.row(p));
        }
        assert_ne!(a.row(4), b.row(4));
    }

    #[test]
    fn swapping_two_distinct_events_changes_the_encoding() {
        let model = tiny_model();
        let store = model.init_params(3, None);
        let seq = random_sequence(5, 3, 4);
        let input = SeqInput::from_sequence(&seq, 5, 1.0);
        let mut swapped = input.clone();
        swapped.types.swap(1, 3);
        let f = model.hp.covariate_dim;
        for j in 0..f {
            let a = swapped.covariates.at(1, j);
            let b = swapped.covariates.at(3, j);
            swapped.covariates.set(1, j, b);
            swapped.covariates.set(3, j, a);
        }
        let run = |input: &SeqInput| {
            let mut g = Graph::new();
            let nodes = model.sequence_nodes(&mut g, &store, input, None).unwrap();
            g.value(nodes.h_pred).clone()
        };
        assert_ne!(run(&input).data(), run(&swapped).data());
    }

    #[test]
    fn padded_loss_matches_unpadded_loss() {
        let model = tiny_model();
        let store = model.init_params(5, None);
        let seqs: Vec<EventSequence> = (0..3).map(|i| random_sequence(3 + i, 3, 10 + i as u64)).collect();

        // sequence-by-sequence, no padding
        let mut per_seq_time = 0.0;
        let mut per_seq_type = 0.0;
        let mut count = 0usize;
        for seq in &seqs {
            let input = SeqInput::from_sequence(seq, seq.len(), 1.0);
            let mut g = Graph::new();
            let nodes = model.sequence_nodes(&mut g, &store, &input, None).unwrap();
            per_seq_time += g.value(nodes.time_nll).data().iter().sum::<f64>();
            per_seq_type += g.value(nodes.type_logprob).data().iter().sum::<f64>();
            count += seq.len();
        }
        let l1 = per_seq_time / count as f64;
        let l2 = -per_seq_type / count as f64;
        let expect = decoder::total_loss(
            l1,
            l2,
            (
                store.value("loss.rho1").item(),
                store.value("loss.rho2").item(),
            ),
        );

        // padded batch: every sequence stretched to a common length
        let pad_to = seqs.iter().map(|s| s.len()).max().unwrap() + 3;
        let inputs: Vec<SeqInput> = seqs
            .iter()
            .map(|s| SeqInput::from_sequence(s, pad_to, 1.0))
            .collect();
        let padded = forward_value(&store, |g, s| {
            let batch = model
                .batch_loss_nodes(g, s, &inputs, None)
                .map_err(|e| match e {
                    ModelError::Numerics(n) => n,
                    ModelError::Decoder(_) => NumericsError::NonFinite { op: "tau" },
                })?;
            Ok(batch.total)
        })
        .unwrap();
        assert!(
            (padded - expect).abs() < 1e-10,
            "padded {padded} vs unpadded {expect}"
        );
    }

    #[test]
    fn full_model_gradient_check_small() {
        let model = tiny_model();
        let seqs = [random_sequence(4, 3, 21), random_sequence(3, 3, 22)];
        let inputs: Vec<SeqInput> = seqs
            .iter()
            .map(|s| SeqInput::from_sequence(s, s.len(), 1.0))
            .collect();
        let build = |g: &mut Graph, s: &ParamStore| {
            let batch = model
                .batch_loss_nodes(g, s, &inputs, None)
                .map_err(|e| match e {
                    ModelError::Numerics(n) => n,
                    ModelError::Decoder(_) => NumericsError::NonFinite { op: "tau" },
                })?;
            Ok(batch.total)
        };
        // find a seed whose ReLU pre-activations stay clear of the kink
        let mut store = None;
        for seed in 0..20u64 {
            let cand = model.init_params(seed, None);
            if relu_kink_margin(&cand, build).unwrap() > 1e-6 {
                store = Some(cand);
                break;
            }
        }
        let mut store = store.expect("no kink-free seed found");
        let err = finite_difference_check(&mut store, 1e-4, 3, 13, build).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn dropout_zero_is_identity_and_positive_dropout_changes_values() {
        let mut hp = HyperParams::tiny();
        hp.dropout = 0.5;
        let model = CovariateTpp::new(hp);
        let store = model.init_params(0, None);
        let seq = random_sequence(4, 3, 30);
        let input = SeqInput::from_sequence(&seq, 4, 1.0);

        let mut g = Graph::new();
        let plain = model.sequence_nodes(&mut g, &store, &input, None).unwrap();
        let plain_nll = g.value(plain.time_nll).clone();

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g2 = Graph::new();
        let dropped = model
            .sequence_nodes(&mut g2, &store, &input, Some(&mut rng))
            .unwrap();
        assert_ne!(plain_nll.data(), g2.value(dropped.time_nll).data());
    }
}
