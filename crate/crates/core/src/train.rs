//! Mini-batch training with adaptive moment estimation, evaluation over a
//! split, and the cumulative feature-ablation study.
//!
//! Training is deterministic for a fixed seed on one worker: batch order,
//! parameter initialization and dropout masks all derive from the config
//! seed, and the optimizer sweeps parameters in insertion order. Validation
//! uses the unweighted joint NLL per event; the best-validation parameters
//! are retained.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{standardize_covariates, DataError, Dataset, Split};
use crate::encoder::HyperParams;
use crate::graph::{forward_backward, NumericsError};
use crate::metrics::{accuracy, classification_scores, f1_weighted, rmse, Metrics};
use crate::model::{CovariateTpp, ModelError, SeqInput, TrainedModel};
use crate::params::ParamStore;
use crate::sim::derive_rng;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("split {0} is empty")]
    EmptySplit(Split),
    #[error("sequence has a non-positive first gap; times must start after 0")]
    NonPositiveGap,
    #[error("invalid hyperparameters: {0}")]
    BadHyperParams(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    200
}
fn default_patience() -> usize {
    10
}
fn default_clip() -> f64 {
    5.0
}
fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Global gradient-norm clip.
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            max_epochs: default_epochs(),
            patience: default_patience(),
            grad_clip: default_clip(),
            seed: default_seed(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0)
            || self.batch_size == 0
            || self.max_epochs == 0
            || self.patience == 0
            || !(self.grad_clip > 0.0)
        {
            return Err(TrainError::BadHyperParams(
                "train config fields must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store.iter().map(|(_, v, _)| Tensor::zeros(v.shape())).collect();
        let v = store.iter().map(|(_, val, _)| Tensor::zeros(val.shape())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    fn step(&mut self, store: &mut ParamStore, clip: f64) {
        let norm = store.grad_norm();
        let scale = if norm > clip { clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (ix, (_, value, grad)) in store.iter_mut().enumerate() {
            let m = &mut self.m[ix];
            let v = &mut self.v[ix];
            for j in 0..value.numel() {
                let g = grad.data()[j] * scale;
                let mj = self.beta1 * m.data()[j] + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v.data()[j] + (1.0 - self.beta2) * g * g;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let update = self.lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                value.data_mut()[j] -= update;
            }
        }
    }
}

/// Mean and standard deviation of log gaps over the training split, for the
/// decoder's affine initialization.
fn log_gap_moments(dataset: &Dataset) -> Result<(f64, f64), TrainError> {
    let mut logs = Vec::new();
    for seq in dataset.sequences_in(Split::Train) {
        for gap in seq.gaps() {
            if gap <= 0.0 {
                return Err(TrainError::NonPositiveGap);
            }
            logs.push(gap.ln());
        }
    }
    if logs.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let var = logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / logs.len() as f64;
    Ok((mean, var.sqrt()))
}

fn mean_gap(dataset: &Dataset) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in dataset.sequences_in(Split::Train) {
        for gap in seq.gaps() {
            total += gap;
            count += 1;
        }
    }
    total / count.max(1) as f64
}

/// Validation pass: (joint NLL per event, accuracy).
fn validation_metrics(
    model: &CovariateTpp,
    store: &ParamStore,
    dataset: &Dataset,
    time_scale: f64,
) -> Result<(f64, f64), TrainError> {
    let mut nll_sum = 0.0;
    let mut hits = 0usize;
    let mut count = 0usize;
    for seq in dataset.sequences_in(Split::Val) {
        for p in model.eval_sequence(store, seq, time_scale)? {
            nll_sum += -(p.time_log_likelihood + p.type_log_likelihood);
            hits += usize::from(p.predicted_type == p.true_type);
            count += 1;
        }
    }
    if count == 0 {
        return Err(TrainError::EmptySplit(Split::Val));
    }
    Ok((nll_sum / count as f64, hits as f64 / count as f64))
}

/// Train on the given dataset (split required; covariates are standardized
/// here if they are not already). Returns the best-validation model and the
/// per-epoch log.
pub fn train(
    dataset: &Dataset,
    hp: &HyperParams,
    tc: &TrainConfig,
) -> Result<(TrainedModel, Vec<EpochLog>), TrainError> {
    tc.validate()?;
    let mut dataset = dataset.clone();
    if dataset.standardization.is_none() {
        dataset = standardize_covariates(dataset)?;
    }
    let mut hp = hp.clone();
    hp.type_count = dataset.k;
    hp.covariate_dim = dataset.f;
    hp.validate().map_err(TrainError::BadHyperParams)?;
    let model = CovariateTpp::new(hp.clone());

    let train_ix = dataset.indices_in(Split::Train);
    if train_ix.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if dataset.indices_in(Split::Val).is_empty() {
        return Err(TrainError::EmptySplit(Split::Val));
    }

    let time_scale = if hp.rescale_times {
        1.0 / mean_gap(&dataset)
    } else {
        1.0
    };
    let affine = log_gap_moments(&dataset)?;
    let mut store = model.init_params(tc.seed, Some(affine));
    let mut adam = Adam::new(&store, tc.learning_rate);

    let mut logs = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_snapshot = store.snapshot();
    let mut since_best = 0usize;

    for epoch in 0..tc.max_epochs {
        let mut order = train_ix.clone();
        let mut shuffle_rng = derive_rng(tc.seed, epoch as u64, 0xba7c);
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng = derive_rng(tc.seed, epoch as u64, 0xd409);

        let mut loss_sum = 0.0;
        let mut event_sum = 0usize;
        for (batch_ix, chunk) in order.chunks(tc.batch_size).enumerate() {
            let inputs: Vec<SeqInput> = chunk
                .iter()
                .map(|&i| {
                    let seq = &dataset.sequences[i];
                    SeqInput::from_sequence(seq, seq.len(), time_scale)
                })
                .collect();
            if inputs.iter().any(|i| i.gaps[..i.valid].iter().any(|&g| g <= 0.0)) {
                return Err(TrainError::NonPositiveGap);
            }
            let use_dropout = hp.dropout > 0.0;
            let batch_events: usize = inputs.iter().map(|i| i.valid).sum();
            let result = forward_backward(&mut store, |g, s| {
                let rng = if use_dropout { Some(&mut dropout_rng) } else { None };
                let batch = model.batch_loss_nodes(g, s, &inputs, rng).map_err(|e| match e {
                    ModelError::Numerics(n) => n,
                    ModelError::Decoder(_) => NumericsError::NonFinite { op: "tau" },
                })?;
                Ok(batch.total)
            });
            let loss = match result {
                Ok(l) if l.is_finite() => l,
                _ => return Err(TrainError::Diverged { epoch, batch: batch_ix }),
            };
            adam.step(&mut store, tc.grad_clip);
            loss_sum += loss * batch_events as f64;
            event_sum += batch_events;
        }

        let (val_loss, val_accuracy) = validation_metrics(&model, &store, &dataset, time_scale)?;
        logs.push(EpochLog {
            epoch,
            train_loss: loss_sum / event_sum as f64,
            val_loss,
            val_accuracy,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_snapshot = store.snapshot();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                break;
            }
        }
    }

    store.restore(&best_snapshot);
    Ok((
        TrainedModel {
            hp,
            store,
            time_scale,
            standardization: dataset.standardization.clone(),
        },
        logs,
    ))
}

/// Metrics over one split. If the dataset is raw and the model carries
/// standardization statistics, those statistics are applied first.
pub fn evaluate(
    model: &TrainedModel,
    dataset: &Dataset,
    split: Split,
) -> Result<Metrics, TrainError> {
    let mut dataset = dataset.clone();
    if dataset.standardization.is_none() {
        if let Some(stats) = &model.standardization {
            for seq in &mut dataset.sequences {
                stats.apply_sequence(seq);
            }
            dataset.standardization = Some(stats.clone());
        }
    }
    let tpp = CovariateTpp::new(model.hp.clone());

    let mut time_ll = 0.0;
    let mut joint_ll = 0.0;
    let mut truth_gaps = Vec::new();
    let mut pred_gaps = Vec::new();
    let mut truth_types = Vec::new();
    let mut pred_types = Vec::new();
    for seq in dataset.sequences_in(split) {
        for p in tpp.eval_sequence(&model.store, seq, model.time_scale)? {
            time_ll += p.time_log_likelihood;
            joint_ll += p.time_log_likelihood + p.type_log_likelihood;
            truth_gaps.push(p.true_gap);
            pred_gaps.push(p.expected_gap);
            truth_types.push(p.true_type);
            pred_types.push(p.predicted_type);
        }
    }
    let n = truth_gaps.len();
    if n == 0 {
        return Err(TrainError::EmptySplit(split));
    }
    Ok(Metrics {
        time_ll_per_event: time_ll / n as f64,
        joint_ll_per_event: joint_ll / n as f64,
        rmse: rmse(&truth_gaps, &pred_gaps),
        accuracy: accuracy(&truth_types, &pred_types),
        f1_weighted: f1_weighted(&truth_types, &pred_types, model.hp.type_count),
        per_class: classification_scores(&truth_types, &pred_types, model.hp.type_count),
        event_count: n,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationPoint {
    /// Number of top-ranked features removed.
    pub k: usize,
    /// The feature removed at this step (none for k = 0).
    pub removed: Option<usize>,
    pub test_accuracy: f64,
}

/// Cumulative ablation: for k = 0..=F zero out the top-k features of the
/// ranking in every split, retrain from scratch with a k-indexed seed, and
/// record test accuracy.
pub fn ablation_study(
    dataset: &Dataset,
    hp: &HyperParams,
    tc: &TrainConfig,
    ranking: &[usize],
) -> Result<Vec<AblationPoint>, TrainError> {
    ablation_study_with_threads(dataset, hp, tc, ranking, 1)
}

/// Ablation points are independent trainings; they may run on separate
/// workers without changing any result.
pub fn ablation_study_with_threads(
    dataset: &Dataset,
    hp: &HyperParams,
    tc: &TrainConfig,
    ranking: &[usize],
    threads: usize,
) -> Result<Vec<AblationPoint>, TrainError> {
    let f = dataset.f;
    assert_eq!(ranking.len(), f, "ranking must be a permutation of 0..F");
    let mut seen = vec![false; f];
    for &r in ranking {
        assert!(r < f && !seen[r], "ranking must be a permutation of 0..F");
        seen[r] = true;
    }
    let mut dataset = dataset.clone();
    if dataset.standardization.is_none() {
        dataset = standardize_covariates(dataset)?;
    }

    let run_point = |k: usize| -> Result<AblationPoint, TrainError> {
        let zeroed = dataset.with_features_zeroed(&ranking[..k]);
        let mut tck = tc.clone();
        tck.seed = tc.seed.wrapping_add(k as u64);
        let (model, _) = train(&zeroed, hp, &tck)?;
        let metrics = evaluate(&model, &zeroed, Split::Test)?;
        Ok(AblationPoint {
            k,
            removed: if k == 0 { None } else { Some(ranking[k - 1]) },
            test_accuracy: metrics.accuracy,
        })
    };

    let threads = threads.max(1).min(f + 1);
    if threads == 1 {
        (0..=f).map(run_point).collect()
    } else {
        let ks: Vec<usize> = (0..=f).collect();
        let chunk = ks.len().div_ceil(threads);
        let results: Vec<Vec<Result<AblationPoint, TrainError>>> = std::thread::scope(|scope| {
            ks.chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|&k| run_point(k)).collect()))
                .collect::<Vec<_>>()
                .into_iter()
                .map(|h| h.join().unwrap())
                .collect()
        });
        results.into_iter().flatten().collect()
    }
}

pub fn write_train_log(logs: &[EpochLog], path: impl AsRef<Path>) -> Result<(), TrainError> {
    let path = path.as_ref();
    let io_err = |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err)?);
    writeln!(w, "epoch\ttrain_loss\tval_loss\tval_accuracy").map_err(io_err)?;
    for log in logs {
        writeln!(
            w,
            "{}\t{:.12}\t{:.12}\t{:.12}",
            log.epoch, log.train_loss, log.val_loss, log.val_accuracy
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn write_metrics(metrics: &Metrics, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(metrics).expect("metrics serialize");
    fs::write(path, text).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_ablation_table(
    points: &[AblationPoint],
    path: impl AsRef<Path>,
) -> Result<(), TrainError> {
    let path = path.as_ref();
    let io_err = |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err)?);
    writeln!(w, "k\tremoved_feature\ttest_accuracy").map_err(io_err)?;
    for p in points {
        let removed = p
            .removed
            .map(|r| r.to_string())
            .unwrap_or_else(|| "-".to_string());
        writeln!(w, "{}\t{}\t{:.12}", p.k, removed, p.test_accuracy).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
