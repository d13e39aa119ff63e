//! Per-covariate attention that yields feature-importance scores and an
//! auxiliary per-event representation.
//!
//! Each head applies a softmax-activated dense layer to the covariate vector;
//! the softmax output is the head's importance score over features and is
//! Hadamard-multiplied with the covariates. Head averages give the per-event
//! importance `fi` (a point on the simplex) and the weighted covariates
//! `omega = x .* fi`. The auxiliary representation runs `omega` through a
//! ReLU dense layer of width `aux_dim` and a linear layer up to the embedding
//! width; it never mixes information across events.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::data::{Dataset, Split};
use crate::encoder::HyperParams;
use crate::graph::{Graph, NodeId, NumericsError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ImportanceError {
    #[error("split {0} is empty")]
    EmptySplit(Split),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed importance report line {0}")]
    MalformedReport(usize),
}

pub fn init_params(store: &mut ParamStore, hp: &HyperParams, rng: &mut impl Rng) {
    let f = hp.covariate_dim;
    for h in 0..hp.importance_heads {
        store.insert_weight(&format!("imp.h{h}.w"), f, f, rng);
        store.insert_zeros(&format!("imp.h{h}.b"), &[f]);
    }
    store.insert_weight("imp.aux.w", f, hp.aux_dim(), rng);
    store.insert_zeros("imp.aux.b", &[hp.aux_dim()]);
    store.insert_weight("imp.out.w", hp.aux_dim(), hp.embed_dim, rng);
    store.insert_zeros("imp.out.b", &[hp.embed_dim]);
}

/// Importance scores and auxiliary representation for a block of covariate
/// rows: returns `(fi, h2)` with shapes (L, F) and (L, M).
pub fn importance_nodes(
    g: &mut Graph,
    store: &ParamStore,
    hp: &HyperParams,
    covariates: NodeId,
) -> Result<(NodeId, NodeId), NumericsError> {
    let (rows, f) = g.value(covariates).dims2();
    assert_eq!(f, hp.covariate_dim);
    let all = vec![true; rows * f];

    let mut head_sum: Option<NodeId> = None;
    for h in 0..hp.importance_heads {
        let w = g.param(store, &format!("imp.h{h}.w"));
        let b = g.param(store, &format!("imp.h{h}.b"));
        let logits = g.matmul(covariates, w);
        let logits = g.add_bias(logits, b);
        let scores = g.masked_softmax(logits, &all)?;
        head_sum = Some(match head_sum {
            Some(acc) => g.add(acc, scores),
            None => scores,
        });
    }
    let fi = g.scale(head_sum.unwrap(), 1.0 / hp.importance_heads as f64);
    let omega = g.mul(covariates, fi);

    let aw = g.param(store, "imp.aux.w");
    let ab = g.param(store, "imp.aux.b");
    let ow = g.param(store, "imp.out.w");
    let ob = g.param(store, "imp.out.b");
    let hidden = g.matmul(omega, aw);
    let hidden = g.add_bias(hidden, ab);
    let hidden = g.relu(hidden);
    let h2 = g.matmul(hidden, ow);
    let h2 = g.add_bias(h2, ob);
    Ok((fi, h2))
}

/// Head-averaged scores for a single covariate vector: `(omega, fi)`.
pub fn attend(
    x: &[f64],
    store: &ParamStore,
    hp: &HyperParams,
) -> Result<(Vec<f64>, Vec<f64>), NumericsError> {
    let mut g = Graph::new();
    let cov = g.input(Tensor::from_vec(&[1, x.len()], x.to_vec()));
    let (fi, _) = importance_nodes(&mut g, store, hp, cov)?;
    let fi_row = g.value(fi).row(0).to_vec();
    let omega: Vec<f64> = x.iter().zip(&fi_row).map(|(a, b)| a * b).collect();
    Ok((omega, fi_row))
}

/// Per-sequence and corpus-level importance over a dataset split.
#[derive(Clone, Debug)]
pub struct ImportanceReport {
    /// One (L, F) matrix of per-event scores per sequence of the split.
    pub per_event: Vec<Tensor>,
    /// Event-averaged scores per sequence.
    pub sequence_level: Vec<Vec<f64>>,
    /// Scores averaged over every event of the split.
    pub corpus_level: Vec<f64>,
}

impl ImportanceReport {
    /// Feature indices sorted by corpus-level score, most important first.
    /// Ties break toward the lower index for determinism.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.corpus_level.len()).collect();
        order.sort_by(|&a, &b| {
            self.corpus_level[b]
                .total_cmp(&self.corpus_level[a])
                .then(a.cmp(&b))
        });
        order
    }
}

/// Mean importance over every event of every sequence in the split.
pub fn compute_importance(
    dataset: &Dataset,
    split: Split,
    store: &ParamStore,
    hp: &HyperParams,
) -> Result<ImportanceReport, ImportanceError> {
    let f = hp.covariate_dim;
    let mut per_event = Vec::new();
    let mut sequence_level = Vec::new();
    let mut corpus = vec![0.0; f];
    let mut total_events = 0usize;
    for seq in dataset.sequences_in(split) {
        let l = seq.len();
        let flat: Vec<f64> = seq.covariates().iter().flatten().copied().collect();
        let mut g = Graph::new();
        let cov = g.input(Tensor::from_vec(&[l, f], flat));
        let (fi, _) = importance_nodes(&mut g, store, hp, cov)?;
        let fi_val = g.value(fi).clone();
        let mut seq_mean = vec![0.0; f];
        for r in 0..l {
            for j in 0..f {
                seq_mean[j] += fi_val.at(r, j);
                corpus[j] += fi_val.at(r, j);
            }
        }
        for v in &mut seq_mean {
            *v /= l as f64;
        }
        total_events += l;
        per_event.push(fi_val);
        sequence_level.push(seq_mean);
    }
    if total_events == 0 {
        return Err(ImportanceError::EmptySplit(split));
    }
    for v in &mut corpus {
        *v /= total_events as f64;
    }
    Ok(ImportanceReport {
        per_event,
        sequence_level,
        corpus_level: corpus,
    })
}

/// Write the corpus-level scores as a tab-separated table sorted by
/// descending score: rank, feature index, feature name, score.
pub fn save_report(
    report: &ImportanceReport,
    feature_names: Option<&[String]>,
    path: impl AsRef<Path>,
) -> Result<(), ImportanceError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|source| ImportanceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    let io_err = |source| ImportanceError::Io {
        path: path.display().to_string(),
        source,
    };
    writeln!(w, "rank\tfeature\tname\tscore").map_err(io_err)?;
    for (rank, &ix) in report.ranking().iter().enumerate() {
        let name = feature_names
            .and_then(|ns| ns.get(ix).cloned())
            .unwrap_or_else(|| format!("x{ix}"));
        writeln!(w, "{}\t{}\t{}\t{:.12}", rank, ix, name, report.corpus_level[ix])
            .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Read the feature ranking back from a saved report.
pub fn load_ranking(path: impl AsRef<Path>) -> Result<Vec<usize>, ImportanceError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ImportanceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (ix, line) in text.lines().enumerate() {
        if ix == 0 || line.trim().is_empty() {
            continue;
        }
        let feature = line
            .split('\t')
            .nth(1)
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or(ImportanceError::MalformedReport(ix + 1))?;
        out.push(feature);
    }
    Ok(out)
}
