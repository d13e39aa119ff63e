//! Event-sequence and dataset records, line-delimited JSON I/O, splitting and
//! covariate standardization.
//!
//! # File format
//!
//! One JSON object per line. The first line is a header:
//!
//! ```text
//! {"format":"covtpp.dataset.v1","k":2,"f":3,"ground_truth_importance":[...],"cov_mean":[...],"cov_std":[...]}
//! ```
//!
//! `ground_truth_importance`, `cov_mean` and `cov_std` are optional. Every
//! following line is one sequence:
//!
//! ```text
//! {"times":[1.0,2.5],"types":[0,1],"covariates":[[0.1],[0.2]],"split":"train","meta":"..."}
//! ```
//!
//! `split` and `meta` are optional. Times are strictly increasing and
//! non-negative; `types`, `times` and `covariates` share the leading length.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DATASET_FORMAT: &str = "covtpp.dataset.v1";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("malformed line {line}: {source}")]
    MalformedLine {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing header line (expected format `{DATASET_FORMAT}`)")]
    MissingHeader,
    #[error("invalid sequence at line {line}: {source}")]
    InvalidSequence {
        line: usize,
        #[source]
        source: SequenceError,
    },
    #[error("line {line}: covariate width {got} does not match header F={expected}")]
    InconsistentF { line: usize, expected: usize, got: usize },
    #[error("line {line}: type index {index} out of range for K={k}")]
    InconsistentK { line: usize, index: usize, k: usize },
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadSplitRatios([f64; 3]),
    #[error("need at least 3 sequences to split, got {0}")]
    TooFewSequences(usize),
    #[error("training split is empty")]
    EmptyTrainSplit,
}

#[derive(Debug, thiserror::Error)]
pub enum SequenceError {
    #[error("sequence must contain at least one event")]
    Empty,
    #[error("times must be strictly increasing (violated at event {0})")]
    NonIncreasingTimes(usize),
    #[error("times must be non-negative")]
    NegativeTime,
    #[error("times ({times}), types ({types}) and covariates ({covariates}) lengths differ")]
    LengthMismatch {
        times: usize,
        types: usize,
        covariates: usize,
    },
    #[error("covariate row {row} has width {got}, expected {expected}")]
    RaggedCovariates { row: usize, expected: usize, got: usize },
}

/// One realization: ordered (time, type, covariate) triplets.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSequence {
    times: Vec<f64>,
    types: Vec<usize>,
    covariates: Vec<Vec<f64>>,
    pub meta: Option<String>,
}

impl EventSequence {
    pub fn new(
        times: Vec<f64>,
        types: Vec<usize>,
        covariates: Vec<Vec<f64>>,
        meta: Option<String>,
    ) -> Result<Self, SequenceError> {
        if times.is_empty() {
            return Err(SequenceError::Empty);
        }
        if times.len() != types.len() || times.len() != covariates.len() {
            return Err(SequenceError::LengthMismatch {
                times: times.len(),
                types: types.len(),
                covariates: covariates.len(),
            });
        }
        if times[0] < 0.0 {
            return Err(SequenceError::NegativeTime);
        }
        for i in 1..times.len() {
            if times[i] <= times[i - 1] {
                return Err(SequenceError::NonIncreasingTimes(i));
            }
        }
        let width = covariates[0].len();
        for (row, c) in covariates.iter().enumerate() {
            if c.len() != width {
                return Err(SequenceError::RaggedCovariates {
                    row,
                    expected: width,
                    got: c.len(),
                });
            }
        }
        Ok(EventSequence {
            times,
            types,
            covariates,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn types(&self) -> &[usize] {
        &self.types
    }

    pub fn covariates(&self) -> &[Vec<f64>] {
        &self.covariates
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariates[0].len()
    }

    /// Inter-event gaps with the observation origin at time zero, so
    /// `gaps()[0] == times()[0]`.
    pub fn gaps(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.times.len());
        let mut prev = 0.0;
        for &t in &self.times {
            out.push(t - prev);
            prev = t;
        }
        out
    }

    fn map_covariates(&mut self, mut f: impl FnMut(usize, f64) -> f64) {
        for row in &mut self.covariates {
            for (j, v) in row.iter_mut().enumerate() {
                *v = f(j, *v);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train|val|test)")),
        }
    }
}

/// Per-feature training-split statistics used to scale covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Scale a fresh covariate row with the stored statistics.
    pub fn apply_row(&self, row: &mut [f64]) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - self.mean[j]) / self.std[j];
        }
    }

    pub fn apply_sequence(&self, seq: &mut EventSequence) {
        let mean = self.mean.clone();
        let std = self.std.clone();
        seq.map_covariates(|j, v| (v - mean[j]) / std[j]);
    }
}

/// A collection of sequences sharing the type count K and covariate
/// dimension F, with optional split assignment, standardization statistics
/// and (for synthetic data) ground-truth feature importance.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<EventSequence>,
    pub k: usize,
    pub f: usize,
    pub splits: Vec<Option<Split>>,
    pub standardization: Option<Standardization>,
    pub ground_truth_importance: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(sequences: Vec<EventSequence>, k: usize, f: usize) -> Self {
        for seq in &sequences {
            assert_eq!(seq.covariate_dim(), f, "covariate width mismatch");
            for &y in seq.types() {
                assert!(y < k, "type index {} out of range for K={}", y, k);
            }
        }
        let n = sequences.len();
        Dataset {
            sequences,
            k,
            f,
            splits: vec![None; n],
            standardization: None,
            ground_truth_importance: None,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sequences_in(&self, split: Split) -> impl Iterator<Item = &EventSequence> {
        self.splits
            .iter()
            .zip(&self.sequences)
            .filter(move |(s, _)| **s == Some(split))
            .map(|(_, seq)| seq)
    }

    pub fn total_events_in(&self, split: Split) -> usize {
        self.sequences_in(split).map(|s| s.len()).sum()
    }

    /// Zero the given covariate columns in every sequence. With standardized
    /// covariates, zero is the training-split feature mean.
    pub fn with_features_zeroed(&self, features: &[usize]) -> Dataset {
        let mut out = self.clone();
        for seq in &mut out.sequences {
            seq.map_covariates(|j, v| if features.contains(&j) { 0.0 } else { v });
        }
        out
    }
}

/// Deterministically assign each sequence to train/val/test. Validation and
/// test counts are floor-rounded; the remainder goes to the training split.
pub fn split_dataset(mut d: Dataset, ratios: [f64; 3], seed: u64) -> Result<Dataset, DataError> {
    if ratios.iter().any(|&r| r <= 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::BadSplitRatios(ratios));
    }
    let n = d.len();
    if n < 3 {
        return Err(DataError::TooFewSequences(n));
    }
    let n_val = (n as f64 * ratios[1]).floor() as usize;
    let n_test = (n as f64 * ratios[2]).floor() as usize;
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    for (pos, &ix) in order.iter().enumerate() {
        d.splits[ix] = Some(if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        });
    }
    Ok(d)
}

/// Compute per-feature mean and population standard deviation on the
/// training split and scale every split with those statistics. Features with
/// (numerically) zero variance keep std 1.
pub fn standardize_covariates(mut d: Dataset) -> Result<Dataset, DataError> {
    let f = d.f;
    let mut count = 0usize;
    let mut sum = vec![0.0; f];
    for seq in d.sequences_in(Split::Train) {
        for row in seq.covariates() {
            for j in 0..f {
                sum[j] += row[j];
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(DataError::EmptyTrainSplit);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; f];
    for seq in d.sequences_in(Split::Train) {
        for row in seq.covariates() {
            for j in 0..f {
                let c = row[j] - mean[j];
                sq[j] += c * c;
            }
        }
    }
    let std: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let sd = (s / count as f64).sqrt();
            if sd > 1e-12 * (1.0 + m.abs()) {
                sd
            } else {
                1.0
            }
        })
        .collect();

    let stats = Standardization { mean, std };
    for seq in &mut d.sequences {
        stats.apply_sequence(seq);
    }
    d.standardization = Some(stats);
    Ok(d)
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    format: String,
    k: usize,
    f: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    ground_truth_importance: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    cov_mean: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    cov_std: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SequenceLine {
    times: Vec<f64>,
    types: Vec<usize>,
    covariates: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    split: Option<Split>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    meta: Option<String>,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut header: Option<HeaderLine> = None;
    let mut sequences = Vec::new();
    let mut splits = Vec::new();
    for (ix, line) in reader.lines().enumerate() {
        let line_no = ix + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let h: HeaderLine =
                serde_json::from_str(&line).map_err(|source| DataError::MalformedLine {
                    line: line_no,
                    source,
                })?;
            if h.format != DATASET_FORMAT {
                return Err(DataError::MissingHeader);
            }
            header = Some(h);
            continue;
        }
        let h = header.as_ref().unwrap();
        let rec: SequenceLine =
            serde_json::from_str(&line).map_err(|source| DataError::MalformedLine {
                line: line_no,
                source,
            })?;
        let seq = EventSequence::new(rec.times, rec.types, rec.covariates, rec.meta)
            .map_err(|source| DataError::InvalidSequence {
                line: line_no,
                source,
            })?;
        if seq.covariate_dim() != h.f {
            return Err(DataError::InconsistentF {
                line: line_no,
                expected: h.f,
                got: seq.covariate_dim(),
            });
        }
        if let Some(&bad) = seq.types().iter().find(|&&y| y >= h.k) {
            return Err(DataError::InconsistentK {
                line: line_no,
                index: bad,
                k: h.k,
            });
        }
        sequences.push(seq);
        splits.push(rec.split);
    }

    let header = header.ok_or(DataError::EmptyDataset)?;
    if sequences.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let standardization = match (header.cov_mean, header.cov_std) {
        (Some(mean), Some(std)) => Some(Standardization { mean, std }),
        _ => None,
    };
    Ok(Dataset {
        sequences,
        k: header.k,
        f: header.f,
        splits,
        standardization,
        ground_truth_importance: header.ground_truth_importance,
    })
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };

    let header = HeaderLine {
        format: DATASET_FORMAT.to_string(),
        k: d.k,
        f: d.f,
        ground_truth_importance: d.ground_truth_importance.clone(),
        cov_mean: d.standardization.as_ref().map(|s| s.mean.clone()),
        cov_std: d.standardization.as_ref().map(|s| s.std.clone()),
    };
    serde_json::to_writer(&mut w, &header).expect("header serialization");
    w.write_all(b"\n").map_err(io_err)?;
    for (seq, split) in d.sequences.iter().zip(&d.splits) {
        let rec = SequenceLine {
            times: seq.times().to_vec(),
            types: seq.types().to_vec(),
            covariates: seq.covariates().to_vec(),
            split: *split,
            meta: seq.meta.clone(),
        };
        serde_json::to_writer(&mut w, &rec).expect("sequence serialization");
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
