//! Synthetic covariate temporal point processes via thinning.
//!
//! Two generators share one event loop:
//!
//! * covariate-modulated Poisson: `lambda(t) = w_t . x_n`
//! * covariate-modulated Hawkes: `lambda(t) = w_t . x_n + sum_{t_i < t} alpha exp(-beta (t - t_i))`
//!
//! where `x_n` is the most recent covariate draw. A fresh covariate vector is
//! drawn at time zero and again at every accepted event, and held constant
//! until the next event. Event types are binary: event n+1 gets type 1 when
//! the logit `w_c . x_n + (1/n) sum_i w_h * tau_i` exceeds the threshold
//! `zeta` (type 0 on ties), so `w_c` is the ground-truth feature relevance.
//!
//! Thinning draws candidates from a homogeneous Poisson stream at a
//! dominating rate and accepts each candidate at `t` with probability
//! `lambda(t) / bound`. The bound is recomputed after every accepted event as
//! the decayed excitation plus the maximum of the covariate term over the
//! sampler's support, which dominates because the exponential kernel only
//! decays between events.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split_dataset, Dataset, EventSequence};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid bound: upper bound {bound} is not positive while intensity {intensity} is")]
    InvalidBound { bound: f64, intensity: f64 },
    #[error("invalid simulator configuration: {0}")]
    BadConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessKind {
    Poisson,
    Hawkes,
}

/// Per-feature uniform covariate sampler on `[low_j, high_j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateSampler {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl CovariateSampler {
    pub fn uniform(f: usize, low: f64, high: f64) -> Self {
        CovariateSampler {
            low: vec![low; f],
            high: vec![high; f],
        }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(&lo, &hi)| {
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    // degenerate feature: constant, but still consume one draw
                    // so processes with equal seeds stay aligned
                    let _ = rng.random::<f64>();
                    lo
                }
            })
            .collect()
    }

    /// Maximum of `w . x` over the support.
    pub fn max_dot(&self, w: &[f64]) -> f64 {
        w.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(&wj, (&lo, &hi))| (wj * lo).max(wj * hi))
            .sum()
    }

    /// Minimum of `w . x` over the support.
    pub fn min_dot(&self, w: &[f64]) -> f64 {
        w.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(&wj, (&lo, &hi))| (wj * lo).min(wj * hi))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub kind: ProcessKind,
    /// Observation horizon; events live on (0, horizon].
    pub horizon: f64,
    pub features: usize,
    pub sampler: CovariateSampler,
    /// Baseline weights: intensity contribution is `time_weight . x`.
    pub time_weight: Vec<f64>,
    /// Hawkes excitation jump per event (ignored for Poisson).
    pub excitation: f64,
    /// Hawkes exponential decay rate.
    pub decay: f64,
    /// Type-logit covariate weights; normalized magnitudes are the
    /// ground-truth feature importance.
    pub type_weight: Vec<f64>,
    /// Linear weight on past inter-event gaps in the type logit.
    pub history_weight: f64,
    /// Type threshold: logit > threshold gives type 1.
    pub threshold: f64,
    pub sequences: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let f = self.features;
        if f == 0 {
            return Err(SimError::BadConfig("features must be >= 1".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(SimError::BadConfig("horizon must be positive".into()));
        }
        if self.sampler.dim() != f || self.sampler.high.len() != f {
            return Err(SimError::BadConfig("covariate sampler dimension mismatch".into()));
        }
        if self.sampler.low.iter().zip(&self.sampler.high).any(|(l, h)| l > h) {
            return Err(SimError::BadConfig("sampler low > high".into()));
        }
        if self.time_weight.len() != f || self.type_weight.len() != f {
            return Err(SimError::BadConfig("weight vector dimension mismatch".into()));
        }
        if self.time_weight.iter().any(|&w| w < 0.0) {
            return Err(SimError::BadConfig("time_weight entries must be >= 0".into()));
        }
        match self.kind {
            ProcessKind::Poisson => {
                if self.sampler.min_dot(&self.time_weight) <= 0.0 {
                    return Err(SimError::BadConfig(
                        "poisson intensity must be positive over the covariate support".into(),
                    ));
                }
            }
            ProcessKind::Hawkes => {
                if self.excitation < 0.0 {
                    return Err(SimError::BadConfig("excitation must be >= 0".into()));
                }
                if !(self.decay > 0.0) {
                    return Err(SimError::BadConfig("decay must be positive".into()));
                }
                if self.excitation >= self.decay {
                    return Err(SimError::BadConfig(
                        "stationarity requires excitation < decay".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Sparse-relevance Hawkes default: ten covariates, two of them driving
    /// both the baseline rate and the event type. Excitation jumps are large
    /// and decay quickly, so the next gap depends strongly on recency and on
    /// the latest covariate draw.
    pub fn hawkes_sparse(features: usize) -> Self {
        assert!(features >= 2);
        let mut time_weight = vec![0.0; features];
        time_weight[0] = 0.4;
        time_weight[1] = 0.4;
        let mut type_weight = vec![0.0; features];
        type_weight[0] = 2.0;
        type_weight[1] = -1.5;
        SimConfig {
            kind: ProcessKind::Hawkes,
            horizon: 15.0,
            features,
            sampler: CovariateSampler::uniform(features, 0.1, 1.0),
            time_weight,
            excitation: 400.0,
            decay: 500.0,
            type_weight,
            history_weight: 0.2,
            threshold: 0.45,
            sequences: 1280,
            seed: 7,
        }
    }

    /// Covariate-modulated Poisson default with the same relevance pattern.
    pub fn poisson_sparse(features: usize) -> Self {
        let mut cfg = Self::hawkes_sparse(features);
        cfg.kind = ProcessKind::Poisson;
        cfg.sampler = CovariateSampler::uniform(features, 0.2, 1.2);
        cfg.time_weight[0] = 0.4;
        cfg.time_weight[1] = 0.4;
        cfg.excitation = 0.0;
        cfg.threshold = 0.5;
        cfg
    }

    /// Normalized |type_weight|, the importance the model should recover.
    pub fn ground_truth_importance(&self) -> Vec<f64> {
        let mag: Vec<f64> = self.type_weight.iter().map(|w| w.abs()).collect();
        let total: f64 = mag.iter().sum();
        if total > 0.0 {
            mag.iter().map(|m| m / total).collect()
        } else {
            vec![1.0 / self.features as f64; self.features]
        }
    }
}

/// One candidate draw from the dominating homogeneous stream. Returns the
/// candidate time and whether it was accepted, or `None` once the candidate
/// passes the horizon. Asserts the thinning invariant `lambda <= bound`.
fn thinning_step(
    t: f64,
    bound: f64,
    horizon: f64,
    lambda_at: impl FnOnce(f64) -> f64,
    rng: &mut impl Rng,
) -> Option<(f64, bool)> {
    let u: f64 = rng.random();
    let delta = -(1.0 - u).ln() / bound;
    let cand = t + delta;
    if cand > horizon {
        return None;
    }
    let lambda = lambda_at(cand);
    assert!(
        lambda <= bound * (1.0 + 1e-9),
        "thinning bound violated: lambda {} > bound {}",
        lambda,
        bound
    );
    let accept = rng.random::<f64>() * bound <= lambda;
    Some((cand, accept))
}

/// Exact thinning over a caller-supplied intensity. `upper_bound(t, events)`
/// must dominate the intensity from `t` until the next accepted event; it is
/// re-queried at the start and after every acceptance.
pub fn thinning_simulate(
    mut intensity: impl FnMut(f64, &[f64]) -> f64,
    mut upper_bound: impl FnMut(f64, &[f64]) -> f64,
    horizon: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, SimError> {
    assert!(horizon > 0.0, "horizon must be positive");
    let mut events: Vec<f64> = Vec::new();
    let mut t = 0.0;
    let mut bound = upper_bound(t, &events);
    loop {
        if bound <= 0.0 {
            let lambda = intensity(t, &events);
            if lambda > 0.0 {
                return Err(SimError::InvalidBound {
                    bound,
                    intensity: lambda,
                });
            }
            return Ok(events);
        }
        match thinning_step(t, bound, horizon, |cand| intensity(cand, &events), rng) {
            None => return Ok(events),
            Some((cand, accept)) => {
                t = cand;
                if accept {
                    events.push(cand);
                    bound = upper_bound(cand, &events);
                }
            }
        }
    }
}

/// Type logit and assignment for the event following `n` observed gaps.
/// Returns `(type, logit)` with type 1 iff the logit strictly exceeds the
/// threshold.
pub fn assign_event_type(covariate: &[f64], gaps: &[f64], cfg: &SimConfig) -> (usize, f64) {
    let mut v: f64 = cfg
        .type_weight
        .iter()
        .zip(covariate)
        .map(|(w, x)| w * x)
        .sum();
    if !gaps.is_empty() {
        let hist: f64 = gaps.iter().map(|&tau| cfg.history_weight * tau).sum();
        v += hist / gaps.len() as f64;
    }
    let y = usize::from(v > cfg.threshold);
    (y, v)
}

/// Simulate one sequence. `Ok(None)` marks the empty realization (no events
/// before the horizon); callers may resample.
pub fn simulate_sequence(
    cfg: &SimConfig,
    rng: &mut impl Rng,
) -> Result<Option<EventSequence>, SimError> {
    cfg.validate()?;
    let max_base = cfg.sampler.max_dot(&cfg.time_weight);
    let alpha = match cfg.kind {
        ProcessKind::Poisson => 0.0,
        ProcessKind::Hawkes => cfg.excitation,
    };

    // covariate in force before the first event
    let mut covariate = cfg.sampler.sample(rng);
    let mut base: f64 = cfg.time_weight.iter().zip(&covariate).map(|(w, x)| w * x).sum();
    let mut excitation = 0.0f64; // decayed kernel sum just after the last event
    let mut last_event = 0.0f64;

    let mut times: Vec<f64> = Vec::new();
    let mut types: Vec<usize> = Vec::new();
    let mut covs: Vec<Vec<f64>> = Vec::new();
    let mut gaps: Vec<f64> = Vec::new();

    let mut t = 0.0f64;
    let mut bound = max_base + excitation;
    loop {
        if bound <= 0.0 {
            let lambda = base + excitation;
            if lambda > 0.0 {
                return Err(SimError::InvalidBound {
                    bound,
                    intensity: lambda,
                });
            }
            break;
        }
        let step = thinning_step(
            t,
            bound,
            cfg.horizon,
            |cand| base + excitation * (-cfg.decay * (cand - last_event)).exp(),
            rng,
        );
        match step {
            None => break,
            Some((cand, accept)) => {
                t = cand;
                if accept {
                    // type of this event comes from the covariate drawn at the
                    // previous event and the gaps observed before it
                    let (y, _) = assign_event_type(&covariate, &gaps, cfg);
                    gaps.push(cand - last_event);
                    excitation =
                        excitation * (-cfg.decay * (cand - last_event)).exp() + alpha;
                    last_event = cand;
                    covariate = cfg.sampler.sample(rng);
                    base = cfg
                        .time_weight
                        .iter()
                        .zip(&covariate)
                        .map(|(w, x)| w * x)
                        .sum();
                    times.push(cand);
                    types.push(y);
                    covs.push(covariate.clone());
                    bound = max_base + excitation;
                }
            }
        }
    }

    if times.is_empty() {
        return Ok(None);
    }
    Ok(Some(
        EventSequence::new(times, types, covs, None).expect("simulated sequence is valid"),
    ))
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Independent stream for sequence `index`, so parallel generation matches
/// sequential generation exactly.
pub fn derive_rng(seed: u64, index: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(index) ^ mix(salt.wrapping_mul(0xa076_1d64_78bd_642f))))
}

fn simulate_indexed(cfg: &SimConfig, seed: u64, index: u64) -> Result<Option<EventSequence>, SimError> {
    let mut rng = derive_rng(seed, index, 0);
    match simulate_sequence(cfg, &mut rng)? {
        Some(seq) => Ok(Some(seq)),
        None => {
            // one resample on a fresh stream, then give up on this slot
            let mut rng = derive_rng(seed, index, 1);
            simulate_sequence(cfg, &mut rng)
        }
    }
}

/// Generate `n` sequences, split 8:1:1, and attach the ground-truth
/// importance. Deterministic in `seed` regardless of `threads`.
pub fn generate_dataset_with_threads(
    cfg: &SimConfig,
    n: usize,
    seed: u64,
    threads: usize,
) -> Result<Dataset, SimError> {
    cfg.validate()?;
    if n < 3 {
        return Err(SimError::BadConfig("need at least 3 sequences".into()));
    }
    let threads = threads.max(1).min(n);
    let mut slots: Vec<Option<EventSequence>> = vec![None; n];
    if threads == 1 {
        for (i, slot) in slots.iter_mut().enumerate() {
            *slot = simulate_indexed(cfg, seed, i as u64)?;
        }
    } else {
        let chunk = n.div_ceil(threads);
        let results: Vec<Result<Vec<Option<EventSequence>>, SimError>> =
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for w in 0..threads {
                    let lo = w * chunk;
                    let hi = ((w + 1) * chunk).min(n);
                    handles.push(scope.spawn(move || {
                        (lo..hi)
                            .map(|i| simulate_indexed(cfg, seed, i as u64))
                            .collect()
                    }));
                }
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            });
        let mut i = 0usize;
        for chunk_result in results {
            for s in chunk_result? {
                slots[i] = s;
                i += 1;
            }
        }
    }

    let mut sequences = Vec::with_capacity(n);
    let mut dropped = 0usize;
    for s in slots {
        match s {
            Some(seq) => sequences.push(seq),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        eprintln!("warning: dropped {dropped} empty sequences after one resample");
    }
    if sequences.len() < 3 {
        return Err(SimError::BadConfig(
            "simulation produced fewer than 3 non-empty sequences".into(),
        ));
    }

    let mut dataset = Dataset::new(sequences, 2, cfg.features);
    dataset.ground_truth_importance = Some(cfg.ground_truth_importance());
    let dataset = split_dataset(dataset, [0.8, 0.1, 0.1], mix(seed ^ 0x5711))
        .map_err(|e| SimError::BadConfig(e.to_string()))?;
    Ok(dataset)
}

pub fn generate_dataset(cfg: &SimConfig, n: usize, seed: u64) -> Result<Dataset, SimError> {
    generate_dataset_with_threads(cfg, n, seed, 1)
}
