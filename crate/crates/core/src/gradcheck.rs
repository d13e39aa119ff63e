//! Central-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{forward_backward, forward_value, Graph, NodeId, NumericsError};
use crate::params::ParamStore;

/// Compare analytic gradients against central differences
/// `(f(t+eps) - f(t-eps)) / (2 eps)` on up to `samples_per_tensor` coordinates
/// of every parameter. Returns the maximum relative error
/// `|g_a - g_n| / (|g_a| + |g_n| + 1e-8)` over all sampled coordinates.
///
/// The builder must be deterministic: it is re-run for every probe.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    epsilon: f64,
    samples_per_tensor: usize,
    seed: u64,
    mut build: F,
) -> Result<f64, NumericsError>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId, NumericsError>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    forward_backward(store, &mut build)?;
    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .map(|(name, _, grad)| (name.to_string(), grad.data().to_vec()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for (name, grads) in &analytic {
        let n = grads.len();
        let coords: Vec<usize> = if samples_per_tensor >= n {
            (0..n).collect()
        } else {
            let mut picked = Vec::with_capacity(samples_per_tensor);
            while picked.len() < samples_per_tensor {
                let c = rng.random_range(0..n);
                if !picked.contains(&c) {
                    picked.push(c);
                }
            }
            picked
        };
        for c in coords {
            let original = store.value(name).data()[c];
            store.value_mut(name).data_mut()[c] = original + epsilon;
            let f_plus = forward_value(store, &mut build)?;
            store.value_mut(name).data_mut()[c] = original - epsilon;
            let f_minus = forward_value(store, &mut build)?;
            store.value_mut(name).data_mut()[c] = original;

            let numeric = (f_plus - f_minus) / (2.0 * epsilon);
            let g_a = grads[c];
            let rel = (g_a - numeric).abs() / (g_a.abs() + numeric.abs() + 1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Distance of the closest ReLU pre-activation to its kink for one forward
/// pass. Callers re-sample inputs when this is below their safety margin.
pub fn relu_kink_margin<F>(store: &ParamStore, build: F) -> Result<f64, NumericsError>
where
    F: FnOnce(&mut Graph, &ParamStore) -> Result<NodeId, NumericsError>,
{
    let mut g = Graph::new();
    build(&mut g, store)?;
    Ok(g.relu_kink_margin())
}
