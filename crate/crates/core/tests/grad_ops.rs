//! Central-difference gradient checks for every differentiable primitive,
//! plus module-level checks through the encoder and the importance path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use covtpp_core::encoder;
use covtpp_core::gradcheck::finite_difference_check;
use covtpp_core::graph::{Graph, NodeId, NumericsError};
use covtpp_core::importance;
use covtpp_core::params::ParamStore;
use covtpp_core::tensor::Tensor;
use covtpp_core::HyperParams;

const TOL: f64 = 1e-5;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

/// Check d(sum(op(params)))/d(params) against central differences over every
/// coordinate of every named parameter.
fn check<F>(params: Vec<(&str, Tensor)>, build: F) -> f64
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId, NumericsError>,
{
    let mut store = ParamStore::new();
    for (name, t) in params {
        store.insert(name, t);
    }
    finite_difference_check(&mut store, 1e-5, usize::MAX, 0, build).unwrap()
}

#[test]
fn add_sub_mul_scale_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let err = check(
        vec![
            ("a", random_tensor(&[2, 3], &mut rng)),
            ("b", random_tensor(&[2, 3], &mut rng)),
        ],
        |g, s| {
            let a = g.param(s, "a");
            let b = g.param(s, "b");
            let sum = g.add(a, b);
            let diff = g.sub(sum, b);
            let prod = g.mul(diff, b);
            let scaled = g.scale(prod, -1.3);
            let shifted = g.shift(scaled, 0.7);
            Ok(g.sum(shifted))
        },
    );
    assert!(err < TOL, "max relative error {err}");
}

#[test]
fn matmul_both_orientations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let err = check(
        vec![
            ("a", random_tensor(&[3, 4], &mut rng)),
            ("b", random_tensor(&[4, 2], &mut rng)),
            ("c", random_tensor(&[5, 4], &mut rng)),
        ],
        |g, s| {
            let a = g.param(s, "a");
            let b = g.param(s, "b");
            let c = g.param(s, "c");
            let ab = g.matmul(a, b); // (3,2)
            let scores = g.matmul_nt(a, c); // (3,5)
            let s1 = g.sum(ab);
            let s2 = g.sum(scores);
            Ok(g.add(s1, s2))
        },
    );
    assert!(err < TOL, "max relative error {err}");
}

#[test]
fn relu_away_from_kinks() {
    // inputs chosen clear of zero so the central difference is valid
    let t = Tensor::from_vec(&[2, 3], vec![0.8, -0.9, 1.4, -0.3, 0.6, -1.2]);
    let err = check(vec![("x", t)], |g, s| {
        let x = g.param(s, "x");
        let r = g.relu(x);
        Ok(g.sum(r))
    });
    assert!(err < TOL, "max relative error {err}");
}

#[test]
fn exp_and_scalar_broadcasts() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let err = check(
        vec![
            ("x", random_tensor(&[4], &mut rng)),
            ("s", Tensor::scalar(0.37)),
        ],
        |g, s| {
            let x = g.param(s, "x");
            let sc = g.param(s, "s");
            let e = g.exp(x);
            let shifted = g.add_scalar(e, sc);
            let scaled = g.mul_scalar(shifted, sc);
            Ok(g.sum(scaled))
        },
    );
    assert!(err < TOL, "max relative error {err}");
}

#[test]
fn add_bias_over_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let err = check(
        vec![
            ("x", random_tensor(&[3, 4], &mut rng)),
            ("b", random_tensor(&[4], &mut rng)),
        ],
        |g, s| {
            let x = g.param(s, "x");
            let b = g.param(s, "b");
            let y = g.add_bias(x, b);
            let sq = g.mul(y, y);
            Ok(g.sum(sq))
        },
    );
    assert!(err < TOL, "max relative error {err}");
}

#[test]
fn masked_softmax_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mask = vec![true, true, false, true, true, true, true, false];
    let weights = random_tensor(&[2, 4], &mut rng);
    let err = check(vec![("x", random_tensor(&[2, 4], &mut rng))], |g, s| {
        let x = g.param(s, "x");
        let sm = g.masked_softmax(x, &mask)?;
        let w = g.input(weights.clone());
        let weighted = g.mul(sm, w);
        Ok(g.sum(weighted))
    });
    assert!(err < TOL, "max relative error {err}");
}

#[test]
fn log_softmax_and_gather() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let picks = vec![2usize, 0, 1];
    let err = check(vec![("x", random_tensor(&[3, 4], &mut rng))], |g, s| {
        let x = g.param(s, "x");
        let lp = g.log_softmax_rows(x);
        let picked = g.gather_cols(lp, &picks);
        let total = g.sum(picked);
        Ok(g.scale(total, -1.0))
    });
    assert!(err < TOL, "max relative error {err}");
}

#[test]
fn logsumexp_rows_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let err = check(vec![("x", random_tensor(&[3, 5], &mut rng))], |g, s| {
        let x = g.param(s, "x");
        let lse = g.logsumexp_rows(x);
        Ok(g.sum(lse))
    });
    assert!(err < TOL, "max relative error {err}");
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let weights = random_tensor(&[3, 6], &mut rng);
    let err = check(vec![("x", random_tensor(&[3, 6], &mut rng))], |g, s| {
        let x = g.param(s, "x");
        let y = g.layer_norm_rows(x);
        let w = g.input(weights.clone());
        let weighted = g.mul(y, w);
        Ok(g.sum(weighted))
    });
    assert!(err < TOL, "max relative error {err}");
}

#[test]
fn concat_embed_gather_expand_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let types = vec![1usize, 0, 1];
    let err = check(
        vec![
            ("table", random_tensor(&[2, 4], &mut rng)),
            ("x", random_tensor(&[3, 2], &mut rng)),
            ("v", random_tensor(&[3], &mut rng)),
            ("init", random_tensor(&[4], &mut rng)),
        ],
        |g, s| {
            let table = g.param(s, "table");
            let x = g.param(s, "x");
            let v = g.param(s, "v");
            let init = g.param(s, "init");
            let emb = g.embed_rows(table, &types); // (3,4)
            let shifted = g.shift_rows(emb, 3, init); // (3,4)
            let expanded = g.expand_cols(v, 2); // (3,2)
            let cat = g.concat_cols(&[shifted, x, expanded]); // (3,8)
            let sq = g.mul(cat, cat);
            Ok(g.sum(sq))
        },
    );
    assert!(err < TOL, "max relative error {err}");
}

#[test]
fn encoder_stack_gradient_check() {
    // through embeddings, attention, feed-forward and layer norm
    let hp = HyperParams {
        embed_dim: 8,
        key_dim: 8,
        value_dim: 4,
        heads: 2,
        importance_heads: 2,
        mixture_components: 2,
        aux_dim: 8,
        ff_dim: 8,
        type_count: 2,
        covariate_dim: 3,
        ..HyperParams::default()
    };
    let times = [0.4, 1.1, 2.3, 2.9];
    let types = [0usize, 1, 1, 0];
    let mask = encoder::causal_key_mask(4, 4);

    let mut err = f64::INFINITY;
    for seed in 0..16u64 {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        encoder::init_params(&mut store, &hp, &mut rng);
        let covs = random_tensor(&[4, 3], &mut rng);
        // a sum of squares of layer-normalized rows is nearly constant, so
        // weight the output with fixed random coefficients instead
        let weights = random_tensor(&[4, hp.embed_dim], &mut rng);
        let build = |g: &mut Graph, s: &ParamStore| {
            let h1 = encoder::encode(g, s, &hp, &times, &types, covs.clone(), &mask)?;
            let w = g.input(weights.clone());
            let weighted = g.mul(h1, w);
            Ok(g.sum(weighted))
        };
        let mut probe = Graph::new();
        build(&mut probe, &store).unwrap();
        if probe.relu_kink_margin() <= 1e-6 {
            continue;
        }
        err = finite_difference_check(&mut store, 1e-5, 6, seed, build).unwrap();
        break;
    }
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn importance_path_gradient_check() {
    let hp = HyperParams {
        embed_dim: 8,
        key_dim: 8,
        value_dim: 4,
        heads: 2,
        importance_heads: 2,
        mixture_components: 2,
        aux_dim: 6,
        ff_dim: 8,
        type_count: 2,
        covariate_dim: 4,
        ..HyperParams::default()
    };
    let mut err = f64::INFINITY;
    for seed in 0..16u64 {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        importance::init_params(&mut store, &hp, &mut rng);
        let covs = random_tensor(&[3, 4], &mut rng);
        let build = |g: &mut Graph, s: &ParamStore| {
            let cov = g.input(covs.clone());
            let (fi, h2) = importance::importance_nodes(g, s, &hp, cov)?;
            let s1 = g.sum(h2);
            let fi2 = g.mul(fi, fi);
            let s2 = g.sum(fi2);
            Ok(g.add(s1, s2))
        };
        let mut probe = Graph::new();
        build(&mut probe, &store).unwrap();
        if probe.relu_kink_margin() <= 1e-6 {
            continue;
        }
        err = finite_difference_check(&mut store, 1e-5, 8, seed, build).unwrap();
        break;
    }
    assert!(err < 1e-4, "max relative error {err}");
}
