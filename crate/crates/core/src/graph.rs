//! Reverse-mode automatic differentiation over a flat tape of tensor nodes.
//!
//! A [`Graph`] is built eagerly: every operation computes its value
//! immediately and pushes a node holding that value plus a backward closure.
//! Node ids are issued in construction order, so parents always precede
//! children and any reverse id order is a valid topological order for the
//! backward sweep.
//!
//! Parameters enter through [`Graph::param`], which snapshots the value from
//! a [`ParamStore`](crate::params::ParamStore) and remembers the binding so
//! [`forward_backward`] can route gradients back by name.

use crate::params::ParamStore;
use crate::tensor::{self, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("non-finite value produced by operation `{op}`")]
    NonFinite { op: &'static str },
    #[error("loss must be a finite scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

type BackwardFn = Box<dyn Fn(&Tensor, &mut dyn FnMut(usize, Tensor))>;

struct Node {
    value: Tensor,
    op: &'static str,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(String, NodeId)>,
    /// Smallest |pre-activation| seen by any ReLU in this graph. Finite
    /// difference checks re-sample inputs when this gets too close to a kink.
    relu_kink_margin: f64,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: Vec::new(),
            relu_kink_margin: f64::INFINITY,
        }
    }

    fn push(&mut self, value: Tensor, op: &'static str, backward: Option<BackwardFn>) -> NodeId {
        self.nodes.push(Node { value, op, backward });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn relu_kink_margin(&self) -> f64 {
        self.relu_kink_margin
    }

    /// Constant leaf. No gradient is reported for it.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, "input", None)
    }

    /// Leaf bound to a named parameter; gradients accumulate into the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        let t = store.value(name).clone();
        let id = self.push(t, "param", None);
        self.bindings.push((name.to_string(), id));
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(
            v,
            "add",
            Some(Box::new(move |g, sink| {
                sink(a.0, g.clone());
                sink(b.0, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(
            v,
            "sub",
            Some(Box::new(move |g, sink| {
                sink(a.0, g.clone());
                sink(b.0, tensor::map(g, |x| -x));
            })),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let v = tensor::zip(&av, &bv, |x, y| x * y);
        self.push(
            v,
            "mul",
            Some(Box::new(move |g, sink| {
                sink(a.0, tensor::zip(g, &bv, |x, y| x * y));
                sink(b.0, tensor::zip(g, &av, |x, y| x * y));
            })),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = tensor::map(self.value(a), |x| c * x);
        self.push(
            v,
            "scale",
            Some(Box::new(move |g, sink| sink(a.0, tensor::map(g, |x| c * x)))),
        )
    }

    /// Add a compile-time constant to every entry.
    pub fn shift(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = tensor::map(self.value(a), |x| x + c);
        self.push(v, "shift", Some(Box::new(move |g, sink| sink(a.0, g.clone()))))
    }

    /// (n,m) plus a rank-1 bias of length m broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (n, m) = self.value(x).dims2();
        assert_eq!(
            self.value(bias).numel(),
            m,
            "bias length {} does not match {} columns",
            self.value(bias).numel(),
            m
        );
        let bv = self.value(bias).clone();
        let xv = self.value(x);
        let v = Tensor::from_fn(&[n, m], |i| xv.data()[i] + bv.data()[i % m]);
        let bias_shape = bv.shape().to_vec();
        self.push(
            v,
            "add_bias",
            Some(Box::new(move |g, sink| {
                sink(x.0, g.clone());
                let mut gb = Tensor::zeros(&bias_shape);
                for (i, &gv) in g.data().iter().enumerate() {
                    gb.data_mut()[i % m] += gv;
                }
                sink(bias.0, gb);
            })),
        )
    }

    /// Broadcast-add a single-element node to every entry.
    pub fn add_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let sv = self.value(s).item();
        let v = tensor::map(self.value(x), |a| a + sv);
        self.push(
            v,
            "add_scalar",
            Some(Box::new(move |g, sink| {
                sink(x.0, g.clone());
                sink(s.0, Tensor::scalar(g.data().iter().sum()));
            })),
        )
    }

    /// Broadcast-multiply by a single-element node.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let sv = self.value(s).item();
        let xv = self.value(x).clone();
        let v = tensor::map(&xv, |a| a * sv);
        self.push(
            v,
            "mul_scalar",
            Some(Box::new(move |g, sink| {
                sink(x.0, tensor::map(g, |a| a * sv));
                let ds = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                sink(s.0, Tensor::scalar(ds));
            })),
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let v = tensor::matmul(&av, &bv);
        self.push(
            v,
            "matmul",
            Some(Box::new(move |g, sink| {
                sink(a.0, tensor::matmul_nt(g, &bv));
                sink(b.0, tensor::matmul_tn(&av, g));
            })),
        )
    }

    /// A @ B^T; used for attention scores.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let v = tensor::matmul_nt(&av, &bv);
        self.push(
            v,
            "matmul_nt",
            Some(Box::new(move |g, sink| {
                sink(a.0, tensor::matmul(g, &bv));
                sink(b.0, tensor::matmul_tn(g, &av));
            })),
        )
    }

    /// Gradient at exactly zero is defined as zero.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x).clone();
        for &v in xv.data() {
            let m = v.abs();
            if m < self.relu_kink_margin {
                self.relu_kink_margin = m;
            }
        }
        let v = tensor::map(&xv, |a| if a > 0.0 { a } else { 0.0 });
        self.push(
            v,
            "relu",
            Some(Box::new(move |g, sink| {
                sink(x.0, tensor::zip(g, &xv, |gv, a| if a > 0.0 { gv } else { 0.0 }))
            })),
        )
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = tensor::map(self.value(x), f64::exp);
        let out = v.clone();
        self.push(
            v,
            "exp",
            Some(Box::new(move |g, sink| {
                sink(x.0, tensor::zip(g, &out, |gv, e| gv * e))
            })),
        )
    }

    /// Row-wise softmax with a boolean mask; masked entries are exactly zero.
    pub fn masked_softmax(&mut self, logits: NodeId, mask: &[bool]) -> Result<NodeId, NumericsError> {
        let v = masked_softmax_values(self.value(logits), mask)?;
        let out = v.clone();
        let (_, m) = out.dims2();
        Ok(self.push(
            v,
            "masked_softmax",
            Some(Box::new(move |g, sink| {
                // dx_j = s_j * (g_j - sum_k g_k s_k), masked entries stay zero
                let mut dx = Tensor::zeros(out.shape());
                let n = out.numel() / m;
                for r in 0..n {
                    let s = &out.data()[r * m..(r + 1) * m];
                    let gr = &g.data()[r * m..(r + 1) * m];
                    let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let drow = &mut dx.data_mut()[r * m..(r + 1) * m];
                    for j in 0..m {
                        drow[j] = s[j] * (gr[j] - dot);
                    }
                }
                sink(logits.0, dx);
            })),
        ))
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, m) = xv.dims2();
        let mut v = Tensor::zeros(xv.shape());
        for r in 0..n {
            let row = &xv.data()[r * m..(r + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&a| (a - max).exp()).sum::<f64>().ln();
            for j in 0..m {
                v.data_mut()[r * m + j] = row[j] - lse;
            }
        }
        let out = v.clone();
        self.push(
            v,
            "log_softmax",
            Some(Box::new(move |g, sink| {
                let mut dx = Tensor::zeros(out.shape());
                let n = out.numel() / m;
                for r in 0..n {
                    let lp = &out.data()[r * m..(r + 1) * m];
                    let gr = &g.data()[r * m..(r + 1) * m];
                    let gsum: f64 = gr.iter().sum();
                    let drow = &mut dx.data_mut()[r * m..(r + 1) * m];
                    for j in 0..m {
                        drow[j] = gr[j] - lp[j].exp() * gsum;
                    }
                }
                sink(x.0, dx);
            })),
        )
    }

    /// Row-wise log-sum-exp, (n,m) -> [n].
    pub fn logsumexp_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x).clone();
        let (n, m) = xv.dims2();
        let mut v = Tensor::zeros(&[n]);
        for r in 0..n {
            let row = &xv.data()[r * m..(r + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            v.data_mut()[r] = max + row.iter().map(|&a| (a - max).exp()).sum::<f64>().ln();
        }
        let out = v.clone();
        self.push(
            v,
            "logsumexp",
            Some(Box::new(move |g, sink| {
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..n {
                    let row = &xv.data()[r * m..(r + 1) * m];
                    let lse = out.data()[r];
                    let gr = g.data()[r];
                    let drow = &mut dx.data_mut()[r * m..(r + 1) * m];
                    for j in 0..m {
                        drow[j] = gr * (row[j] - lse).exp();
                    }
                }
                sink(x.0, dx);
            })),
        )
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, x: NodeId) -> NodeId {
        const EPS: f64 = 1e-8;
        let xv = self.value(x);
        let (n, m) = xv.dims2();
        let mut v = Tensor::zeros(xv.shape());
        let mut inv_sd = vec![0.0; n];
        for r in 0..n {
            let row = &xv.data()[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / m as f64;
            let isd = 1.0 / (var + EPS).sqrt();
            inv_sd[r] = isd;
            let vrow = &mut v.data_mut()[r * m..(r + 1) * m];
            for j in 0..m {
                vrow[j] = (row[j] - mean) * isd;
            }
        }
        let out = v.clone();
        self.push(
            v,
            "layer_norm",
            Some(Box::new(move |g, sink| {
                // dx = (g - mean(g) - y * mean(g .* y)) * inv_sd, per row
                let mut dx = Tensor::zeros(out.shape());
                for r in 0..n {
                    let y = &out.data()[r * m..(r + 1) * m];
                    let gr = &g.data()[r * m..(r + 1) * m];
                    let gmean = gr.iter().sum::<f64>() / m as f64;
                    let gymean = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                    let drow = &mut dx.data_mut()[r * m..(r + 1) * m];
                    for j in 0..m {
                        drow[j] = (gr[j] - gmean - y[j] * gymean) * inv_sd[r];
                    }
                }
                sink(x.0, dx);
            })),
        )
    }

    /// Concatenate along columns; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (rn, c) = self.value(p).dims2();
                assert_eq!(rn, n, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut v = Tensor::zeros(&[n, total]);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for r in 0..n {
                let src = &pv.data()[r * w..(r + 1) * w];
                v.data_mut()[r * total + off..r * total + off + w].copy_from_slice(src);
            }
            off += w;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            v,
            "concat_cols",
            Some(Box::new(move |g, sink| {
                let mut off = 0;
                for (&pid, &w) in ids.iter().zip(&widths) {
                    let mut gp = Tensor::zeros(&[n, w]);
                    for r in 0..n {
                        let src = &g.data()[r * total + off..r * total + off + w];
                        gp.data_mut()[r * w..(r + 1) * w].copy_from_slice(src);
                    }
                    sink(pid, gp);
                    off += w;
                }
            })),
        )
    }

    /// Gather rows of an embedding table (k,m) by index, producing (n,m).
    pub fn embed_rows(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let tv = self.value(table);
        let (k, m) = tv.dims2();
        for &ix in indices {
            assert!(ix < k, "embedding index {} out of range {}", ix, k);
        }
        let n = indices.len();
        let mut v = Tensor::zeros(&[n, m]);
        for (r, &ix) in indices.iter().enumerate() {
            v.data_mut()[r * m..(r + 1) * m].copy_from_slice(&tv.data()[ix * m..(ix + 1) * m]);
        }
        let idx = indices.to_vec();
        let table_shape = tv.shape().to_vec();
        self.push(
            v,
            "embed_rows",
            Some(Box::new(move |g, sink| {
                let mut gt = Tensor::zeros(&table_shape);
                for (r, &ix) in idx.iter().enumerate() {
                    let src = &g.data()[r * m..(r + 1) * m];
                    let dst = &mut gt.data_mut()[ix * m..(ix + 1) * m];
                    for j in 0..m {
                        dst[j] += src[j];
                    }
                }
                sink(table.0, gt);
            })),
        )
    }

    /// Pick one column per row: (n,k) with indices -> [n].
    pub fn gather_cols(&mut self, x: NodeId, indices: &[usize]) -> NodeId {
        let xv = self.value(x);
        let (n, k) = xv.dims2();
        assert_eq!(n, indices.len(), "gather_cols index count");
        let mut v = Tensor::zeros(&[n]);
        for (r, &ix) in indices.iter().enumerate() {
            assert!(ix < k, "gather index {} out of range {}", ix, k);
            v.data_mut()[r] = xv.data()[r * k + ix];
        }
        let idx = indices.to_vec();
        let shape = xv.shape().to_vec();
        self.push(
            v,
            "gather_cols",
            Some(Box::new(move |g, sink| {
                let mut gx = Tensor::zeros(&shape);
                for (r, &ix) in idx.iter().enumerate() {
                    gx.data_mut()[r * k + ix] = g.data()[r];
                }
                sink(x.0, gx);
            })),
        )
    }

    /// Repeat a length-n vector into (n,c) columns.
    pub fn expand_cols(&mut self, v: NodeId, c: usize) -> NodeId {
        let vv = self.value(v);
        let n = vv.numel();
        let vshape = vv.shape().to_vec();
        let out = Tensor::from_fn(&[n, c], |i| vv.data()[i / c]);
        self.push(
            out,
            "expand_cols",
            Some(Box::new(move |g, sink| {
                let mut gv = Tensor::zeros(&vshape);
                for i in 0..n {
                    gv.data_mut()[i] = g.data()[i * c..(i + 1) * c].iter().sum();
                }
                sink(v.0, gv);
            })),
        )
    }

    /// Shift rows down by one within consecutive blocks of `block` rows,
    /// inserting `init` (length m) at the top of each block. Row r of the
    /// output is `init` when r % block == 0 and row r-1 of `x` otherwise, so
    /// the final row of each block never leaks forward.
    pub fn shift_rows(&mut self, x: NodeId, block: usize, init: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, m) = xv.dims2();
        assert!(block > 0 && n % block == 0, "rows {} not a multiple of block {}", n, block);
        let iv = self.value(init);
        assert_eq!(iv.numel(), m, "init row length {} != {}", iv.numel(), m);
        let mut v = Tensor::zeros(&[n, m]);
        for r in 0..n {
            let src = if r % block == 0 {
                iv.data()
            } else {
                &xv.data()[(r - 1) * m..r * m]
            };
            v.data_mut()[r * m..(r + 1) * m].copy_from_slice(src);
        }
        let xshape = xv.shape().to_vec();
        let ishape = iv.shape().to_vec();
        self.push(
            v,
            "shift_rows",
            Some(Box::new(move |g, sink| {
                let mut gx = Tensor::zeros(&xshape);
                let mut gi = Tensor::zeros(&ishape);
                for r in 0..n {
                    let grow = &g.data()[r * m..(r + 1) * m];
                    if r % block == 0 {
                        for j in 0..m {
                            gi.data_mut()[j] += grow[j];
                        }
                    } else {
                        gx.data_mut()[(r - 1) * m..r * m].copy_from_slice(grow);
                    }
                }
                sink(x.0, gx);
                sink(init.0, gi);
            })),
        )
    }

    /// Sum of all entries, as a single-element tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let v = Tensor::scalar(xv.data().iter().sum());
        self.push(
            v,
            "sum",
            Some(Box::new(move |g, sink| {
                let gv = g.item();
                sink(x.0, Tensor::from_fn(&shape, |_| gv));
            })),
        )
    }

    /// Backward sweep from a scalar loss node. Gradients are indexed by node
    /// id; unreachable nodes get `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Tensor>>, NumericsError> {
        let order: Vec<usize> = (0..=loss.0).rev().collect();
        self.backward_with_order(loss, &order)
    }

    /// Backward sweep over an explicit node order. The order must visit every
    /// node before any of its parents (any reverse topological order).
    pub fn backward_with_order(
        &self,
        loss: NodeId,
        order: &[usize],
    ) -> Result<Vec<Option<Tensor>>, NumericsError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.item().is_finite() {
            return Err(NumericsError::NonFinite {
                op: self.first_non_finite_op().unwrap_or("loss"),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for &id in order {
            let (before, after) = grads.split_at_mut(id);
            let Some(g) = after[0].as_ref() else { continue };
            if let Some(bw) = &self.nodes[id].backward {
                bw(g, &mut |pid: usize, contrib: Tensor| {
                    debug_assert!(pid < id, "parent id {} >= node id {}", pid, id);
                    match &mut before[pid] {
                        Some(t) => t.add_assign(&contrib),
                        slot @ None => *slot = Some(contrib),
                    }
                });
            }
        }
        Ok(grads)
    }

    fn first_non_finite_op(&self) -> Option<&'static str> {
        self.nodes
            .iter()
            .find(|n| !n.value.all_finite())
            .map(|n| n.op)
    }

    /// Add the computed gradients onto the store's gradient slots.
    pub fn accumulate_param_grads(&self, grads: &[Option<Tensor>], store: &mut ParamStore) {
        for (name, id) in &self.bindings {
            if let Some(g) = &grads[id.0] {
                store.grad_mut(name).add_assign(g);
            }
        }
    }
}

/// The softmax values behind [`Graph::masked_softmax`], usable standalone.
/// Masked entries come out exactly zero; each row must keep at least one
/// unmasked entry. Computed with max-subtraction.
pub fn masked_softmax_values(logits: &Tensor, mask: &[bool]) -> Result<Tensor, NumericsError> {
    assert_eq!(logits.numel(), mask.len(), "mask length mismatch");
    let (n, m) = logits.dims2();
    let mut out = Tensor::zeros(logits.shape());
    for r in 0..n {
        let row = &logits.data()[r * m..(r + 1) * m];
        let mrow = &mask[r * m..(r + 1) * m];
        let mut max = f64::NEG_INFINITY;
        for j in 0..m {
            if mrow[j] && row[j] > max {
                max = row[j];
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(NumericsError::FullyMaskedRow { row: r });
        }
        let mut denom = 0.0;
        let orow = &mut out.data_mut()[r * m..(r + 1) * m];
        for j in 0..m {
            if mrow[j] {
                let e = (row[j] - max).exp();
                orow[j] = e;
                denom += e;
            }
        }
        for j in 0..m {
            orow[j] /= denom;
        }
    }
    Ok(out)
}

/// Run a builder forward and backward, writing parameter gradients into the
/// store (previous gradients are zeroed first). Returns the scalar loss.
pub fn forward_backward<F>(store: &mut ParamStore, build: F) -> Result<f64, NumericsError>
where
    F: FnOnce(&mut Graph, &ParamStore) -> Result<NodeId, NumericsError>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;
    store.zero_grads();
    g.accumulate_param_grads(&grads, store);
    Ok(g.value(loss).item())
}

/// Forward-only evaluation of a builder's scalar loss.
pub fn forward_value<F>(store: &ParamStore, build: F) -> Result<f64, NumericsError>
where
    F: FnOnce(&mut Graph, &ParamStore) -> Result<NodeId, NumericsError>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let lv = g.value(loss);
    if lv.numel() != 1 {
        return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
    }
    if !lv.item().is_finite() {
        return Err(NumericsError::NonFinite {
            op: g.first_non_finite_op().unwrap_or("loss"),
        });
    }
    Ok(lv.item())
}
