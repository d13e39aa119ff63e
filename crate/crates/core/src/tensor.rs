//! Dense row-major `f64` arrays used throughout the model.
//!
//! Everything is 64-bit: gradient checks at 1e-4 relative tolerance are not
//! reliable in single precision. Shapes are checked eagerly; there is no
//! broadcasting beyond the dedicated bias/scalar operations in the graph
//! module.

use serde::{Deserialize, Serialize};

/// A dense array with an explicit shape. Rank 0..2 in practice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} does not hold {} values", shape, data.len());
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows/cols of a rank-2 tensor; rank-1 tensors count as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("expected rank <= 2, got shape {:?}", self.shape),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let (_, cols) = self.dims2();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.dims2();
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Accumulate `other` into `self` (shapes must match).
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

// Raw matrix helpers shared by forward and backward passes. All operate on
// rank-2 (or rank-1 treated as a row) tensors with explicit shape checks.

/// C = A @ B, A: (n,k), B: (k,m).
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = a.dims2();
    let (k2, m) = b.dims2();
    assert_eq!(k, k2, "matmul inner dims: {:?} @ {:?}", a.shape(), b.shape());
    let mut c = Tensor::zeros(&[n, m]);
    let ad = a.data();
    let bd = b.data();
    let cd = c.data_mut();
    for i in 0..n {
        for kk in 0..k {
            let aik = ad[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[kk * m..(kk + 1) * m];
            let crow = &mut cd[i * m..(i + 1) * m];
            for j in 0..m {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

/// C = A @ B^T, A: (n,k), B: (m,k). Row-by-row dot products.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = a.dims2();
    let (m, k2) = b.dims2();
    assert_eq!(k, k2, "matmul_nt inner dims: {:?} @ {:?}^T", a.shape(), b.shape());
    let mut c = Tensor::zeros(&[n, m]);
    let ad = a.data();
    let bd = b.data();
    let cd = c.data_mut();
    for i in 0..n {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &bd[j * k..(j + 1) * k];
            let mut s = 0.0;
            for kk in 0..k {
                s += arow[kk] * brow[kk];
            }
            cd[i * m + j] = s;
        }
    }
    c
}

/// C = A^T @ B, A: (k,n), B: (k,m).
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, n) = a.dims2();
    let (k2, m) = b.dims2();
    assert_eq!(k, k2, "matmul_tn inner dims: {:?}^T @ {:?}", a.shape(), b.shape());
    let mut c = Tensor::zeros(&[n, m]);
    let ad = a.data();
    let bd = b.data();
    let cd = c.data_mut();
    for kk in 0..k {
        let arow = &ad[kk * n..(kk + 1) * n];
        let brow = &bd[kk * m..(kk + 1) * m];
        for i in 0..n {
            let aki = arow[i];
            if aki == 0.0 {
                continue;
            }
            let crow = &mut cd[i * m..(i + 1) * m];
            for j in 0..m {
                crow[j] += aki * brow[j];
            }
        }
    }
    c
}

pub fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| f(v)).collect(),
    }
}

pub fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape, b.shape, "elementwise shape mismatch: {:?} vs {:?}", a.shape, b.shape);
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}
