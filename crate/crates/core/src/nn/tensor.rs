use serde::{Deserialize, Serialize};

/// Dense row-major 2D array of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape {rows}x{cols} does not match {} values", data.len());
        Self { rows, cols, data }
    }

    pub fn scalar(x: f64) -> Self {
        Self::from_vec(1, 1, vec![x])
    }

    pub fn row(values: &[f64]) -> Self {
        Self::from_vec(1, values.len(), values.to_vec())
    }

    pub fn from_rows<const D: usize>(rows: &[[f64; D]]) -> Self {
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(rows.len(), D, data)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// `a (n x k) * b (k x m)`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch {:?} x {:?}", a.shape(), b.shape());
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::from_vec(n, m, out)
}

/// `g (n x m) * b^T` where `b` is `k x m`.
pub(crate) fn matmul_bt(g: &Tensor, b: &Tensor) -> Tensor {
    let (n, m, k) = (g.rows, g.cols, b.rows);
    debug_assert_eq!(m, b.cols);
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let grow = &g.data[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b.data[p * m..(p + 1) * m];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::from_vec(n, k, out)
}

/// Accumulates `a^T (k x n) * g (n x m)` into `acc` (`k x m`).
pub(crate) fn matmul_at_acc(a: &Tensor, g: &Tensor, acc: &mut Tensor) {
    let (n, k, m) = (a.rows, a.cols, g.cols);
    debug_assert_eq!(g.rows, n);
    debug_assert_eq!(acc.shape(), (k, m));
    for i in 0..n {
        let grow = &g.data[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let arow = &mut acc.data[p * m..(p + 1) * m];
            for (o, &gv) in arow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}
