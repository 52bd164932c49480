//! Tape-based reverse-mode differentiation over small dense tensors.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and [`Graph::backward`] walks it once in reverse.
//! Constant inputs (and anything computed only from constants) are not
//! tracked and never receive gradients; this is how frozen networks are
//! evaluated.

use super::tensor::{matmul, matmul_at_acc, matmul_bt, Tensor};
use crate::geometry::{self, Box3D, Camera, FOOTPRINT_SIGNS};

/// Probability clamp used by the log-likelihood losses.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    MaxRows(Var, Vec<usize>),
    MinRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    RepeatRows(Var),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Minimum(Var, Var),
    SmoothL1 { pred: Var, target: Tensor },
    Bce { p: Var, target: Tensor },
    SoftmaxCe { logits: Var, label: usize },
    NegLog(Var),
    RelaxedL1 { x: Var, lo: Tensor, hi: Tensor },
    PlaneFeatures { points: Var, boxv: Var },
    BoxCorners(Var),
    Project { points: Var, cam: Camera },
    RotateBoxY { boxv: Var, angle: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

#[inline]
pub fn smooth_l1_value(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

#[inline]
fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn relaxed_term(x: f64, lo: f64, hi: f64) -> (f64, f64) {
    if x > hi {
        (smooth_l1_value(x - hi), smooth_l1_grad(x - hi))
    } else if x < lo {
        (smooth_l1_value(x - lo), smooth_l1_grad(x - lo))
    } else {
        (0.0, 0.0)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Constant,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let mut y = matmul(self.val(x), self.val(w));
        let bias = &self.val(b).data;
        assert_eq!(bias.len(), y.cols);
        for r in 0..y.rows {
            for (o, bv) in y.data[r * y.cols..(r + 1) * y.cols].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push(y, Op::Affine { x, w, b }, &[x, w, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = matmul(self.val(a), self.val(b));
        self.push(y, Op::MatMul(a, b), &[a, b])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        Tensor::from_vec(
            ta.rows,
            ta.cols,
            ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.zip_with(a, b, |x, y| x + y);
        self.push(y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.zip_with(a, b, |x, y| x - y);
        self.push(y, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.zip_with(a, b, |x, y| x * y);
        self.push(y, Op::Mul(a, b), &[a, b])
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let y = self.zip_with(a, b, f64::min);
        self.push(y, Op::Minimum(a, b), &[a, b])
    }

    /// `a (n x d) + row (1 x d)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let ta = self.val(a);
        let tr = self.val(row);
        assert_eq!(tr.rows, 1);
        assert_eq!(ta.cols, tr.cols);
        let mut y = ta.clone();
        for r in 0..y.rows {
            for (o, v) in y.data[r * y.cols..(r + 1) * y.cols].iter_mut().zip(&tr.data) {
                *o += v;
            }
        }
        self.push(y, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let y = self.val(a).map(|x| k * x);
        self.push(y, Op::Scale(a, k), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.val(a).map(|x| x.max(0.0));
        self.push(y, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.val(a).map(sigmoid);
        self.push(y, Op::Sigmoid(a), &[a])
    }

    /// Column-wise maximum over rows. Ties go to the lowest row index.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let t = self.val(a);
        assert!(t.rows >= 1, "max over zero rows");
        let mut idx = vec![0usize; t.cols];
        let mut out = t.row_slice(0).to_vec();
        for r in 1..t.rows {
            for (c, &x) in t.row_slice(r).iter().enumerate() {
                if x > out[c] {
                    out[c] = x;
                    idx[c] = r;
                }
            }
        }
        let y = Tensor::from_vec(1, t.cols, out);
        self.push(y, Op::MaxRows(a, idx), &[a])
    }

    /// Column-wise minimum over rows. Ties go to the lowest row index.
    pub fn min_rows(&mut self, a: Var) -> Var {
        let t = self.val(a);
        assert!(t.rows >= 1, "min over zero rows");
        let mut idx = vec![0usize; t.cols];
        let mut out = t.row_slice(0).to_vec();
        for r in 1..t.rows {
            for (c, &x) in t.row_slice(r).iter().enumerate() {
                if x < out[c] {
                    out[c] = x;
                    idx[c] = r;
                }
            }
        }
        let y = Tensor::from_vec(1, t.cols, out);
        self.push(y, Op::MinRows(a, idx), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.val(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.val(*p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let t = self.val(*p);
                assert_eq!(t.rows, rows, "concat_cols row mismatch");
                data.extend_from_slice(t.row_slice(r));
            }
        }
        let y = Tensor::from_vec(rows, cols, data);
        self.push(y, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.val(a);
        assert!(start + len <= t.cols);
        let mut data = Vec::with_capacity(t.rows * len);
        for r in 0..t.rows {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let y = Tensor::from_vec(t.rows, len, data);
        self.push(y, Op::SliceCols { a, start }, &[a])
    }

    /// Tiles a `1 x d` row into `n x d`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let t = self.val(a);
        assert_eq!(t.rows, 1);
        let mut data = Vec::with_capacity(n * t.cols);
        for _ in 0..n {
            data.extend_from_slice(&t.data);
        }
        let y = Tensor::from_vec(n, t.cols, data);
        self.push(y, Op::RepeatRows(a), &[a])
    }

    /// Picks flat (row-major) elements into a `1 x k` row.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.val(a);
        let y = Tensor::from_vec(1, idx.len(), idx.iter().map(|&i| t.data[i]).collect());
        self.push(y, Op::Gather(a, idx.to_vec()), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.val(a).sum());
        self.push(y, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let y = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(y, Op::Mean(a), &[a])
    }

    /// Sum of `a_i * v_i` for scalar vars, skipping zero weights.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            if w == 0.0 {
                continue;
            }
            let s = if w == 1.0 { v } else { self.scale(v, w) };
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s),
            });
        }
        acc.unwrap_or_else(|| self.constant(Tensor::scalar(0.0)))
    }

    /// Smooth-L1 of `pred - target`, summed over elements.
    pub fn smooth_l1(&mut self, pred: Var, target: Tensor) -> Var {
        let p = self.val(pred);
        assert_eq!(p.shape(), target.shape(), "smooth_l1 shape mismatch");
        let y: f64 = p
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| smooth_l1_value(a - b))
            .sum();
        self.push(Tensor::scalar(y), Op::SmoothL1 { pred, target }, &[pred])
    }

    /// Binary cross-entropy of probabilities `p` against `target`, averaged
    /// over elements; `p` is clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn bce(&mut self, p: Var, target: Tensor) -> Var {
        let tp = self.val(p);
        assert_eq!(tp.shape(), target.shape());
        let n = tp.len() as f64;
        let y: f64 = tp
            .data
            .iter()
            .zip(&target.data)
            .map(|(&q, &t)| {
                let q = q.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(y), Op::Bce { p, target }, &[p])
    }

    /// Cross-entropy of `softmax(logits)` at `label`.
    pub fn softmax_ce(&mut self, logits: Var, label: usize) -> Var {
        let t = self.val(logits);
        assert!(label < t.len(), "label {label} out of range for {} logits", t.len());
        let m = t.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + t.data.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let y = lse - t.data[label];
        self.push(Tensor::scalar(y), Op::SoftmaxCe { logits, label }, &[logits])
    }

    /// Elementwise `-ln(clamp(p))`.
    pub fn neg_log(&mut self, p: Var) -> Var {
        let y = self.val(p).map(|q| -q.clamp(PROB_EPS, 1.0 - PROB_EPS).ln());
        self.push(y, Op::NegLog(p), &[p])
    }

    /// Sum over elements of a smooth-L1 penalty that is zero inside
    /// `[lo_i, hi_i]` and measured against the violated bound outside.
    pub fn relaxed_l1(&mut self, x: Var, lo: Tensor, hi: Tensor) -> Var {
        let t = self.val(x);
        assert_eq!(t.shape(), lo.shape());
        assert_eq!(t.shape(), hi.shape());
        let y: f64 = (0..t.len()).map(|i| relaxed_term(t.data[i], lo.data[i], hi.data[i]).0).sum();
        self.push(Tensor::scalar(y), Op::RelaxedL1 { x, lo, hi }, &[x])
    }

    /// `N x 6` signed face distances of `points` (`N x 3`) to the box packed
    /// in `boxv` (`1 x 7`). Face order matches
    /// [`geometry::plane_features_single`].
    pub fn plane_features(&mut self, points: Var, boxv: Var) -> Var {
        let p = self.val(points);
        assert_eq!(p.cols, 3);
        let b = Box3D::from_array(&self.val(boxv).data);
        let mut data = Vec::with_capacity(p.rows * 6);
        for r in 0..p.rows {
            let row = p.row_slice(r);
            data.extend_from_slice(&geometry::plane_features_single([row[0], row[1], row[2]], &b));
        }
        let y = Tensor::from_vec(p.rows, 6, data);
        self.push(y, Op::PlaneFeatures { points, boxv }, &[points, boxv])
    }

    /// `8 x 3` corners of the box packed in `boxv`.
    pub fn box_corners(&mut self, boxv: Var) -> Var {
        let b = Box3D::from_array(&self.val(boxv).data);
        let y = Tensor::from_rows(&geometry::box_corners(&b));
        self.push(y, Op::BoxCorners(boxv), &[boxv])
    }

    /// Pinhole projection of camera-frame points (`M x 3`) to pixels
    /// (`M x 2`). Callers check depth beforehand.
    pub fn project(&mut self, points: Var, cam: Camera) -> Var {
        let p = self.val(points);
        assert_eq!(p.cols, 3);
        let mut data = Vec::with_capacity(p.rows * 2);
        for r in 0..p.rows {
            let row = p.row_slice(r);
            data.push(cam.fx * row[0] / row[2] + cam.cx);
            data.push(cam.fy * row[1] / row[2] + cam.cy);
        }
        let y = Tensor::from_vec(p.rows, 2, data);
        self.push(y, Op::Project { points, cam }, &[points])
    }

    /// Rigidly rotates a packed box about the vertical axis through the
    /// origin. The heading is not wrapped.
    pub fn rotate_box_y(&mut self, boxv: Var, angle: f64) -> Var {
        let b = &self.val(boxv).data;
        let c = geometry::rotate_y([b[0], b[1], b[2]], angle);
        let y = Tensor::row(&[c[0], c[1], c[2], b[3], b[4], b[5], b[6] + angle]);
        self.push(y, Op::RotateBoxY { boxv, angle }, &[boxv])
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.val(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let (r, c) = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                if self.nodes[x.0].tracked {
                    let dx = matmul_bt(g, self.val(w));
                    self.slot(grads, x).unwrap().add_assign(&dx);
                }
                if let Some(dw) = self.slot(grads, w) {
                    matmul_at_acc(self.val(x), g, dw);
                }
                if let Some(db) = self.slot(grads, b) {
                    for r in 0..g.rows {
                        for (o, v) in db.data.iter_mut().zip(g.row_slice(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].tracked {
                    let da = matmul_bt(g, self.val(b));
                    self.slot(grads, a).unwrap().add_assign(&da);
                }
                if let Some(db) = self.slot(grads, b) {
                    matmul_at_acc(self.val(a), g, db);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(da) = self.slot(grads, a) {
                    da.add_assign(g);
                }
                if let Some(db) = self.slot(grads, b) {
                    db.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(da) = self.slot(grads, a) {
                    da.add_assign(g);
                }
                if let Some(db) = self.slot(grads, b) {
                    for (o, v) in db.data.iter_mut().zip(&g.data) {
                        *o -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].tracked {
                    let vb = self.val(b).data.clone();
                    let da = self.slot(grads, a).unwrap();
                    for ((o, gv), bv) in da.data.iter_mut().zip(&g.data).zip(vb) {
                        *o += gv * bv;
                    }
                }
                if self.nodes[b.0].tracked {
                    let va = self.val(a).data.clone();
                    let db = self.slot(grads, b).unwrap();
                    for ((o, gv), av) in db.data.iter_mut().zip(&g.data).zip(va) {
                        *o += gv * av;
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (a, b) = (*a, *b);
                let mask: Vec<bool> = self
                    .val(a)
                    .data
                    .iter()
                    .zip(&self.val(b).data)
                    .map(|(x, y)| x <= y)
                    .collect();
                if let Some(da) = self.slot(grads, a) {
                    for ((o, gv), m) in da.data.iter_mut().zip(&g.data).zip(&mask) {
                        if *m {
                            *o += gv;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    for ((o, gv), m) in db.data.iter_mut().zip(&g.data).zip(&mask) {
                        if !*m {
                            *o += gv;
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                let (a, row) = (*a, *row);
                if let Some(da) = self.slot(grads, a) {
                    da.add_assign(g);
                }
                if let Some(dr) = self.slot(grads, row) {
                    for r in 0..g.rows {
                        for (o, v) in dr.data.iter_mut().zip(g.row_slice(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(da) = self.slot(grads, *a) {
                    for (o, v) in da.data.iter_mut().zip(&g.data) {
                        *o += k * v;
                    }
                }
            }
            Op::Relu(a) => {
                let y = &node.value.data;
                if let Some(da) = self.slot(grads, *a) {
                    for ((o, gv), yv) in da.data.iter_mut().zip(&g.data).zip(y) {
                        if *yv > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value.data;
                if let Some(da) = self.slot(grads, *a) {
                    for ((o, gv), yv) in da.data.iter_mut().zip(&g.data).zip(y) {
                        *o += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::MaxRows(a, idx) | Op::MinRows(a, idx) => {
                if let Some(da) = self.slot(grads, *a) {
                    let cols = da.cols;
                    for (c, &r) in idx.iter().enumerate() {
                        da.data[r * cols + c] += g.data[c];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.val(*p).cols;
                    if let Some(dp) = self.slot(grads, *p) {
                        for r in 0..g.rows {
                            let src = &g.row_slice(r)[offset..offset + w];
                            for (o, v) in dp.data[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { a, start } => {
                let start = *start;
                if let Some(da) = self.slot(grads, *a) {
                    let cols = da.cols;
                    for r in 0..g.rows {
                        for (k, v) in g.row_slice(r).iter().enumerate() {
                            da.data[r * cols + start + k] += v;
                        }
                    }
                }
            }
            Op::RepeatRows(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    for r in 0..g.rows {
                        for (o, v) in da.data.iter_mut().zip(g.row_slice(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Gather(a, idx) => {
                if let Some(da) = self.slot(grads, *a) {
                    for (k, &i) in idx.iter().enumerate() {
                        da.data[i] += g.data[k];
                    }
                }
            }
            Op::Sum(a) => {
                let gv = g.item();
                if let Some(da) = self.slot(grads, *a) {
                    da.data.iter_mut().for_each(|o| *o += gv);
                }
            }
            Op::Mean(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    let gv = g.item() / da.len() as f64;
                    da.data.iter_mut().for_each(|o| *o += gv);
                }
            }
            Op::SmoothL1 { pred, target } => {
                let gv = g.item();
                let p = self.val(*pred).data.clone();
                if let Some(dp) = self.slot(grads, *pred) {
                    for ((o, a), b) in dp.data.iter_mut().zip(p).zip(&target.data) {
                        *o += gv * smooth_l1_grad(a - b);
                    }
                }
            }
            Op::Bce { p, target } => {
                let gv = g.item();
                let q = self.val(*p).data.clone();
                let n = q.len() as f64;
                if let Some(dp) = self.slot(grads, *p) {
                    for ((o, qv), t) in dp.data.iter_mut().zip(q).zip(&target.data) {
                        if qv > PROB_EPS && qv < 1.0 - PROB_EPS {
                            *o += gv * (-t / qv + (1.0 - t) / (1.0 - qv)) / n;
                        }
                    }
                }
            }
            Op::SoftmaxCe { logits, label } => {
                let gv = g.item();
                let z = self.val(*logits).data.clone();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
                let s: f64 = e.iter().sum();
                if let Some(dz) = self.slot(grads, *logits) {
                    for (k, (o, ev)) in dz.data.iter_mut().zip(e).enumerate() {
                        let onehot = if k == *label { 1.0 } else { 0.0 };
                        *o += gv * (ev / s - onehot);
                    }
                }
            }
            Op::NegLog(p) => {
                let q = self.val(*p).data.clone();
                if let Some(dp) = self.slot(grads, *p) {
                    for ((o, gv), qv) in dp.data.iter_mut().zip(&g.data).zip(q) {
                        if qv > PROB_EPS && qv < 1.0 - PROB_EPS {
                            *o -= gv / qv;
                        }
                    }
                }
            }
            Op::RelaxedL1 { x, lo, hi } => {
                let gv = g.item();
                let t = self.val(*x).data.clone();
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, o) in dx.data.iter_mut().enumerate() {
                        *o += gv * relaxed_term(t[i], lo.data[i], hi.data[i]).1;
                    }
                }
            }
            Op::PlaneFeatures { points, boxv } => self.back_plane_features(*points, *boxv, g, grads),
            Op::BoxCorners(boxv) => self.back_box_corners(*boxv, &node.value, g, grads),
            Op::Project { points, cam } => {
                let p = self.val(*points).data.clone();
                if let Some(dp) = self.slot(grads, *points) {
                    let rows = p.len() / 3;
                    for r in 0..rows {
                        let (x, y, z) = (p[3 * r], p[3 * r + 1], p[3 * r + 2]);
                        let (gu, gv) = (g.data[2 * r], g.data[2 * r + 1]);
                        dp.data[3 * r] += gu * cam.fx / z;
                        dp.data[3 * r + 1] += gv * cam.fy / z;
                        dp.data[3 * r + 2] += -gu * cam.fx * x / (z * z) - gv * cam.fy * y / (z * z);
                    }
                }
            }
            Op::RotateBoxY { boxv, angle } => {
                if let Some(db) = self.slot(grads, *boxv) {
                    let (s, c) = angle.sin_cos();
                    let gd = &g.data;
                    db.data[0] += c * gd[0] - s * gd[2];
                    db.data[1] += gd[1];
                    db.data[2] += s * gd[0] + c * gd[2];
                    for k in 3..7 {
                        db.data[k] += gd[k];
                    }
                }
            }
        }
    }

    fn back_plane_features(&self, points: Var, boxv: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let p = self.val(points).data.clone();
        let b = self.val(boxv).data.clone();
        let (s, c) = b[6].sin_cos();
        let rows = p.len() / 3;
        let mut dbox = [0.0; 7];
        let mut dpts = vec![0.0; p.len()];
        for r in 0..rows {
            let dx = p[3 * r] - b[0];
            let dz = p[3 * r + 2] - b[2];
            let lx = c * dx - s * dz;
            let lz = s * dx + c * dz;
            let gr = g.row_slice(r);
            let gly = gr[0] - gr[1];
            let glz = -gr[2] + gr[3];
            let glx = -gr[4] + gr[5];
            dbox[3] += 0.5 * (gr[0] + gr[1]);
            dbox[4] += 0.5 * (gr[2] + gr[3]);
            dbox[5] += 0.5 * (gr[4] + gr[5]);
            dbox[6] += -glx * lz + glz * lx;
            let gdx = glx * c + glz * s;
            let gdz = -glx * s + glz * c;
            dpts[3 * r] = gdx;
            dpts[3 * r + 1] = gly;
            dpts[3 * r + 2] = gdz;
            dbox[0] -= gdx;
            dbox[1] -= gly;
            dbox[2] -= gdz;
        }
        if let Some(dp) = self.slot(grads, points) {
            for (o, v) in dp.data.iter_mut().zip(dpts) {
                *o += v;
            }
        }
        if let Some(db) = self.slot(grads, boxv) {
            for (o, v) in db.data.iter_mut().zip(dbox) {
                *o += v;
            }
        }
    }

    fn back_box_corners(&self, boxv: Var, corners: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let b = self.val(boxv).data.clone();
        let (s, c) = b[6].sin_cos();
        let mut dbox = [0.0; 7];
        for i in 0..8 {
            let gr = g.row_slice(i);
            let cr = corners.row_slice(i);
            dbox[0] += gr[0];
            dbox[1] += gr[1];
            dbox[2] += gr[2];
            let sy = if i < 4 { -1.0 } else { 1.0 };
            let [sx, sz] = FOOTPRINT_SIGNS[i % 4];
            let glx = c * gr[0] - s * gr[2];
            let glz = s * gr[0] + c * gr[2];
            dbox[3] += gr[1] * sy * 0.5;
            dbox[4] += glz * sz * 0.5;
            dbox[5] += glx * sx * 0.5;
            let xrel = cr[0] - b[0];
            let zrel = cr[2] - b[2];
            dbox[6] += gr[0] * zrel - gr[2] * xrel;
        }
        if let Some(db) = self.slot(grads, boxv) {
            for (o, v) in db.data.iter_mut().zip(dbox) {
                *o += v;
            }
        }
    }
}
