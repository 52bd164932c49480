//! Central finite-difference checks for reverse-mode gradients.

use rand::Rng;

use super::graph::{Graph, Var};
use super::layers::ParamSet;
use super::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor so that two near-zero gradients compare absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(analytic, numeric)` at the worst entry.
    pub worst: (f64, f64),
}

impl GradCheck {
    fn record(&mut self, a: f64, n: f64) {
        self.checked += 1;
        let e = rel_err(a, n);
        if e >= self.max_rel_err {
            self.max_rel_err = e;
            self.worst = (a, n);
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// Checks every element of a single differentiable input. `f` builds a
/// scalar from the input var.
pub fn check_input(x: &Tensor, step: f64, f: impl Fn(&mut Graph, Var) -> Var) -> GradCheck {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = f(&mut g, xv);
    let grads = g.backward(out);
    let analytic = grads.get_or_zeros(xv, x.rows, x.cols);
    let eval = |t: Tensor| {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v);
        g.item(out)
    };
    let mut report = GradCheck::default();
    for k in 0..x.len() {
        let mut plus = x.clone();
        plus.data[k] += step;
        let mut minus = x.clone();
        minus.data[k] -= step;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * step);
        report.record(analytic.data[k], numeric);
    }
    report
}

/// `(tensor index, element index)` pairs drawn uniformly over all scalars.
pub fn sample_entries(params: &ParamSet, count: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let total = params.num_scalars();
    let mut offsets = Vec::with_capacity(params.len());
    let mut acc = 0;
    for t in params.values() {
        offsets.push(acc);
        acc += t.len();
    }
    (0..count)
        .map(|_| {
            let flat = rng.random_range(0..total);
            let ti = offsets.partition_point(|&o| o <= flat) - 1;
            (ti, flat - offsets[ti])
        })
        .collect()
}

/// Compares `analytic` parameter gradients against central differences of
/// `loss` at the given entries.
pub fn check_params(
    params: &ParamSet,
    analytic: &[Tensor],
    entries: &[(usize, usize)],
    step: f64,
    mut loss: impl FnMut(&ParamSet) -> f64,
) -> GradCheck {
    let mut report = GradCheck::default();
    let mut work = params.clone();
    for &(ti, k) in entries {
        let orig = work.get(ti).data[k];
        work.get_mut(ti).data[k] = orig + step;
        let fp = loss(&work);
        work.get_mut(ti).data[k] = orig - step;
        let fm = loss(&work);
        work.get_mut(ti).data[k] = orig;
        report.record(analytic[ti].data[k], (fp - fm) / (2.0 * step));
    }
    report
}
