//! Box-to-point-cloud fit network: scores how well a 3D box fits the
//! object in a frustum point cloud and predicts a correction for the box.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou3d, normalize_angle, Box3D};
use crate::nn::checkpoint::LayerRecord;
use crate::nn::{max_pool, Activation, Bound, Checkpoint, Graph, Mlp, MlpSpec, ParamSet, Tensor, Var};

/// IoU windows for the good-fit and bad-fit perturbation sets, plus the
/// component ranges perturbations are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbBounds {
    pub alpha_pos: f64,
    pub beta_pos: f64,
    pub alpha_neg: f64,
    pub beta_neg: f64,
    /// Center offsets are uniform in `[-center_range, center_range]^3`.
    pub center_range: f64,
    /// Size offsets are uniform in `[-size_range, size_range]^3`.
    pub size_range: f64,
    /// Heading offsets are uniform in `[rotation_min, rotation_max]`.
    pub rotation_min: f64,
    pub rotation_max: f64,
    /// Perturbed boxes with any side below this are rejected.
    pub min_size: f64,
    pub max_attempts: usize,
}

impl Default for PerturbBounds {
    fn default() -> Self {
        Self {
            alpha_pos: 0.7,
            beta_pos: 1.0,
            alpha_neg: 0.01,
            beta_neg: 0.25,
            center_range: 0.8,
            size_range: 0.2,
            rotation_min: 0.0,
            rotation_max: PI,
            min_size: 0.01,
            max_attempts: 10_000,
        }
    }
}

impl PerturbBounds {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if ![self.alpha_pos, self.beta_pos, self.alpha_neg, self.beta_neg].into_iter().all(unit) {
            return Err(Error::Config("perturbation IoU bounds must lie in [0, 1]".into()));
        }
        if self.alpha_pos > self.beta_pos || self.alpha_neg > self.beta_neg {
            return Err(Error::Config("perturbation bounds need alpha <= beta".into()));
        }
        if !(self.beta_neg < self.alpha_pos || self.beta_pos < self.alpha_neg) {
            return Err(Error::Config(format!(
                "positive [{}, {}] and negative [{}, {}] IoU windows overlap",
                self.alpha_pos, self.beta_pos, self.alpha_neg, self.beta_neg
            )));
        }
        if self.center_range < 0.0 || self.size_range < 0.0 || self.rotation_min > self.rotation_max {
            return Err(Error::Config("perturbation component ranges are invalid".into()));
        }
        Ok(())
    }

    pub fn window(&self, set: PerturbSet) -> (f64, f64) {
        match set {
            PerturbSet::Positive => (self.alpha_pos, self.beta_pos),
            PerturbSet::Negative => (self.alpha_neg, self.beta_neg),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbSet {
    Positive,
    Negative,
}

/// `(dx, dy, dz, dh, dw, dl, dtheta)`, applied as `box - delta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation(pub [f64; 7]);

impl Perturbation {
    pub fn apply(&self, b: &Box3D) -> Box3D {
        let d = &self.0;
        Box3D::new(
            [b.center[0] - d[0], b.center[1] - d[1], b.center[2] - d[2]],
            [b.size[0] - d[3], b.size[1] - d[4], b.size[2] - d[5]],
            normalize_angle(b.heading - d[6]),
        )
    }
}

/// Extents of a footprint of `size`, turned by `angle`, along the two
/// horizontal axes of the frame it is turned in.
fn footprint_extents(size: [f64; 3], angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    let (w, l) = (size[1], size[2]);
    (l * c.abs() + w * s.abs(), l * s.abs() + w * c.abs())
}

/// Half-widths, in the local frame of `b`, of a box containing every
/// center offset that can still reach IoU `alpha` for a perturbed box of
/// `size` turned by `angle` relative to `b`.
///
/// IoU >= alpha needs intersection >= alpha * max(V, V'), and the
/// intersection is at most the product of the overlaps of the two boxes'
/// hulls along each local axis.
fn center_region(b: &Box3D, size: [f64; 3], angle: f64, alpha: f64, limit: [f64; 3]) -> [f64; 3] {
    if alpha <= 0.0 {
        return limit;
    }
    let e = [b.size[2], b.size[0], b.size[1]];
    let (fx, fz) = footprint_extents(size, angle);
    let f = [fx, size[0], fz];
    let m = [e[0].min(f[0]), e[1].min(f[1]), e[2].min(f[2])];
    let vmax = b.volume().max(size[0] * size[1] * size[2]);
    let mut out = [0.0; 3];
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        let h = 0.5 * (e[i] + f[i]) - alpha * vmax / (m[j] * m[k]);
        out[i] = h.clamp(0.0, limit[i]);
    }
    out
}

/// Largest `|cos|` and `|sin|` over the angle interval `[lo, hi]`.
fn abs_trig_max(lo: f64, hi: f64) -> (f64, f64) {
    let contains = |offset: f64| ((hi - offset) / PI).floor() >= ((lo - offset) / PI).ceil();
    let cos = if contains(0.0) { 1.0 } else { lo.cos().abs().max(hi.cos().abs()) };
    let sin = if contains(0.5 * PI) { 1.0 } else { lo.sin().abs().max(hi.sin().abs()) };
    (cos, sin)
}

/// Upper bound of the volume of [`center_region`] over every size offset
/// and every heading offset in `[dth_lo, dth_hi]`.
fn center_region_cap(b: &Box3D, bounds: &PerturbBounds, alpha: f64, limit: [f64; 3], dth_lo: f64, dth_hi: f64) -> f64 {
    if alpha <= 0.0 {
        return limit.iter().product();
    }
    let e = [b.size[2], b.size[0], b.size[1]];
    let r = bounds.size_range;
    let (w, l) = (b.size[1] + r, b.size[2] + r);
    let (cmax, smax) = abs_trig_max(-dth_hi, -dth_lo);
    let f_max = [l * cmax + w * smax, b.size[0] + r, l * smax + w * cmax];
    let m = [e[0].min(f_max[0]), e[1].min(f_max[1]), e[2].min(f_max[2])];
    let v = b.volume();
    let mut vol = 1.0;
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        let h = 0.5 * (e[i] + f_max[i]) - alpha * v / (m[j] * m[k]);
        vol *= h.clamp(0.0, limit[i]);
    }
    vol
}

const HEADING_BINS: usize = 90;

/// Cheap proposals (pruned before any center offset is drawn) allowed per
/// counted attempt.
const PROPOSALS_PER_ATTEMPT: usize = 100;

/// Draws `delta` uniformly from the set of offsets (within the configured
/// component ranges) whose perturbed box has IoU with `b` inside the
/// window of `set`.
///
/// Plain rejection over the full ranges rarely hits a narrow high-IoU
/// window. Here the size and heading offsets are drawn first; pairs that
/// cannot reach the window even with coinciding centers are dropped (for
/// centrally symmetric boxes the overlap is largest when centers
/// coincide). The center offset is then drawn from a box in the local frame
/// of `b` that contains every acceptable offset. Heading bins are picked in
/// proportion to a bound on that box's volume and the draw is thinned by
/// the actual volume over the bound, which keeps the result uniform.
///
/// `max_attempts` counts candidates whose IoU is evaluated with a drawn
/// center offset.
pub fn sample_perturbation(b: &Box3D, bounds: &PerturbBounds, set: PerturbSet, rng: &mut impl Rng) -> Result<Perturbation> {
    bounds.validate()?;
    let (alpha, beta) = bounds.window(set);
    let range = bounds.center_range;
    let (sh, ch) = b.heading.sin_cos();
    let horizontal = range * (sh.abs() + ch.abs());
    let limit = [horizontal, range, horizontal];
    let (t0, t1) = (bounds.rotation_min, bounds.rotation_max);
    let bins = if t1 > t0 { HEADING_BINS } else { 1 };
    let width = (t1 - t0) / bins as f64;
    let caps: Vec<f64> = (0..bins)
        .map(|i| center_region_cap(b, bounds, alpha, limit, t0 + i as f64 * width, t0 + (i + 1) as f64 * width))
        .collect();
    let total: f64 = caps.iter().sum();
    let fail = || Error::UnsatisfiableBounds {
        lo: alpha,
        hi: beta,
        attempts: bounds.max_attempts,
        boxed: *b,
    };
    if total <= 0.0 {
        return Err(fail());
    }
    let uni = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let mut attempts = 0;
    for _ in 0..bounds.max_attempts.saturating_mul(PROPOSALS_PER_ATTEMPT) {
        let mut pick = rng.random::<f64>() * total;
        let mut bin = bins - 1;
        for (i, c) in caps.iter().enumerate() {
            if pick < *c {
                bin = i;
                break;
            }
            pick -= c;
        }
        let dth = if width > 0.0 {
            rng.random_range(t0 + bin as f64 * width..=t0 + (bin + 1) as f64 * width)
        } else {
            t0
        };
        let ds = [0; 3].map(|_| uni(rng, bounds.size_range));
        let size = [b.size[0] - ds[0], b.size[1] - ds[1], b.size[2] - ds[2]];
        if size.iter().any(|&s| s < bounds.min_size) {
            continue;
        }
        let region = center_region(b, size, -dth, alpha, limit);
        let vol: f64 = region.iter().product();
        if rng.random::<f64>() * caps[bin] >= vol {
            continue;
        }
        if alpha > 0.0 {
            let aligned = Perturbation([0.0, 0.0, 0.0, ds[0], ds[1], ds[2], dth]);
            if iou3d(&aligned.apply(b), b) < alpha {
                continue;
            }
        }
        let local = region.map(|r| uni(rng, r));
        let dc = crate::geometry::rotate_y(local, b.heading);
        if dc.iter().any(|x| x.abs() > range) {
            continue;
        }
        attempts += 1;
        let delta = Perturbation([dc[0], dc[1], dc[2], ds[0], ds[1], ds[2], dth]);
        let iou = iou3d(&delta.apply(b), b);
        if (alpha..=beta).contains(&iou) {
            return Ok(delta);
        }
        if attempts >= bounds.max_attempts {
            break;
        }
    }
    Err(fail())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    /// Box and points fused in the input: offsets to the box center plus
    /// signed face distances per point.
    Combined,
    /// Separate point and box branches joined after pooling.
    Independent,
}

impl std::str::FromStr for EncoderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(Self::Combined),
            "independent" => Ok(Self::Independent),
            _ => Err(Error::Config(format!("unknown encoder mode '{s}' (combined | independent)"))),
        }
    }
}

/// Per-point `(p - center, six face distances, extra channels)` as an
/// `N x (9 + k)` var. `points` is `N x (3 + k)`.
pub fn encode_boxpc_var(g: &mut Graph, points: &Tensor, boxv: Var) -> Var {
    let n = points.rows;
    let k = points.cols - 3;
    let xyz = Tensor::from_vec(n, 3, (0..n).flat_map(|r| points.row_slice(r)[..3].to_vec()).collect());
    let xyz = g.constant(xyz);
    let center = g.slice_cols(boxv, 0, 3);
    let neg = g.scale(center, -1.0);
    let offsets = g.add_row(xyz, neg);
    let faces = g.plane_features(xyz, boxv);
    if k == 0 {
        g.concat_cols(&[offsets, faces])
    } else {
        let extra = Tensor::from_vec(n, k, (0..n).flat_map(|r| points.row_slice(r)[3..].to_vec()).collect());
        let extra = g.constant(extra);
        g.concat_cols(&[offsets, faces, extra])
    }
}

/// Plain version of [`encode_boxpc_var`], row-major `N x (9 + k)`.
pub fn encode_boxpc(points: &Tensor, b: &Box3D) -> Tensor {
    let mut g = Graph::new();
    let bv = g.constant(Tensor::row(&b.to_array()));
    let v = encode_boxpc_var(&mut g, points, bv);
    g.value(v).clone()
}

/// Hidden widths of the fit network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPcArch {
    pub trunk: Vec<usize>,
    pub box_branch: Vec<usize>,
    pub head_hidden: Vec<usize>,
}

impl Default for BoxPcArch {
    fn default() -> Self {
        Self {
            trunk: vec![32, 64],
            box_branch: vec![32, 64],
            head_hidden: vec![32],
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoxPcNet {
    pub mode: EncoderMode,
    pub extra_channels: usize,
    /// Length of the appended one-hot class vector; 0 disables it.
    pub onehot_classes: usize,
    pub arch: BoxPcArch,
    pub params: ParamSet,
    trunk: Mlp,
    box_branch: Option<Mlp>,
    cls_head: Mlp,
    reg_head: Mlp,
}

pub struct BoxPcOutput {
    /// `1 x 1` fit probability.
    pub prob: Var,
    /// `1 x 7` box correction.
    pub delta: Var,
}

fn widths(input: usize, hidden: &[usize], out: Option<usize>) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    if let Some(o) = out {
        w.push(o);
    }
    w
}

impl BoxPcNet {
    pub fn new(
        mode: EncoderMode,
        extra_channels: usize,
        onehot_classes: usize,
        arch: BoxPcArch,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if arch.trunk.is_empty() || (mode == EncoderMode::Independent && arch.box_branch.is_empty()) {
            return Err(Error::Config("fit network needs at least one trunk and box-branch layer".into()));
        }
        let mut params = ParamSet::new();
        let point_in = match mode {
            EncoderMode::Combined => 9 + extra_channels,
            EncoderMode::Independent => 3 + extra_channels,
        };
        let trunk = Mlp::new(&mut params, "trunk", MlpSpec::new(&widths(point_in, &arch.trunk, None), Activation::Relu), rng)?;
        let mut feat = *arch.trunk.last().unwrap();
        let box_branch = match mode {
            EncoderMode::Combined => None,
            EncoderMode::Independent => {
                let m = Mlp::new(&mut params, "box", MlpSpec::new(&widths(7, &arch.box_branch, None), Activation::Relu), rng)?;
                feat += *arch.box_branch.last().unwrap();
                Some(m)
            }
        };
        feat += onehot_classes;
        let cls_head = Mlp::new(
            &mut params,
            "cls",
            MlpSpec::new(&widths(feat, &arch.head_hidden, Some(1)), Activation::Sigmoid),
            rng,
        )?;
        let reg_head = Mlp::new(
            &mut params,
            "reg",
            MlpSpec::new(&widths(feat, &arch.head_hidden, Some(7)), Activation::None),
            rng,
        )?;
        Ok(Self {
            mode,
            extra_channels,
            onehot_classes,
            arch,
            params,
            trunk,
            box_branch,
            cls_head,
            reg_head,
        })
    }

    /// Indices (into `params`) of the regression head.
    /// Same architecture with other parameter values.
    pub fn with_params(&self, params: ParamSet) -> Self {
        Self { params, ..self.clone() }
    }

    pub fn reg_head_params(&self) -> Vec<usize> {
        self.reg_head.layers.iter().flat_map(|d| [d.w, d.b]).collect()
    }

    fn onehot(&self, class_id: Option<usize>) -> Option<Tensor> {
        if self.onehot_classes == 0 {
            return None;
        }
        let mut t = Tensor::zeros(1, self.onehot_classes);
        if let Some(c) = class_id {
            if c < self.onehot_classes {
                t.data[c] = 1.0;
            }
        }
        Some(t)
    }

    /// Fit probability and correction for the box `boxv` (`1 x 7`, frustum
    /// frame) against `points` (`N x (3 + k)`).
    pub fn forward(&self, g: &mut Graph, p: &Bound, points: &Tensor, boxv: Var, class_id: Option<usize>) -> BoxPcOutput {
        assert_eq!(points.cols, 3 + self.extra_channels, "point width does not match the fit network");
        let mut feats = Vec::with_capacity(3);
        match self.mode {
            EncoderMode::Combined => {
                let x = encode_boxpc_var(g, points, boxv);
                let h = self.trunk.forward(g, p, x);
                feats.push(max_pool(g, h));
            }
            EncoderMode::Independent => {
                let n = points.rows;
                let mut lo = [f64::INFINITY; 3];
                let mut hi = [f64::NEG_INFINITY; 3];
                for r in 0..n {
                    for a in 0..3 {
                        lo[a] = lo[a].min(points.get(r, a));
                        hi[a] = hi[a].max(points.get(r, a));
                    }
                }
                let mid = [0, 1, 2].map(|a| if n == 0 { 0.0 } else { 0.5 * (lo[a] + hi[a]) });
                let mut centered = points.clone();
                for r in 0..n {
                    for a in 0..3 {
                        centered.data[r * points.cols + a] -= mid[a];
                    }
                }
                let x = g.constant(centered);
                let h = self.trunk.forward(g, p, x);
                feats.push(max_pool(g, h));
                let shift = g.constant(Tensor::row(&[-mid[0], -mid[1], -mid[2], 0.0, 0.0, 0.0, 0.0]));
                let local_box = g.add(boxv, shift);
                let branch = self.box_branch.as_ref().expect("independent mode has a box branch");
                feats.push(branch.forward(g, p, local_box));
            }
        }
        if let Some(oh) = self.onehot(class_id) {
            feats.push(g.constant(oh));
        }
        let f = if feats.len() == 1 { feats[0] } else { g.concat_cols(&feats) };
        let prob = self.cls_head.forward(g, p, f);
        let delta = self.reg_head.forward(g, p, f);
        BoxPcOutput { prob, delta }
    }

    /// Plain evaluation with frozen parameters.
    pub fn predict(&self, points: &Tensor, b: &Box3D, class_id: Option<usize>) -> (f64, [f64; 7]) {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.params, false);
        let bv = g.constant(Tensor::row(&b.to_array()));
        let out = self.forward(&mut g, &bound, points, bv, class_id);
        let d = &g.value(out.delta).data;
        (g.item(out.prob), [d[0], d[1], d[2], d[3], d[4], d[5], d[6]])
    }

    pub fn to_checkpoint(&self, bounds: &PerturbBounds) -> Checkpoint {
        let mut ck = Checkpoint::new("boxpc")
            .tag("mode", self.mode)
            .tag("extra_channels", self.extra_channels)
            .tag("onehot_classes", self.onehot_classes)
            .tag("arch", &self.arch)
            .tag("bounds", bounds);
        let mut layers = vec![LayerRecord {
            name: "trunk".into(),
            spec: self.trunk.spec.clone(),
        }];
        if let Some(b) = &self.box_branch {
            layers.push(LayerRecord {
                name: "box".into(),
                spec: b.spec.clone(),
            });
        }
        layers.push(LayerRecord {
            name: "cls".into(),
            spec: self.cls_head.spec.clone(),
        });
        layers.push(LayerRecord {
            name: "reg".into(),
            spec: self.reg_head.spec.clone(),
        });
        ck.layers = layers;
        ck.add_params("", self.params.named());
        ck
    }

    /// Rebuilds the network from a checkpoint; returns it with its bounds.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, PerturbBounds)> {
        if ck.kind != "boxpc" {
            return Err(Error::Config(format!("expected a fit-network checkpoint, found '{}'", ck.kind)));
        }
        let mode: EncoderMode = ck.get_tag("mode")?;
        let extra: usize = ck.get_tag("extra_channels")?;
        let onehot: usize = ck.get_tag("onehot_classes")?;
        let arch: BoxPcArch = ck.get_tag("arch")?;
        let bounds: PerturbBounds = ck.get_tag("bounds")?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = Self::new(mode, extra, onehot, arch, &mut rng)?;
        net.params.load_from(&ck.params)?;
        Ok((net, bounds))
    }
}


/// Pretraining loss for one perturbed box:
/// `w_cls * bce(p, [set == Positive]) + w_reg * smooth_l1(correction, delta)`.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_loss_var(
    g: &mut Graph,
    net: &BoxPcNet,
    bound: &Bound,
    points: &Tensor,
    gt: &Box3D,
    delta: &Perturbation,
    set: PerturbSet,
    class_id: Option<usize>,
    w_cls: f64,
    w_reg: f64,
) -> Var {
    let perturbed = delta.apply(gt);
    let bv = g.constant(Tensor::row(&perturbed.to_array()));
    let out = net.forward(g, bound, points, bv, class_id);
    let target = if set == PerturbSet::Positive { 1.0 } else { 0.0 };
    let cls = g.bce(out.prob, Tensor::scalar(target));
    let reg = g.smooth_l1(out.delta, Tensor::row(&delta.0));
    g.weighted_sum(&[(w_cls, cls), (w_reg, reg)])
}

/// Mean of `-ln p` over `(points, box var, class)` items, scored by a frozen
/// network bound as constants. Gradients reach only the box vars.
pub fn fit_loss_var(g: &mut Graph, net: &BoxPcNet, frozen: &Bound, items: &[(&Tensor, Var, Option<usize>)]) -> Var {
    let mut terms = Vec::with_capacity(items.len());
    for &(points, boxv, class_id) in items {
        let out = net.forward(g, frozen, points, boxv, class_id);
        terms.push((1.0 / items.len() as f64, g.neg_log(out.prob)));
    }
    g.weighted_sum(&terms)
}

/// `b0 + correction`, with heading wrapped and sizes kept positive.
pub fn apply_correction(b0: &Box3D, d: &[f64; 7]) -> Box3D {
    Box3D::new(
        [b0.center[0] + d[0], b0.center[1] + d[1], b0.center[2] + d[2]],
        [
            (b0.size[0] + d[3]).max(1e-3),
            (b0.size[1] + d[4]).max(1e-3),
            (b0.size[2] + d[5]).max(1e-3),
        ],
        normalize_angle(b0.heading + d[6]),
    )
}

/// Corrects an initial box with the network's predicted offset.
pub fn refine_box(net: &BoxPcNet, points: &Tensor, b0: &Box3D, class_id: Option<usize>) -> Box3D {
    let (_, d) = net.predict(points, b0, class_id);
    apply_correction(b0, &d)
}

/// Area under the ROC curve of `scores` for binary `labels`, with ties
/// counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = 0.5 * ((i + 1) + (j + 1)) as f64;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return f64::NAN;
    }
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_input, check_params, sample_entries, DEFAULT_STEP};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> Box3D {
        Box3D::new([0.0; 3], [1.0; 3], 0.0)
    }

    fn cloud(rng: &mut ChaCha8Rng, b: &Box3D, n: usize, k: usize) -> Tensor {
        let mut data = Vec::new();
        for _ in 0..n {
            let local = [
                rng.random_range(-0.5..0.5) * b.size[2],
                rng.random_range(-0.5..0.5) * b.size[0],
                rng.random_range(-0.5..0.5) * b.size[1],
            ];
            let p = crate::geometry::rotate_y(local, b.heading);
            data.extend_from_slice(&[p[0] + b.center[0], p[1] + b.center[1], p[2] + b.center[2]]);
            for _ in 0..k {
                data.push(rng.random_range(0.0..1.0));
            }
        }
        Tensor::from_vec(n, 3 + k, data)
    }

    #[test]
    fn zero_delta_is_positive() {
        let b = unit();
        let iou = iou3d(&Perturbation([0.0; 7]).apply(&b), &b);
        assert_eq!(iou, 1.0);
        let bounds = PerturbBounds::default();
        assert!((bounds.alpha_pos..=bounds.beta_pos).contains(&iou));
    }

    #[test]
    fn center_shift_lands_in_negative_window() {
        let b = unit();
        let iou = iou3d(&Perturbation([0.8, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).apply(&b), &b);
        assert!((iou - 1.0 / 9.0).abs() < 1e-12);
        let bounds = PerturbBounds::default();
        assert!((bounds.alpha_neg..=bounds.beta_neg).contains(&iou));
    }

    #[test]
    fn overlapping_windows_rejected() {
        let bounds = PerturbBounds {
            alpha_pos: 0.2,
            ..Default::default()
        };
        assert!(bounds.validate().is_err());
    }

    #[test]
    fn accepted_samples_respect_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bounds = PerturbBounds::default();
        let boxes = [unit(), Box3D::new([1.0, 0.5, 6.0], [0.75, 0.9, 1.5], 0.7), Box3D::new([0.0, 0.0, 8.0], [1.7, 2.0, 4.4], -2.0)];
        for b in boxes {
            for set in [PerturbSet::Positive, PerturbSet::Negative] {
                let (lo, hi) = bounds.window(set);
                for _ in 0..200 {
                    let d = sample_perturbation(&b, &bounds, set, &mut rng).unwrap();
                    let iou = iou3d(&d.apply(&b), &b);
                    assert!(iou >= lo && iou <= hi, "{set:?} {iou}");
                    assert!(d.0[..3].iter().all(|x| x.abs() <= 0.8));
                    assert!(d.0[3..6].iter().all(|x| x.abs() <= 0.2));
                    assert!((0.0..=PI).contains(&d.0[6]));
                }
            }
        }
    }

    #[test]
    fn impossible_window_errors() {
        let bounds = PerturbBounds {
            alpha_pos: 0.999,
            beta_pos: 1.0,
            rotation_min: 1.0,
            rotation_max: 1.2,
            max_attempts: 500,
            ..Default::default()
        };
        let r = sample_perturbation(&Box3D::new([0.0; 3], [1.0, 1.0, 3.0], 0.0), &bounds, PerturbSet::Positive, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::UnsatisfiableBounds { .. })));
    }

    /// Plain rejection over the full ranges: the reference distribution.
    fn naive(b: &Box3D, bounds: &PerturbBounds, set: PerturbSet, rng: &mut ChaCha8Rng) -> Perturbation {
        let (lo, hi) = bounds.window(set);
        loop {
            let c = bounds.center_range;
            let s = bounds.size_range;
            let d = Perturbation([
                rng.random_range(-c..=c),
                rng.random_range(-c..=c),
                rng.random_range(-c..=c),
                rng.random_range(-s..=s),
                rng.random_range(-s..=s),
                rng.random_range(-s..=s),
                rng.random_range(bounds.rotation_min..=bounds.rotation_max),
            ]);
            let pb = d.apply(b);
            if pb.size.iter().any(|&x| x < bounds.min_size) {
                continue;
            }
            let iou = iou3d(&pb, b);
            if iou >= lo && iou <= hi {
                return d;
            }
        }
    }

    #[test]
    fn sampler_matches_plain_rejection_distribution() {
        // A window wide enough for plain rejection to be affordable.
        let bounds = PerturbBounds {
            alpha_pos: 0.35,
            beta_pos: 1.0,
            alpha_neg: 0.0,
            beta_neg: 0.3,
            ..Default::default()
        };
        let b = Box3D::new([0.0; 3], [1.0, 1.2, 1.6], 0.3);
        let n = 3000;
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let stats = |ds: &[Perturbation]| {
            let mut m = [0.0; 8];
            for d in ds {
                for i in 0..7 {
                    m[i] += d.0[i].abs() / ds.len() as f64;
                }
                m[7] += iou3d(&d.apply(&b), &b) / ds.len() as f64;
            }
            m
        };
        let fast: Vec<_> = (0..n)
            .map(|_| sample_perturbation(&b, &bounds, PerturbSet::Positive, &mut r1).unwrap())
            .collect();
        let slow: Vec<_> = (0..n).map(|_| naive(&b, &bounds, PerturbSet::Positive, &mut r2)).collect();
        let (a, c) = (stats(&fast), stats(&slow));
        // Mean |component| and mean IoU agree to a few standard errors.
        let tol = [0.03, 0.03, 0.03, 0.01, 0.01, 0.01, 0.08, 0.01];
        for i in 0..8 {
            assert!((a[i] - c[i]).abs() < tol[i], "component {i}: {} vs {}", a[i], c[i]);
        }
    }

    #[test]
    fn encoding_of_center_point() {
        let pts = Tensor::from_rows(&[[0.0, 0.0, 0.0]]);
        let e = encode_boxpc(&pts, &unit());
        assert_eq!(e.data, vec![0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
        let on_face = Tensor::from_rows(&[[0.1, -0.5, 0.2]]);
        let e = encode_boxpc(&on_face, &unit());
        assert_eq!(e.data[3..].iter().filter(|&&x| x == 0.0).count(), 1);
    }

    #[test]
    fn encoding_width_and_centering() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = Box3D::new([0.5, 1.0, 6.0], [1.0, 0.8, 1.4], 0.9);
        let n = 4000;
        let pts = cloud(&mut rng, &b, n, 2);
        let e = encode_boxpc(&pts, &b);
        assert_eq!(e.cols, 11);
        for a in 0..3 {
            let col: Vec<f64> = (0..n).map(|r| e.get(r, a)).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            assert!(mean.abs() < 3.0 * sd / (n as f64).sqrt(), "axis {a}: {mean}");
        }
        for r in 0..n {
            assert_eq!(e.get(r, 9), pts.get(r, 3));
        }
    }

    #[test]
    fn encoding_gradient_wrt_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = Box3D::new([0.2, 0.1, 5.0], [1.0, 0.8, 1.4], 0.4);
        let pts = cloud(&mut rng, &b, 20, 1);
        let weights = Tensor::from_vec(20, 10, (0..200).map(|_| rng.random_range(-1.0..1.0)).collect());
        let r = check_input(&Tensor::row(&b.to_array()), DEFAULT_STEP, |g, v| {
            let e = encode_boxpc_var(g, &pts, v);
            let w = g.constant(weights.clone());
            let m = g.mul(e, w);
            g.sum(m)
        });
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn network_outputs_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = Box3D::new([0.2, 0.1, 5.0], [1.0, 0.8, 1.4], 0.4);
        let pts = cloud(&mut rng, &b, 30, 0);
        let mut rows: Vec<usize> = (0..30).collect();
        rows.reverse();
        let permuted = Tensor::from_vec(30, 3, rows.iter().flat_map(|&r| pts.row_slice(r).to_vec()).collect());
        for mode in [EncoderMode::Combined, EncoderMode::Independent] {
            let net = BoxPcNet::new(mode, 0, 0, BoxPcArch::default(), &mut rng).unwrap();
            let (p, d) = net.predict(&pts, &b, None);
            assert!(p > 0.0 && p < 1.0);
            assert_eq!(d.len(), 7);
            let (q, e) = net.predict(&permuted, &b, None);
            assert_eq!(p, q);
            assert_eq!(d, e);
        }
    }

    #[test]
    fn probability_gradient_wrt_box_through_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = Box3D::new([0.2, 0.1, 5.0], [1.0, 0.8, 1.4], 0.4);
        let pts = cloud(&mut rng, &b, 25, 0);
        for mode in [EncoderMode::Combined, EncoderMode::Independent] {
            let net = BoxPcNet::new(mode, 0, 0, BoxPcArch::default(), &mut rng).unwrap();
            let r = check_input(&Tensor::row(&b.to_array()), DEFAULT_STEP, |g, v| {
                let bound = Bound::new(g, &net.params, false);
                net.forward(g, &bound, &pts, v, None).prob
            });
            assert!(r.passes(1e-4), "{mode:?} {r:?}");
        }
    }

    #[test]
    fn pretrain_loss_parameter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = Box3D::new([0.2, 0.1, 5.0], [1.0, 0.8, 1.4], 0.4);
        let pts = cloud(&mut rng, &b, 25, 1);
        let delta = Perturbation([0.1, -0.05, 0.2, 0.05, -0.1, 0.0, 0.3]);
        for (mode, onehot) in [(EncoderMode::Combined, 0), (EncoderMode::Independent, 3)] {
            let net = BoxPcNet::new(mode, 1, onehot, BoxPcArch::default(), &mut rng).unwrap();
            let loss = |params: &ParamSet| {
                let mut g = Graph::new();
                let bound = Bound::new(&mut g, params, true);
                let n2 = BoxPcNet { params: params.clone(), ..net.clone() };
                let l = pretrain_loss_var(&mut g, &n2, &bound, &pts, &b, &delta, PerturbSet::Positive, Some(1), 1.0, 4.0);
                g.item(l)
            };
            let mut g = Graph::new();
            let bound = Bound::new(&mut g, &net.params, true);
            let l = pretrain_loss_var(&mut g, &net, &bound, &pts, &b, &delta, PerturbSet::Positive, Some(1), 1.0, 4.0);
            let grads = bound.grads(&g, &g.backward(l));
            let entries = sample_entries(&net.params, 20, &mut rng);
            let r = check_params(&net.params, &grads, &entries, DEFAULT_STEP, loss);
            assert!(r.passes(1e-3), "{mode:?} {r:?}");
        }
    }

    #[test]
    fn classification_only_leaves_regression_head_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = Box3D::new([0.2, 0.1, 5.0], [1.0, 0.8, 1.4], 0.4);
        let pts = cloud(&mut rng, &b, 25, 0);
        let net = BoxPcNet::new(EncoderMode::Combined, 0, 0, BoxPcArch::default(), &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &net.params, true);
        let delta = Perturbation([0.1, -0.05, 0.2, 0.05, -0.1, 0.0, 0.3]);
        let l = pretrain_loss_var(&mut g, &net, &bound, &pts, &b, &delta, PerturbSet::Negative, None, 1.0, 0.0);
        let grads = bound.grads(&g, &g.backward(l));
        for i in net.reg_head_params() {
            assert!(grads[i].data.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn fit_loss_values_and_frozen_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let b = Box3D::new([0.2, 0.1, 5.0], [1.0, 0.8, 1.4], 0.4);
        let pts = cloud(&mut rng, &b, 25, 0);
        let net = BoxPcNet::new(EncoderMode::Combined, 0, 0, BoxPcArch::default(), &mut rng).unwrap();
        let mut g = Graph::new();
        let frozen = Bound::new(&mut g, &net.params, false);
        let bv = g.leaf(Tensor::row(&b.to_array()));
        let l = fit_loss_var(&mut g, &net, &frozen, &[(&pts, bv, None)]);
        let (p, _) = net.predict(&pts, &b, None);
        assert!((g.item(l) + p.ln()).abs() < 1e-12);
        let grads = g.backward(l);
        for &v in frozen.vars() {
            assert!(grads.get(v).is_none());
        }
        let r = check_input(&Tensor::row(&b.to_array()), DEFAULT_STEP, |g, v| {
            let frozen = Bound::new(g, &net.params, false);
            fit_loss_var(g, &net, &frozen, &[(&pts, v, None)])
        });
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn fit_loss_reference_values() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::scalar(0.5));
        let l = g.neg_log(p);
        assert!((g.item(l) - 2f64.ln()).abs() < 1e-15);
        let p = g.leaf(Tensor::scalar(1.0 - crate::nn::PROB_EPS));
        let l = g.neg_log(p);
        assert!(g.item(l) < 1e-6);
    }

    #[test]
    fn zero_correction_keeps_box() {
        let b = Box3D::new([0.2, 0.1, 5.0], [1.0, 0.8, 1.4], 0.4);
        assert_eq!(apply_correction(&b, &[0.0; 7]), b);
        let big = apply_correction(&b, &[0.0, 0.0, 0.0, -5.0, 0.0, 0.0, 3.0]);
        assert_eq!(big.size[0], 1e-3);
        assert!((big.heading - normalize_angle(3.4)).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = BoxPcNet::new(EncoderMode::Independent, 1, 2, BoxPcArch::default(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        net.to_checkpoint(&PerturbBounds::default()).save(dir.path()).unwrap();
        let (back, bounds) = BoxPcNet::from_checkpoint(&Checkpoint::load(dir.path()).unwrap()).unwrap();
        assert_eq!(bounds, PerturbBounds::default());
        assert_eq!(back.params.fingerprint(), net.params.fingerprint());
        assert_eq!(back.mode, EncoderMode::Independent);
    }

    #[test]
    fn auc_reference_values() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]), 0.0);
        assert_eq!(roc_auc(&[0.5; 4], &[false, true, false, true]), 0.5);
        // One inversion out of four pairs.
        assert_eq!(roc_auc(&[0.1, 0.6, 0.5, 0.9], &[false, false, true, true]), 0.75);
    }
}
