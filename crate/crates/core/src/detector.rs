//! Frustum detector: point segmentation, masking and centering, and the
//! anchor-based box estimator with its supervised loss.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Box3D};
use crate::nn::checkpoint::LayerRecord;
use crate::nn::{max_pool, Activation, Bound, Checkpoint, Graph, Mlp, MlpSpec, ParamSet, SplitDense, Tensor, Var};

/// Smallest decoded size component.
pub const MIN_SIZE: f64 = 1e-3;

/// Size anchors (one per class that has 3D labels) and heading bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Mean `(h, w, l)` per anchor.
    pub sizes: Vec<[f64; 3]>,
    /// Class id each anchor was computed from.
    pub classes: Vec<usize>,
    pub heading_bins: usize,
}

/// Anchor indices and normalized residuals that reproduce a box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorTarget {
    pub heading_bin: usize,
    /// Heading offset from the bin center in half bin widths.
    pub heading_residual: f64,
    pub size_anchor: usize,
    /// Relative size offset, `size / anchor - 1`.
    pub size_residual: [f64; 3],
}

impl AnchorConfig {
    pub fn new(sizes: Vec<[f64; 3]>, classes: Vec<usize>, heading_bins: usize) -> Result<Self> {
        let a = Self {
            sizes,
            classes,
            heading_bins,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::Config("at least one size anchor is required".into()));
        }
        if self.sizes.len() != self.classes.len() {
            return Err(Error::Config("every size anchor needs a class id".into()));
        }
        if self.heading_bins < 2 {
            return Err(Error::Config(format!("need at least 2 heading bins, got {}", self.heading_bins)));
        }
        if self.sizes.iter().flatten().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("anchor sizes must be positive".into()));
        }
        Ok(())
    }

    /// Per-class mean size over labelled `(class id, box)` pairs, ordered
    /// by class id.
    pub fn from_labels(labels: &[(usize, Box3D)], heading_bins: usize) -> Result<Self> {
        let mut acc: Vec<(usize, [f64; 3], usize)> = Vec::new();
        for (c, b) in labels {
            match acc.iter_mut().find(|(k, _, _)| k == c) {
                Some((_, s, n)) => {
                    (0..3).for_each(|a| s[a] += b.size[a]);
                    *n += 1;
                }
                None => acc.push((*c, b.size, 1)),
            }
        }
        acc.sort_by_key(|(c, _, _)| *c);
        let sizes = acc.iter().map(|(_, s, n)| s.map(|v| v / *n as f64)).collect();
        let classes = acc.iter().map(|(c, _, _)| *c).collect();
        Self::new(sizes, classes, heading_bins)
    }

    pub fn num_sizes(&self) -> usize {
        self.sizes.len()
    }

    pub fn bin_width(&self) -> f64 {
        2.0 * PI / self.heading_bins as f64
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.bin_width() - PI
    }

    /// Flattened head width `3 + 4 NS + 2 NH`.
    pub fn head_len(&self) -> usize {
        3 + 4 * self.num_sizes() + 2 * self.heading_bins
    }

    pub fn anchor_for_class(&self, class_id: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class_id)
    }

    /// Anchor whose size is closest in log space.
    pub fn nearest_anchor(&self, size: [f64; 3]) -> usize {
        let dist = |a: &[f64; 3]| (0..3).map(|k| (size[k] / a[k]).ln().abs()).sum::<f64>();
        (0..self.sizes.len())
            .min_by(|&i, &j| dist(&self.sizes[i]).total_cmp(&dist(&self.sizes[j])))
            .unwrap()
    }

    pub fn heading_bin(&self, heading: f64) -> usize {
        let h = normalize_angle(heading);
        (((h + PI) / self.bin_width()).floor() as usize).min(self.heading_bins - 1)
    }

    /// Inverse of decoding. The size anchor is the class's own anchor when
    /// it has one, else the nearest.
    pub fn encode(&self, b: &Box3D, class_id: Option<usize>) -> AnchorTarget {
        let size_anchor = class_id
            .and_then(|c| self.anchor_for_class(c))
            .unwrap_or_else(|| self.nearest_anchor(b.size));
        let heading = normalize_angle(b.heading);
        let heading_bin = self.heading_bin(heading);
        let a = self.sizes[size_anchor];
        AnchorTarget {
            heading_bin,
            heading_residual: (heading - self.bin_center(heading_bin)) / (0.5 * self.bin_width()),
            size_anchor,
            size_residual: [0, 1, 2].map(|k| b.size[k] / a[k] - 1.0),
        }
    }

    /// Box from a center and anchor target. Size components at or below
    /// zero are clamped to [`MIN_SIZE`]; the flag reports whether that
    /// happened.
    pub fn decode(&self, center: [f64; 3], t: &AnchorTarget) -> (Box3D, bool) {
        let a = self.sizes[t.size_anchor];
        let raw = [0, 1, 2].map(|k| a[k] * (1.0 + t.size_residual[k]));
        let clamped = raw.iter().any(|&s| s <= MIN_SIZE);
        let heading = normalize_angle(self.bin_center(t.heading_bin) + t.heading_residual * 0.5 * self.bin_width());
        (Box3D::new(center, raw.map(|s| s.max(MIN_SIZE)), heading), clamped)
    }
}

/// Column offsets of the flattened box head.
#[derive(Clone, Copy, Debug)]
pub struct HeadLayout {
    pub ns: usize,
    pub nh: usize,
}

impl HeadLayout {
    pub fn new(anchors: &AnchorConfig) -> Self {
        Self {
            ns: anchors.num_sizes(),
            nh: anchors.heading_bins,
        }
    }
    pub fn center(&self) -> usize {
        0
    }
    pub fn heading_logits(&self) -> usize {
        3
    }
    pub fn heading_residuals(&self) -> usize {
        3 + self.nh
    }
    pub fn size_logits(&self) -> usize {
        3 + 2 * self.nh
    }
    pub fn size_residuals(&self) -> usize {
        3 + 2 * self.nh + self.ns
    }
    pub fn len(&self) -> usize {
        3 + 2 * self.nh + 4 * self.ns
    }
    pub fn is_empty(&self) -> bool {
        false
    }
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Hidden widths of the three detector networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorArch {
    pub seg_trunk: Vec<usize>,
    pub seg_head: Vec<usize>,
    pub tnet_trunk: Vec<usize>,
    pub tnet_head: Vec<usize>,
    pub box_trunk: Vec<usize>,
    pub box_head: Vec<usize>,
}

impl Default for DetectorArch {
    fn default() -> Self {
        Self {
            seg_trunk: vec![32, 64],
            seg_head: vec![32, 16],
            tnet_trunk: vec![32, 64],
            tnet_head: vec![32],
            box_trunk: vec![32, 64],
            box_head: vec![64, 32],
        }
    }
}

/// Selection and resampling of foreground points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub threshold: f64,
    pub min_points: usize,
    pub resample: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_points: 8,
            resample: 256,
        }
    }
}

/// Which networks receive the one-hot class vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneHotUse {
    pub seg: bool,
    pub boxes: bool,
}

fn widths(input: usize, hidden: &[usize], out: Option<usize>) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.extend(out);
    w
}

fn onehot_row(num_classes: usize, class_id: usize) -> Tensor {
    let mut t = Tensor::zeros(1, num_classes);
    if class_id < num_classes {
        t.data[class_id] = 1.0;
    }
    t
}

/// Per-point foreground classifier.
#[derive(Clone, Debug)]
pub struct SegNet {
    pub params: ParamSet,
    /// One-hot width appended to the global feature; 0 disables it.
    pub onehot_classes: usize,
    trunk: Mlp,
    fuse: SplitDense,
    head: Mlp,
}

impl SegNet {
    pub fn new(point_dims: usize, onehot_classes: usize, arch: &DetectorArch, rng: &mut impl Rng) -> Result<Self> {
        if arch.seg_trunk.is_empty() || arch.seg_head.is_empty() {
            return Err(Error::Config("segmentation network needs trunk and head layers".into()));
        }
        let mut params = ParamSet::new();
        let trunk = Mlp::new(&mut params, "seg.trunk", MlpSpec::new(&widths(point_dims, &arch.seg_trunk, None), Activation::Relu), rng)?;
        let feat = *arch.seg_trunk.last().unwrap();
        let fused = arch.seg_head[0];
        let fuse = SplitDense::new(&mut params, "seg.fuse", feat, feat + onehot_classes, fused, rng);
        let head = Mlp::new(
            &mut params,
            "seg.head",
            MlpSpec::new(&widths(fused, &arch.seg_head[1..], Some(1)), Activation::Sigmoid),
            rng,
        )?;
        Ok(Self {
            params,
            onehot_classes,
            trunk,
            fuse,
            head,
        })
    }

    /// `N x 1` foreground probabilities.
    pub fn forward(&self, g: &mut Graph, p: &Bound, points: &Tensor, class_id: usize) -> Var {
        let x = g.constant(points.clone());
        let h = self.trunk.forward(g, p, x);
        let mut global = max_pool(g, h);
        if self.onehot_classes > 0 {
            let oh = g.constant(onehot_row(self.onehot_classes, class_id));
            global = g.concat_cols(&[global, oh]);
        }
        let fused = self.fuse.forward(g, p, h, global);
        let fused = g.relu(fused);
        self.head.forward(g, p, fused)
    }

    pub fn predict(&self, points: &Tensor, class_id: usize) -> Vec<f64> {
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &self.params, false);
        let out = self.forward(&mut g, &b, points, class_id);
        g.value(out).data.clone()
    }

    fn layers(&self) -> Vec<LayerRecord> {
        vec![
            LayerRecord {
                name: "seg.trunk".into(),
                spec: self.trunk.spec.clone(),
            },
            LayerRecord {
                name: "seg.head".into(),
                spec: self.head.spec.clone(),
            },
        ]
    }
}

/// Mean point-wise BCE between probabilities and a foreground mask.
pub fn seg_loss_var(g: &mut Graph, probs: Var, mask: &[bool]) -> Var {
    let target = Tensor::from_vec(mask.len(), 1, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect());
    g.bce(probs, target)
}

/// Foreground points moved to their centroid.
#[derive(Clone, Debug, PartialEq)]
pub struct Masked {
    /// `resample x (3 + k)`, xyz centered.
    pub points: Tensor,
    pub centroid: [f64; 3],
    /// Whether too few points passed the threshold and all were used.
    pub fell_back: bool,
}

/// Keeps points with probability at or above the threshold (all points
/// when fewer than `min_points` pass), resamples them to a fixed count by
/// even striding and centers xyz on the mean of the resampled points.
pub fn mask_and_center(points: &Tensor, probs: &[f64], config: &MaskConfig) -> Masked {
    assert_eq!(points.rows, probs.len());
    assert!(points.rows >= 1, "cannot mask an empty point cloud");
    let mut selected: Vec<usize> = (0..points.rows).filter(|&i| probs[i] >= config.threshold).collect();
    let fell_back = selected.len() < config.min_points.max(1);
    if fell_back {
        selected = (0..points.rows).collect();
    }
    let m = config.resample.max(1);
    let chosen: Vec<usize> = (0..m).map(|j| selected[j * selected.len() / m]).collect();
    let dims = points.cols;
    let mut centroid = [0.0; 3];
    for &i in &chosen {
        for a in 0..3 {
            centroid[a] += points.get(i, a);
        }
    }
    centroid = centroid.map(|c| c / m as f64);
    let mut data = Vec::with_capacity(m * dims);
    for &i in &chosen {
        let row = points.row_slice(i);
        data.extend((0..3).map(|a| row[a] - centroid[a]));
        data.extend_from_slice(&row[3..]);
    }
    Masked {
        points: Tensor::from_vec(m, dims, data),
        centroid,
        fell_back,
    }
}

/// Center network and box network, trained together.
#[derive(Clone, Debug)]
pub struct BoxNet {
    pub params: ParamSet,
    pub anchors: AnchorConfig,
    pub onehot_classes: usize,
    pub point_dims: usize,
    tnet_trunk: Mlp,
    tnet_head: Mlp,
    box_trunk: Mlp,
    box_head: Mlp,
}

/// Graph outputs of [`BoxNet::forward`], in the frame of the input points
/// before centering.
#[derive(Clone, Copy, Debug)]
pub struct BoxOutput {
    /// `1 x head_len` raw head.
    pub head: Var,
    /// `1 x 3` centroid plus center-network offset.
    pub stage1_center: Var,
    /// `1 x 3` final center.
    pub center: Var,
}

impl BoxNet {
    pub fn new(
        point_dims: usize,
        onehot_classes: usize,
        anchors: AnchorConfig,
        arch: &DetectorArch,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        anchors.validate()?;
        if arch.tnet_trunk.is_empty() || arch.box_trunk.is_empty() {
            return Err(Error::Config("box networks need trunk layers".into()));
        }
        let mut params = ParamSet::new();
        let tnet_trunk = Mlp::new(&mut params, "tnet.trunk", MlpSpec::new(&widths(point_dims, &arch.tnet_trunk, None), Activation::Relu), rng)?;
        let tf = *arch.tnet_trunk.last().unwrap() + onehot_classes;
        let tnet_head = Mlp::new(&mut params, "tnet.head", MlpSpec::new(&widths(tf, &arch.tnet_head, Some(3)), Activation::None), rng)?;
        let box_trunk = Mlp::new(&mut params, "box.trunk", MlpSpec::new(&widths(point_dims, &arch.box_trunk, None), Activation::Relu), rng)?;
        let bf = *arch.box_trunk.last().unwrap() + onehot_classes;
        let box_head = Mlp::new(
            &mut params,
            "box.head",
            MlpSpec::new(&widths(bf, &arch.box_head, Some(anchors.head_len())), Activation::None),
            rng,
        )?;
        Ok(Self {
            params,
            anchors,
            onehot_classes,
            point_dims,
            tnet_trunk,
            tnet_head,
            box_trunk,
            box_head,
        })
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout::new(&self.anchors)
    }

    fn global(&self, g: &mut Graph, p: &Bound, trunk: &Mlp, x: Var, class_id: usize) -> Var {
        let h = trunk.forward(g, p, x);
        let pooled = max_pool(g, h);
        if self.onehot_classes == 0 {
            return pooled;
        }
        let oh = g.constant(onehot_row(self.onehot_classes, class_id));
        g.concat_cols(&[pooled, oh])
    }

    /// Runs both stages on centered points; `centroid` is added back so the
    /// centers come out in the caller's frame.
    pub fn forward(&self, g: &mut Graph, p: &Bound, masked: &Masked, class_id: usize) -> BoxOutput {
        let pts = &masked.points;
        assert_eq!(pts.cols, self.point_dims, "point width does not match the box network");
        let x = g.constant(pts.clone());
        let tf = self.global(g, p, &self.tnet_trunk, x, class_id);
        let offset = self.tnet_head.forward(g, p, tf);
        let xyz = g.slice_cols(x, 0, 3);
        let neg = g.scale(offset, -1.0);
        let shifted = g.add_row(xyz, neg);
        let input = if pts.cols > 3 {
            let extra = g.slice_cols(x, 3, pts.cols - 3);
            g.concat_cols(&[shifted, extra])
        } else {
            shifted
        };
        let bf = self.global(g, p, &self.box_trunk, input, class_id);
        let head = self.box_head.forward(g, p, bf);
        let c = g.constant(Tensor::row(&masked.centroid));
        let stage1_center = g.add(c, offset);
        let delta = g.slice_cols(head, 0, 3);
        let center = g.add(stage1_center, delta);
        BoxOutput {
            head,
            stage1_center,
            center,
        }
    }

    /// Anchor indices picked by the largest logits.
    pub fn argmax_target(&self, head: &[f64]) -> (usize, usize) {
        let l = self.layout();
        let hb = argmax(&head[l.heading_logits()..l.heading_logits() + l.nh]);
        let sa = argmax(&head[l.size_logits()..l.size_logits() + l.ns]);
        (hb, sa)
    }

    /// `1 x 7` box var decoded with the given heading bin and size anchor;
    /// differentiable in the center and the selected residuals.
    pub fn decode_var(&self, g: &mut Graph, out: &BoxOutput, heading_bin: usize, size_anchor: usize) -> Var {
        let l = self.layout();
        let a = self.anchors.sizes[size_anchor];
        let res = g.slice_cols(out.head, l.size_residuals() + 3 * size_anchor, 3);
        let base = g.constant(Tensor::row(&a));
        let scaled = g.mul(res, base);
        let size = g.add(scaled, base);
        let hres = g.slice_cols(out.head, l.heading_residuals() + heading_bin, 1);
        let hs = g.scale(hres, 0.5 * self.anchors.bin_width());
        let hc = g.constant(Tensor::scalar(self.anchors.bin_center(heading_bin)));
        let heading = g.add(hs, hc);
        g.concat_cols(&[out.center, size, heading])
    }

    /// Hard decode of a head and center.
    pub fn decode(&self, head: &[f64], center: [f64; 3]) -> (Box3D, bool) {
        let l = self.layout();
        let (hb, sa) = self.argmax_target(head);
        let t = AnchorTarget {
            heading_bin: hb,
            heading_residual: head[l.heading_residuals() + hb],
            size_anchor: sa,
            size_residual: [0, 1, 2].map(|k| head[l.size_residuals() + 3 * sa + k]),
        };
        self.anchors.decode(center, &t)
    }

    fn layers(&self) -> Vec<LayerRecord> {
        [
            ("tnet.trunk", &self.tnet_trunk),
            ("tnet.head", &self.tnet_head),
            ("box.trunk", &self.box_trunk),
            ("box.head", &self.box_head),
        ]
        .into_iter()
        .map(|(n, m)| LayerRecord {
            name: n.into(),
            spec: m.spec.clone(),
        })
        .collect()
    }
}

/// Weights of the supervised box loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxLossWeights {
    pub stage1_center: f64,
    pub center: f64,
    pub heading_cls: f64,
    pub heading_reg: f64,
    pub size_cls: f64,
    pub size_reg: f64,
    pub corner: f64,
}

impl Default for BoxLossWeights {
    fn default() -> Self {
        Self {
            stage1_center: 0.1,
            center: 0.1,
            heading_cls: 0.1,
            heading_reg: 2.0,
            size_cls: 0.1,
            size_reg: 2.0,
            corner: 0.1,
        }
    }
}

/// Unweighted supervised box loss terms.
#[derive(Clone, Copy, Debug)]
pub struct BoxLossTerms {
    pub stage1_center: Var,
    pub center: Var,
    pub heading_cls: Var,
    pub heading_reg: Var,
    pub size_cls: Var,
    pub size_reg: Var,
    pub corner: Var,
}

impl BoxLossTerms {
    pub fn weighted(&self, g: &mut Graph, w: &BoxLossWeights) -> Var {
        g.weighted_sum(&[
            (w.stage1_center, self.stage1_center),
            (w.center, self.center),
            (w.heading_cls, self.heading_cls),
            (w.heading_reg, self.heading_reg),
            (w.size_cls, self.size_cls),
            (w.size_reg, self.size_reg),
            (w.corner, self.corner),
        ])
    }
}

/// Supervised box loss terms against `gt`, in the same frame as the
/// network output. The corner term takes the smaller of the distances to
/// the label and to its heading-flipped copy.
pub fn box_loss_terms(g: &mut Graph, net: &BoxNet, out: &BoxOutput, gt: &Box3D, class_id: usize) -> BoxLossTerms {
    let l = net.layout();
    let t = net.anchors.encode(gt, Some(class_id));
    let stage1_center = g.smooth_l1(out.stage1_center, Tensor::row(&gt.center));
    let center = g.smooth_l1(out.center, Tensor::row(&gt.center));
    let hl = g.slice_cols(out.head, l.heading_logits(), l.nh);
    let heading_cls = g.softmax_ce(hl, t.heading_bin);
    let hr = g.slice_cols(out.head, l.heading_residuals() + t.heading_bin, 1);
    let heading_reg = g.smooth_l1(hr, Tensor::scalar(t.heading_residual));
    let sl = g.slice_cols(out.head, l.size_logits(), l.ns);
    let size_cls = g.softmax_ce(sl, t.size_anchor);
    let sr = g.slice_cols(out.head, l.size_residuals() + 3 * t.size_anchor, 3);
    let size_reg = g.smooth_l1(sr, Tensor::row(&t.size_residual));
    let bv = net.decode_var(g, out, t.heading_bin, t.size_anchor);
    let corners = g.box_corners(bv);
    let direct = g.smooth_l1(corners, Tensor::from_rows(&crate::geometry::box_corners(gt)));
    let flip = g.smooth_l1(corners, Tensor::from_rows(&crate::geometry::box_corners(&gt.flipped())));
    let corner = g.minimum(direct, flip);
    BoxLossTerms {
        stage1_center,
        center,
        heading_cls,
        heading_reg,
        size_cls,
        size_reg,
        corner,
    }
}

pub fn box_loss_strong_var(g: &mut Graph, net: &BoxNet, out: &BoxOutput, gt: &Box3D, class_id: usize, w: &BoxLossWeights) -> Var {
    let terms = box_loss_terms(g, net, out, gt, class_id);
    terms.weighted(g, w)
}

/// Segmentation network, box networks and masking settings.
#[derive(Clone, Debug)]
pub struct Detector {
    pub seg: SegNet,
    pub boxes: BoxNet,
    pub arch: DetectorArch,
    pub mask: MaskConfig,
    pub num_classes: usize,
    pub onehot: OneHotUse,
}

/// A detector prediction in the frustum frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrustumPrediction {
    pub probs: Vec<f64>,
    pub masked: Masked,
    pub head: Vec<f64>,
    pub stage1_center: [f64; 3],
    pub center: [f64; 3],
    pub box3d: Box3D,
    pub size_clamped: bool,
}

impl Detector {
    pub fn new(
        point_dims: usize,
        num_classes: usize,
        onehot: OneHotUse,
        anchors: AnchorConfig,
        arch: DetectorArch,
        mask: MaskConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let seg = SegNet::new(point_dims, if onehot.seg { num_classes } else { 0 }, &arch, &mut rng)?;
        let boxes = BoxNet::new(point_dims, if onehot.boxes { num_classes } else { 0 }, anchors, &arch, &mut rng)?;
        Ok(Self {
            seg,
            boxes,
            arch,
            mask,
            num_classes,
            onehot,
        })
    }

    /// Full frozen forward pass on one frustum.
    pub fn predict(&self, points: &Tensor, class_id: usize) -> FrustumPrediction {
        let probs = self.seg.predict(points, class_id);
        let masked = mask_and_center(points, &probs, &self.mask);
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &self.boxes.params, false);
        let out = self.boxes.forward(&mut g, &b, &masked, class_id);
        let head = g.value(out.head).data.clone();
        let s1 = &g.value(out.stage1_center).data;
        let stage1_center = [s1[0], s1[1], s1[2]];
        let c = &g.value(out.center).data;
        let center = [c[0], c[1], c[2]];
        let (box3d, size_clamped) = self.boxes.decode(&head, center);
        FrustumPrediction {
            probs,
            masked,
            head,
            stage1_center,
            center,
            box3d,
            size_clamped,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("detector")
            .tag("point_dims", self.boxes.point_dims)
            .tag("num_classes", self.num_classes)
            .tag("onehot", self.onehot)
            .tag("anchors", &self.boxes.anchors)
            .tag("arch", &self.arch)
            .tag("mask", self.mask);
        let mut layers = self.seg.layers();
        layers.extend(self.boxes.layers());
        ck.layers = layers;
        ck.add_params("seg/", self.seg.params.named());
        ck.add_params("box/", self.boxes.params.named());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "detector" {
            return Err(Error::Config(format!("expected a detector checkpoint, found '{}'", ck.kind)));
        }
        let mut det = Self::new(
            ck.get_tag("point_dims")?,
            ck.get_tag("num_classes")?,
            ck.get_tag("onehot")?,
            ck.get_tag("anchors")?,
            ck.get_tag("arch")?,
            ck.get_tag("mask")?,
            0,
        )?;
        det.seg.params.load_from(&ck.params_with_prefix("seg/"))?;
        det.boxes.params.load_from(&ck.params_with_prefix("box/"))?;
        Ok(det)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{box_corners, iou3d};
    use crate::nn::gradcheck::{check_params, sample_entries, DEFAULT_STEP};
    use crate::nn::{bce, smooth_l1, softmax_ce};
    use proptest::prelude::{prop, prop_assert, proptest, ProptestConfig};
    use rand_chacha::ChaCha8Rng;

    fn anchors() -> AnchorConfig {
        AnchorConfig::new(vec![[1.0, 0.6, 0.8], [0.75, 0.9, 1.5], [1.8, 0.4, 1.0]], vec![0, 1, 2], 12).unwrap()
    }

    fn small_arch() -> DetectorArch {
        DetectorArch {
            seg_trunk: vec![8, 12],
            seg_head: vec![8, 6],
            tnet_trunk: vec![8, 12],
            tnet_head: vec![8],
            box_trunk: vec![8, 12],
            box_head: vec![10],
        }
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor {
        let mut d = Vec::new();
        for _ in 0..n {
            d.push(rng.random_range(-1.0..1.0));
            d.push(rng.random_range(-0.5..0.5));
            d.push(rng.random_range(5.0..7.0));
            for _ in 0..k {
                d.push(rng.random_range(0.0..1.0));
            }
        }
        Tensor::from_vec(n, 3 + k, d)
    }

    #[test]
    fn anchor_layout_and_bins() {
        let a = anchors();
        assert_eq!(a.head_len(), 3 + 4 * 3 + 2 * 12);
        assert_eq!(HeadLayout::new(&a).len(), a.head_len());
        assert!((a.bin_center(0) - (-PI + PI / 12.0)).abs() < 1e-15);
        assert!((a.bin_center(11) - (PI - PI / 12.0)).abs() < 1e-12);
        assert!(AnchorConfig::new(vec![[1.0; 3]], vec![0], 1).is_err());
        assert!(AnchorConfig::new(vec![[1.0, 0.0, 1.0]], vec![0], 12).is_err());
        assert!(AnchorConfig::new(vec![], vec![], 12).is_err());
    }

    #[test]
    fn zero_residual_decodes_to_anchor_and_bin_center() {
        let a = anchors();
        let t = AnchorTarget {
            heading_bin: 4,
            heading_residual: 0.0,
            size_anchor: 1,
            size_residual: [0.0; 3],
        };
        let (b, clamped) = a.decode([1.0, 2.0, 3.0], &t);
        assert!(!clamped);
        assert_eq!(b.size, a.sizes[1]);
        assert!((b.heading - a.bin_center(4)).abs() < 1e-15);
        let one = AnchorConfig::new(vec![[1.0, 2.0, 3.0]], vec![0], 12).unwrap();
        let t = AnchorTarget {
            size_anchor: 0,
            size_residual: [0.1; 3],
            ..t
        };
        let (b, _) = one.decode([0.0; 3], &t);
        for (got, want) in b.size.iter().zip([1.1, 2.2, 3.3]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_sizes_are_clamped_and_flagged() {
        let a = anchors();
        let t = AnchorTarget {
            heading_bin: 0,
            heading_residual: 0.0,
            size_anchor: 0,
            size_residual: [-1.5, 0.0, 0.0],
        };
        let (b, clamped) = a.decode([0.0; 3], &t);
        assert!(clamped);
        assert_eq!(b.size[0], MIN_SIZE);
    }

    #[test]
    fn anchors_from_labels_average_per_class() {
        let labels = vec![
            (2, Box3D::new([0.0; 3], [1.0, 1.0, 1.0], 0.0)),
            (0, Box3D::new([0.0; 3], [2.0, 2.0, 2.0], 0.0)),
            (2, Box3D::new([0.0; 3], [3.0, 1.0, 2.0], 0.0)),
        ];
        let a = AnchorConfig::from_labels(&labels, 12).unwrap();
        assert_eq!(a.classes, vec![0, 2]);
        assert_eq!(a.sizes, vec![[2.0, 2.0, 2.0], [2.0, 1.0, 1.5]]);
        assert_eq!(a.nearest_anchor([1.9, 1.1, 1.4]), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn encode_then_decode_recovers_box(
            c in prop::array::uniform3(-5.0..5.0f64),
            s in prop::array::uniform3(0.05..5.0f64),
            h in -PI..PI,
            class in prop::option::of(0usize..5),
        ) {
            let a = anchors();
            let b = Box3D::new(c, s, h);
            let t = a.encode(&b, class);
            prop_assert!(t.heading_residual.abs() <= 1.0 + 1e-12);
            let (d, clamped) = a.decode(c, &t);
            prop_assert!(!clamped);
            for k in 0..3 {
                prop_assert!((d.size[k] - s[k]).abs() < 1e-9);
            }
            let dh = normalize_angle(d.heading - b.heading).abs();
            prop_assert!(dh < 1e-9 || (2.0 * PI - dh) < 1e-9);
        }
    }

    #[test]
    fn seg_output_shape_and_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for onehot in [0, 5] {
            let net = SegNet::new(4, onehot, &small_arch(), &mut rng).unwrap();
            let x = cloud(&mut rng, 20, 1);
            let p = net.predict(&x, 1);
            assert_eq!(p.len(), 20);
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
            let perm: Vec<usize> = (0..20).rev().collect();
            let xp = Tensor::from_vec(20, 4, perm.iter().flat_map(|&i| x.row_slice(i).to_vec()).collect());
            let pp = net.predict(&xp, 1);
            for (k, &i) in perm.iter().enumerate() {
                assert_eq!(pp[k], p[i]);
            }
        }
    }

    #[test]
    fn seg_loss_values() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_vec(3, 1, vec![1.0 - crate::nn::PROB_EPS, crate::nn::PROB_EPS, 1.0 - crate::nn::PROB_EPS]));
        let l = seg_loss_var(&mut g, p, &[true, false, true]);
        assert!(g.item(l) < 1e-6);
        let h = g.constant(Tensor::from_vec(4, 1, vec![0.5; 4]));
        let l = seg_loss_var(&mut g, h, &[true, false, false, true]);
        assert!((g.item(l) - 2f64.ln()).abs() < 1e-12);
        assert!((g.item(l) - bce(&[1.0, 0.0, 0.0, 1.0], &[0.5; 4])).abs() < 1e-15);
    }

    #[test]
    fn mask_all_ones_keeps_every_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = cloud(&mut rng, 16, 0);
        let cfg = MaskConfig {
            resample: 16,
            ..Default::default()
        };
        let m = mask_and_center(&x, &[1.0; 16], &cfg);
        assert!(!m.fell_back);
        let mean: Vec<f64> = (0..3).map(|a| (0..16).map(|r| x.get(r, a)).sum::<f64>() / 16.0).collect();
        for a in 0..3 {
            assert!((m.centroid[a] - mean[a]).abs() < 1e-12);
        }
        for r in 0..16 {
            for a in 0..3 {
                assert!((m.points.get(r, a) + m.centroid[a] - x.get(r, a)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_all_zero_falls_back_and_is_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = cloud(&mut rng, 30, 2);
        let m = mask_and_center(&x, &[0.0; 30], &MaskConfig::default());
        assert!(m.fell_back);
        assert_eq!(m.points.shape(), (256, 5));
        let mut probs = vec![0.0; 30];
        (0..10).for_each(|i| probs[i * 3] = 0.9);
        let m = mask_and_center(&x, &probs, &MaskConfig::default());
        assert!(!m.fell_back);
        for a in 0..3 {
            let mean = (0..m.points.rows).map(|r| m.points.get(r, a)).sum::<f64>() / m.points.rows as f64;
            assert!(mean.abs() < 1e-9);
        }
        for r in 0..m.points.rows {
            assert_eq!(m.points.get(r, 4), x.get((r * 10 / 256) * 3, 4));
        }
    }

    fn boxnet(rng: &mut ChaCha8Rng, onehot: usize, k: usize) -> BoxNet {
        BoxNet::new(3 + k, onehot, anchors(), &small_arch(), rng).unwrap()
    }

    fn run(net: &BoxNet, masked: &Masked, class_id: usize) -> (Vec<f64>, [f64; 3]) {
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &net.params, false);
        let out = net.forward(&mut g, &b, masked, class_id);
        let c = &g.value(out.center).data;
        (g.value(out.head).data.clone(), [c[0], c[1], c[2]])
    }

    #[test]
    fn box_head_shape_translation_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = boxnet(&mut rng, 5, 1);
        let x = cloud(&mut rng, 40, 1);
        let cfg = MaskConfig {
            resample: 40,
            ..Default::default()
        };
        let m = mask_and_center(&x, &[1.0; 40], &cfg);
        let (head, center) = run(&net, &m, 2);
        assert_eq!(head.len(), net.anchors.head_len());
        let t = [0.7, -0.3, 2.5];
        let mut shifted = x.clone();
        for r in 0..40 {
            for a in 0..3 {
                shifted.data[r * 4 + a] += t[a];
            }
        }
        let ms = mask_and_center(&shifted, &[1.0; 40], &cfg);
        let (head2, center2) = run(&net, &ms, 2);
        for a in 0..3 {
            assert!((center2[a] - center[a] - t[a]).abs() < 1e-9);
        }
        for (u, v) in head.iter().skip(3).zip(head2.iter().skip(3)) {
            assert!((u - v).abs() < 1e-9);
        }
        let perm: Vec<usize> = (0..40).map(|i| (i * 7) % 40).collect();
        let mut mp = m.clone();
        mp.points = Tensor::from_vec(40, 4, perm.iter().flat_map(|&i| m.points.row_slice(i).to_vec()).collect());
        let (head3, _) = run(&net, &mp, 2);
        assert_eq!(head, head3);
    }

    #[test]
    fn without_onehot_class_id_is_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let det = Detector::new(3, 5, OneHotUse { seg: false, boxes: false }, anchors(), small_arch(), MaskConfig::default(), 9).unwrap();
        let x = cloud(&mut rng, 30, 0);
        let a = det.predict(&x, 0);
        let b = det.predict(&x, 4);
        assert_eq!(a, b);
        let det = Detector::new(3, 5, OneHotUse { seg: true, boxes: true }, anchors(), small_arch(), MaskConfig::default(), 9).unwrap();
        assert_ne!(det.predict(&x, 0).head, det.predict(&x, 4).head);
    }

    /// Head values that decode exactly to `gt` given the forward pass's
    /// centers, with a dominant logit at the encoded indices.
    fn exact_head(net: &BoxNet, gt: &Box3D, class_id: usize, stage1: [f64; 3]) -> Vec<f64> {
        let l = net.layout();
        let t = net.anchors.encode(gt, Some(class_id));
        let mut h = vec![0.0; l.len()];
        for a in 0..3 {
            h[a] = gt.center[a] - stage1[a];
        }
        h[l.heading_logits() + t.heading_bin] = 60.0;
        h[l.heading_residuals() + t.heading_bin] = t.heading_residual;
        h[l.size_logits() + t.size_anchor] = 60.0;
        for k in 0..3 {
            h[l.size_residuals() + 3 * t.size_anchor + k] = t.size_residual[k];
        }
        h
    }

    #[test]
    fn exact_head_has_zero_regression_loss() {
        let net = boxnet(&mut ChaCha8Rng::seed_from_u64(5), 0, 0);
        let gt = Box3D::new([0.3, 0.5, 6.0], [0.9, 0.7, 1.4], 0.4);
        let stage1 = [0.2, 0.4, 5.8];
        let h = exact_head(&net, &gt, 1, stage1);
        let mut g = Graph::new();
        let head = g.constant(Tensor::row(&h));
        let s1 = g.constant(Tensor::row(&stage1));
        let d = g.slice_cols(head, 0, 3);
        let center = g.add(s1, d);
        let out = BoxOutput {
            head,
            stage1_center: s1,
            center,
        };
        let t = box_loss_terms(&mut g, &net, &out, &gt, 1);
        assert!(g.item(t.center) < 1e-20);
        assert!(g.item(t.heading_reg) < 1e-20);
        assert!(g.item(t.size_reg) < 1e-20);
        assert!(g.item(t.corner) < 1e-20);
        assert!(g.item(t.heading_cls) < 1e-20);
        assert!(g.item(t.size_cls) < 1e-20);
        assert!((g.item(t.stage1_center) - smooth_l1(&gt.center, &stage1)).abs() < 1e-15);
        let (decoded, _) = net.decode(&h, gt.center);
        assert!(iou3d(&decoded, &gt) > 1.0 - 1e-9);
    }

    #[test]
    fn corner_loss_is_flip_invariant() {
        let net = boxnet(&mut ChaCha8Rng::seed_from_u64(6), 0, 0);
        let gt = Box3D::new([0.0, 0.5, 6.0], [0.9, 0.7, 1.4], 1.2);
        let flipped = gt.flipped().normalized();
        let h = exact_head(&net, &flipped, 1, [0.0; 3]);
        let mut g = Graph::new();
        let head = g.constant(Tensor::row(&h));
        let s1 = g.constant(Tensor::row(&[0.0; 3]));
        let d = g.slice_cols(head, 0, 3);
        let center = g.add(s1, d);
        let out = BoxOutput {
            head,
            stage1_center: s1,
            center,
        };
        let bv = net.decode_var(&mut g, &out, net.anchors.heading_bin(flipped.heading), 1);
        let corners = g.box_corners(bv);
        let direct = g.smooth_l1(corners, Tensor::from_rows(&box_corners(&gt)));
        let flip = g.smooth_l1(corners, Tensor::from_rows(&box_corners(&gt.flipped())));
        let m = g.minimum(direct, flip);
        assert!(g.item(direct) > 0.1);
        assert!(g.item(m) < 1e-20);
    }

    /// Fixture with fixed head values; the weighted loss must equal the sum
    /// of plain per-term values times the default weights.
    #[test]
    fn weighted_composition_matches_plain_terms() {
        let net = boxnet(&mut ChaCha8Rng::seed_from_u64(7), 0, 0);
        let l = net.layout();
        let gt = Box3D::new([0.1, 0.4, 6.2], [1.0, 0.6, 0.8], -2.0);
        let mut h: Vec<f64> = (0..l.len()).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.05).collect();
        h[0] = 0.05;
        let stage1 = [0.2, 0.3, 6.0];
        let mut g = Graph::new();
        let head = g.constant(Tensor::row(&h));
        let s1 = g.constant(Tensor::row(&stage1));
        let d = g.slice_cols(head, 0, 3);
        let center = g.add(s1, d);
        let out = BoxOutput {
            head,
            stage1_center: s1,
            center,
        };
        let w = BoxLossWeights::default();
        let total = box_loss_strong_var(&mut g, &net, &out, &gt, 0, &w);

        let t = net.anchors.encode(&gt, Some(0));
        let c = [stage1[0] + h[0], stage1[1] + h[1], stage1[2] + h[2]];
        let hr = h[l.heading_residuals() + t.heading_bin];
        let sr: Vec<f64> = (0..3).map(|k| h[l.size_residuals() + 3 * t.size_anchor + k]).collect();
        let a = net.anchors.sizes[t.size_anchor];
        let pred = Box3D::new(
            c,
            [0, 1, 2].map(|k| a[k] * (1.0 + sr[k])),
            net.anchors.bin_center(t.heading_bin) + hr * PI / 12.0,
        );
        let flat = |b: &Box3D| box_corners(b).iter().flatten().copied().collect::<Vec<f64>>();
        let corner = smooth_l1(&flat(&gt), &flat(&pred)).min(smooth_l1(&flat(&gt.flipped()), &flat(&pred)));
        let want = 0.1 * smooth_l1(&gt.center, &stage1)
            + 0.1 * smooth_l1(&gt.center, &c)
            + 0.1 * softmax_ce(&h[l.heading_logits()..l.heading_logits() + 12], t.heading_bin)
            + 2.0 * smooth_l1(&[t.heading_residual], &[hr])
            + 0.1 * softmax_ce(&h[l.size_logits()..l.size_logits() + 3], t.size_anchor)
            + 2.0 * smooth_l1(&t.size_residual, &sr)
            + 0.1 * corner;
        assert!((g.item(total) - want).abs() < 1e-12, "{} vs {want}", g.item(total));
    }

    #[test]
    fn end_to_end_gradients_of_supervised_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let det = Detector::new(4, 5, OneHotUse { seg: true, boxes: true }, anchors(), small_arch(), MaskConfig { resample: 24, ..Default::default() }, 3).unwrap();
        let x = cloud(&mut rng, 24, 1);
        let mask: Vec<bool> = (0..24).map(|i| i % 3 != 0).collect();
        let gt = Box3D::new([0.1, 0.0, 6.1], [0.8, 0.9, 1.4], 0.6);
        let probs = det.seg.predict(&x, 1);
        let masked = mask_and_center(&x, &probs, &det.mask);
        let w = BoxLossWeights::default();

        let seg_loss = |p: &ParamSet| {
            let mut g = Graph::new();
            let b = Bound::new(&mut g, p, false);
            let pr = det.seg.forward(&mut g, &b, &x, 1);
            let l = seg_loss_var(&mut g, pr, &mask);
            g.item(l)
        };
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &det.seg.params, true);
        let pr = det.seg.forward(&mut g, &b, &x, 1);
        let l = seg_loss_var(&mut g, pr, &mask);
        let grads = g.backward(l);
        let analytic = b.grads(&g, &grads);
        let entries = sample_entries(&det.seg.params, 20, &mut rng);
        let r = check_params(&det.seg.params, &analytic, &entries, DEFAULT_STEP, seg_loss);
        assert!(r.passes(1e-3), "{r:?}");

        let box_loss = |p: &ParamSet| {
            let mut g = Graph::new();
            let b = Bound::new(&mut g, p, false);
            let out = det.boxes.forward(&mut g, &b, &masked, 1);
            let l = box_loss_strong_var(&mut g, &det.boxes, &out, &gt, 1, &w);
            g.item(l)
        };
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &det.boxes.params, true);
        let out = det.boxes.forward(&mut g, &b, &masked, 1);
        let l = box_loss_strong_var(&mut g, &det.boxes, &out, &gt, 1, &w);
        let grads = g.backward(l);
        let analytic = b.grads(&g, &grads);
        let entries = sample_entries(&det.boxes.params, 20, &mut rng);
        let r = check_params(&det.boxes.params, &analytic, &entries, DEFAULT_STEP, box_loss);
        assert!(r.passes(1e-3), "{r:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let det = Detector::new(3, 5, OneHotUse { seg: true, boxes: false }, anchors(), small_arch(), MaskConfig::default(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        det.to_checkpoint().save(dir.path()).unwrap();
        let back = Detector::from_checkpoint(&Checkpoint::load(dir.path()).unwrap()).unwrap();
        let x = cloud(&mut rng, 20, 0);
        assert_eq!(det.predict(&x, 2), back.predict(&x, 2));
        assert_eq!(back.boxes.anchors, det.boxes.anchors);
        assert_eq!(back.onehot, det.onehot);
    }
}
