//! Losses that supervise 3D boxes of weak classes from 2D labels alone: a
//! relaxed reprojection loss and size priors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, GeometryError, Result};
use crate::geometry::{box_corners, project_box_to_image, Box2D, Box3D, Camera};
use crate::nn::{smooth_l1_value, Graph, Tensor, Var};

/// Admissible band for each projected coordinate `[left, top, right, bottom]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprojBounds {
    pub lower: Box2D,
    pub upper: Box2D,
}

impl ReprojBounds {
    /// Lower box is the label itself; the upper box has the same center and
    /// `s` times its width and height.
    pub fn from_scale(label: &Box2D, s: f64) -> Result<Self> {
        if !(s >= 1.0) {
            return Err(Error::Config(format!("reprojection scale must be >= 1, got {s}")));
        }
        Ok(Self {
            lower: *label,
            upper: label.scaled(s),
        })
    }

    /// General form: `lower = label + l`, `upper = label + u`, both as
    /// `[left, top, right, bottom]` offsets in pixels.
    pub fn from_offsets(label: &Box2D, u: [f64; 4], l: [f64; 4]) -> Self {
        let base = label.to_array();
        let add = |o: [f64; 4]| Box2D::from_array([base[0] + o[0], base[1] + o[1], base[2] + o[2], base[3] + o[3]]);
        Self {
            lower: add(l),
            upper: add(u),
        }
    }

    /// Per-coordinate `(lo, hi)` of the zero-penalty band.
    pub fn intervals(&self) -> ([f64; 4], [f64; 4]) {
        let a = self.lower.to_array();
        let b = self.upper.to_array();
        let mut lo = [0.0; 4];
        let mut hi = [0.0; 4];
        for i in 0..4 {
            lo[i] = a[i].min(b[i]);
            hi[i] = a[i].max(b[i]);
        }
        (lo, hi)
    }
}

fn relaxed_penalty(x: f64, lo: f64, hi: f64) -> f64 {
    if x > hi {
        smooth_l1_value(x - hi)
    } else if x < lo {
        smooth_l1_value(x - lo)
    } else {
        0.0
    }
}

/// Relaxed reprojection loss of a camera-frame box against its 2D label.
pub fn relaxed_reproj_loss(b: &Box3D, label: &Box2D, s: f64, cam: &Camera) -> Result<f64> {
    let bounds = ReprojBounds::from_scale(label, s)?;
    Ok(relaxed_reproj_loss_bounds(b, &bounds, cam)?)
}

pub fn relaxed_reproj_loss_bounds(b: &Box3D, bounds: &ReprojBounds, cam: &Camera) -> std::result::Result<f64, GeometryError> {
    let proj = project_box_to_image(b, cam)?.to_array();
    let (lo, hi) = bounds.intervals();
    Ok((0..4).map(|i| relaxed_penalty(proj[i], lo[i], hi[i])).sum())
}

/// Graph version. `boxv` is a `1 x 7` camera-frame box.
pub fn relaxed_reproj_var(
    g: &mut Graph,
    boxv: Var,
    bounds: &ReprojBounds,
    cam: &Camera,
) -> std::result::Result<Var, GeometryError> {
    let b = Box3D::from_array(&g.value(boxv).data);
    if let Some(c) = box_corners(&b).iter().find(|c| c[2] <= 0.0) {
        return Err(GeometryError::BehindCamera { depth: c[2] });
    }
    let corners = g.box_corners(boxv);
    let uv = g.project(corners, *cam);
    let mins = g.min_rows(uv);
    let maxs = g.max_rows(uv);
    let reproj = g.concat_cols(&[mins, maxs]);
    let (lo, hi) = bounds.intervals();
    Ok(g.relaxed_l1(reproj, Tensor::row(&lo), Tensor::row(&hi)))
}

/// Minimum-volume thresholds and prior weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// `V^c` indexed by class id; missing entries mean 0.
    pub volume_thresholds: Vec<f64>,
    pub w_vol: f64,
    pub w_svar: f64,
}

impl PriorConfig {
    pub fn threshold(&self, class_id: usize) -> f64 {
        self.volume_thresholds.get(class_id).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.volume_thresholds.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Config("volume thresholds must be >= 0".into()));
        }
        Ok(())
    }
}

/// The two prior terms before weighting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorTerms {
    pub volume: f64,
    pub size_var: f64,
}

impl PriorTerms {
    pub fn weighted(&self, prior: &PriorConfig) -> f64 {
        prior.w_vol * self.volume + prior.w_svar * self.size_var
    }
}

fn class_means(items: &[(usize, [f64; 3])]) -> Vec<(usize, [f64; 3], usize)> {
    let mut out: Vec<(usize, [f64; 3], usize)> = Vec::new();
    for &(c, s) in items {
        match out.iter_mut().find(|(k, _, _)| *k == c) {
            Some((_, acc, n)) => {
                for a in 0..3 {
                    acc[a] += s[a];
                }
                *n += 1;
            }
            None => out.push((c, s, 1)),
        }
    }
    for (_, acc, n) in &mut out {
        for v in acc.iter_mut() {
            *v /= *n as f64;
        }
    }
    out
}

/// Volume hinge and within-class size variance over a minibatch of
/// `(class id, size)` predictions, each averaged within a class and summed
/// over classes.
pub fn box_prior_terms(items: &[(usize, [f64; 3])], prior: &PriorConfig) -> PriorTerms {
    let means = class_means(items);
    let mut volume = 0.0;
    let mut size_var = 0.0;
    for &(c, s) in items {
        let (_, mean, n) = means.iter().find(|(k, _, _)| *k == c).expect("class present");
        let per = 1.0 / *n as f64;
        volume += per * (prior.threshold(c) - s[0] * s[1] * s[2]).max(0.0);
        if *n > 1 {
            size_var += per * (0..3).map(|a| smooth_l1_value(s[a] - mean[a])).sum::<f64>();
        }
    }
    PriorTerms { volume, size_var }
}

pub fn box_prior_loss(items: &[(usize, [f64; 3])], prior: &PriorConfig) -> f64 {
    box_prior_terms(items, prior).weighted(prior)
}

/// Graph version over `(class id, 1 x 3 size var)`; returns the unweighted
/// `(volume, size variance)` scalars. The per-class mean is a constant.
pub fn box_prior_vars(g: &mut Graph, items: &[(usize, Var)], prior: &PriorConfig) -> (Var, Var) {
    let plain: Vec<(usize, [f64; 3])> = items
        .iter()
        .map(|&(c, v)| {
            let d = &g.value(v).data;
            (c, [d[0], d[1], d[2]])
        })
        .collect();
    let means = class_means(&plain);
    let mut vol_terms = Vec::new();
    let mut var_terms = Vec::new();
    for &(c, size) in items {
        let (_, mean, n) = means.iter().find(|(k, _, _)| *k == c).expect("class present");
        let per = 1.0 / *n as f64;
        let threshold = prior.threshold(c);
        if threshold > 0.0 {
            let h = g.slice_cols(size, 0, 1);
            let w = g.slice_cols(size, 1, 1);
            let l = g.slice_cols(size, 2, 1);
            let hw = g.mul(h, w);
            let vol = g.mul(hw, l);
            let neg = g.scale(vol, -1.0);
            let t = g.constant(Tensor::scalar(threshold));
            let gap = g.add(neg, t);
            vol_terms.push((per, g.relu(gap)));
        }
        if *n > 1 {
            var_terms.push((per, g.smooth_l1(size, Tensor::row(mean))));
        }
    }
    let volume = g.weighted_sum(&vol_terms);
    let size_var = g.weighted_sum(&var_terms);
    (volume, size_var)
}
