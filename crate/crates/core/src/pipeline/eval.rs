//! Average precision over 3D IoU matches.

use super::train::Detection;
use crate::geometry::{iou3d, Box3D};

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub scene_id: u64,
    pub box3d: Box3D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAp {
    pub class_id: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_det: usize,
    /// `(recall, precision)` after each detection in score order.
    pub pr: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApReport {
    pub classes: Vec<ClassAp>,
    /// Unweighted mean over classes with ground truth.
    pub map: f64,
}

impl ApReport {
    pub fn ap(&self, class_id: usize) -> Option<f64> {
        self.classes.iter().find(|c| c.class_id == class_id).and_then(|c| c.ap)
    }
}

/// True-positive flags of `dets` (already in score order) under greedy
/// matching: each detection takes the unmatched ground truth of its scene
/// with the highest IoU, if that IoU reaches the threshold.
pub fn match_detections(dets: &[&Detection], gts: &[&GroundTruth], threshold: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.scene_id != d.scene_id {
                    continue;
                }
                let iou = iou3d(&d.box3d, &g.box3d);
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the precision-recall curve with the precision envelope,
/// integrated at every recall change.
pub fn average_precision(pr: &[(f64, f64)]) -> f64 {
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    for &(r, p) in pr {
        recall.push(r);
        precision.push(p);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

/// Per-class AP over `classes` and their mean.
pub fn evaluate_ap(dets: &[Detection], gts: &[GroundTruth], classes: &[usize], threshold: f64) -> ApReport {
    let mut out = Vec::with_capacity(classes.len());
    for &c in classes {
        let mut cd: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
        cd.sort_by(|a, b| b.score.total_cmp(&a.score));
        let cg: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == c).collect();
        let tp = match_detections(&cd, &cg, threshold);
        let mut pr = Vec::with_capacity(tp.len());
        let mut hits = 0;
        for (k, &t) in tp.iter().enumerate() {
            hits += t as usize;
            let recall = if cg.is_empty() { 0.0 } else { hits as f64 / cg.len() as f64 };
            pr.push((recall, hits as f64 / (k + 1) as f64));
        }
        let ap = if cg.is_empty() {
            log::warn!("class {c} has no ground truth; its AP is excluded from the mean");
            None
        } else {
            Some(average_precision(&pr))
        };
        out.push(ClassAp {
            class_id: c,
            ap,
            num_gt: cg.len(),
            num_det: cd.len(),
            pr,
        });
    }
    let valid: Vec<f64> = out.iter().filter_map(|c| c.ap).collect();
    let map = if valid.is_empty() {
        f64::NAN
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    ApReport { classes: out, map }
}
