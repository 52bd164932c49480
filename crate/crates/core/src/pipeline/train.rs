//! Fit-network pretraining, alternating detector training and inference.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::boxpc::{
    fit_loss_var, pretrain_loss_var, refine_box, roc_auc, sample_perturbation, BoxPcNet, PerturbBounds, PerturbSet,
    Perturbation,
};
use crate::detector::{box_loss_strong_var, mask_and_center, seg_loss_var, AnchorConfig, Detector};
use crate::error::{Error, Result};
use crate::geometry::{iou3d, Box3D};
use crate::nn::{Adam, Bound, Graph, Tensor};
use crate::synthdata::{derive_seed, FrustumSample, Split, Supervision};
use crate::weakloss::{box_prior_vars, relaxed_reproj_var, ReprojBounds};

/// A frustum with its point tensors built once.
pub struct Prepared<'a> {
    pub sample: &'a FrustumSample,
    /// All `N x (3 + k)` points.
    pub points: Tensor,
    /// The first rows, fed to the fit network.
    pub fit_points: Tensor,
}

pub fn prepare(samples: &[FrustumSample], fit_points: usize) -> Vec<Prepared<'_>> {
    samples
        .iter()
        .map(|s| {
            let n = s.num_points();
            let m = fit_points.min(n);
            Prepared {
                sample: s,
                points: Tensor::from_vec(n, s.dims, s.points.clone()),
                fit_points: Tensor::from_vec(m, s.dims, s.points[..m * s.dims].to_vec()),
            }
        })
        .collect()
}

/// Classes whose labelled samples train the fit network and detector.
fn fit_class_onehot(cfg: &RunConfig, split: &Split) -> usize {
    if cfg.mode.fully_supervised() {
        split.meta.classes.len()
    } else {
        0
    }
}

#[derive(Debug)]
pub struct BoxPcReport {
    pub net: BoxPcNet,
    pub bounds: PerturbBounds,
    /// Mean loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Held-out ROC-AUC of the fit probability on positive versus negative
    /// perturbations, when validation data was given.
    pub auc: Option<f64>,
}

/// One positive and one negative perturbation per labelled sample.
fn perturbed_pairs(
    p: &Prepared,
    bounds: &PerturbBounds,
    seed: u64,
) -> Result<[(Perturbation, PerturbSet); 2]> {
    let gt = p.sample.box3d.ok_or_else(|| Error::Data("fit-network sample has no 3D label".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos = sample_perturbation(&gt, bounds, PerturbSet::Positive, &mut rng)?;
    let neg = sample_perturbation(&gt, bounds, PerturbSet::Negative, &mut rng)?;
    Ok([(pos, PerturbSet::Positive), (neg, PerturbSet::Negative)])
}

/// Trains the fit network on labelled training frustums. Each minibatch
/// holds one positive and one negative perturbation per sample.
pub fn pretrain_boxpc(train: &Split, val: Option<&Split>, cfg: &RunConfig) -> Result<BoxPcReport> {
    cfg.validate()?;
    let bc = &cfg.boxpc;
    let onehot = fit_class_onehot(cfg, train);
    let labelled: Vec<&FrustumSample> = train.samples.iter().filter(|s| s.box3d.is_some()).collect();
    if labelled.is_empty() {
        return Err(Error::Data("no labelled training samples for the fit network".into()));
    }
    let owned: Vec<FrustumSample> = labelled.into_iter().cloned().collect();
    let prepared = prepare(&owned, bc.points);
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 11));
    let mut net = BoxPcNet::new(bc.encoder, train.meta.extra_channels, onehot, bc.arch.clone(), &mut init_rng)?;
    let mut adam = Adam::new(&net.params, bc.adam);
    let per_batch = bc.batch_size / 2;
    let class_of = |p: &Prepared| if onehot > 0 { Some(p.sample.class_id) } else { None };
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 12));
    let mut epoch_losses = Vec::with_capacity(bc.epochs);
    for epoch in 0..bc.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(per_batch) {
            let mut g = Graph::new();
            let bound = Bound::new(&mut g, &net.params, true);
            let n_items = 2 * chunk.len();
            let mut terms = Vec::with_capacity(n_items);
            for &i in chunk {
                let p = &prepared[i];
                let seed = derive_seed(cfg.seed, ((epoch as u64) << 32) | i as u64);
                let gt = p.sample.box3d.unwrap();
                for (delta, set) in perturbed_pairs(p, &bc.bounds, seed)? {
                    let l = pretrain_loss_var(
                        &mut g,
                        &net,
                        &bound,
                        &p.fit_points,
                        &gt,
                        &delta,
                        set,
                        class_of(p),
                        bc.w_cls,
                        bc.w_reg,
                    );
                    terms.push((1.0 / n_items as f64, l));
                }
            }
            let loss = g.weighted_sum(&terms);
            total += g.item(loss) * n_items as f64;
            count += n_items;
            let grads = g.backward(loss);
            adam.step(&mut net.params, &bound.grads(&g, &grads));
        }
        epoch_losses.push(total / count as f64);
        log::debug!("fit network epoch {epoch}: loss {:.4}", total / count as f64);
    }
    let auc = match val {
        Some(v) => Some(heldout_auc(&net, v, cfg)?),
        None => None,
    };
    Ok(BoxPcReport {
        net,
        bounds: bc.bounds.clone(),
        epoch_losses,
        auc,
    })
}

/// Validation samples the fit network is scored on: labelled strong-class
/// frustums, or every labelled frustum in fully supervised modes.
pub fn fit_eval_samples<'a>(val: &'a Split, cfg: &RunConfig) -> Vec<&'a FrustumSample> {
    let strong = val.strong_classes();
    val.samples
        .iter()
        .filter(|s| s.box3d.is_some() && (cfg.mode.fully_supervised() || strong.contains(&s.class_id)))
        .collect()
}

/// ROC-AUC of the fit probability on one positive and one negative
/// perturbation per held-out sample.
pub fn heldout_auc(net: &BoxPcNet, val: &Split, cfg: &RunConfig) -> Result<f64> {
    let owned: Vec<FrustumSample> = fit_eval_samples(val, cfg).into_iter().cloned().collect();
    let prepared = prepare(&owned, cfg.boxpc.points);
    let mut scores = Vec::with_capacity(2 * prepared.len());
    let mut labels = Vec::with_capacity(2 * prepared.len());
    for (i, p) in prepared.iter().enumerate() {
        let gt = p.sample.box3d.unwrap();
        let class = (net.onehot_classes > 0).then_some(p.sample.class_id);
        for (delta, set) in perturbed_pairs(p, &cfg.boxpc.bounds, derive_seed(cfg.seed ^ 0xa0c, i as u64))? {
            let (prob, _) = net.predict(&p.fit_points, &delta.apply(&gt), class);
            scores.push(prob);
            labels.push(set == PerturbSet::Positive);
        }
    }
    Ok(roc_auc(&scores, &labels))
}

/// Effect of refinement on ground-truth boxes perturbed by negative
/// perturbations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefinementReport {
    pub samples: usize,
    pub mean_iou_before: f64,
    pub mean_iou_after: f64,
    /// Share of samples whose box-parameter error shrank.
    pub improved_fraction: f64,
}

/// Perturbs each held-out label with a perturbation from `set` and
/// compares IoU before and after one refinement.
pub fn evaluate_refinement(net: &BoxPcNet, val: &Split, cfg: &RunConfig, set: PerturbSet) -> Result<RefinementReport> {
    let owned: Vec<FrustumSample> = fit_eval_samples(val, cfg).into_iter().cloned().collect();
    let prepared = prepare(&owned, cfg.boxpc.points);
    let (mut before, mut after, mut improved) = (0.0, 0.0, 0);
    let param_err = |a: &Box3D, b: &Box3D| {
        let (x, y) = (a.to_array(), b.to_array());
        let mut e: f64 = (0..6).map(|k| (x[k] - y[k]).powi(2)).sum();
        let dh = crate::geometry::normalize_angle(x[6] - y[6]);
        e += dh * dh;
        e.sqrt()
    };
    for (i, p) in prepared.iter().enumerate() {
        let gt = p.sample.box3d.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ 0x4ef, i as u64));
        let delta = sample_perturbation(&gt, &cfg.boxpc.bounds, set, &mut rng)?;
        let b0 = delta.apply(&gt);
        let class = (net.onehot_classes > 0).then_some(p.sample.class_id);
        let b = refine_box(net, &p.fit_points, &b0, class);
        before += iou3d(&b0, &gt);
        after += iou3d(&b, &gt);
        if param_err(&b, &gt) < param_err(&b0, &gt) {
            improved += 1;
        }
    }
    let n = prepared.len().max(1) as f64;
    Ok(RefinementReport {
        samples: prepared.len(),
        mean_iou_before: before / n,
        mean_iou_after: after / n,
        improved_fraction: improved as f64 / n,
    })
}

#[derive(Debug)]
pub struct TrainReport {
    pub detector: Detector,
    /// Mean supervised loss per epoch.
    pub strong_losses: Vec<f64>,
    /// Mean weak-class loss per epoch; empty when no weak batches ran.
    pub weak_losses: Vec<f64>,
    pub strong_steps: usize,
    pub weak_steps: usize,
    /// Weak samples whose box had a corner behind the camera, so the
    /// reprojection term was skipped.
    pub reproj_skipped: usize,
    /// Fit-network parameter fingerprints before and after training.
    pub boxpc_fingerprint: Option<(u64, u64)>,
}

/// Trains the detector, alternating one labelled batch with one
/// unlabelled weak-class batch when the mode has weak losses.
pub fn train_detector(train: &Split, boxpc: Option<&BoxPcNet>, cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let mode = cfg.mode;
    if mode.fit_loss() {
        let net = boxpc.ok_or_else(|| Error::Config(format!("mode {mode} needs a pretrained fit network")))?;
        if net.mode != cfg.boxpc.encoder {
            return Err(Error::Config(format!(
                "fit network uses the {:?} encoder but the run asks for {:?}",
                net.mode, cfg.boxpc.encoder
            )));
        }
    }
    let strong: Vec<&FrustumSample> = train.samples.iter().filter(|s| s.box3d.is_some()).collect();
    if strong.is_empty() {
        return Err(Error::Data("no labelled training samples".into()));
    }
    let weak_ids: Vec<usize> = if mode.fully_supervised() {
        Vec::new()
    } else {
        train.weak_classes()
    };
    let weak: Vec<&FrustumSample> = if mode.weak_batches() {
        train
            .samples
            .iter()
            .filter(|s| s.box3d.is_none() && weak_ids.contains(&s.class_id))
            .collect()
    } else {
        Vec::new()
    };
    let labels: Vec<(usize, Box3D)> = strong.iter().map(|s| (s.class_id, s.box3d.unwrap())).collect();
    let anchors = AnchorConfig::from_labels(&labels, cfg.heading_bins)?;
    let dims = 3 + train.meta.extra_channels;
    let num_classes = train.meta.classes.len();
    let mut det = Detector::new(
        dims,
        num_classes,
        mode.onehot(),
        anchors,
        cfg.arch.clone(),
        cfg.mask,
        derive_seed(cfg.seed, 21),
    )?;
    let strong_owned: Vec<FrustumSample> = strong.into_iter().cloned().collect();
    let weak_owned: Vec<FrustumSample> = weak.into_iter().cloned().collect();
    let strong_p = prepare(&strong_owned, cfg.boxpc.points);
    let weak_p = prepare(&weak_owned, cfg.boxpc.points);
    let mut seg_adam = Adam::new(&det.seg.params, cfg.adam);
    let mut box_adam = Adam::new(&det.boxes.params, cfg.adam);
    let fingerprint_before = boxpc.map(|n| n.params.fingerprint());

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 22));
    let mut strong_order: Vec<usize> = (0..strong_p.len()).collect();
    let mut weak_order: Vec<usize> = (0..weak_p.len()).collect();
    weak_order.shuffle(&mut rng);
    let mut weak_cursor = 0;
    let mut report = TrainReport {
        detector: det.clone(),
        strong_losses: Vec::new(),
        weak_losses: Vec::new(),
        strong_steps: 0,
        weak_steps: 0,
        reproj_skipped: 0,
        boxpc_fingerprint: None,
    };
    for epoch in 0..cfg.epochs {
        strong_order.shuffle(&mut rng);
        let (mut s_total, mut s_count, mut w_total, mut w_count) = (0.0, 0, 0.0, 0);
        for chunk in strong_order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &strong_p[i]).collect();
            s_total += strong_step(&mut det, &batch, cfg, &mut seg_adam, &mut box_adam)?;
            s_count += 1;
            report.strong_steps += 1;
            if !weak_p.is_empty() {
                let mut batch = Vec::with_capacity(cfg.batch_size);
                for _ in 0..cfg.batch_size.min(weak_p.len()) {
                    if weak_cursor == weak_order.len() {
                        weak_order.shuffle(&mut rng);
                        weak_cursor = 0;
                    }
                    batch.push(&weak_p[weak_order[weak_cursor]]);
                    weak_cursor += 1;
                }
                let (loss, skipped) = weak_step(&mut det, &batch, boxpc, cfg, &mut box_adam)?;
                w_total += loss;
                w_count += 1;
                report.weak_steps += 1;
                report.reproj_skipped += skipped;
            }
        }
        report.strong_losses.push(s_total / s_count as f64);
        if w_count > 0 {
            report.weak_losses.push(w_total / w_count as f64);
        }
        log::debug!(
            "epoch {epoch}: strong {:.4} weak {:.4}",
            s_total / s_count as f64,
            if w_count > 0 { w_total / w_count as f64 } else { 0.0 }
        );
    }
    report.boxpc_fingerprint = fingerprint_before.zip(boxpc.map(|n| n.params.fingerprint()));
    report.detector = det;
    Ok(report)
}

/// One supervised step on segmentation and box networks. Returns the
/// batch loss.
fn strong_step(det: &mut Detector, batch: &[&Prepared], cfg: &RunConfig, seg_adam: &mut Adam, box_adam: &mut Adam) -> Result<f64> {
    let mut g = Graph::new();
    let sb = Bound::new(&mut g, &det.seg.params, true);
    let bb = Bound::new(&mut g, &det.boxes.params, true);
    let n = batch.len() as f64;
    let mut terms = Vec::with_capacity(2 * batch.len());
    for p in batch {
        let s = p.sample;
        let gt = s
            .box3d
            .ok_or_else(|| Error::Data(format!("labelled batch sample from scene {} has no 3D box", s.scene_id)))?;
        let probs = det.seg.forward(&mut g, &sb, &p.points, s.class_id);
        terms.push((cfg.w_seg / n, seg_loss_var(&mut g, probs, &s.mask)));
        let masked = mask_and_center(&p.points, &g.value(probs).data, &det.mask);
        let out = det.boxes.forward(&mut g, &bb, &masked, s.class_id);
        terms.push((1.0 / n, box_loss_strong_var(&mut g, &det.boxes, &out, &gt, s.class_id, &cfg.box_weights)));
    }
    let loss = g.weighted_sum(&terms);
    let grads = g.backward(loss);
    seg_adam.step(&mut det.seg.params, &sb.grads(&g, &grads));
    box_adam.step(&mut det.boxes.params, &bb.grads(&g, &grads));
    Ok(g.item(loss))
}

/// One weak-class step on the box networks only. Returns the batch loss
/// and the number of skipped reprojection terms.
fn weak_step(
    det: &mut Detector,
    batch: &[&Prepared],
    boxpc: Option<&BoxPcNet>,
    cfg: &RunConfig,
    box_adam: &mut Adam,
) -> Result<(f64, usize)> {
    let mode = cfg.mode;
    let mut g = Graph::new();
    let bb = Bound::new(&mut g, &det.boxes.params, true);
    let frozen = match boxpc {
        Some(net) if mode.fit_loss() => Some((net, Bound::new(&mut g, &net.params, false))),
        _ => None,
    };
    let n = batch.len() as f64;
    let mut fit_items = Vec::with_capacity(batch.len());
    let mut reproj_terms = Vec::new();
    let mut sizes = Vec::with_capacity(batch.len());
    let mut skipped = 0;
    for p in batch {
        let s = p.sample;
        let probs = det.seg.predict(&p.points, s.class_id);
        let masked = mask_and_center(&p.points, &probs, &det.mask);
        let out = det.boxes.forward(&mut g, &bb, &masked, s.class_id);
        let (hb, sa) = det.boxes.argmax_target(&g.value(out.head).data);
        let bv = det.boxes.decode_var(&mut g, &out, hb, sa);
        if let Some((net, _)) = &frozen {
            fit_items.push((&p.fit_points, bv, (net.onehot_classes > 0).then_some(s.class_id)));
        }
        if mode.reproj_loss() {
            let cam_box = g.rotate_box_y(bv, s.frustum_angle);
            let bounds = ReprojBounds::from_scale(&s.box2d, cfg.reproj_scale)?;
            match relaxed_reproj_var(&mut g, cam_box, &bounds, &s.camera) {
                Ok(v) => reproj_terms.push((1.0 / n, v)),
                Err(_) => skipped += 1,
            }
        }
        if mode.prior_loss() {
            sizes.push((s.class_id, g.slice_cols(bv, 3, 3)));
        }
    }
    let mut terms = Vec::new();
    if let Some((net, fb)) = &frozen {
        terms.push((cfg.w_fit, fit_loss_var(&mut g, net, fb, &fit_items)));
    }
    if !reproj_terms.is_empty() {
        terms.push((cfg.w_reproj, g.weighted_sum(&reproj_terms)));
    }
    if !sizes.is_empty() {
        let (vol, svar) = box_prior_vars(&mut g, &sizes, &cfg.prior);
        terms.push((cfg.prior.w_vol, vol));
        terms.push((cfg.prior.w_svar, svar));
    }
    let loss = g.weighted_sum(&terms);
    if g.is_tracked(loss) {
        let grads = g.backward(loss);
        box_adam.step(&mut det.boxes.params, &bb.grads(&g, &grads));
    }
    Ok((g.item(loss), skipped))
}

/// Undoes the frustum rotation of a box predicted in the frustum frame.
pub fn frustum_to_camera(b: &Box3D, frustum_angle: f64) -> Box3D {
    b.rotated_y(frustum_angle).normalized()
}

/// A scored 3D box in the camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub box3d: Box3D,
    pub score: f64,
    pub scene_id: u64,
    pub object_index: usize,
}

/// Detects the object in one frustum: segmentation, masking, box
/// estimation, optional refinement, then rotation back to the camera frame.
pub fn infer(sample: &FrustumSample, det: &Detector, boxpc: Option<&BoxPcNet>, cfg: &RunConfig) -> Result<Detection> {
    if sample.num_points() == 0 {
        return Err(Error::EmptyFrustum);
    }
    let points = Tensor::from_vec(sample.num_points(), sample.dims, sample.points.clone());
    let pred = det.predict(&points, sample.class_id);
    let mut b = pred.box3d;
    let mut score = sample.score;
    if let Some(net) = boxpc.filter(|_| cfg.mode.refine()) {
        let m = cfg.boxpc.points.min(sample.num_points());
        let fit_points = Tensor::from_vec(m, sample.dims, sample.points[..m * sample.dims].to_vec());
        let class = (net.onehot_classes > 0).then_some(sample.class_id);
        b = refine_box(net, &fit_points, &b, class);
        if cfg.score_with_fit {
            score *= net.predict(&fit_points, &b, class).0;
        }
    }
    Ok(Detection {
        class_id: sample.class_id,
        box3d: frustum_to_camera(&b, sample.frustum_angle),
        score,
        scene_id: sample.scene_id,
        object_index: sample.object_index,
    })
}

/// Strong and weak class ids of a split, as trained.
pub fn class_sets(split: &Split) -> (Vec<usize>, Vec<usize>) {
    let strong = split
        .meta
        .classes
        .iter()
        .filter(|c| c.supervision == Supervision::Strong)
        .map(|c| c.id)
        .collect();
    (strong, split.weak_classes())
}
