//! Dataset directories and checkpoints on disk.

use std::path::Path;

use super::config::{Mode, RunConfig};
use super::train::BoxPcReport;
use crate::boxpc::{BoxPcNet, PerturbBounds};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::nn::Checkpoint;
use crate::synthdata::Split;

pub const TRAIN_DIR: &str = "train";
pub const VAL_DIR: &str = "val";
const RUN_TAG: &str = "run_config";

/// Loads the training split for `mode`. Transfer modes on a split generated
/// without weak labels get any weak-class 3D label that is present removed
/// before training can see it.
pub fn load_train_split(data: &Path, mode: Mode) -> Result<Split> {
    let mut split = Split::load(&data.join(TRAIN_DIR))?;
    if !mode.fully_supervised() && split.meta.label_fraction == 0.0 {
        let removed = split.redact_weak_labels();
        if removed > 0 {
            log::warn!("removed {removed} weak-class 3D labels from {}", data.display());
        }
    }
    Ok(split)
}

pub fn load_val_split(data: &Path) -> Result<Split> {
    Split::load(&data.join(VAL_DIR))
}

/// Saves a trained detector together with the configuration it was
/// trained with.
pub fn save_detector(det: &Detector, cfg: &RunConfig, dir: &Path) -> Result<()> {
    det.to_checkpoint().tag(RUN_TAG, cfg).save(dir)
}

pub fn load_detector(dir: &Path) -> Result<(Detector, Option<RunConfig>)> {
    let ck = Checkpoint::load(dir)?;
    let det = Detector::from_checkpoint(&ck)?;
    let cfg = ck.tags.contains_key(RUN_TAG).then(|| ck.get_tag(RUN_TAG)).transpose()?;
    Ok((det, cfg))
}

pub fn save_boxpc(report: &BoxPcReport, dir: &Path) -> Result<()> {
    report
        .net
        .to_checkpoint(&report.bounds)
        .tag("heldout_auc", report.auc)
        .tag("epoch_losses", &report.epoch_losses)
        .save(dir)
}

pub fn load_boxpc(dir: &Path) -> Result<(BoxPcNet, PerturbBounds)> {
    let ck = Checkpoint::load(dir)?;
    BoxPcNet::from_checkpoint(&ck).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", dir.display())),
        other => other,
    })
}
