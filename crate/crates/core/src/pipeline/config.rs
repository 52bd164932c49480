//! Run configuration and the flat `key=value` config format.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::boxpc::{BoxPcArch, EncoderMode, PerturbBounds};
use crate::detector::{BoxLossWeights, DetectorArch, MaskConfig, OneHotUse};
use crate::error::{Error, Result};
use crate::nn::AdamConfig;
use crate::synthdata::{DatasetConfig, SplitMeta, Supervision};
use crate::weakloss::PriorConfig;

/// Which losses and stages a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Baseline,
    BaselineNoOnehot,
    R,
    Boxpc,
    BoxpcR,
    BoxpcRP,
    FullySupervised,
    FullySupervisedRefine,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::Baseline,
        Mode::BaselineNoOnehot,
        Mode::R,
        Mode::Boxpc,
        Mode::BoxpcR,
        Mode::BoxpcRP,
        Mode::FullySupervised,
        Mode::FullySupervisedRefine,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::BaselineNoOnehot => "baseline-no-onehot",
            Mode::R => "r",
            Mode::Boxpc => "boxpc",
            Mode::BoxpcR => "boxpc-r",
            Mode::BoxpcRP => "boxpc-r-p",
            Mode::FullySupervised => "fully-supervised",
            Mode::FullySupervisedRefine => "fully-supervised-refine",
        }
    }

    pub fn fit_loss(&self) -> bool {
        matches!(self, Mode::Boxpc | Mode::BoxpcR | Mode::BoxpcRP)
    }

    pub fn reproj_loss(&self) -> bool {
        matches!(self, Mode::R | Mode::BoxpcR | Mode::BoxpcRP)
    }

    pub fn prior_loss(&self) -> bool {
        matches!(self, Mode::BoxpcRP)
    }

    /// Whether unlabelled weak-class batches are trained on at all.
    pub fn weak_batches(&self) -> bool {
        self.fit_loss() || self.reproj_loss() || self.prior_loss()
    }

    pub fn refine(&self) -> bool {
        self.fit_loss() || *self == Mode::FullySupervisedRefine
    }

    pub fn uses_boxpc(&self) -> bool {
        self.fit_loss() || self.refine()
    }

    pub fn fully_supervised(&self) -> bool {
        matches!(self, Mode::FullySupervised | Mode::FullySupervisedRefine)
    }

    /// One-hot placement. Transfer modes keep the class vector out of the
    /// class-agnostic segmentation network.
    pub fn onehot(&self) -> OneHotUse {
        match self {
            Mode::Baseline | Mode::FullySupervised | Mode::FullySupervisedRefine => OneHotUse { seg: true, boxes: true },
            Mode::BaselineNoOnehot => OneHotUse { seg: false, boxes: false },
            _ => OneHotUse { seg: false, boxes: true },
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}'")))
    }
}

/// Fit-network pretraining settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPcTrainConfig {
    pub encoder: EncoderMode,
    pub arch: BoxPcArch,
    pub bounds: PerturbBounds,
    pub w_cls: f64,
    pub w_reg: f64,
    pub epochs: usize,
    /// Even; half the batch comes from each perturbation set.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Points fed to the fit network, resampled from each frustum.
    pub points: usize,
}

impl Default for BoxPcTrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderMode::Combined,
            arch: BoxPcArch::default(),
            bounds: PerturbBounds::default(),
            w_cls: 1.0,
            w_reg: 4.0,
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            points: 128,
        }
    }
}

/// Everything one run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub data: DatasetConfig,
    pub arch: DetectorArch,
    pub mask: MaskConfig,
    pub heading_bins: usize,
    pub box_weights: BoxLossWeights,
    pub w_seg: f64,
    pub w_fit: f64,
    pub w_reproj: f64,
    /// Outer reprojection bound as a multiple of the 2D label box.
    pub reproj_scale: f64,
    pub prior: PriorConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub boxpc: BoxPcTrainConfig,
    /// Multiply the detection score by the fit probability.
    pub score_with_fit: bool,
    pub iou_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::BoxpcRP,
            seed: 0,
            data: DatasetConfig::default(),
            arch: DetectorArch::default(),
            mask: MaskConfig::default(),
            heading_bins: 12,
            box_weights: BoxLossWeights::default(),
            w_seg: 1.0,
            w_fit: 0.05,
            w_reproj: 0.0005,
            reproj_scale: 1.5,
            prior: PriorConfig {
                volume_thresholds: Vec::new(),
                w_vol: 0.0,
                w_svar: 0.1,
            },
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            boxpc: BoxPcTrainConfig::default(),
            score_with_fit: false,
            iou_threshold: 0.25,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.prior.validate()?;
        self.boxpc.bounds.validate()?;
        if self.mode.fully_supervised() && self.data.label_fraction != 1.0 {
            return Err(Error::Config(format!(
                "mode {} needs label_fraction = 1, got {}",
                self.mode, self.data.label_fraction
            )));
        }
        if self.batch_size == 0 || self.boxpc.batch_size < 2 || self.boxpc.batch_size % 2 != 0 {
            return Err(Error::Config("batch sizes must be positive and the fit batch even".into()));
        }
        if self.reproj_scale < 1.0 {
            return Err(Error::Config(format!("reprojection scale must be >= 1, got {}", self.reproj_scale)));
        }
        if self.heading_bins < 2 {
            return Err(Error::Config("need at least 2 heading bins".into()));
        }
        if self.data.points_per_frustum < self.boxpc.points {
            return Err(Error::Config("fit-network points exceed points per frustum".into()));
        }
        Ok(())
    }

    /// Parses flat `key=value` lines over the defaults. Blank lines and
    /// `#` comments are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Sets one documented key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',').map(|x| num(key, x.trim())).collect()
        }
        let d = &mut self.data;
        let b = &mut self.boxpc;
        match key {
            "mode" => self.mode = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.adam.lr = num(key, value)?,
            "heading_bins" => self.heading_bins = num(key, value)?,
            "mask_threshold" => self.mask.threshold = num(key, value)?,
            "mask_min_points" => self.mask.min_points = num(key, value)?,
            "mask_resample" => self.mask.resample = num(key, value)?,
            "seg_trunk" => self.arch.seg_trunk = list(key, value)?,
            "seg_head" => self.arch.seg_head = list(key, value)?,
            "tnet_trunk" => self.arch.tnet_trunk = list(key, value)?,
            "tnet_head" => self.arch.tnet_head = list(key, value)?,
            "box_trunk" => self.arch.box_trunk = list(key, value)?,
            "box_head" => self.arch.box_head = list(key, value)?,
            "w_seg" => self.w_seg = num(key, value)?,
            "w_c1" => self.box_weights.stage1_center = num(key, value)?,
            "w_c2" => self.box_weights.center = num(key, value)?,
            "w_r_cls" => self.box_weights.heading_cls = num(key, value)?,
            "w_r_reg" => self.box_weights.heading_reg = num(key, value)?,
            "w_s_cls" => self.box_weights.size_cls = num(key, value)?,
            "w_s_reg" => self.box_weights.size_reg = num(key, value)?,
            "w_corner" => self.box_weights.corner = num(key, value)?,
            "w_fit" => self.w_fit = num(key, value)?,
            "w_reproj" => self.w_reproj = num(key, value)?,
            "w_vol" => self.prior.w_vol = num(key, value)?,
            "w_svar" => self.prior.w_svar = num(key, value)?,
            "reproj_scale" => self.reproj_scale = num(key, value)?,
            "score_with_fit" => self.score_with_fit = num(key, value)?,
            "iou_threshold" => self.iou_threshold = num(key, value)?,
            "boxpc_encoder" => b.encoder = value.parse()?,
            "boxpc_trunk" => b.arch.trunk = list(key, value)?,
            "boxpc_box_branch" => b.arch.box_branch = list(key, value)?,
            "boxpc_head" => b.arch.head_hidden = list(key, value)?,
            "boxpc_w_cls" => b.w_cls = num(key, value)?,
            "boxpc_w_reg" => b.w_reg = num(key, value)?,
            "boxpc_epochs" => b.epochs = num(key, value)?,
            "boxpc_batch_size" => b.batch_size = num(key, value)?,
            "boxpc_lr" => b.adam.lr = num(key, value)?,
            "boxpc_points" => b.points = num(key, value)?,
            "alpha_pos" => b.bounds.alpha_pos = num(key, value)?,
            "beta_pos" => b.bounds.beta_pos = num(key, value)?,
            "alpha_neg" => b.bounds.alpha_neg = num(key, value)?,
            "beta_neg" => b.bounds.beta_neg = num(key, value)?,
            "perturb_center" => b.bounds.center_range = num(key, value)?,
            "perturb_size" => b.bounds.size_range = num(key, value)?,
            "perturb_rotation_min" => b.bounds.rotation_min = num(key, value)?,
            "perturb_rotation_max" => b.bounds.rotation_max = num(key, value)?,
            "perturb_max_attempts" => b.bounds.max_attempts = num(key, value)?,
            "data_seed" => d.seed = num(key, value)?,
            "num_scenes" => d.num_scenes = num(key, value)?,
            "train_fraction" => {
                let t: f64 = num(key, value)?;
                d.split = (t, 1.0 - t);
            }
            "label_fraction" => d.label_fraction = num(key, value)?,
            "points_per_frustum" => d.points_per_frustum = num(key, value)?,
            "objects_min" => d.scene.objects_min = num(key, value)?,
            "objects_max" => d.scene.objects_max = num(key, value)?,
            "noise_sigma" => d.scene.noise_sigma = num(key, value)?,
            "clutter_ratio" => d.scene.clutter_ratio = num(key, value)?,
            "extra_channels" => d.scene.extra_channels = num(key, value)?,
            "visible_only" => d.scene.visible_only = num(key, value)?,
            "box2d_jitter" => d.labels.jitter_px = num(key, value)?,
            "box2d_tightness" => d.labels.tightness = num(key, value)?,
            _ => {
                if let Some(name) = key.strip_prefix("volume_threshold.") {
                    let id = self.class_id(name)?;
                    let t = &mut self.prior.volume_thresholds;
                    if t.len() <= id {
                        t.resize(id + 1, 0.0);
                    }
                    t[id] = num(key, value)?;
                } else if let Some(name) = key.strip_prefix("supervision.") {
                    let id = self.class_id(name)?;
                    self.data.scene.classes[id].supervision = match value {
                        "strong" => Supervision::Strong,
                        "weak" => Supervision::Weak,
                        _ => return Err(Error::Config(format!("supervision must be strong or weak, got '{value}'"))),
                    };
                } else {
                    return Err(Error::Config(format!("unknown key '{key}'")));
                }
            }
        }
        Ok(())
    }

    fn class_id(&self, name: &str) -> Result<usize> {
        self.data
            .scene
            .classes
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.id)
            .ok_or_else(|| Error::Config(format!("unknown class '{name}'")))
    }

    /// Takes class list, point layout and label fraction from a loaded split.
    pub fn adopt_split(&mut self, meta: &SplitMeta) {
        self.data.scene.classes = meta.classes.clone();
        self.data.scene.camera = meta.camera;
        self.data.scene.extra_channels = meta.extra_channels;
        self.data.points_per_frustum = meta.points_per_frustum;
        self.data.label_fraction = meta.label_fraction;
        self.data.seed = meta.seed;
    }

    /// Swaps strong and weak classes.
    pub fn swap_supervision(&mut self) {
        for c in &mut self.data.scene.classes {
            c.supervision = match c.supervision {
                Supervision::Strong => Supervision::Weak,
                Supervision::Weak => Supervision::Strong,
            };
        }
    }
}
