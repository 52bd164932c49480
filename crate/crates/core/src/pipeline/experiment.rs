//! Single runs with cached datasets and fit networks, and the experiment
//! matrix.

use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Mode, RunConfig};
use super::eval::{evaluate_ap, ApReport, GroundTruth};
use super::report;
use super::train::{infer, pretrain_boxpc, train_detector, BoxPcReport, Detection, TrainReport};
use crate::boxpc::{BoxPcNet, EncoderMode};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::synthdata::{build_splits, Split};

/// Classes a run is scored on: the weak classes of a transfer run, every
/// class of a fully supervised one.
pub fn eval_classes(split: &Split, mode: Mode) -> Vec<usize> {
    if mode.fully_supervised() {
        split.meta.classes.iter().map(|c| c.id).collect()
    } else {
        split.weak_classes()
    }
}

pub fn ground_truth(val: &Split, classes: &[usize]) -> Vec<GroundTruth> {
    val.samples
        .iter()
        .filter(|s| classes.contains(&s.class_id))
        .filter_map(|s| {
            s.box3d_camera().map(|b| GroundTruth {
                class_id: s.class_id,
                scene_id: s.scene_id,
                box3d: b,
            })
        })
        .collect()
}

/// Detects every validation frustum of `classes` and scores the result.
pub fn evaluate(
    det: &Detector,
    boxpc: Option<&BoxPcNet>,
    val: &Split,
    classes: &[usize],
    cfg: &RunConfig,
) -> Result<(ApReport, Vec<Detection>)> {
    let mut dets = Vec::new();
    for s in val.samples.iter().filter(|s| classes.contains(&s.class_id)) {
        dets.push(infer(s, det, boxpc, cfg)?);
    }
    let gts = ground_truth(val, classes);
    Ok((evaluate_ap(&dets, &gts, classes, cfg.iou_threshold), dets))
}

/// Outcome of one run.
#[derive(Debug)]
pub struct RunResult {
    pub config: RunConfig,
    pub ap: ApReport,
    pub eval_classes: Vec<usize>,
    pub boxpc_auc: Option<f64>,
    pub train: TrainReport,
    pub seconds: f64,
}

/// Runs configurations while reusing generated datasets and pretrained
/// fit networks across runs that share them.
#[derive(Default)]
pub struct Runner {
    datasets: HashMap<String, Rc<(Split, Split)>>,
    fits: HashMap<String, Rc<BoxPcReport>>,
}

fn key<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config serializes")
}

impl Runner {
    pub fn new() -> Self {
        Self::default()
    }

    /// `(train, val)` splits for the run's data settings.
    pub fn dataset(&mut self, cfg: &RunConfig) -> Result<Rc<(Split, Split)>> {
        let k = key(&cfg.data);
        if let Some(d) = self.datasets.get(&k) {
            return Ok(d.clone());
        }
        let (train, val, summary) = build_splits(&cfg.data)?;
        log::info!(
            "dataset seed {} f={}: {} train / {} val frustums",
            cfg.data.seed,
            cfg.data.label_fraction,
            summary.train_samples,
            summary.val_samples
        );
        let d = Rc::new((train, val));
        self.datasets.insert(k, d.clone());
        Ok(d)
    }

    /// Fit network pretrained for the run's data and fit settings.
    pub fn boxpc(&mut self, cfg: &RunConfig) -> Result<Rc<BoxPcReport>> {
        let k = format!(
            "{}|{}|{}|{}",
            key(&cfg.data),
            key(&cfg.boxpc),
            cfg.mode.fully_supervised(),
            cfg.seed
        );
        if let Some(r) = self.fits.get(&k) {
            return Ok(r.clone());
        }
        let data = self.dataset(cfg)?;
        let r = Rc::new(pretrain_boxpc(&data.0, Some(&data.1), cfg)?);
        log::info!("fit network ({:?}) held-out AUC {:.3}", cfg.boxpc.encoder, r.auc.unwrap_or(f64::NAN));
        self.fits.insert(k, r.clone());
        Ok(r)
    }

    pub fn run(&mut self, cfg: &RunConfig) -> Result<RunResult> {
        cfg.validate()?;
        let start = Instant::now();
        let data = self.dataset(cfg)?;
        let fit = if cfg.mode.uses_boxpc() { Some(self.boxpc(cfg)?) } else { None };
        let net = fit.as_ref().map(|f| &f.net);
        let train = train_detector(&data.0, net, cfg)?;
        let classes = eval_classes(&data.1, cfg.mode);
        let (ap, _) = evaluate(&train.detector, net, &data.1, &classes, cfg)?;
        Ok(RunResult {
            config: cfg.clone(),
            ap,
            eval_classes: classes,
            boxpc_auc: fit.as_ref().and_then(|f| f.auc),
            train,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Fit-network loss switches for the objective ablation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub w_cls: f64,
    pub w_reg: f64,
}

/// Grid of runs over a base configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixConfig {
    pub base: RunConfig,
    pub modes: Vec<Mode>,
    pub scales: Vec<f64>,
    pub encoders: Vec<EncoderMode>,
    pub objectives: Vec<Objective>,
    pub label_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl MatrixConfig {
    pub fn from_base(base: RunConfig) -> Self {
        Self {
            modes: vec![Mode::BaselineNoOnehot, Mode::Baseline, Mode::R, Mode::Boxpc, Mode::BoxpcR, Mode::BoxpcRP],
            scales: vec![base.reproj_scale],
            encoders: vec![base.boxpc.encoder],
            objectives: vec![Objective {
                w_cls: base.boxpc.w_cls,
                w_reg: base.boxpc.w_reg,
            }],
            label_fractions: vec![base.data.label_fraction],
            seeds: vec![base.seed],
            base,
        }
    }

    /// Run keys plus `matrix.modes`, `matrix.scales`, `matrix.encoders`,
    /// `matrix.objectives` (`w_cls:w_reg` pairs), `matrix.label_fractions`
    /// and `matrix.seeds`, each comma separated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut base_lines = String::new();
        let mut grid: Vec<(String, String, usize)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            match line.split_once('=') {
                Some((k, v)) if k.trim().starts_with("matrix.") => grid.push((k.trim().to_string(), v.trim().to_string(), n + 1)),
                _ => {
                    base_lines.push_str(raw);
                    base_lines.push('\n');
                }
            }
        }
        let mut m = Self::from_base(RunConfig::parse(&base_lines)?);
        for (k, v, n) in grid {
            let items: Vec<&str> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            let bad = |what: &str| Error::Config(format!("line {n}: bad {what} in {k}"));
            match k.as_str() {
                "matrix.modes" => m.modes = items.iter().map(|s| s.parse()).collect::<Result<_>>()?,
                "matrix.scales" => m.scales = items.iter().map(|s| s.parse().map_err(|_| bad("number"))).collect::<Result<_>>()?,
                "matrix.encoders" => m.encoders = items.iter().map(|s| s.parse()).collect::<Result<_>>()?,
                "matrix.objectives" => {
                    m.objectives = items
                        .iter()
                        .map(|s| {
                            let (a, b) = s.split_once(':').ok_or_else(|| bad("objective"))?;
                            Ok(Objective {
                                w_cls: a.parse().map_err(|_| bad("objective"))?,
                                w_reg: b.parse().map_err(|_| bad("objective"))?,
                            })
                        })
                        .collect::<Result<_>>()?
                }
                "matrix.label_fractions" => {
                    m.label_fractions = items.iter().map(|s| s.parse().map_err(|_| bad("number"))).collect::<Result<_>>()?
                }
                "matrix.seeds" => m.seeds = items.iter().map(|s| s.parse().map_err(|_| bad("seed"))).collect::<Result<_>>()?,
                _ => return Err(Error::Config(format!("line {n}: unknown key '{k}'"))),
            }
        }
        if [m.modes.len(), m.scales.len(), m.encoders.len(), m.objectives.len(), m.label_fractions.len(), m.seeds.len()]
            .contains(&0)
        {
            return Err(Error::Config("every matrix axis needs at least one value".into()));
        }
        Ok(m)
    }

    /// Distinct run configurations. Axes a mode ignores collapse to their
    /// first value, and fully supervised modes only run with every label.
    pub fn cells(&self) -> Vec<RunConfig> {
        let mut out: Vec<RunConfig> = Vec::new();
        for &mode in &self.modes {
            for &f in &self.label_fractions {
                if mode.fully_supervised() && f != 1.0 {
                    continue;
                }
                for &s in &self.scales {
                    for &enc in &self.encoders {
                        for obj in &self.objectives {
                            for &seed in &self.seeds {
                                let mut c = self.base.clone();
                                c.mode = mode;
                                c.seed = seed;
                                c.data.seed = seed;
                                c.data.label_fraction = f;
                                c.reproj_scale = if mode.reproj_loss() { s } else { self.scales[0] };
                                let boxpc = mode.uses_boxpc();
                                c.boxpc.encoder = if boxpc { enc } else { self.encoders[0] };
                                let o = if boxpc { *obj } else { self.objectives[0] };
                                c.boxpc.w_cls = o.w_cls;
                                c.boxpc.w_reg = o.w_reg;
                                if !out.contains(&c) {
                                    out.push(c);
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// One matrix row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub mode: Mode,
    pub scale: f64,
    pub encoder: EncoderMode,
    pub w_cls: f64,
    pub w_reg: f64,
    pub label_fraction: f64,
    pub seed: u64,
    /// `ok` or the error message.
    pub status: String,
    pub map: f64,
    /// `(class id, AP)` for scored classes.
    pub class_ap: Vec<(usize, Option<f64>)>,
    pub auc: Option<f64>,
    pub seconds: f64,
}

impl CellResult {
    fn new(cfg: &RunConfig) -> Self {
        Self {
            mode: cfg.mode,
            scale: cfg.reproj_scale,
            encoder: cfg.boxpc.encoder,
            w_cls: cfg.boxpc.w_cls,
            w_reg: cfg.boxpc.w_reg,
            label_fraction: cfg.data.label_fraction,
            seed: cfg.seed,
            status: String::new(),
            map: f64::NAN,
            class_ap: Vec::new(),
            auc: None,
            seconds: 0.0,
        }
    }
}

/// Runs every cell, recording failures and continuing. Writes
/// `matrix.csv`, `summary.txt` and PR-curve SVGs under `out` if given.
pub fn run_experiment_matrix(m: &MatrixConfig, runner: &mut Runner, out: Option<&Path>) -> Result<Vec<CellResult>> {
    let classes = &m.base.data.scene.classes;
    let mut rows = Vec::new();
    for cfg in m.cells() {
        let mut row = CellResult::new(&cfg);
        match runner.run(&cfg) {
            Ok(r) => {
                row.status = "ok".into();
                row.map = r.ap.map;
                row.class_ap = r.ap.classes.iter().map(|c| (c.class_id, c.ap)).collect();
                row.auc = r.boxpc_auc;
                row.seconds = r.seconds;
                log::info!("{} s={} {:?} f={} seed={}: mAP {:.4}", cfg.mode, cfg.reproj_scale, cfg.boxpc.encoder, cfg.data.label_fraction, cfg.seed, r.ap.map);
                if let Some(dir) = out {
                    let tag = report::cell_tag(&row);
                    for c in &r.ap.classes {
                        let name = &classes[c.class_id].name;
                        report::write_pr_svg(&dir.join("pr").join(format!("{tag}_{name}.svg")), &format!("{tag} {name}"), &c.pr)?;
                    }
                }
            }
            Err(e) => {
                log::warn!("cell {} seed {} failed: {e}", cfg.mode, cfg.seed);
                row.status = e.to_string();
            }
        }
        rows.push(row);
    }
    if let Some(dir) = out {
        report::write_matrix_csv(&dir.join("matrix.csv"), &rows, classes)?;
        report::write_text(&dir.join("summary.txt"), &report::render_summary(&rows, classes))?;
    }
    Ok(rows)
}

/// Mean mAP over seeds of the rows matching `pick`.
pub fn seed_mean(rows: &[CellResult], pick: impl Fn(&CellResult) -> bool) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| pick(r) && r.status == "ok").map(|r| r.map).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
