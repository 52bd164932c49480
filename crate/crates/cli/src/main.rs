use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cs3d::pipeline::files::{
    load_boxpc, load_detector, load_train_split, load_val_split, save_boxpc, save_detector,
};
use cs3d::pipeline::report::{self, write_eval_outputs};
use cs3d::pipeline::{
    eval_classes, evaluate, pretrain_boxpc, run_experiment_matrix, train_detector, MatrixConfig, Mode, RunConfig, Runner,
};
use cs3d::synthdata::build_dataset;

#[derive(Parser)]
#[command(name = "cs3d", version, about = "Cross-category semi-supervised frustum 3D detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train and val splits.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Share of weak-class training samples that keep 3D labels.
        #[arg(long)]
        label_fraction: Option<f64>,
    },
    /// Pretrain the box-to-point-cloud fit network on labelled frustums.
    PretrainBoxpc {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the detector.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pretrained fit network, required by modes that use it.
        #[arg(long)]
        boxpc: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a detector on the val split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        boxpc: Option<PathBuf>,
        /// Overrides the configuration stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment grid.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            config,
            seed,
            out,
            label_fraction,
        } => {
            let mut cfg = read_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            if let Some(f) = label_fraction {
                cfg.data.label_fraction = f;
            }
            let s = build_dataset(&cfg.data, &out)?;
            println!(
                "wrote {} train and {} val frustums to {} ({} of {} weak training samples labelled)",
                s.train_samples,
                s.val_samples,
                out.display(),
                s.weak_train_labeled,
                s.weak_train_total
            );
        }
        Command::PretrainBoxpc { data, config, mode, out } => {
            let mut cfg = read_config(config.as_deref())?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let train = load_train_split(&data, cfg.mode)?;
            let val = load_val_split(&data)?;
            cfg.adopt_split(&train.meta);
            let r = pretrain_boxpc(&train, Some(&val), &cfg)?;
            save_boxpc(&r, &out)?;
            println!(
                "fit network saved to {}; final loss {:.4}, held-out AUC {:.4}",
                out.display(),
                r.epoch_losses.last().copied().unwrap_or(f64::NAN),
                r.auc.unwrap_or(f64::NAN)
            );
        }
        Command::Train {
            data,
            mode,
            config,
            boxpc,
            out,
        } => {
            let mut cfg = read_config(config.as_deref())?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let train = load_train_split(&data, cfg.mode)?;
            cfg.adopt_split(&train.meta);
            let fit = match (&boxpc, cfg.mode.uses_boxpc()) {
                (Some(p), _) => {
                    let (net, bounds) = load_boxpc(p)?;
                    cfg.boxpc.encoder = net.mode;
                    cfg.boxpc.bounds = bounds;
                    Some(net)
                }
                (None, true) => bail!("mode {} needs --boxpc", cfg.mode),
                (None, false) => None,
            };
            let r = train_detector(&train, fit.as_ref(), &cfg)?;
            save_detector(&r.detector, &cfg, &out)?;
            println!(
                "detector saved to {}; {} labelled and {} weak steps, final loss {:.4}",
                out.display(),
                r.strong_steps,
                r.weak_steps,
                r.strong_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Eval {
            data,
            ckpt,
            boxpc,
            config,
            out,
        } => {
            let (det, saved) = load_detector(&ckpt)?;
            let mut cfg = match (config, saved) {
                (Some(p), _) => read_config(Some(&p))?,
                (None, Some(c)) => c,
                (None, None) => RunConfig::default(),
            };
            let val = load_val_split(&data)?;
            let fit = match &boxpc {
                Some(p) => Some(load_boxpc(p)?.0),
                None if cfg.mode.refine() => bail!("mode {} refines with the fit network; pass --boxpc", cfg.mode),
                None => None,
            };
            let classes = eval_classes(&val, cfg.mode);
            cfg.data.scene.classes = val.meta.classes.clone();
            let (ap, _) = evaluate(&det, fit.as_ref(), &val, &classes, &cfg)?;
            write_eval_outputs(&out, &ap, &val.meta.classes)?;
            print!("{}", report::metrics_csv(&ap, &val.meta.classes));
        }
        Command::Matrix { config, out } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let m = MatrixConfig::parse(&text).with_context(|| format!("in {}", config.display()))?;
            let rows = run_experiment_matrix(&m, &mut Runner::new(), Some(&out))?;
            print!("{}", report::render_summary(&rows, &m.base.data.scene.classes));
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            if failed > 0 {
                bail!("{failed} of {} cells failed; see {}", rows.len(), out.join("matrix.csv").display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
