//! Pretraining, semi-supervised training, inference, evaluation and the
//! experiment matrix.

pub mod config;
pub mod eval;
pub mod experiment;
pub mod files;
pub mod report;
pub mod train;

pub use config::{BoxPcTrainConfig, Mode, RunConfig};
pub use eval::{average_precision, evaluate_ap, ApReport, ClassAp, GroundTruth};
pub use experiment::{eval_classes, evaluate, run_experiment_matrix, seed_mean, CellResult, MatrixConfig, Objective, RunResult, Runner};
pub use train::{
    evaluate_refinement, frustum_to_camera, heldout_auc, infer, pretrain_boxpc, train_detector, BoxPcReport, Detection, RefinementReport,
    TrainReport,
};
