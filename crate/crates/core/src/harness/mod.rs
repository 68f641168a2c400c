//! Training, evaluation, hyperparameter search and run orchestration.

mod config;
mod dataset;
mod eval;
mod hpo;
mod run;
mod train;

pub use config::{FusionConfig, HpoSpace, RunConfig, SplitConfig};
pub use dataset::{Dataset, FeatureStore, Normalization};
pub use eval::{argmax, evaluate, predict, read_predictions, ClassMetrics, EvalReport, Prediction};
pub use hpo::{run_hpo, trial_log, Audit, HpoOutcome, TrialParams, TrialRecord};
pub use run::{evaluate_checkpoint, featurize_dir, load_network, load_run, render_report, run_training, RunOutput};
pub use train::{train, EpochRecord, History, TrainOptions};
