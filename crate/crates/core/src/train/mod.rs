//! Model assembly, optimisation, multi-seed experiments and result tables.

mod experiment;
mod fit;
mod model;
mod optim;
mod store;
mod table;

pub use experiment::{
    mean_std, run_experiment, run_seed, DataConfig, DataSource, ExperimentSpec, RunReport, SeedRun, DEFAULT_SEEDS,
};
pub use fit::{dataset_loss, evaluate, fit, predict, EpochStats, History};
pub use model::{build_model, Forward, Model, ModelConfig, DEFAULT_ENCODER, DEFAULT_FEATURE_DIM};
pub use optim::{
    sgd_step, OptimConfig, SgdState, DEFAULT_BATCH_SIZE, DEFAULT_CCE_LR, DEFAULT_EPOCHS, DEFAULT_MARGIN_LR,
    DEFAULT_MOMENTUM, PLATEAU_TOLERANCE, PLATEAU_WINDOW,
};
pub use store::{load_dir, report_from_records, Outcome, ResultsStore, RunRecord, DEFAULT_RESULTS_DIR};
pub use table::{emit_table, BETTER_MARKER};
