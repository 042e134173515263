//! Training loop, configuration, prediction export and ablations.

mod ablate;
mod config;
mod model;
mod optim;
mod predict;
mod train;

pub use ablate::{ablate, ablation_csv, AblationRow, Axis};
pub use config::{env_seed, TrainConfig, SEED_ENV};
pub use model::{load_model, save_json, save_model, ModelFile};
pub use optim::Adam;
pub use predict::{
    evaluate, evaluate_anchor, load_predictions, predict, read_predictions, save_predictions,
    write_predictions, Branch, PredictOptions, Prediction,
};
pub use train::{train, train_from, EpochLog, TrainLog};
