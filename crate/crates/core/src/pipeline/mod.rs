//! End-to-end orchestration: data, file formats, run configuration,
//! calibration, evaluation, the ablation driver and report writers.

pub mod ablation;
pub mod calibrate;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod io;
pub mod report;
pub mod stages;

pub use calibrate::{calibrate_model, params_digest, CalibOptions, LnMode};
pub use config::RunConfig;
pub use dataset::{generate_toy_dataset, LabeledDataset, Split};
pub use eval::{evaluate, EvalReport};
pub use stages::Splits;
