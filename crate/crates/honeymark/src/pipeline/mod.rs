//! Experiment orchestration behind the `honeymark` CLI: a single config
//! file drives split, proxy training, hardness scoring, honey
//! generation, model-pair training, verification, and metrics reporting,
//! with every artifact persisted and stamped with the config hash.

mod config;
mod stages;
mod summary;

pub use config::{
    DatasetSource, ExperimentConfig, HoneySettings, Method, MetricsSettings, MiSettings,
    ModelSettings, TrainSettings, TriggerSettings,
};
pub use stages::{run_experiment, run_stage, verify_checkpoint, Stage};
pub use summary::{read_summary_csv, MethodSummary, PairMetrics};
