//! ADAM, the restoration drivers, metrics, and the experiment runner.

pub mod adam;
pub mod baseline;
pub mod experiment;
pub mod metrics;
pub mod restore;

pub use adam::{AdamConfig, AdamState};
pub use baseline::{
    restore_tv_baseline, tune_tv_baseline, BaselineResult, DEFAULT_BASELINE_TV_EPS,
};
pub use experiment::{run_experiment, CsvSink, ExperimentConfig, ExperimentRecord, MethodSpec};
pub use metrics::{psnr_db, snr_db, METRIC_CAP_DB};
pub use restore::{loss_dip_tv, objective_on, restore, Method, RestoreConfig, Restoration, TracePoint};
