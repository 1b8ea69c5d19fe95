//! Experiment orchestration: scenarios, stratified cross-validation, grid
//! search, metrics, non-cooperative baselines, reports and timing.
//!
//! Every (grid point, fold) job draws its own seed, so the thread count set
//! through `VFLAB_THREADS` never changes a result. The winner of a grid is
//! the point with the highest mean fold accuracy.

mod bench;
mod config;
mod experiment;
mod metrics;
mod report;

pub use bench::{benchmark_time, render_timing_csv, render_timing_markdown, BenchConfig, TimingRow, TimingTable};
pub use config::{
    prepare_data, Cooperation, DataSource, ExperimentConfig, GbdtGrid, GridSpec, HyperParams, ModelFamily, ModelKind,
    NnGrid, NnParams, PreparedData,
};
pub use experiment::{
    check_fold_isolation, grid_search, run_experiment, run_experiment_on, run_non_cooperative, run_non_cooperative_on,
    thread_pool, GridOutcome, Task, Trained, THREADS_ENV,
};
pub use metrics::{
    compute_metrics, confusion_matrix, metrics_from_confusion, pool_confusion, ClassMetrics, Metrics, Stat,
};
pub use report::{
    render_csv, render_grid_markdown, render_markdown, reports_from_json, FoldMetrics, GridPointSummary, MetricsReport,
    PartyReport, Timing,
};
