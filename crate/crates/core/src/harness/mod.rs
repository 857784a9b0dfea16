//! Config-driven sweeps over strategies, seeds and class pairs.

mod config;
mod experiment;
mod report;

pub use config::{
    load_config, parse_config, parse_override, EditSection, EpsNetSection, ExperimentConfig, GuidanceSection,
    LatentSection, LossKind, LossSection, Mode, ModelSection, RunSection, ScheduleSection, ScoreKind, Variant,
};
pub use experiment::{train_net, training_data, CellMetrics, CellOutput, Experiment};
pub use report::{
    compare, comparison_text, dump_inversions, execute, metric_value, metrics_csv, parse_metrics_csv, run,
    run_experiment, scatter_svg, CellRecord, ColumnComparison, Comparison, MetricRow, RunReport, METRIC_COLUMNS,
};
