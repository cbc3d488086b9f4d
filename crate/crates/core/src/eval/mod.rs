//! Metrics, out-of-distribution splits, routing statistics and benchmarks.

mod bench;
mod metrics;
mod predict;
mod routing;
mod shift;

pub use bench::{
    bench_mode, bench_model, efficiency_bench, write_bench_tsv, BenchConfig, BenchError, BenchReport, BenchRow,
    DEFAULT_BATCH_SIZES, PARAM_MATCH_TOLERANCE,
};
pub use metrics::{compute_metrics, ClassMetrics, ConfusionMatrix, Metrics};
pub use predict::{evaluate, predict, Predictions};
pub use routing::{routing_stats, RoutingStats};
pub use shift::{
    compose_shift_split, masked_subclasses, proportion_shift_split, time_shift_split, Hierarchy, OodSplit,
    ShiftError, Subclass, TIME_EDGE_FRACTION,
};
