//! Metrics and the ablation harness.

mod ablation;
mod metrics;

pub use ablation::{
    append_results_csv, completed, format_summary, read_results_csv, run_ablation_grid, summarize, train_and_evaluate,
    AblationRow, SummaryRow, RESULTS_HEADER,
};
pub use metrics::{auc, logloss, EvalResult};
