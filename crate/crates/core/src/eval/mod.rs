//! Metrics, statistics and the experiment protocols built on them.

mod audit;
mod metrics;
mod report;
mod tstr;

pub use audit::{cosine_distance, embed, memorization_audit, AuditResult, Neighbor};
pub use metrics::{
    auroc, bootstrap_ci, mann_whitney_exact, mann_whitney_normal, mann_whitney_one_sided, midranks, quantile,
    BootstrapCi, MannWhitney, EXACT_MAX,
};
pub use report::{
    audit_panel_rows, augmentation_figure_rows, metric_rows, subgroup_figure_rows, summary_text, tstr_figure_rows,
    write_csv, FigureRow, MetricRow, PanelRow,
};
pub use tstr::{
    augmentation_experiment, augmented_cohort, compare_gaps, real_arm, run_arm, subgroup_report, tstr_against,
    tstr_run, ArmResult, AugmentationReport, CategoryDelta, EvalReport, PairwiseTest, SubgroupReport, SubgroupRow,
    TstrConfig,
};
