//! Explanations of main-task errors through auxiliary-task behaviour,
//! computed from a prediction log.

mod combos;
mod correlation;
mod groups;
mod index;
mod maps;
mod stats;

pub use combos::{
    combo_classify, combo_timeline, hierarchy_adherence, metric_by_combo, transition_tracking,
    Combo, ComboCounts, ComboMetricReport, ComboMetricRow, ComboTimeline, HierarchyCounts,
    HierarchyReport, TransitionReport, TransitionRow,
};
pub use correlation::{
    correlation_over_epochs, eval_subset, CorrelationReport, CorrelationRow, DEFAULT_SUBSET,
};
pub use groups::{
    error_by_correctness, per_group_aggregate, CorrectnessReport, CorrectnessRow, GroupReport,
    GroupRow,
};
pub use index::{absolute_error, error_records, error_value, ErrorRecord, LogIndex};
pub use maps::{error_map_export, palette, MapBundle, MapStat};
pub use stats::{
    average_ranks, pearson, pearson_pvalue, relative_error, spearman, DEFAULT_PERMUTATIONS, REL_EPS,
};
