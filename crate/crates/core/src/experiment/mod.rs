//! Config-driven experiment commands.
//!
//! Every command is a pure function of its [`ExperimentConfig`] and any input
//! files it names. Each one writes a `manifest-<command>.json` recording the
//! seeds used and the sha256 of every output.

mod commands;
mod config;
mod report;

pub use commands::{
    ablation_arms, cmd_ablate_gamma, cmd_distill, cmd_eval, cmd_sweep_speakers, cmd_train_teacher,
    gen_data, load_teacher, prepare_data, sha256_hex, Manifest, ManifestSeeds, PreparedData,
    ResultRow, TeacherOutcome, TEACHER_CHECKPOINT,
};
pub use config::{AblationSection, DataSection, ExperimentConfig, StudentSection, SweepSection, TeacherSection};
pub use report::{
    cmd_report, markdown_table, mean_std, parse_results, read_results, series_text, spearman,
    summarize, GroupSummary, ResultsTable,
};

/// First line of every results CSV.
pub const CSV_VERSION_LINE: &str = "# dkd-results v1";
