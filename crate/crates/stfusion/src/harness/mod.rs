//! Experiment harness: configuration, metrics persistence, teacher/student
//! training loops, ablation suites, and the whole-model gradient audit.

pub mod ablate;
pub mod config;
pub mod gradcheck;
pub mod metrics;
pub mod train;

pub use ablate::{assert_suite, format_table, run_ablation, AblationRow, Suite};
pub use config::{ExperimentConfig, FusionMode};
pub use gradcheck::{gradcheck_all, gradcheck_config, run_gradcheck};
pub use metrics::MetricsRecord;
pub use train::{evaluate, export_attention, train_student, train_teacher, StudentModel, TrainedStudent};
