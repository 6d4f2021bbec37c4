//! Fidelity, distribution and transport metrics plus the run log and report.

pub mod fidelity;
pub mod frechet;
pub mod log;
pub mod ot;
pub mod rank;
pub mod report;

pub use fidelity::{psnr, ssim, SsimWindow, PSNR_CEILING_DB};
pub use frechet::{frechet_distance, frechet_proxy, image_features};
pub use log::{log_metrics, read_log, MetricsRecord, RunStore, TaskMetrics};
pub use rank::{average_ranks, spearman};
pub use ot::{empirical_ot_cost, solve_assignment, GroundCost};
pub use report::{format_comparison_table, render_report, ComparisonRow};
