//! Experiment orchestration: bits-per-character conversion, evaluation, the
//! training loop, key = value run settings and the comparative grid report.

mod grid;
mod settings;
mod spec;
mod svg;
mod train;

pub use grid::{ablation_specs, placement_specs, run_grid, GridReport, ReportRow, REPORT_COLUMNS};
pub use settings::{apply_settings, parse_kv, SETTING_KEYS};
pub use spec::ExperimentSpec;
pub use svg::{line_chart, Series};
pub use train::{evaluate, train, Evaluation, MetricsRecord, TrainOutcome, METRICS_HEADER, TIMING_BOUNDARY};

use crate::error::{Error, Result};

/// Cross-entropy in nats to bits per character.
pub fn bpc_from_nats(loss: f64) -> Result<f64> {
    if loss.is_nan() || loss < 0.0 {
        return Err(Error::InvalidArgument(format!("loss must be non-negative, got {loss}")));
    }
    Ok(loss / std::f64::consts::LN_2)
}
