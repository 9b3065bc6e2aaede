use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{CorpusSplits, Split};
use crate::error::{Error, Result};
use crate::model::{ablation_presets, param_count, placement_presets, shrink, Preset};

use super::svg::{line_chart, Series};
use super::{evaluate, train, ExperimentSpec, MetricsRecord, TIMING_BOUNDARY};

/// CSV header of the comparative report.
pub const REPORT_COLUMNS: [&str; 6] = ["Experiment", "avg. Time/Epoch", "Params", "Loss", "bpc", "spec_hash"];

/// One experiment's line. Loss and bpc are on the test split with the
/// best-validation parameters; time is seconds per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    #[serde(rename = "Experiment")]
    pub experiment: String,
    #[serde(rename = "avg. Time/Epoch")]
    pub avg_time_per_epoch: Option<f64>,
    #[serde(rename = "Params")]
    pub params: Option<usize>,
    #[serde(rename = "Loss")]
    pub loss: Option<f64>,
    #[serde(rename = "bpc")]
    pub bpc: Option<f64>,
    pub spec_hash: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    #[serde(skip)]
    pub records: Vec<MetricsRecord>,
}

impl ReportRow {
    fn csv_line(&self) -> String {
        let opt = |v: Option<f64>, p: usize| v.map_or(String::new(), |x| format!("{x:.p$}"));
        let name = if self.experiment.contains([',', '"']) {
            format!("\"{}\"", self.experiment.replace('"', "\"\""))
        } else {
            self.experiment.clone()
        };
        format!(
            "{},{},{},{},{},{}",
            name,
            opt(self.avg_time_per_epoch, 3),
            self.params.map_or(String::new(), |p| p.to_string()),
            opt(self.loss, 4),
            opt(self.bpc, 4),
            self.spec_hash
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridReport {
    pub rows: Vec<ReportRow>,
}

fn scaled(presets: Vec<Preset>, d_model: usize, bptt: usize, epochs: usize) -> Vec<ExperimentSpec> {
    presets
        .into_iter()
        .map(|p| ExperimentSpec { epochs, ..ExperimentSpec::with_model(p.name, shrink(&p.config, d_model, bptt)) })
        .collect()
}

/// The component-ablation rows scaled to width `d_model` and window `bptt`.
pub fn ablation_specs(d_model: usize, bptt: usize, epochs: usize) -> Vec<ExperimentSpec> {
    scaled(ablation_presets(), d_model, bptt, epochs)
}

/// The seven attention-placement rows scaled to width `d_model` and window
/// `bptt`.
pub fn placement_specs(d_model: usize, bptt: usize, epochs: usize) -> Vec<ExperimentSpec> {
    scaled(placement_presets(), d_model, bptt, epochs)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn run_one(spec: &ExperimentSpec, corpus: &CorpusSplits) -> Result<ReportRow> {
    let outcome = train::<f32>(spec, corpus, None)?;
    let params = param_count(&spec.model)?.total;
    if params != outcome.best.num_scalars() {
        return Err(Error::Config(format!(
            "counted {params} parameters but the model registered {}",
            outcome.best.num_scalars()
        )));
    }
    let test = evaluate(&outcome.model, &outcome.best, corpus.get(Split::Test), &spec.plan)?;
    Ok(ReportRow {
        experiment: spec.tag.clone(),
        avg_time_per_epoch: Some(outcome.avg_epoch_seconds()),
        params: Some(params),
        loss: Some(test.loss),
        bpc: Some(test.bpc),
        spec_hash: outcome.spec_hash.clone(),
        error: None,
        records: outcome.records,
    })
}

/// Trains every spec in turn (always sequentially, since the report carries
/// wall-clock columns) with outputs under `out/<slug>/`, then writes
/// `report.csv`, `report.json` and per-experiment and overlaid curves under
/// `out/curves/`. A failing experiment is recorded in its row and the grid
/// moves on.
pub fn run_grid(specs: &[ExperimentSpec], corpus: &CorpusSplits, out: &Path) -> Result<GridReport> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("grid needs at least one spec".into()));
    }
    let curves = out.join("curves");
    std::fs::create_dir_all(&curves).map_err(|e| Error::io(&curves, e))?;
    let mut used = HashSet::new();
    let mut rows = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let mut slug = spec.slug();
        if !used.insert(slug.clone()) {
            slug = format!("{slug}-{}", i + 1);
            used.insert(slug.clone());
        }
        let spec = ExperimentSpec { out_dir: Some(out.join(&slug)), ..spec.clone() };
        log::info!("grid {}/{}: {}", i + 1, specs.len(), spec.tag);
        let row = run_one(&spec, corpus).unwrap_or_else(|e| {
            log::warn!("grid: {} failed: {e}", spec.tag);
            ReportRow {
                experiment: spec.tag.clone(),
                avg_time_per_epoch: None,
                params: param_count(&spec.model).ok().map(|b| b.total),
                loss: None,
                bpc: None,
                spec_hash: spec.hash(),
                error: Some(e.to_string()),
                records: Vec::new(),
            }
        });
        if !row.records.is_empty() {
            let s = |x: &dyn Fn(&MetricsRecord) -> f64| {
                vec![Series { label: row.experiment.clone(), points: row.records.iter().map(|r| (x(r), r.valid_bpc)).collect() }]
            };
            write(
                &curves.join(format!("{slug}-bpc-vs-epoch.svg")),
                &line_chart(&row.experiment, "epoch", "valid bpc", &s(&|r| r.epoch as f64)),
            )?;
            write(
                &curves.join(format!("{slug}-bpc-vs-time.svg")),
                &line_chart(&row.experiment, "hours", "valid bpc", &s(&|r| r.cumulative_hours)),
            )?;
        }
        rows.push(row);
    }
    let overlay = |x: &dyn Fn(&MetricsRecord) -> f64| -> Vec<Series> {
        rows.iter()
            .filter(|r| !r.records.is_empty())
            .map(|r| Series { label: r.experiment.clone(), points: r.records.iter().map(|m| (x(m), m.valid_bpc)).collect() })
            .collect()
    };
    write(&curves.join("all-bpc-vs-epoch.svg"), &line_chart("Validation bpc by epoch", "epoch", "valid bpc", &overlay(&|r| r.epoch as f64)))?;
    write(
        &curves.join("all-bpc-vs-time.svg"),
        &line_chart("Validation bpc by training time", "hours", "valid bpc", &overlay(&|r| r.cumulative_hours)),
    )?;
    let mut csv = REPORT_COLUMNS.join(",");
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    write(&out.join("report.csv"), &csv)?;
    let report = json!({
        "columns": REPORT_COLUMNS,
        "units": { "avg. Time/Epoch": "seconds", "Loss": "nats per character, test split", "bpc": "bits per character, test split" },
        "execution": "sequential",
        "timing_boundary": TIMING_BOUNDARY,
        "rows": rows,
    });
    write(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    Ok(GridReport { rows })
}
