//! Training loop, evaluation, resume, outputs and the grid report on small
//! models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shaq_core::data::{synthetic_corpus, BatchPlan, CorpusSplits};
use shaq_core::harness::{evaluate, run_grid, train, ExperimentSpec, MetricsRecord, METRICS_HEADER, REPORT_COLUMNS};
use shaq_core::model::{param_count, DropoutConfig};
use shaq_core::optim::LrSchedule;
use shaq_core::{Error, Model, ModelConfig};

fn small_model() -> ModelConfig {
    ModelConfig { d_model: 16, d_inner: 64, bptt: 16, memory_horizon: 64, ..ModelConfig::toy_shaq() }
}

fn small_spec(tag: &str) -> ExperimentSpec {
    ExperimentSpec {
        plan: BatchPlan::new(4, 16),
        epochs: 2,
        lr: LrSchedule::Warmup { lr: 1e-2, steps: 20 },
        ..ExperimentSpec::with_model(tag, small_model())
    }
}

fn corpus(n: usize) -> CorpusSplits {
    CorpusSplits::from_bytes(synthetic_corpus(n, 3), 4).unwrap()
}

/// Everything but the wall-clock fields.
fn comparable(r: &MetricsRecord) -> (usize, f64, f64, f64, usize) {
    (r.epoch, r.train_loss, r.valid_loss, r.valid_bpc, r.params)
}

#[test]
fn untrained_model_is_near_uniform_on_random_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bytes: Vec<u8> = (0..4000).map(|_| rng.random()).collect();
    let (model, store) = Model::build::<f32>(&small_model(), 0).unwrap();
    let e = evaluate(&model, &store, &bytes, &BatchPlan::new(4, 16)).unwrap();
    assert!((e.bpc - 8.0).abs() < 0.5, "{}", e.bpc);
    assert_eq!(e.chars, (4000 / 4 - 1) * 4);
}

#[test]
fn evaluation_is_deterministic_and_rejects_empty_split() {
    let c = corpus(20_000);
    let (model, store) = Model::build::<f32>(&small_model(), 1).unwrap();
    let plan = BatchPlan::new(4, 16);
    let a = evaluate(&model, &store, &c.valid, &plan).unwrap();
    let b = evaluate(&model, &store, &c.valid, &plan).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert!(matches!(evaluate(&model, &store, &[], &plan), Err(Error::Corpus(_))));
}

#[test]
fn memorizes_a_repeated_pattern() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pattern: Vec<u8> = (0..100).map(|_| rng.random()).collect();
    let bytes: Vec<u8> = pattern.iter().copied().cycle().take(24_000).collect();
    let c = CorpusSplits::from_bytes(bytes, 4).unwrap();
    let spec = ExperimentSpec {
        model: ModelConfig { d_model: 32, d_inner: 128, dropout: DropoutConfig::none(), ..small_model() },
        epochs: 4,
        ..small_spec("memorize")
    };
    let out = train::<f32>(&spec, &c, None).unwrap();
    let last = out.records.last().unwrap();
    assert!(last.valid_bpc < 0.5, "{:?}", out.records);
}

#[test]
fn identical_spec_and_seed_reproduce_metrics() {
    let c = corpus(30_000);
    let a = train::<f32>(&small_spec("a"), &c, None).unwrap();
    let b = train::<f32>(&small_spec("a"), &c, None).unwrap();
    let ka: Vec<_> = a.records.iter().map(comparable).collect();
    let kb: Vec<_> = b.records.iter().map(comparable).collect();
    assert_eq!(ka, kb);
    assert_eq!(a.store.iter().map(|p| p.2.clone()).collect::<Vec<_>>(), b.store.iter().map(|p| p.2.clone()).collect::<Vec<_>>());
    let other = train::<f32>(&ExperimentSpec { seed: 1, ..small_spec("a") }, &c, None).unwrap();
    assert_ne!(comparable(&a.records[0]), comparable(&other.records[0]));
}

#[test]
fn resume_matches_uninterrupted_training() {
    let c = corpus(30_000);
    let dir = tempfile::tempdir().unwrap();
    let full = train::<f32>(&ExperimentSpec { epochs: 3, ..small_spec("r") }, &c, None).unwrap();
    let first = ExperimentSpec { epochs: 2, out_dir: Some(dir.path().to_path_buf()), ..small_spec("r") };
    train::<f32>(&first, &c, None).unwrap();
    let resumed = train::<f32>(
        &ExperimentSpec { epochs: 3, ..first.clone() },
        &c,
        Some(&dir.path().join("checkpoints/last.ckpt")),
    )
    .unwrap();
    assert_eq!(resumed.records.len(), 3);
    let (x, y) = (&full.records[2], &resumed.records[2]);
    assert!((x.train_loss - y.train_loss).abs() < 1e-6, "{} vs {}", x.train_loss, y.train_loss);
    assert!((x.valid_loss - y.valid_loss).abs() < 1e-6);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "{csv}");
    // a different spec may not continue this run
    let wrong = ExperimentSpec { epochs: 3, seed: 9, ..first };
    assert!(train::<f32>(&wrong, &c, Some(&dir.path().join("checkpoints/last.ckpt"))).is_err());
}

#[test]
fn writes_metrics_report_curves_and_checkpoints() {
    let c = corpus(20_000);
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec { out_dir: Some(dir.path().to_path_buf()), ..small_spec("files") };
    let out = train::<f32>(&spec, &c, None).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 3);
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields.len(), 6);
    assert_eq!(fields[5], param_count(&spec.model).unwrap().total.to_string());
    let bpc: f64 = fields[3].parse().unwrap();
    let loss: f64 = fields[2].parse().unwrap();
    assert!((bpc - loss / std::f64::consts::LN_2).abs() < 1e-5);
    for f in ["report.json", "curves/bpc_vs_epoch.svg", "curves/bpc_vs_time.svg", "checkpoints/best.ckpt", "checkpoints/last.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["spec_hash"], spec.hash());
    assert!(report["timing_boundary"].as_str().unwrap().contains("excludes validation"));
    let best = shaq_core::checkpoint::load::<f32>(&dir.path().join("checkpoints/best.ckpt")).unwrap();
    assert_eq!(best.config, spec.model);
    let mut store = out.best.clone();
    best.restore_into(&mut store).unwrap();
    assert_eq!(store.iter().map(|p| p.2.clone()).collect::<Vec<_>>(), out.best.iter().map(|p| p.2.clone()).collect::<Vec<_>>());
}

#[test]
fn diverging_run_aborts_and_keeps_earlier_checkpoints() {
    let c = corpus(20_000);
    let dir = tempfile::tempdir().unwrap();
    let good = ExperimentSpec { epochs: 1, out_dir: Some(dir.path().to_path_buf()), ..small_spec("div") };
    train::<f32>(&good, &c, None).unwrap();
    let before = std::fs::read(dir.path().join("checkpoints/best.ckpt")).unwrap();
    let bad = ExperimentSpec { lr: LrSchedule::Constant { lr: 1e30 }, epochs: 2, ..good };
    let err = train::<f32>(&bad, &c, None).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_)), "{err}");
    assert_eq!(std::fs::read(dir.path().join("checkpoints/best.ckpt")).unwrap(), before);
}

#[test]
fn grid_reports_every_row_and_survives_failures() {
    let c = corpus(20_000);
    let dir = tempfile::tempdir().unwrap();
    let ok = ExperimentSpec { epochs: 1, ..small_spec("Good, row") };
    let mut broken = ExperimentSpec { epochs: 1, ..small_spec("broken") };
    broken.model.attn_layers = vec![7];
    let lstm = ExperimentSpec {
        epochs: 1,
        model: ModelConfig { cell: shaq_core::recurrent::CellKind::Lstm, ..small_model() },
        ..small_spec("lstm")
    };
    let report = run_grid(&[ok, broken, lstm], &c, dir.path()).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.rows[0].error.is_none() && report.rows[2].error.is_none());
    assert!(report.rows[1].error.as_deref().unwrap().contains("attn_layers"));
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], REPORT_COLUMNS.join(","));
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("\"Good, row\","));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["execution"], "sequential");
    let row = &json["rows"][0];
    for col in REPORT_COLUMNS {
        assert!(!row[col].is_null(), "{col}");
    }
    assert_eq!(row["Params"].as_u64().unwrap() as usize, param_count(&small_model()).unwrap().total);
    for f in ["good-row-bpc-vs-epoch.svg", "lstm-bpc-vs-time.svg", "all-bpc-vs-epoch.svg", "all-bpc-vs-time.svg"] {
        assert!(dir.path().join("curves").join(f).exists(), "{f}");
    }
    assert!(dir.path().join("good-row/metrics.csv").exists());
}
