use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::Tape;
use crate::checkpoint;
use crate::data::{batchify, eval_windows, next_window, BatchPlan, CorpusSplits};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Ctx;
use crate::optim::{clip_grad_norm, Optimizer};
use crate::params::ParamStore;
use crate::tensor::Float;

use super::svg::{line_chart, Series};
use super::{bpc_from_nats, ExperimentSpec};

pub const METRICS_HEADER: &str = "epoch,train_loss,valid_loss,valid_bpc,seconds,params";

/// What the per-epoch `seconds` covers.
pub const TIMING_BOUNDARY: &str = "monotonic clock around the training-window loop of one epoch \
(forward, backward, clip, optimizer step, state carry); excludes validation, checkpointing and all file output";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean training loss in nats per character.
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_bpc: f64,
    pub seconds: f64,
    pub cumulative_hours: f64,
    pub params: usize,
}

impl MetricsRecord {
    fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.3},{}",
            self.epoch, self.train_loss, self.valid_loss, self.valid_bpc, self.seconds, self.params
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub bpc: f64,
    pub chars: usize,
}

/// Mean per-character loss over all of `data` in one pass of fixed
/// `plan.center` windows, dropout off, state carried across windows.
pub fn evaluate<T: Float>(model: &Model, store: &ParamStore<T>, data: &[u8], plan: &BatchPlan) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Corpus("cannot evaluate an empty split".into()));
    }
    let batch = plan.batch.min(data.len() / 2).max(1);
    let tracks = batchify(data, batch)?;
    if tracks.rows < 2 {
        return Err(Error::Corpus(format!("split of {} bytes is too short to evaluate", data.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut state = model.init_state::<T>(batch);
    let (mut total, mut chars) = (0.0, 0usize);
    for w in eval_windows(&tracks, plan.center) {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, store, false, &mut rng);
        let (loss, next) = model.loss(&ctx, &w.inputs, &w.targets, w.len, batch, &state)?;
        let n = w.len * batch;
        total += loss.value().data()[0].to_f64() * n as f64;
        chars += n;
        state = next;
    }
    let loss = total / chars as f64;
    Ok(Evaluation { loss, bpc: bpc_from_nats(loss)?, chars })
}

/// Result of [`train`]. `best` holds the parameters of the epoch with the
/// lowest validation bpc.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Float> {
    pub model: Model,
    pub store: ParamStore<T>,
    pub best: ParamStore<T>,
    pub best_epoch: usize,
    pub records: Vec<MetricsRecord>,
    pub spec_hash: String,
}

impl<T: Float> TrainOutcome<T> {
    pub fn best_record(&self) -> &MetricsRecord {
        &self.records[self.best_epoch - 1]
    }

    pub fn avg_epoch_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.seconds).sum::<f64>() / self.records.len() as f64
    }
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    spec: ExperimentSpec,
    epochs_done: usize,
    best_epoch: usize,
    records: Vec<MetricsRecord>,
}

/// Spec with the fields that may change across a resume blanked out.
fn resume_key(spec: &ExperimentSpec) -> ExperimentSpec {
    ExperimentSpec { epochs: 0, out_dir: None, ..spec.clone() }
}

/// Randomness for one epoch depends only on the seed and the epoch index,
/// so a resumed run draws exactly what an uninterrupted one would.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

struct Outputs {
    dir: PathBuf,
}

impl Outputs {
    fn create(dir: &Path, fresh: bool) -> Result<Self> {
        for sub in ["", "checkpoints", "curves"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let metrics = dir.join("metrics.csv");
        if fresh || !metrics.exists() {
            write_file(&metrics, &format!("{METRICS_HEADER}\n"))?;
        }
        Ok(Outputs { dir: dir.to_path_buf() })
    }

    fn append(&self, r: &MetricsRecord) -> Result<()> {
        let path = self.dir.join("metrics.csv");
        let mut f = OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", r.csv_line()).map_err(|e| Error::io(&path, e))
    }

    fn ckpt(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(name)
    }

    fn summary(&self, spec: &ExperimentSpec, hash: &str, records: &[MetricsRecord], best_epoch: usize) -> Result<()> {
        let avg = records.iter().map(|r| r.seconds).sum::<f64>() / records.len().max(1) as f64;
        let best = &records[best_epoch - 1];
        let report = json!({
            "experiment": spec.tag,
            "spec_hash": hash,
            "spec": spec,
            "params": best.params,
            "avg_time_per_epoch_seconds": avg,
            "best_epoch": best_epoch,
            "best_valid_loss": best.valid_loss,
            "best_valid_bpc": best.valid_bpc,
            "timing_boundary": TIMING_BOUNDARY,
            "records": records,
        });
        write_file(&self.dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
        let series = |x: &dyn Fn(&MetricsRecord) -> f64| Series {
            label: spec.tag.clone(),
            points: records.iter().map(|r| (x(r), r.valid_bpc)).collect(),
        };
        let curves = self.dir.join("curves");
        write_file(
            &curves.join("bpc_vs_epoch.svg"),
            &line_chart("Validation bpc by epoch", "epoch", "bpc", &[series(&|r| r.epoch as f64)]),
        )?;
        write_file(
            &curves.join("bpc_vs_time.svg"),
            &line_chart("Validation bpc by training time", "hours", "bpc", &[series(&|r| r.cumulative_hours)]),
        )
    }
}

/// Trains `spec` on `corpus`, optionally continuing from a `last.ckpt`
/// written by an earlier call with the same spec.
///
/// Each epoch restarts the carried state, draws windows in order from the
/// batched training stream, clips the global gradient norm and steps the
/// optimizer. With an output directory it appends `metrics.csv`, writes
/// `checkpoints/last.ckpt` every epoch and `checkpoints/best.ckpt` whenever
/// validation bpc improves. A non-finite loss aborts the run; checkpoints
/// from earlier epochs are left as they were.
pub fn train<T: Float>(spec: &ExperimentSpec, corpus: &CorpusSplits, resume: Option<&Path>) -> Result<TrainOutcome<T>> {
    spec.validate()?;
    let hash = spec.hash();
    let (model, mut store) = Model::build::<T>(&spec.model, spec.seed)?;
    let params = store.num_scalars();
    let mut opt = Optimizer::new(spec.optim, &store);
    let mut records = Vec::new();
    let mut best_epoch = 0;
    let mut best = store.clone();
    if let Some(path) = resume {
        let ck = checkpoint::load::<T>(path)?;
        let st: TrainerState = serde_json::from_value(ck.trainer.clone())?;
        if resume_key(&st.spec) != resume_key(spec) {
            return Err(Error::Checkpoint("checkpoint was written by a different experiment spec".into()));
        }
        ck.restore_into(&mut store)?;
        opt = ck.optimizer.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        records = st.records;
        best_epoch = st.best_epoch;
        best = store.clone();
        let best_path = path.with_file_name("best.ckpt");
        if best_epoch > 0 && best_epoch < records.len() && best_path.exists() {
            checkpoint::load::<T>(&best_path)?.restore_into(&mut best)?;
        }
    }
    let outputs = match &spec.out_dir {
        Some(dir) => Some(Outputs::create(dir, resume.is_none())?),
        None => None,
    };
    let tracks = batchify(&corpus.train, spec.plan.batch)?;
    let mut hours = records.last().map_or(0.0, |r: &MetricsRecord| r.cumulative_hours);
    for epoch in records.len() + 1..=spec.epochs {
        let mut rng = epoch_rng(spec.seed, epoch);
        let mut state = model.init_state::<T>(spec.plan.batch);
        let (mut total, mut chars, mut cursor, mut step) = (0.0, 0usize, 0usize, 0usize);
        let started = Instant::now();
        while let Some(w) = next_window(&tracks, &spec.plan, cursor, &mut rng) {
            step += 1;
            let grads = {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &store, true, &mut rng);
                let (loss, next) = model.loss(&ctx, &w.inputs, &w.targets, w.len, spec.plan.batch, &state)?;
                let l = loss.value().data()[0].to_f64();
                if !l.is_finite() {
                    log::error!("{}: non-finite loss at epoch {epoch} step {step}", spec.tag);
                    return Err(Error::NonFiniteLoss { epoch, step });
                }
                let n = w.len * spec.plan.batch;
                total += l * n as f64;
                chars += n;
                state = next;
                tape.backward(loss)?
            };
            store.zero_grads();
            grads.accumulate_into(&mut store);
            clip_grad_norm(&mut store, spec.clip)?;
            let lr = spec.lr.lr_at(opt.step + 1, epoch);
            opt.step(&mut store, lr)?;
            cursor += w.len;
        }
        let seconds = (started.elapsed().as_secs_f64() * 1000.0).round() / 1000.0;
        if chars == 0 {
            return Err(Error::Corpus("training split yields no windows".into()));
        }
        hours += seconds / 3600.0;
        let valid = evaluate(&model, &store, &corpus.valid, &spec.plan)?;
        let record = MetricsRecord {
            epoch,
            train_loss: total / chars as f64,
            valid_loss: valid.loss,
            valid_bpc: valid.bpc,
            seconds,
            cumulative_hours: hours,
            params,
        };
        log::info!(
            "{} epoch {epoch}: train {:.4} valid {:.4} ({:.4} bpc) in {:.1}s over {step} steps",
            spec.tag,
            record.train_loss,
            record.valid_loss,
            record.valid_bpc,
            seconds
        );
        let improved = best_epoch == 0 || record.valid_bpc < records[best_epoch - 1].valid_bpc;
        records.push(record);
        if improved {
            best_epoch = epoch;
            best = store.clone();
        }
        if let Some(out) = &outputs {
            out.append(records.last().expect("just pushed"))?;
            let trainer = serde_json::to_value(TrainerState {
                spec: spec.clone(),
                epochs_done: epoch,
                best_epoch,
                records: records.clone(),
            })?;
            if improved {
                checkpoint::save(&out.ckpt("best.ckpt"), &spec.model, &store, Some(&opt), &trainer)?;
            }
            checkpoint::save(&out.ckpt("last.ckpt"), &spec.model, &store, Some(&opt), &trainer)?;
            out.summary(spec, &hash, &records, best_epoch)?;
        }
    }
    if records.is_empty() {
        return Err(Error::Config("nothing to train: checkpoint already covers every epoch".into()));
    }
    Ok(TrainOutcome { model, store, best, best_epoch, records, spec_hash: hash })
}
