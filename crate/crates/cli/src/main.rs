//! `shaq`: train, evaluate, run ablation grids and verify gradients.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use shaq_core::checkpoint;
use shaq_core::data::{load_corpus, synthetic_corpus, BatchPlan, CorpusSplits, Split};
use shaq_core::gradcheck::check_model;
use shaq_core::harness::{
    ablation_specs, apply_settings, evaluate, parse_kv, placement_specs, run_grid, train, ExperimentSpec,
};
use shaq_core::model::{param_count, Model, ModelConfig};

#[derive(Parser)]
#[command(name = "shaq", version, about = "Byte-level SHA-RNN / SHAQ language-model lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment.
    Train {
        #[command(flatten)]
        run: RunFlags,
        /// Continue from a `last.ckpt` written by the same spec.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: String,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value_t = 16)]
        batch: usize,
    },
    /// Run a table of experiments at reduced scale and write a comparative
    /// report.
    Grid {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, value_enum, default_value_t = Table::Placement)]
        table: Table,
    },
    /// Finite-difference check of a whole model in f64.
    Gradcheck {
        #[command(flatten)]
        run: RunFlags,
        /// Number of consecutive seeds, starting at `--seed`.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 12)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Table {
    Ablation,
    Placement,
}

/// Run settings. Every flag is also a config-file key of the same name;
/// flags win over the file.
#[derive(Args)]
struct RunFlags {
    /// Byte corpus, or `synthetic:N` for N generated bytes.
    #[arg(long)]
    corpus: Option<String>,
    /// `key = value` file with keys named like these flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    /// Block wiring: sharnn or shaq.
    #[arg(long)]
    block: Option<String>,
    /// lstm or qrnn.
    #[arg(long)]
    cell: Option<String>,
    #[arg(long)]
    qrnn_w: Option<usize>,
    /// Comma-separated 1-based block indices, or `none`.
    #[arg(long)]
    attn_layers: Option<String>,
    /// gated, ungated or mean.
    #[arg(long)]
    attn: Option<String>,
    /// boom, fc or none.
    #[arg(long)]
    ff: Option<String>,
    #[arg(long)]
    boom_inner: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    bptt: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// lamb or adam.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tag: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunFlags {
    /// Config-file settings overlaid with the flags that were given.
    fn settings(&self) -> Result<BTreeMap<String, String>> {
        let mut m = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                parse_kv(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => BTreeMap::new(),
        };
        let mut set = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        let s = |v: &Option<String>| v.clone();
        let n = |v: Option<usize>| v.map(|x| x.to_string());
        set("corpus", s(&self.corpus));
        set("epochs", n(self.epochs));
        set("d-model", n(self.d_model));
        set("blocks", n(self.blocks));
        set("block", s(&self.block));
        set("cell", s(&self.cell));
        set("qrnn-w", n(self.qrnn_w));
        set("attn-layers", s(&self.attn_layers));
        set("attn", s(&self.attn));
        set("ff", s(&self.ff));
        set("boom-inner", n(self.boom_inner));
        set("dropout", self.dropout.map(|x| x.to_string()));
        set("bptt", n(self.bptt));
        set("batch", n(self.batch));
        set("optimizer", s(&self.optimizer));
        set("lr", self.lr.map(|x| x.to_string()));
        set("warmup", self.warmup.map(|x| x.to_string()));
        set("clip", self.clip.map(|x| x.to_string()));
        set("seed", self.seed.map(|x| x.to_string()));
        set("tag", s(&self.tag));
        set("out", self.out.as_ref().map(|p| p.display().to_string()));
        Ok(m)
    }
}

fn read_corpus(source: &str, batch: usize) -> Result<CorpusSplits> {
    if let Some(n) = source.strip_prefix("synthetic:") {
        let n: usize = n.parse().with_context(|| format!("bad synthetic size `{n}`"))?;
        return Ok(CorpusSplits::from_bytes(synthetic_corpus(n, 0), batch)?);
    }
    Ok(load_corpus(Path::new(source), batch)?)
}

fn require_corpus(corpus: Option<PathBuf>, batch: usize) -> Result<CorpusSplits> {
    match corpus {
        Some(p) => read_corpus(&p.to_string_lossy(), batch),
        None => bail!("no corpus given; pass --corpus PATH (or synthetic:N)"),
    }
}

fn cmd_train(run: &RunFlags, resume: Option<&Path>) -> Result<()> {
    let mut spec = ExperimentSpec::default();
    let corpus = apply_settings(&mut spec, &run.settings()?)?;
    if spec.out_dir.is_none() {
        spec.out_dir = Some(PathBuf::from("runs").join(spec.slug()));
    }
    let corpus = require_corpus(corpus, spec.plan.batch)?;
    println!("spec {} ({} params)", spec.hash(), param_count(&spec.model)?.total);
    let outcome = train::<f32>(&spec, &corpus, resume)?;
    let best = outcome.best_record();
    println!(
        "best epoch {}: valid loss {:.4}, {:.4} bpc; {:.1} s/epoch; outputs in {}",
        best.epoch,
        best.valid_loss,
        best.valid_bpc,
        outcome.avg_epoch_seconds(),
        spec.out_dir.as_deref().unwrap_or(Path::new(".")).display()
    );
    Ok(())
}

fn cmd_eval(path: &Path, corpus: &str, split: SplitArg, batch: usize) -> Result<()> {
    let ck = checkpoint::load::<f32>(path)?;
    let (model, mut store) = Model::build::<f32>(&ck.config, 0)?;
    ck.restore_into(&mut store)?;
    let corpus = read_corpus(corpus, batch)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Valid => Split::Valid,
        SplitArg::Test => Split::Test,
    };
    let plan = BatchPlan::new(batch, ck.config.bptt);
    let e = evaluate(&model, &store, corpus.get(split), &plan)?;
    println!("{}", serde_json::json!({ "loss": e.loss, "bpc": e.bpc, "chars": e.chars }));
    Ok(())
}

/// Training-only keys a grid passes to every row; architecture keys come
/// from the table itself.
const GRID_KEYS: &[&str] = &["corpus", "epochs", "seed", "batch", "optimizer", "lr", "warmup", "clip", "dropout"];

fn cmd_grid(run: &RunFlags, table: Table) -> Result<()> {
    let settings = run.settings()?;
    let get = |k: &str, default: usize| -> Result<usize> {
        settings.get(k).map_or(Ok(default), |v| v.parse().with_context(|| format!("bad {k} `{v}`")))
    };
    let (d, bptt, epochs) = (get("d-model", 64)?, get("bptt", 64)?, get("epochs", 1)?);
    let specs = match table {
        Table::Ablation => ablation_specs(d, bptt, epochs),
        Table::Placement => placement_specs(d, bptt, epochs),
    };
    let shared: BTreeMap<String, String> =
        settings.iter().filter(|(k, _)| GRID_KEYS.contains(&k.as_str())).map(|(k, v)| (k.clone(), v.clone())).collect();
    let mut corpus_path = None;
    let specs = specs
        .into_iter()
        .map(|mut s| {
            corpus_path = apply_settings(&mut s, &shared)?;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = settings.get("out").map_or(PathBuf::from("runs/grid"), PathBuf::from);
    let corpus = require_corpus(corpus_path, specs[0].plan.batch)?;
    let report = run_grid(&specs, &corpus, &out)?;
    for r in &report.rows {
        match &r.error {
            None => println!(
                "{:<24} {:>9.1} s/epoch {:>10} params  loss {:.4}  bpc {:.4}",
                r.experiment,
                r.avg_time_per_epoch.unwrap_or(f64::NAN),
                r.params.unwrap_or(0),
                r.loss.unwrap_or(f64::NAN),
                r.bpc.unwrap_or(f64::NAN)
            ),
            Some(e) => println!("{:<24} failed: {e}", r.experiment),
        }
    }
    println!("report in {}", out.join("report.csv").display());
    Ok(())
}

fn cmd_gradcheck(run: &RunFlags, seeds: u64, coords: usize, tol: f64) -> Result<()> {
    let settings = run.settings()?;
    // small defaults so every parameter is reachable quickly
    let mut spec = ExperimentSpec::with_model(
        "gradcheck",
        ModelConfig { d_model: 8, d_inner: 32, bptt: 5, memory_horizon: 12, ..ModelConfig::toy_shaq() },
    );
    apply_settings(&mut spec, &settings)?;
    let mut worst = 0.0f64;
    for seed in spec.seed..spec.seed + seeds {
        let r = check_model(&spec.model, seed, 2, coords)?;
        println!(
            "seed {seed}: max relative error {:.3e} at {}[{}] (backprop {:.6e}, numeric {:.6e}) over {} coordinates",
            r.max_rel_error, r.worst_param, r.worst_index, r.worst_analytic, r.worst_numeric, r.coords_checked
        );
        worst = worst.max(r.max_rel_error);
    }
    if worst >= tol {
        bail!("gradient check failed: {worst:.3e} >= {tol:.1e}");
    }
    println!("ok: all seeds below {tol:.1e}");
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { run, resume } => cmd_train(&run, resume.as_deref()),
        Command::Eval { checkpoint, corpus, split, batch } => cmd_eval(&checkpoint, &corpus, split, batch),
        Command::Grid { run, table } => cmd_grid(&run, table),
        Command::Gradcheck { run, seeds, coords, tol } => cmd_gradcheck(&run, seeds, coords, tol),
    }
}
