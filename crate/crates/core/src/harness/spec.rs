use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::BatchPlan;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{LrSchedule, OptimConfig};

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub tag: String,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub lr: LrSchedule,
    /// Global gradient-norm bound.
    pub clip: f64,
    pub plan: BatchPlan,
    pub epochs: usize,
    pub seed: u64,
    /// Where metrics, curves and checkpoints go; `None` keeps the run in
    /// memory. Not part of the hash.
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    /// The desk configuration: toy SHAQ, LAMB, `B = 16`, `L_c = 256`,
    /// 5 epochs.
    fn default() -> Self {
        let model = ModelConfig::toy_shaq();
        ExperimentSpec {
            tag: "toy-shaq".into(),
            plan: BatchPlan::new(16, model.bptt),
            model,
            optim: OptimConfig::default(),
            lr: LrSchedule::Warmup { lr: 1e-2, steps: 100 },
            clip: 0.25,
            epochs: 5,
            seed: 0,
            out_dir: None,
        }
    }
}

impl ExperimentSpec {
    pub fn with_model(tag: impl Into<String>, model: ModelConfig) -> Self {
        ExperimentSpec { tag: tag.into(), plan: BatchPlan::new(16, model.bptt), model, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.plan.batch == 0 || self.plan.center == 0 {
            return Err(Error::Config("batch and window length must be positive".into()));
        }
        if self.plan.center != self.model.bptt {
            return Err(Error::Config(format!(
                "window center {} differs from model bptt {}",
                self.plan.center, self.model.bptt
            )));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip must be positive, got {}", self.clip)));
        }
        if !(self.lr.target() > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr.target())));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the spec without its output
    /// directory, as lowercase hex.
    pub fn hash(&self) -> String {
        let canonical = ExperimentSpec { out_dir: None, ..self.clone() };
        let json = serde_json::to_string(&canonical).expect("spec serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// File-system friendly form of the tag.
    pub fn slug(&self) -> String {
        let s: String = self
            .tag
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
            .collect();
        let s = s.split('-').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("-");
        if s.is_empty() {
            "run".into()
        } else {
            s
        }
    }
}
