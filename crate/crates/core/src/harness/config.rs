//! Run configuration: a JSON document with a fixed key schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moda::ModaConfig;
use crate::pipeline::ModelConfig;
use crate::synth::{SplitSizes, TaskSpec};
use crate::tensor::{fnv1a64, AdamWConfig, CosineSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl StageConfig {
    pub fn stage1_default() -> Self {
        Self {
            base_lr: 1e-3,
            warmup_frac: 0.03,
            total_steps: 2000,
            batch_size: 64,
            weight_decay: 0.0,
        }
    }

    pub fn stage2_default() -> Self {
        Self {
            base_lr: 2e-5,
            batch_size: 32,
            ..Self::stage1_default()
        }
    }

    pub fn schedule(&self) -> Result<CosineSchedule> {
        CosineSchedule::new(self.base_lr, self.warmup_frac, self.total_steps)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    fn validate(&self, which: &str) -> Result<()> {
        self.schedule()?;
        if self.batch_size == 0 || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("{which}: bad batch size or weight decay")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Validation metrics every this many steps (and at the final step); 0 disables.
    pub every: u64,
    /// Validation samples used for the periodic metrics; 0 means the whole split.
    pub val_samples: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: 250,
            val_samples: 256,
            batch_size: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// `None` trains the baseline without a modulation adapter.
    pub moda: Option<ModaConfig>,
    pub task: TaskSpec,
    pub data: SplitSizes,
    pub data_seed: u64,
    pub seed: u64,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// Keep the adapter trainable during instruction tuning.
    pub train_adapter_in_stage2: bool,
    pub eval: EvalConfig,
    /// Adds wall-clock seconds to metrics records (breaks byte-identical reruns).
    pub log_wall_time: bool,
    /// Not part of the config hash.
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            moda: Some(ModaConfig::reference()),
            task: TaskSpec::default(),
            data: SplitSizes::default(),
            data_seed: 0,
            seed: 0,
            stage1: StageConfig::stage1_default(),
            stage2: StageConfig::stage2_default(),
            train_adapter_in_stage2: true,
            eval: EvalConfig::default(),
            log_wall_time: false,
            out_dir: None,
        }
    }
}

fn hash_value(mut v: serde_json::Value, keep: Option<&[&str]>) -> u64 {
    if let serde_json::Value::Object(map) = &mut v {
        map.remove("out_dir");
        map.remove("log_wall_time");
        if let Some(keep) = keep {
            map.retain(|k, _| keep.contains(&k.as_str()));
        }
    }
    // serde_json maps are sorted, so this text is canonical
    fnv1a64(v.to_string().as_bytes())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        if let Some(m) = &self.moda {
            m.validate(self.model.width)?;
        }
        let vocab = self.task.vocab().len();
        if vocab > self.model.vocab_size {
            return Err(Error::Config(format!(
                "task needs {vocab} token ids but the model vocabulary has {}",
                self.model.vocab_size
            )));
        }
        if self.task.n_tokens != self.model.n_visual || self.task.feature_width() != self.model.vision_width {
            return Err(Error::Config(format!(
                "task images are [{}, {}] but the model expects [{}, {}]",
                self.task.n_tokens,
                self.task.feature_width(),
                self.model.n_visual,
                self.model.vision_width
            )));
        }
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")?;
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval batch size must be positive".into()));
        }
        if self.data.train == 0 || self.data.test == 0 {
            return Err(Error::Config("train and test splits must be non-empty".into()));
        }
        Ok(())
    }

    /// Hash of everything that affects results.
    pub fn config_hash(&self) -> u64 {
        hash_value(serde_json::to_value(self).expect("config serializes"), None)
    }

    /// Hash of the fields the alignment stage depends on, so one stage-1
    /// checkpoint can serve every instruction-tuning variant.
    pub fn stage1_hash(&self) -> u64 {
        hash_value(
            serde_json::to_value(self).expect("config serializes"),
            Some(&["model", "task", "data", "data_seed", "seed", "stage1", "eval"]),
        )
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }
}
