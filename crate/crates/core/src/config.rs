//! Run configuration. Defaults are the full-size settings; [`RunConfig::desk`]
//! shrinks them for CPU-scale experiments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::Limits;
use crate::trainer::Objective;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub fact_dim: usize,
    pub relation_slots: usize,
    pub use_knowledge: bool,
    pub init_range: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            emb_dim: 300,
            hidden_dim: 256,
            attn_dim: 256,
            fact_dim: 500,
            relation_slots: 32,
            use_knowledge: true,
            init_range: 0.08,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub vocab_size: usize,
    /// Tokens seen fewer times than this stay out of the vocabulary.
    pub min_count: usize,
    pub passage_limit: usize,
    pub answer_limit: usize,
    pub max_facts: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            vocab_size: 50_000,
            min_count: 1,
            passage_limit: 800,
            answer_limit: 120,
            max_facts: 1000,
        }
    }
}

impl DataConfig {
    pub fn limits(&self) -> Limits {
        Limits {
            passage: self.passage_limit,
            answer: self.answer_limit,
        }
    }
}

/// `tau(step) = max(min, initial * exp(-rate * step))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TauSchedule {
    pub initial: f64,
    pub rate: f64,
    pub min: f64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        Self {
            initial: 1.0,
            rate: 1e-4,
            min: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub coverage_weight: f64,
    pub tau: TauSchedule,
    pub mc_samples: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Relaxed,
            batch_size: 16,
            lr: 1e-3,
            max_steps: 10_000,
            coverage_weight: 1.0,
            tau: TauSchedule::default(),
            mc_samples: 1,
            seed: 0,
            clip_norm: 2.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub beam: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { beam: 4 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainingConfig,
    pub generate: GenerateConfig,
}

impl RunConfig {
    /// CPU-sized profile used by the synthetic tasks.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig {
                emb_dim: 32,
                hidden_dim: 32,
                attn_dim: 32,
                fact_dim: 32,
                ..ModelConfig::default()
            },
            data: DataConfig {
                vocab_size: 2000,
                min_count: 3,
                passage_limit: 120,
                answer_limit: 30,
                max_facts: 64,
            },
            train: TrainingConfig {
                lr: 5e-3,
                max_steps: 2000,
                tau: TauSchedule {
                    initial: 1.0,
                    rate: 1e-3,
                    min: 0.1,
                },
                ..TrainingConfig::default()
            },
            generate: GenerateConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let dims = [
            ("model.emb_dim", m.emb_dim),
            ("model.hidden_dim", m.hidden_dim),
            ("model.attn_dim", m.attn_dim),
            ("model.fact_dim", m.fact_dim),
            ("model.relation_slots", m.relation_slots),
            ("data.min_count", self.data.min_count),
            ("data.passage_limit", self.data.passage_limit),
            ("data.answer_limit", self.data.answer_limit),
            ("data.max_facts", self.data.max_facts),
            ("train.batch_size", self.train.batch_size),
            ("train.mc_samples", self.train.mc_samples),
            ("generate.beam", self.generate.beam),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.data.vocab_size < 4 {
            return Err(Error::Config("data.vocab_size must be at least 4".into()));
        }
        let t = &self.train;
        if !(t.lr >= 0.0) || !(t.clip_norm > 0.0) || !(t.coverage_weight >= 0.0) {
            return Err(Error::Config("train.lr, train.clip_norm and train.coverage_weight out of range".into()));
        }
        crate::selectors::anneal_temperature(0, &t.tau)?;
        Ok(())
    }
}
