//! Run configuration: a TOML file, then command-line overrides, then
//! validation of every field before any stage runs.

use std::path::{Path, PathBuf};

use hybrid_lora_core::allocator::Direction;
use hybrid_lora_core::tasks::VOCAB_SIZE;
use hybrid_lora_core::trainer::{GrpoConfig, TrainConfig};
use hybrid_lora_core::{ModelConfig, ScoreVariant, VerifiableTask};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable giving the root for relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "HYBRID_LORA_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Adapter rank. Required.
    pub rank: usize,
    #[serde(default)]
    pub score_variant: ScoreVariant,
    #[serde(default = "default_r_fft")]
    pub r_fft: f64,
    /// Number of scoring batches `K`.
    #[serde(default = "default_partitions")]
    pub partitions: usize,
    #[serde(default)]
    pub direction: Direction,
    #[serde(default)]
    pub partition_seed: u64,
    #[serde(default)]
    pub adapter_seed: u64,
    /// Supervised steps producing the starting checkpoint.
    #[serde(default = "default_pretrain_steps")]
    pub pretrain_steps: usize,
    #[serde(default = "default_pretrain_lr")]
    pub pretrain_lr: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub task: VerifiableTask,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub grpo: GrpoConfig,
}

fn default_r_fft() -> f64 {
    0.10
}
fn default_partitions() -> usize {
    20
}
fn default_pretrain_steps() -> usize {
    200
}
fn default_pretrain_lr() -> f64 {
    3e-3
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("hybrid-lora-run")
}

/// Values given on the command line; `None` keeps the file's value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub rank: Option<usize>,
    pub r_fft: Option<f64>,
    pub partitions: Option<usize>,
    pub score_variant: Option<ScoreVariant>,
    pub direction: Option<Direction>,
    pub objective: Option<hybrid_lora_core::Objective>,
    pub warmup_steps: Option<usize>,
    pub total_steps: Option<usize>,
    pub eval_every: Option<usize>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

fn invalid(field: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::validation(format!("invalid config field `{field}`: {reason}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::validation(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::missing(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies overrides. `seed` sets the model, task, training, partition
    /// and adapter seeds together.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.rank {
            self.rank = v;
        }
        if let Some(v) = o.r_fft {
            self.r_fft = v;
        }
        if let Some(v) = o.partitions {
            self.partitions = v;
        }
        if let Some(v) = o.score_variant {
            self.score_variant = v;
        }
        if let Some(v) = o.direction {
            self.direction = v;
        }
        if let Some(v) = o.objective {
            self.train.objective = v;
        }
        if let Some(v) = o.warmup_steps {
            self.train.warmup_steps = v;
        }
        if let Some(v) = o.total_steps {
            self.train.total_steps = v;
        }
        if let Some(v) = o.eval_every {
            self.train.eval_every = v;
        }
        if let Some(s) = o.seed {
            self.model.seed = s;
            self.task.seed = s;
            self.train.seed = s;
            self.partition_seed = s;
            self.adapter_seed = s;
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.rank == 0 {
            return Err(invalid("rank", "must be at least 1"));
        }
        if !(self.r_fft > 0.0 && self.r_fft < 1.0) {
            return Err(invalid("r_fft", format!("must lie in (0, 1), got {}", self.r_fft)));
        }
        if self.partitions < 2 {
            return Err(invalid("partitions", format!("need at least 2 scoring batches, got {}", self.partitions)));
        }
        if !(self.pretrain_lr > 0.0 && self.pretrain_lr.is_finite()) {
            return Err(invalid("pretrain_lr", format!("must be positive, got {}", self.pretrain_lr)));
        }
        let core = |e: hybrid_lora_core::Error| CliError::validation(e.to_string());
        self.model.validate().map_err(core)?;
        self.task.validate().map_err(core)?;
        self.train.validate().map_err(core)?;
        self.grpo.validate().map_err(core)?;
        if self.model.vocab_size < VOCAB_SIZE {
            return Err(invalid(
                "model.vocab_size",
                format!("task vocabulary needs {VOCAB_SIZE}, got {}", self.model.vocab_size),
            ));
        }
        let need = self.task.max_sequence_len().max(self.task.max_sequence_len() - 1 + self.grpo.max_gen_len);
        if self.model.max_seq_len < need {
            return Err(invalid(
                "model.max_seq_len",
                format!("task sequences need {need} positions, got {}", self.model.max_seq_len),
            ));
        }
        Ok(())
    }

    /// `output_dir`, joined onto the output root when relative and the
    /// root variable is set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => Path::new(&root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_toml("rank = 4").unwrap();
        assert_eq!(cfg.r_fft, 0.10);
        assert_eq!(cfg.partitions, 20);
        assert_eq!(cfg.train.eval_every, 50);
        assert_eq!(cfg.grpo.group_size, 4);
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn missing_rank_is_named() {
        let err = RunConfig::from_toml("r_fft = 0.2").unwrap_err();
        assert_eq!(err.code, 1);
        assert!(err.message.contains("rank"), "{}", err.message);
    }

    #[test]
    fn bad_fields_are_named() {
        for (text, field) in [
            ("rank = 4\nr_fft = 1.5", "r_fft"),
            ("rank = 0", "rank"),
            ("rank = 4\n[model]\nnum_heads = 5", "num_heads"),
            ("rank = 4\n[train]\neval_every = 900", "eval_every"),
            ("rank = 4\n[grpo]\ngroup_size = 1", "group_size"),
        ] {
            let err = RunConfig::from_toml(text).unwrap().validate().unwrap_err();
            assert!(err.message.contains(field), "{text}: {}", err.message);
        }
        assert!(RunConfig::from_toml("rank = 4\nbogus = 1").is_err());
    }

    #[test]
    fn seed_override_sets_every_seed() {
        let mut cfg = RunConfig::from_toml("rank = 4").unwrap();
        cfg.apply(&Overrides {
            seed: Some(7),
            ..Overrides::default()
        });
        assert_eq!(
            [cfg.model.seed, cfg.task.seed, cfg.train.seed, cfg.partition_seed, cfg.adapter_seed],
            [7; 5]
        );
    }
}
