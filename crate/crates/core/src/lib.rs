//! Hybrid full-parameter / LoRA fine-tuning at desk scale.
//!
//! A reverse-mode autodiff tape drives a small decoder-only transformer.
//! Every linear projection can carry an SVD-style low-rank branch; branch
//! sensitivities under complementary random masking score each module, a
//! budgeted greedy split sends the lowest-scored modules to full
//! fine-tuning, and the hybrid model is trained with a supervised or GRPO
//! objective.

pub mod allocator;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod lora;
pub mod model;
pub mod optim;
pub mod scoring;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use allocator::{allocate, allocate_from_full, validate_plan, AllocationPlan, Direction, PlanViolation};
pub use error::{Error, Result};
pub use lora::{attach_lora, AdapterSet, LoraBranch};
pub use model::{Model, ModelConfig, ModuleId, ModuleKind};
pub use scoring::{HybridScoreReport, OracleReport, ScoreVariant};
pub use tape::{Gradients, Tape, Var};
pub use tasks::{Batch, TaskKind, VerifiableTask};
pub use tensor::{ParamId, ParamStore, Tensor};
pub use trainer::{GrpoConfig, GroupSample, MetricRecord, Objective, TrainConfig, TrainOutcome};
