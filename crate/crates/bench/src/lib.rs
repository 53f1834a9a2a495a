//! Fixtures shared by the benchmarks.

use hybrid_lora_core::trainer::pretrain;
use hybrid_lora_core::{attach_lora, Model, ModelConfig, VerifiableTask};

/// The two-layer, width-32 model used throughout the benchmarks.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_model: 32,
        num_heads: 4,
        d_ff: 48,
        ..ModelConfig::default()
    }
}

/// A briefly pretrained model, optionally with rank-`rank` branches on
/// every candidate module.
pub fn fixture(rank: Option<usize>) -> (Model, VerifiableTask) {
    let task = VerifiableTask::default();
    let mut model = Model::new(small_config()).expect("valid config");
    pretrain(&mut model, &task, 10, 16, 3e-3, 0).expect("pretrain");
    if let Some(r) = rank {
        let u = model.universe();
        attach_lora(&mut model, &u, r, 0).expect("attach");
    }
    (model, task)
}
