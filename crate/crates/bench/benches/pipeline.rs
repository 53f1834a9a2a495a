use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use hybrid_lora_bench::fixture;
use hybrid_lora_core::allocator::allocate_scores;
use hybrid_lora_core::optim::Adam;
use hybrid_lora_core::scoring::collect_sensitivities;
use hybrid_lora_core::trainer::{grpo_step, probe_batches, validation_problems};
use hybrid_lora_core::{GrpoConfig, ModuleId, ModuleKind, Tape};

fn forward_backward(c: &mut Criterion) {
    let (model, task) = fixture(Some(16));
    let batch = &probe_batches(&task, 1, 16).unwrap()[0];
    c.bench_function("forward_backward/batch16", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let loss = model.supervised_loss(&mut tape, black_box(batch)).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn scoring(c: &mut Criterion) {
    let (model, task) = fixture(Some(16));
    let batches = probe_batches(&task, 4, 16).unwrap();
    c.bench_function("scoring/4_partitions", |b| {
        b.iter_batched(
            || model.clone(),
            |mut m| black_box(collect_sensitivities(&mut m, &batches, 0).unwrap()),
            BatchSize::LargeInput,
        )
    });
}

fn allocation(c: &mut Criterion) {
    let ids: Vec<ModuleId> = (0..224).map(|i| ModuleId::new(i / 7 + 1, ModuleKind::ALL[i % 7])).collect();
    let scores: Vec<(ModuleId, f64)> = ids.iter().enumerate().map(|(i, &m)| (m, ((i * 37) % 101) as f64)).collect();
    let params: Vec<(ModuleId, usize)> = ids.iter().enumerate().map(|(i, &m)| (m, 1000 + (i * 53) % 4000)).collect();
    c.bench_function("allocation/224_modules", |b| {
        b.iter(|| black_box(allocate_scores(&scores, &params, black_box(0.1), String::new()).unwrap()))
    });
}

fn grpo(c: &mut Criterion) {
    let (base, task) = fixture(None);
    let grpo = GrpoConfig::default();
    let prompts: Vec<Vec<usize>> = validation_problems(&task).into_iter().take(16).map(|p| p.prompt).collect();
    c.bench_function("grpo_step/16_prompts", |b| {
        b.iter_batched(
            || {
                let model = base.clone();
                let mut opt = Adam::new();
                opt.add_group(&model.store, &model.trainable_params(), 1e-3).unwrap();
                (model, opt)
            },
            |(mut m, mut opt)| black_box(grpo_step(&mut m, &base, &task, &prompts, &grpo, &mut opt, 0).unwrap()),
            BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = forward_backward, scoring, allocation, grpo
}
criterion_main!(benches);
