use hybrid_lora_core::gradcheck::{finite_difference_check, norm_relative_error, numeric_gradient};
use hybrid_lora_core::lora::attach_lora;
use hybrid_lora_core::tasks::{Batch, VerifiableTask};
use hybrid_lora_core::{Model, ModelConfig, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn random(shape: Vec<usize>, seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn weights(n: usize, seed: u64) -> Vec<f64> {
    random(vec![n], seed ^ 0xabc).into_data()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matmul_both_sides(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let b = random(vec![k, n], seed + 1);
        let w = weights(m * n, seed);
        let err = finite_difference_check(|t, x| {
            let bv = t.constant(b.clone());
            let y = t.matmul(x, bv)?;
            t.weighted_sum(y, w.clone())
        }, &random(vec![m, k], seed), STEP).unwrap();
        prop_assert!(err < TOL, "{err}");

        let a = random(vec![m, k], seed + 2);
        let err = finite_difference_check(|t, x| {
            let av = t.constant(a.clone());
            let y = t.matmul(av, x)?;
            t.weighted_sum(y, w.clone())
        }, &random(vec![k, n], seed), STEP).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn rowwise_ops(m in 1usize..4, n in 3usize..7, seed in any::<u64>()) {
        let x = random(vec![m, n], seed);
        let w = weights(m * n, seed);
        for op in 0..5 {
            let err = finite_difference_check(|t, x| {
                let y = match op {
                    0 => t.softmax(x)?,
                    1 => t.log_softmax(x)?,
                    2 => t.layer_norm(x, 1e-5)?,
                    3 => t.silu(x)?,
                    _ => t.exp(x)?,
                };
                t.weighted_sum(y, w.clone())
            }, &x, STEP).unwrap();
            prop_assert!(err < TOL, "op {op}: {err}");
        }
    }

    #[test]
    fn broadcast_and_scalar_ops(m in 1usize..4, n in 1usize..5, seed in any::<u64>()) {
        let a = random(vec![m, n], seed + 1);
        let w = weights(m * n, seed);
        let row = random(vec![n], seed);
        let err = finite_difference_check(|t, v| {
            let av = t.constant(a.clone());
            let y = t.mul_row(av, v)?;
            let z = t.add_row(y, v)?;
            t.weighted_sum(z, w.clone())
        }, &row, STEP).unwrap();
        prop_assert!(err < TOL, "{err}");

        let err = finite_difference_check(|t, s| {
            let av = t.constant(a.clone());
            let y = t.scale_by(av, s)?;
            t.weighted_sum(y, w.clone())
        }, &Tensor::scalar(0.7), STEP).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn cross_entropy_and_pick(m in 1usize..4, n in 2usize..6, seed in any::<u64>()) {
        let targets: Vec<Option<usize>> = (0..m).map(|i| if i == 0 || (seed >> i) & 1 == 1 { Some((seed as usize + i) % n) } else { None }).collect();
        let err = finite_difference_check(|t, x| t.cross_entropy(x, targets.clone()), &random(vec![m, n], seed), STEP).unwrap();
        prop_assert!(err < TOL, "{err}");

        let cols: Vec<usize> = (0..m).map(|i| (i * 7 + seed as usize) % n).collect();
        let err = finite_difference_check(|t, x| {
            let lp = t.log_softmax(x)?;
            let p = t.pick_per_row(lp, cols.clone())?;
            t.sum(p)
        }, &random(vec![m, n], seed), STEP).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn causal_attention(batch in 1usize..3, seq in 1usize..4, heads in 1usize..3, seed in any::<u64>()) {
        let d = heads * 2;
        let k = random(vec![batch * seq, d], seed + 1);
        let v = random(vec![batch * seq, d], seed + 2);
        let w = weights(batch * seq * d, seed);
        let err = finite_difference_check(|t, q| {
            let kv = t.constant(k.clone());
            let vv = t.constant(v.clone());
            let y = t.causal_attention(q, kv, vv, batch, seq, heads)?;
            t.weighted_sum(y, w.clone())
        }, &random(vec![batch * seq, d], seed), STEP).unwrap();
        prop_assert!(err < TOL, "{err}");

        let q = random(vec![batch * seq, d], seed + 3);
        let err = finite_difference_check(|t, kv| {
            let qv = t.constant(q.clone());
            let vv = t.constant(v.clone());
            let y = t.causal_attention(qv, kv, vv, batch, seq, heads)?;
            t.weighted_sum(y, w.clone())
        }, &k, STEP).unwrap();
        prop_assert!(err < TOL, "{err}");
    }
}

#[test]
fn clamp_and_minimum_away_from_kinks() {
    let x = Tensor::vector(vec![-2.5, -0.3, 0.4, 1.7]);
    let err = finite_difference_check(|t, x| {
        let c = t.clamp(x, -1.0, 1.0)?;
        let y = t.scale(x, 0.5)?;
        let m = t.minimum(c, y)?;
        t.weighted_sum(m, vec![1.0, 2.0, 3.0, 4.0])
    }, &x, STEP)
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn lora_branch_parameters_match_finite_differences() {
    let task = VerifiableTask::default();
    let mut model = Model::new(ModelConfig {
        num_layers: 1,
        d_model: 8,
        num_heads: 2,
        d_ff: 12,
        ..ModelConfig::default()
    })
    .unwrap();
    let universe = model.universe();
    attach_lora(&mut model, &universe, 3, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for m in model.modules().map(|m| m.branch.clone().unwrap()).collect::<Vec<_>>() {
        let e = model.store.get_mut(m.e);
        for v in e.data_mut() {
            *v = rand::Rng::random_range(&mut rng, -0.5..0.5);
        }
    }
    let batch = Batch::from_problems(&task.sample(3, &mut rng)).unwrap();

    let mut tape = Tape::new();
    let loss = model.supervised_loss(&mut tape, &batch).unwrap();
    let grads = tape.backward(loss).unwrap();
    for module in model.modules().collect::<Vec<_>>() {
        let branch = module.branch.as_ref().unwrap();
        for pid in branch.params() {
            let analytic = grads.param(pid).unwrap().to_vec();
            let x0 = model.store.get(pid).data().to_vec();
            let numeric = numeric_gradient(
                |vals| {
                    let mut probe = model.clone();
                    probe.store.get_mut(pid).data_mut().copy_from_slice(vals);
                    probe.eval_loss(&batch)
                },
                &x0,
                STEP,
            )
            .unwrap();
            let err = norm_relative_error(&analytic, &numeric);
            assert!(err < 1e-5, "{} {}: {err}", module.id, model.store.name(pid));
        }
    }
}
