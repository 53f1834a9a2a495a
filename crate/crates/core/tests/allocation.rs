use hybrid_lora_core::allocator::{allocate_scores, allocate_scores_from_full, validate_plan};
use hybrid_lora_core::{ModuleId, ModuleKind};
use proptest::prelude::*;

fn ids(n: usize) -> Vec<ModuleId> {
    (0..n)
        .map(|i| ModuleId::new(i / 7 + 1, ModuleKind::ALL[i % 7]))
        .collect()
}

type Instance = (Vec<(ModuleId, f64)>, Vec<(ModuleId, usize)>, f64);

fn instance() -> impl Strategy<Value = Instance> {
    (1usize..30).prop_flat_map(|n| {
        (
            prop::collection::vec(prop_oneof![Just(0.5), 0.0f64..1.0], n),
            prop::collection::vec(1usize..5000, n),
            0.001f64..0.999,
        )
            .prop_map(move |(s, p, r)| {
                let u = ids(n);
                (u.iter().copied().zip(s).collect(), u.into_iter().zip(p).collect(), r)
            })
    })
}

/// Largest feasible subset under uniform sizes, ties broken by the smallest
/// score sum.
fn brute_force(scores: &[f64], size: usize, r: f64) -> Vec<usize> {
    let n = scores.len();
    let total = (n * size) as f64;
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << n) {
        let set: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        if (set.len() * size) as f64 / total > r {
            continue;
        }
        let sum: f64 = set.iter().map(|&i| scores[i]).sum();
        let better = match &best {
            None => true,
            Some((k, s, _)) => set.len() > *k || (set.len() == *k && sum < *s),
        };
        if better {
            best = Some((set.len(), sum, set));
        }
    }
    best.unwrap().2
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn plans_are_feasible_and_monotone((scores, params, r) in instance(), bump in 0.0f64..0.5) {
        for plan in [
            allocate_scores(&scores, &params, r, String::new()).unwrap(),
            allocate_scores_from_full(&scores, &params, r, String::new()).unwrap(),
        ] {
            prop_assert!(validate_plan(&plan, &params).is_ok());
        }
        let small = allocate_scores(&scores, &params, r, String::new()).unwrap();
        let r2 = (r + bump).min(0.999);
        let large = allocate_scores(&scores, &params, r2, String::new()).unwrap();
        prop_assert!(small.fft_set.iter().all(|m| large.fft_set.contains(m)));
        prop_assert!(large.used_ratio >= small.used_ratio);
    }

    #[test]
    fn directions_agree_with_brute_force(n in 1usize..11, size in 1usize..100, r in 0.01f64..0.99, seed in any::<u64>()) {
        // distinct scores
        let mut vals: Vec<f64> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1000003) as f64 + i as f64 * 1e-3).collect();
        vals.dedup();
        prop_assume!(vals.len() == n);
        let u = ids(n);
        let scores: Vec<(ModuleId, f64)> = u.iter().copied().zip(vals.iter().copied()).collect();
        let params: Vec<(ModuleId, usize)> = u.iter().map(|&m| (m, size)).collect();
        let up = allocate_scores(&scores, &params, r, String::new()).unwrap();
        let down = allocate_scores_from_full(&scores, &params, r, String::new()).unwrap();
        prop_assert_eq!(&up.fft_set, &down.fft_set);
        let mut expect: Vec<ModuleId> = brute_force(&vals, size, r).into_iter().map(|i| u[i]).collect();
        expect.sort();
        prop_assert_eq!(&up.fft_set, &expect);
    }
}

#[test]
fn fourteen_uniform_modules_at_ten_percent() {
    let u = ids(14);
    let scores: Vec<_> = u.iter().enumerate().map(|(i, &m)| (m, (i * 5 % 14) as f64)).collect();
    let params: Vec<_> = u.iter().map(|&m| (m, 100)).collect();
    let plan = allocate_scores(&scores, &params, 0.10, String::new()).unwrap();
    assert_eq!(plan.fft_set, vec![u[0]]);
    assert_eq!(plan.lora_set.len(), 13);
}
