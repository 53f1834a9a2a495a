//! SVD-style low-rank branches: `x' = xW + b + α · (xA) diag(e) B`.
//!
//! Branches start with `e = 0`, so attaching leaves the model function
//! unchanged while `A` and `B` are already random and `∂L/∂e` is
//! informative from the first step.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{param_name, Model, ModuleId};
use crate::tensor::{ParamId, Tensor};

/// Standard deviation of the Gaussian initialisation of `A` and `B`.
pub const FACTOR_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoraBranch {
    /// `d_in × r`
    pub a: ParamId,
    /// `r` diagonal coefficients
    pub e: ParamId,
    /// `r × d_out`
    pub b: ParamId,
    /// rank-0 gate
    pub alpha: ParamId,
    /// mask bit `z`
    pub enabled: bool,
    pub rank: usize,
}

impl LoraBranch {
    pub fn params(&self) -> [ParamId; 4] {
        [self.a, self.e, self.b, self.alpha]
    }
}

/// Summary of the branches attached to a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterSet {
    pub rank: usize,
    pub seed: u64,
    pub branches: BTreeMap<ModuleId, LoraBranch>,
}

impl AdapterSet {
    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ModuleId> {
        self.branches.keys()
    }
}

/// Number of trainable scalars in one branch: `A`, `e`, `B` and `α`.
pub fn branch_param_count(d_in: usize, d_out: usize, rank: usize) -> usize {
    d_in * rank + rank + rank * d_out + 1
}

/// Attaches a fresh branch to each target and freezes the targets' base
/// weight and bias. Targets are initialised in canonical order from `seed`.
pub fn attach_lora(model: &mut Model, targets: &[ModuleId], rank: usize, seed: u64) -> Result<AdapterSet> {
    if rank == 0 {
        return Err(Error::InvalidConfig {
            field: "rank",
            reason: "must be at least 1".into(),
        });
    }
    let mut sorted: Vec<ModuleId> = targets.to_vec();
    sorted.sort();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(Error::DuplicateBranch(w[0]));
        }
    }
    for &id in &sorted {
        if model.module(id)?.branch.is_some() {
            return Err(Error::DuplicateBranch(id));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &id in &sorted {
        let (d_in, d_out) = {
            let m = model.module(id)?;
            (m.d_in, m.d_out)
        };
        let a = Tensor::randn(vec![d_in, rank], FACTOR_INIT_STD, &mut rng);
        let b = Tensor::randn(vec![rank, d_out], FACTOR_INIT_STD, &mut rng);
        let store = &mut model.store;
        let branch = LoraBranch {
            a: store.insert(param_name(id, "lora.a"), a.with_requires_grad(true)),
            e: store.insert(
                param_name(id, "lora.e"),
                Tensor::zeros(vec![rank]).with_requires_grad(true),
            ),
            b: store.insert(param_name(id, "lora.b"), b.with_requires_grad(true)),
            alpha: store.insert(
                param_name(id, "lora.alpha"),
                Tensor::scalar(1.0).with_requires_grad(true),
            ),
            enabled: true,
            rank,
        };
        model.set_module_trainable(id, false)?;
        model.module_mut(id)?.branch = Some(branch);
    }
    model.adapter_meta = Some((rank, seed));
    Ok(adapters(model))
}

/// Current branches of `model`.
pub fn adapters(model: &Model) -> AdapterSet {
    let (rank, seed) = model.adapter_meta.unwrap_or((0, 0));
    AdapterSet {
        rank,
        seed,
        branches: model
            .modules()
            .filter_map(|m| m.branch.clone().map(|b| (m.id, b)))
            .collect(),
    }
}

/// Sets `z = 0` for exactly the listed modules and `z = 1` elsewhere.
pub fn set_masks(model: &mut Model, disabled: &BTreeSet<ModuleId>) -> Result<()> {
    for &id in disabled {
        if model.module(id)?.branch.is_none() {
            return Err(Error::NoBranch(id));
        }
    }
    for m in model.modules_mut() {
        if let Some(b) = m.branch.as_mut() {
            b.enabled = !disabled.contains(&m.id);
        }
    }
    Ok(())
}

/// Enables every branch.
pub fn clear_masks(model: &mut Model) {
    for m in model.modules_mut() {
        if let Some(b) = m.branch.as_mut() {
            b.enabled = true;
        }
    }
}

/// Parameters of every attached branch, in canonical module order.
pub fn branch_params(model: &Model) -> Vec<ParamId> {
    model
        .modules()
        .filter_map(|m| m.branch.as_ref())
        .flat_map(LoraBranch::params)
        .collect()
}

/// Folds a branch into its base weight, `W ← W + α·A·diag(e)·B`, and
/// removes the branch parameters.
pub fn merge_branch(model: &mut Model, id: ModuleId) -> Result<()> {
    let (branch, weight, d_in, d_out) = {
        let m = model.module(id)?;
        let b = m.branch.clone().ok_or(Error::NoBranch(id))?;
        (b, m.weight, m.d_in, m.d_out)
    };
    if !branch.enabled {
        return Err(Error::InvalidArgument(format!(
            "cannot merge masked branch of {id}"
        )));
    }
    let r = branch.rank;
    let a = model.store.get(branch.a).data().to_vec();
    let e = model.store.get(branch.e).data().to_vec();
    let b = model.store.get(branch.b).data().to_vec();
    let alpha = model.store.get(branch.alpha).item();
    let w = model.store.get_mut(weight).data_mut();
    for i in 0..d_in {
        for k in 0..r {
            let coef = alpha * a[i * r + k] * e[k];
            if coef == 0.0 {
                continue;
            }
            for j in 0..d_out {
                w[i * d_out + j] += coef * b[k * d_out + j];
            }
        }
    }
    for p in branch.params() {
        model.store.remove(p);
    }
    model.module_mut(id)?.branch = None;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinearModule, ModelConfig, ModuleKind};
    use crate::tape::Tape;
    use crate::tensor::ParamStore;

    fn small_model() -> Model {
        Model::new(ModelConfig {
            num_layers: 2,
            d_model: 32,
            num_heads: 4,
            d_ff: 64,
            vocab_size: 17,
            max_seq_len: 16,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn attach_is_function_preserving() {
        let mut m = small_model();
        let tokens = [1, 4, 7, 9, 3];
        let before = m.logits(&tokens).unwrap();
        let universe = m.universe();
        let set = attach_lora(&mut m, &universe, 16, 11).unwrap();
        assert_eq!(set.len(), 14);
        assert_eq!(m.logits(&tokens).unwrap(), before);
        for id in universe {
            assert!(!m.is_module_trainable(id).unwrap());
        }
    }

    #[test]
    fn attach_errors() {
        let mut m = small_model();
        let q = ModuleId::new(1, ModuleKind::Query);
        assert!(matches!(
            attach_lora(&mut m, &[ModuleId::new(3, ModuleKind::Query)], 4, 0),
            Err(Error::UnknownModule(_))
        ));
        assert!(matches!(
            attach_lora(&mut m, &[q, q], 4, 0),
            Err(Error::DuplicateBranch(_))
        ));
        attach_lora(&mut m, &[q], 4, 0).unwrap();
        assert!(matches!(
            attach_lora(&mut m, &[q], 4, 0),
            Err(Error::DuplicateBranch(_))
        ));
        assert!(attach_lora(&mut m, &[ModuleId::new(1, ModuleKind::Key)], 0, 0).is_err());
    }

    #[test]
    fn branch_count_for_square_module() {
        let mut m = small_model();
        let q = ModuleId::new(1, ModuleKind::Query);
        let set = attach_lora(&mut m, &[q], 16, 0).unwrap();
        let b = &set.branches[&q];
        let enumerated: usize = b.params().iter().map(|&p| m.store.get(p).numel()).sum();
        assert_eq!(enumerated, 1041);
        assert_eq!(branch_param_count(32, 32, 16), 1041);
    }

    /// Standalone module from explicit tensors.
    fn module(store: &mut ParamStore, w: Tensor, bias: Tensor, branch: Option<(Tensor, Tensor, Tensor, f64)>) -> LinearModule {
        let (d_in, d_out) = w.dims2().unwrap();
        let id = ModuleId::new(1, ModuleKind::Query);
        let weight = store.insert("w", w);
        let bias = store.insert("b", bias);
        let branch = branch.map(|(a, e, b, alpha)| LoraBranch {
            rank: e.numel(),
            a: store.insert("a", a),
            e: store.insert("e", e),
            b: store.insert("bb", b),
            alpha: store.insert("alpha", Tensor::scalar(alpha)),
            enabled: true,
        });
        LinearModule { id, weight, bias, d_in, d_out, branch }
    }

    fn run(module: &LinearModule, store: &ParamStore, x: Tensor) -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = module.forward(&mut tape, store, xv).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn hand_evaluated_rank_one_branch() {
        let mut store = ParamStore::new();
        let mut m = module(
            &mut store,
            Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::vector(vec![0.0, 0.0]),
            Some((
                Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap(),
                Tensor::vector(vec![2.0]),
                Tensor::matrix(1, 2, vec![0.0, 3.0]).unwrap(),
                1.0,
            )),
        );
        let x = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(run(&m, &store, x.clone()), vec![1.0, 6.0]);
        m.branch.as_mut().unwrap().enabled = false;
        assert_eq!(run(&m, &store, x.clone()), vec![1.0, 0.0]);
        m.branch.as_mut().unwrap().enabled = true;
        *store.get_mut(m.branch.as_ref().unwrap().alpha) = Tensor::scalar(0.0);
        assert_eq!(run(&m, &store, x), vec![1.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = ParamStore::new();
        let m = module(&mut store, Tensor::zeros(vec![3, 2]), Tensor::zeros(vec![2]), None);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2]));
        assert!(matches!(m.forward(&mut tape, &store, x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn masks() {
        let mut m = small_model();
        let tokens = [1, 4, 7, 9, 3];
        let base = m.logits(&tokens).unwrap();
        let universe = m.universe();
        attach_lora(&mut m, &universe, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for b in adapters(&m).branches.values() {
            *m.store.get_mut(b.e) = Tensor::randn(vec![4], 1.0, &mut rng);
        }
        assert_ne!(m.logits(&tokens).unwrap(), base);

        let all: BTreeSet<_> = universe.iter().copied().collect();
        set_masks(&mut m, &all).unwrap();
        let off = m.logits(&tokens).unwrap();
        for (a, b) in off.data().iter().zip(base.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let some: BTreeSet<_> = universe.iter().copied().step_by(3).collect();
        set_masks(&mut m, &some).unwrap();
        let once = adapters(&m);
        set_masks(&mut m, &some).unwrap();
        assert_eq!(adapters(&m), once);

        set_masks(&mut m, &BTreeSet::new()).unwrap();
        assert!(adapters(&m).branches.values().all(|b| b.enabled));
    }

    #[test]
    fn set_masks_requires_branch() {
        let mut m = small_model();
        let q = ModuleId::new(1, ModuleKind::Query);
        let k = ModuleId::new(1, ModuleKind::Key);
        attach_lora(&mut m, &[q], 2, 0).unwrap();
        assert!(matches!(
            set_masks(&mut m, &[k].into_iter().collect()),
            Err(Error::NoBranch(_))
        ));
    }

    #[test]
    fn merge_matches_unmerged_forward() {
        use rand::Rng;
        let mut model = Model::new(ModelConfig {
            num_layers: 1,
            d_model: 4,
            num_heads: 1,
            d_ff: 4,
            vocab_size: 17,
            max_seq_len: 8,
            seed: 1,
        })
        .unwrap();
        let id = ModuleId::new(1, ModuleKind::Query);
        attach_lora(&mut model, &[id], 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let br = model.module(id).unwrap().branch.clone().unwrap();
        *model.store.get_mut(br.a) = Tensor::randn(vec![4, 2], 1.0, &mut rng);
        *model.store.get_mut(br.e) = Tensor::randn(vec![2], 1.0, &mut rng);
        *model.store.get_mut(br.b) = Tensor::randn(vec![2, 4], 1.0, &mut rng);
        *model.store.get_mut(br.alpha) = Tensor::scalar(rng.random_range(-2.0..2.0));

        let xs: Vec<Tensor> = (0..100).map(|_| Tensor::randn(vec![1, 4], 1.0, &mut rng)).collect();
        let unmerged = model.module(id).unwrap().clone();
        let adapted: Vec<Vec<f64>> = xs.iter().map(|x| run(&unmerged, &model.store, x.clone())).collect();
        merge_branch(&mut model, id).unwrap();
        let merged = model.module(id).unwrap().clone();
        assert!(merged.branch.is_none());
        let mut worst = 0.0f64;
        for (x, want) in xs.iter().zip(&adapted) {
            for (g, w) in run(&merged, &model.store, x.clone()).iter().zip(want) {
                worst = worst.max((g - w).abs());
            }
        }
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn merge_branch_in_model() {
        let mut m = small_model();
        let q = ModuleId::new(2, ModuleKind::Value);
        attach_lora(&mut m, &[q], 2, 9).unwrap();
        let w_before = m.store.get(m.module(q).unwrap().weight).clone();

        // e = 0: merged weight is bitwise unchanged.
        let mut zero = m.clone();
        merge_branch(&mut zero, q).unwrap();
        assert_eq!(zero.store.get(zero.module(q).unwrap().weight), &w_before);

        let e = m.module(q).unwrap().branch.as_ref().unwrap().e;
        *m.store.get_mut(e) = Tensor::vector(vec![0.7, -1.3]).with_requires_grad(true);
        let tokens = [1, 8, 3, 12, 2, 5];
        let adapted = m.logits(&tokens).unwrap();
        let params_before = m.store.len();
        merge_branch(&mut m, q).unwrap();
        assert_eq!(m.store.len(), params_before - 4);
        let merged = m.logits(&tokens).unwrap();
        for (a, b) in merged.data().iter().zip(adapted.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(merge_branch(&mut m, q), Err(Error::NoBranch(_))));
    }
}
