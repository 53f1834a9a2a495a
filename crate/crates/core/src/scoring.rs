//! Module sensitivity scoring.
//!
//! Per validation batch the candidate set is split into two complementary
//! random buckets. The batch loss is backpropagated twice, once with each
//! bucket's branches masked off, accumulating into the `e` gradients. Since
//! every module is active in exactly one of the two passes, its accumulated
//! `e` gradient comes from a single co-active context. The batch sample is
//! `‖e ⊙ g‖₁ / r`; samples are aggregated per module into `μ` and a
//! population `σ`, then combined into a score by a [`ScoreVariant`].
//!
//! Baselines: `|α|` ([`alpha_importance`]) and the leave-one-out loss change
//! ([`perturbation_scores`]).

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{clear_masks, set_masks};
use crate::model::{Model, ModuleId};
use crate::tape::Tape;
use crate::tasks::Batch;

/// Two disjoint, exhaustive buckets. Each module independently lands in
/// bucket A with probability 1/2, drawn from ChaCha stream `t` of `seed`.
pub fn random_partition(universe: &[ModuleId], seed: u64, t: u64) -> Result<(Vec<ModuleId>, Vec<ModuleId>)> {
    if universe.is_empty() {
        return Err(Error::EmptyInput("partition universe"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for &id in universe {
        if rng.random_bool(0.5) {
            a.push(id);
        } else {
            b.push(id);
        }
    }
    Ok((a, b))
}

fn require_full_coverage(model: &Model) -> Result<()> {
    for m in model.modules() {
        if m.branch.is_none() {
            return Err(Error::NoBranch(m.id));
        }
    }
    Ok(())
}

/// Supervised loss with the listed branches masked off; gradients are
/// accumulated (not overwritten) into the parameter store. All masks are
/// re-enabled afterwards, including on error.
pub fn masked_pass(model: &mut Model, batch: &Batch, disabled: &BTreeSet<ModuleId>) -> Result<f64> {
    require_full_coverage(model)?;
    set_masks(model, disabled)?;
    let result = (|| {
        let mut tape = Tape::new();
        let loss = model.supervised_loss(&mut tape, batch)?;
        let grads = tape.backward(loss)?;
        grads.accumulate_into(&mut model.store);
        Ok(tape.value(loss).item())
    })();
    clear_masks(model);
    result
}

/// `‖e ⊙ g‖₁ / r`.
pub fn batch_sensitivity(e: &[f64], g: &[f64], rank: usize) -> Result<f64> {
    if e.len() != rank {
        return Err(Error::LengthMismatch {
            what: "coefficient vector",
            expected: rank,
            got: e.len(),
        });
    }
    if g.len() != rank {
        return Err(Error::LengthMismatch {
            what: "coefficient gradient",
            expected: rank,
            got: g.len(),
        });
    }
    Ok(e.iter().zip(g).map(|(a, b)| (a * b).abs()).sum::<f64>() / rank as f64)
}

/// Per-batch sensitivity samples of one module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub module: ModuleId,
    pub samples: Vec<f64>,
}

/// Runs the two-pass complementary masking over every batch, using
/// partition stream `t` for batch `t`.
pub fn collect_sensitivities(model: &mut Model, batches: &[Batch], partition_seed: u64) -> Result<Vec<SensitivityRecord>> {
    require_full_coverage(model)?;
    let universe = model.universe();
    let mut records: Vec<SensitivityRecord> = universe
        .iter()
        .map(|&module| SensitivityRecord {
            module,
            samples: Vec::with_capacity(batches.len()),
        })
        .collect();

    for (t, batch) in batches.iter().enumerate() {
        let (bucket_a, bucket_b) = random_partition(&universe, partition_seed, t as u64)?;
        model.store.zero_grad();
        masked_pass(model, batch, &bucket_a.into_iter().collect())?;
        masked_pass(model, batch, &bucket_b.into_iter().collect())?;
        for rec in records.iter_mut() {
            let branch = model.module(rec.module)?.branch.as_ref().ok_or(Error::NoBranch(rec.module))?;
            let e = model.store.get(branch.e);
            let zeros = vec![0.0; branch.rank];
            let g = e.grad.as_deref().unwrap_or(&zeros);
            rec.samples.push(batch_sensitivity(e.data(), g, branch.rank)?);
        }
    }
    model.store.zero_grad();
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreVariant {
    /// `μ·σ`
    #[default]
    Product,
    /// `μ/σ`
    Ratio,
    /// `σ/μ`
    InverseRatio,
    /// `μ + σ/2`
    Additive,
}

impl ScoreVariant {
    pub const ALL: [ScoreVariant; 4] = [
        ScoreVariant::Product,
        ScoreVariant::Ratio,
        ScoreVariant::InverseRatio,
        ScoreVariant::Additive,
    ];

    /// Score and whether it hit the ratio degeneracy (`μ = 0` or `σ = 0`).
    pub fn apply(self, mu: f64, sigma: f64) -> (f64, bool) {
        match self {
            ScoreVariant::Product => (mu * sigma, false),
            ScoreVariant::Additive => (mu + 0.5 * sigma, false),
            ScoreVariant::Ratio | ScoreVariant::InverseRatio if mu == 0.0 || sigma == 0.0 => {
                (f64::INFINITY, true)
            }
            ScoreVariant::Ratio => (mu / sigma, false),
            ScoreVariant::InverseRatio => (sigma / mu, false),
        }
    }
}

impl std::str::FromStr for ScoreVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "product" => Ok(Self::Product),
            "ratio" => Ok(Self::Ratio),
            "inverse-ratio" => Ok(Self::InverseRatio),
            "additive" => Ok(Self::Additive),
            _ => Err(format!(
                "unknown score variant `{s}` (expected product, ratio, inverse-ratio or additive)"
            )),
        }
    }
}

/// Mean and population standard deviation.
pub fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mu = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Serialises non-finite scores as strings so reports stay valid JSON.
pub(crate) mod float_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad score `{s}`"))),
        }
    }
}

pub const FLAG_DEGENERATE_RATIO: &str = "degenerate-ratio";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    #[serde(flatten)]
    pub module: ModuleId,
    #[serde(rename = "T")]
    pub t: usize,
    pub samples: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
    #[serde(with = "float_or_inf")]
    pub score: f64,
    pub variant: ScoreVariant,
    /// 1 is the lowest score.
    pub rank: usize,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridScoreReport {
    pub variant: ScoreVariant,
    #[serde(rename = "T")]
    pub t: usize,
    pub partition_seed: u64,
    pub entries: Vec<ScoreEntry>,
}

/// Assigns ascending ranks (1-based) with ties broken by canonical module
/// order.
pub fn ascending_ranks(scores: &[(ModuleId, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        scores[i]
            .1
            .total_cmp(&scores[j].1)
            .then(scores[i].0.cmp(&scores[j].0))
    });
    let mut ranks = vec![0; scores.len()];
    for (r, i) in order.into_iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

/// Aggregates sensitivity lists into per-module scores.
pub fn hybrid_score(records: &[SensitivityRecord], variant: ScoreVariant, partition_seed: u64) -> Result<HybridScoreReport> {
    let first = records.first().ok_or(Error::EmptyInput("sensitivity records"))?;
    let t = first.samples.len();
    if t < 2 {
        return Err(Error::InvalidArgument(format!(
            "at least 2 samples per module are needed for a spread estimate, got {t}"
        )));
    }
    for r in records {
        if r.samples.len() != t {
            return Err(Error::LengthMismatch {
                what: "sensitivity samples",
                expected: t,
                got: r.samples.len(),
            });
        }
    }
    let mut entries: Vec<ScoreEntry> = records
        .iter()
        .map(|r| {
            let (mu, sigma) = mean_std(&r.samples);
            let (score, degenerate) = variant.apply(mu, sigma);
            ScoreEntry {
                module: r.module,
                t,
                samples: r.samples.clone(),
                mu,
                sigma,
                score,
                variant,
                rank: 0,
                flags: if degenerate {
                    vec![FLAG_DEGENERATE_RATIO.to_string()]
                } else {
                    Vec::new()
                },
            }
        })
        .collect();
    let ranks = ascending_ranks(&entries.iter().map(|e| (e.module, e.score)).collect::<Vec<_>>());
    for (e, r) in entries.iter_mut().zip(ranks) {
        e.rank = r;
    }
    Ok(HybridScoreReport {
        variant,
        t,
        partition_seed,
        entries,
    })
}

impl HybridScoreReport {
    pub fn scores(&self) -> Vec<(ModuleId, f64)> {
        self.entries.iter().map(|e| (e.module, e.score)).collect()
    }

    pub fn modules(&self) -> Vec<ModuleId> {
        self.entries.iter().map(|e| e.module).collect()
    }

    /// Checks that μ, σ and the score are reproducible from the stored
    /// samples to 1e-12 relative and that ranks form a permutation.
    pub fn verify(&self) -> std::result::Result<(), String> {
        let close = |a: f64, b: f64| {
            (a.is_infinite() && a == b) || (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300)
        };
        for e in &self.entries {
            let (mu, sigma) = mean_std(&e.samples);
            let (score, _) = self.variant.apply(mu, sigma);
            if !close(mu, e.mu) || !close(sigma, e.sigma) || !close(score, e.score) {
                return Err(format!(
                    "module {}: stored (mu {}, sigma {}, score {}) but samples give ({mu}, {sigma}, {score})",
                    e.module, e.mu, e.sigma, e.score
                ));
            }
            if e.samples.iter().any(|s| *s < 0.0) {
                return Err(format!("module {}: negative sensitivity sample", e.module));
            }
        }
        let mut ranks: Vec<usize> = self.entries.iter().map(|e| e.rank).collect();
        ranks.sort_unstable();
        if ranks != (1..=self.entries.len()).collect::<Vec<_>>() {
            return Err("ranks are not a permutation of 1..n".into());
        }
        Ok(())
    }
}

/// `|α|` per branch, in canonical order.
pub fn alpha_importance(model: &Model) -> Vec<(ModuleId, f64)> {
    model
        .modules()
        .filter_map(|m| {
            m.branch
                .as_ref()
                .map(|b| (m.id, model.store.get(b.alpha).item().abs()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaEntry {
    #[serde(flatten)]
    pub module: ModuleId,
    pub alpha: f64,
    pub score: f64,
    pub rank: usize,
}

/// `|α|` baseline in report form.
pub fn alpha_report(model: &Model) -> Vec<AlphaEntry> {
    let scores = alpha_importance(model);
    let ranks = ascending_ranks(&scores);
    scores
        .into_iter()
        .zip(ranks)
        .map(|((module, score), rank)| {
            let b = model.module(module).ok().and_then(|m| m.branch.as_ref());
            AlphaEntry {
                module,
                alpha: b.map(|b| model.store.get(b.alpha).item()).unwrap_or(0.0),
                score,
                rank,
            }
        })
        .collect()
}

/// Mean loss over `batches` in order.
pub fn validation_loss(model: &Model, batches: &[Batch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    let mut total = 0.0;
    for b in batches {
        total += model.eval_loss(b)?;
    }
    Ok(total / batches.len() as f64)
}

/// Validation loss with only `module`'s branch masked, minus the loss with
/// every branch on.
pub fn perturbation_score(model: &mut Model, batches: &[Batch], module: ModuleId) -> Result<f64> {
    if model.module(module)?.branch.is_none() {
        return Err(Error::NoBranch(module));
    }
    clear_masks(model);
    let full = validation_loss(model, batches)?;
    let removed = loss_without(model, batches, module)?;
    Ok(removed - full)
}

fn loss_without(model: &mut Model, batches: &[Batch], module: ModuleId) -> Result<f64> {
    set_masks(model, &BTreeSet::from([module]))?;
    let r = validation_loss(model, batches);
    clear_masks(model);
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    #[serde(flatten)]
    pub module: ModuleId,
    pub perturbation: f64,
    /// 1 is the largest loss increase.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub base_loss: f64,
    /// Full validation-set evaluations performed: `1 + |U|`.
    pub evaluations: usize,
    pub entries: Vec<OracleEntry>,
}

/// Leave-one-branch-out scores for every branched module.
pub fn perturbation_scores(model: &mut Model, batches: &[Batch]) -> Result<OracleReport> {
    clear_masks(model);
    let base_loss = validation_loss(model, batches)?;
    let mut evaluations = 1;
    let mut scored = Vec::new();
    for id in model.universe() {
        if model.module(id)?.branch.is_none() {
            continue;
        }
        let p = loss_without(model, batches, id)? - base_loss;
        evaluations += 1;
        scored.push((id, p));
    }
    let neg: Vec<(ModuleId, f64)> = scored.iter().map(|&(m, p)| (m, -p)).collect();
    let ranks = ascending_ranks(&neg);
    Ok(OracleReport {
        base_loss,
        evaluations,
        entries: scored
            .into_iter()
            .zip(ranks)
            .map(|((module, perturbation), rank)| OracleEntry {
                module,
                perturbation,
                rank,
            })
            .collect(),
    })
}

/// Ranks with ties sharing their average position (1-based).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation with average ranks for ties. `None` when either
/// side is constant or the lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModuleKind;

    fn universe(layers: usize) -> Vec<ModuleId> {
        (1..=layers)
            .flat_map(|l| ModuleKind::ALL.map(|k| ModuleId::new(l, k)))
            .collect()
    }

    #[test]
    fn partition_is_disjoint_exhaustive_and_deterministic() {
        let u = universe(2);
        for seed in 0..1000 {
            let (a, b) = random_partition(&u, seed, 3).unwrap();
            let sa: BTreeSet<_> = a.iter().collect();
            let sb: BTreeSet<_> = b.iter().collect();
            assert!(sa.is_disjoint(&sb));
            assert_eq!(sa.len() + sb.len(), u.len());
            assert_eq!(random_partition(&u, seed, 3).unwrap(), (a, b));
        }
        assert!(random_partition(&[], 0, 0).is_err());
    }

    #[test]
    fn partition_frequency_is_half() {
        let u = universe(2);
        let mut counts = vec![0usize; u.len()];
        let draws = 10_000;
        for t in 0..draws {
            let (a, _) = random_partition(&u, 12345, t).unwrap();
            for id in a {
                counts[u.iter().position(|&x| x == id).unwrap()] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((0.47..=0.53).contains(&f), "{f}");
        }
    }

    #[test]
    fn sensitivity_fixtures() {
        assert!((batch_sensitivity(&[1.0, 2.0], &[0.5, -0.5], 2).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(batch_sensitivity(&[0.0, 0.0], &[3.0, -1.0], 2).unwrap(), 0.0);
        assert_eq!(batch_sensitivity(&[3.0, -1.0], &[0.0, 0.0], 2).unwrap(), 0.0);
        assert!(batch_sensitivity(&[1.0], &[1.0, 2.0], 2).is_err());
        // scaling e by c scales the sample by c under fixed g
        let base = batch_sensitivity(&[0.3, -0.2, 1.1], &[0.4, 0.9, -0.1], 3).unwrap();
        let scaled = batch_sensitivity(&[0.75, -0.5, 2.75], &[0.4, 0.9, -0.1], 3).unwrap();
        assert!((scaled - 2.5 * base).abs() < 1e-15);
    }

    fn rec(layer: usize, samples: &[f64]) -> SensitivityRecord {
        SensitivityRecord {
            module: ModuleId::new(layer, ModuleKind::Query),
            samples: samples.to_vec(),
        }
    }

    #[test]
    fn aggregation_fixtures() {
        let r = [rec(1, &[0.2, 0.4])];
        let get = |v| hybrid_score(&r, v, 0).unwrap().entries[0].clone();
        let p = get(ScoreVariant::Product);
        assert!((p.mu - 0.3).abs() < 1e-12);
        assert!((p.sigma - 0.1).abs() < 1e-12);
        assert!((p.score - 0.03).abs() < 1e-12);
        assert!((get(ScoreVariant::Ratio).score - 3.0).abs() < 1e-12);
        assert!((get(ScoreVariant::InverseRatio).score - 1.0 / 3.0).abs() < 1e-12);
        assert!((get(ScoreVariant::Additive).score - 0.35).abs() < 1e-12);

        let c = [rec(1, &[0.25, 0.25, 0.25])];
        let e = &hybrid_score(&c, ScoreVariant::Product, 0).unwrap().entries[0];
        assert_eq!(e.sigma, 0.0);
        assert_eq!(e.score, 0.0);
        let e = &hybrid_score(&c, ScoreVariant::Ratio, 0).unwrap().entries[0];
        assert_eq!(e.score, f64::INFINITY);
        assert_eq!(e.flags, vec![FLAG_DEGENERATE_RATIO]);
    }

    #[test]
    fn aggregation_errors() {
        assert!(hybrid_score(&[rec(1, &[0.2])], ScoreVariant::Product, 0).is_err());
        assert!(hybrid_score(&[rec(1, &[0.2, 0.1]), rec(2, &[0.2])], ScoreVariant::Product, 0).is_err());
        assert!(hybrid_score(&[], ScoreVariant::Product, 0).is_err());
    }

    #[test]
    fn ties_rank_by_layer() {
        let recs = [rec(2, &[0.1, 0.3]), rec(1, &[0.1, 0.3]), rec(3, &[0.0, 0.1])];
        let r = hybrid_score(&recs, ScoreVariant::Product, 0).unwrap();
        let ranks: Vec<_> = r.entries.iter().map(|e| e.rank).collect();
        assert_eq!(ranks, vec![3, 2, 1]);
        r.verify().unwrap();
    }

    #[test]
    fn infinite_scores_round_trip_through_json() {
        let r = hybrid_score(&[rec(1, &[0.0, 0.0]), rec(2, &[0.1, 0.2])], ScoreVariant::Ratio, 9).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"inf\""));
        let back: HybridScoreReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
        back.verify().unwrap();
    }

    #[test]
    fn spearman_with_ties() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        let a = [0.0, 0.0, 0.0, 5.0];
        let b = [0.0, 0.0, 0.0, 0.7];
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[0.0, 2.0]), None);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }
}
