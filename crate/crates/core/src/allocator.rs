//! Budgeted split of the candidate modules into full fine-tuning and LoRA.
//!
//! Both directions walk a single total order (score ascending, ties by
//! canonical module order) and keep the longest prefix whose parameter share
//! stays within `R_fft`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModuleId, ModuleKind};
use crate::scoring::HybridScoreReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Grow the FFT set from empty, lowest scores first.
    #[default]
    AscendingFromLora,
    /// Start all-FFT and move the highest scores to LoRA until within budget.
    DescendingFromFft,
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ascending-from-lora" | "ascending" => Ok(Self::AscendingFromLora),
            "descending-from-fft" | "descending" => Ok(Self::DescendingFromFft),
            _ => Err(format!(
                "unknown direction `{s}` (expected ascending-from-lora or descending-from-fft)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub fft_set: Vec<ModuleId>,
    pub lora_set: Vec<ModuleId>,
    pub budget_ratio: f64,
    pub used_ratio: f64,
    pub total_params: usize,
    pub direction: Direction,
    pub source_digest: String,
}

/// SHA-256 of the report's JSON serialisation.
pub fn report_digest(report: &HybridScoreReport) -> String {
    let bytes = serde_json::to_vec(report).expect("report serialises");
    hex::encode(Sha256::digest(&bytes))
}

fn check_inputs(scores: &[(ModuleId, f64)], params: &[(ModuleId, usize)], r_fft: f64) -> Result<()> {
    if !(r_fft > 0.0 && r_fft < 1.0) {
        return Err(Error::InvalidConfig {
            field: "r_fft",
            reason: format!("must lie in (0, 1), got {r_fft}"),
        });
    }
    let score_ids: BTreeSet<ModuleId> = scores.iter().map(|s| s.0).collect();
    let param_ids: BTreeSet<ModuleId> = params.iter().map(|p| p.0).collect();
    if score_ids.len() != scores.len() || param_ids.len() != params.len() || score_ids != param_ids {
        return Err(Error::InvalidArgument(format!(
            "score report covers {} modules but the universe has {}; the module sets must match exactly",
            scores.len(),
            params.len()
        )));
    }
    if let Some((id, _)) = params.iter().find(|p| p.1 == 0) {
        return Err(Error::InvalidArgument(format!("module {id} has no parameters")));
    }
    Ok(())
}

fn ascending_order(scores: &[(ModuleId, f64)]) -> Vec<ModuleId> {
    let mut order = scores.to_vec();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    order.into_iter().map(|s| s.0).collect()
}

fn build_plan(
    order: &[ModuleId],
    fft_len: usize,
    params: &[(ModuleId, usize)],
    r_fft: f64,
    direction: Direction,
    source_digest: String,
) -> AllocationPlan {
    let total: usize = params.iter().map(|p| p.1).sum();
    let mut fft_set = order[..fft_len].to_vec();
    let mut lora_set = order[fft_len..].to_vec();
    fft_set.sort();
    lora_set.sort();
    let used: usize = params
        .iter()
        .filter(|p| fft_set.contains(&p.0))
        .map(|p| p.1)
        .sum();
    AllocationPlan {
        fft_set,
        lora_set,
        budget_ratio: r_fft,
        used_ratio: used as f64 / total as f64,
        total_params: total,
        direction,
        source_digest,
    }
}

fn fits(used: usize, total: usize, r_fft: f64) -> bool {
    used as f64 / total as f64 <= r_fft
}

/// Adds the lowest-scored modules to the FFT set until the next one would
/// exceed the budget.
pub fn allocate_scores(
    scores: &[(ModuleId, f64)],
    params: &[(ModuleId, usize)],
    r_fft: f64,
    source_digest: String,
) -> Result<AllocationPlan> {
    check_inputs(scores, params, r_fft)?;
    let order = ascending_order(scores);
    let size = |id: &ModuleId| params.iter().find(|p| p.0 == *id).map(|p| p.1).unwrap_or(0);
    let total: usize = params.iter().map(|p| p.1).sum();
    let mut used = 0;
    let mut k = 0;
    for id in &order {
        if !fits(used + size(id), total, r_fft) {
            break;
        }
        used += size(id);
        k += 1;
    }
    Ok(build_plan(&order, k, params, r_fft, Direction::AscendingFromLora, source_digest))
}

/// Starts with every module in the FFT set and moves the highest-scored
/// ones to LoRA until the remainder fits the budget.
pub fn allocate_scores_from_full(
    scores: &[(ModuleId, f64)],
    params: &[(ModuleId, usize)],
    r_fft: f64,
    source_digest: String,
) -> Result<AllocationPlan> {
    check_inputs(scores, params, r_fft)?;
    let order = ascending_order(scores);
    let size = |id: &ModuleId| params.iter().find(|p| p.0 == *id).map(|p| p.1).unwrap_or(0);
    let total: usize = params.iter().map(|p| p.1).sum();
    let mut used = total;
    let mut k = order.len();
    while k > 0 && !fits(used, total, r_fft) {
        k -= 1;
        used -= size(&order[k]);
    }
    Ok(build_plan(&order, k, params, r_fft, Direction::DescendingFromFft, source_digest))
}

pub fn allocate(report: &HybridScoreReport, params: &[(ModuleId, usize)], r_fft: f64) -> Result<AllocationPlan> {
    allocate_scores(&report.scores(), params, r_fft, report_digest(report))
}

pub fn allocate_from_full(report: &HybridScoreReport, params: &[(ModuleId, usize)], r_fft: f64) -> Result<AllocationPlan> {
    allocate_scores_from_full(&report.scores(), params, r_fft, report_digest(report))
}

/// First violated plan constraint.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanViolation {
    #[error("partition not disjoint: {0} is in both sets")]
    NotDisjoint(ModuleId),
    #[error("partition not exhaustive: {0} is in neither set")]
    NotExhaustive(ModuleId),
    #[error("partition contains {0}, which is not a candidate module")]
    UnknownModule(ModuleId),
    #[error("partition lists {0} more than once")]
    Duplicate(ModuleId),
    #[error("budget constraint violated: FFT parameter ratio {used} exceeds budget {budget}")]
    OverBudget { used: f64, budget: f64 },
    #[error("recorded used_ratio {recorded} differs from recomputed {actual}")]
    UsedRatioMismatch { recorded: f64, actual: f64 },
}

/// Checks disjointness, exhaustiveness and the budget, in that order.
pub fn validate_plan(plan: &AllocationPlan, universe: &[(ModuleId, usize)]) -> std::result::Result<(), PlanViolation> {
    let fft: BTreeSet<ModuleId> = plan.fft_set.iter().copied().collect();
    let lora: BTreeSet<ModuleId> = plan.lora_set.iter().copied().collect();
    if let Some(&id) = fft.intersection(&lora).next() {
        return Err(PlanViolation::NotDisjoint(id));
    }
    for set in [&plan.fft_set, &plan.lora_set] {
        let mut seen = BTreeSet::new();
        for id in set {
            if !seen.insert(id) {
                return Err(PlanViolation::Duplicate(*id));
            }
        }
    }
    for (id, _) in universe {
        if !fft.contains(id) && !lora.contains(id) {
            return Err(PlanViolation::NotExhaustive(*id));
        }
    }
    for id in fft.iter().chain(&lora) {
        if !universe.iter().any(|u| u.0 == *id) {
            return Err(PlanViolation::UnknownModule(*id));
        }
    }
    let total: usize = universe.iter().map(|u| u.1).sum();
    let used: usize = universe.iter().filter(|u| fft.contains(&u.0)).map(|u| u.1).sum();
    let ratio = used as f64 / total as f64;
    if ratio > plan.budget_ratio {
        return Err(PlanViolation::OverBudget {
            used: ratio,
            budget: plan.budget_ratio,
        });
    }
    if (ratio - plan.used_ratio).abs() > 1e-12 {
        return Err(PlanViolation::UsedRatioMismatch {
            recorded: plan.used_ratio,
            actual: ratio,
        });
    }
    Ok(())
}

impl AllocationPlan {
    /// Layer × kind grid, `FFT` or `LoRA` per cell, with a header row.
    pub fn grid_csv(&self, num_layers: usize) -> String {
        let mut out = String::from("layer");
        for k in ModuleKind::ALL {
            out.push(',');
            out.push_str(k.name());
        }
        out.push('\n');
        for layer in 1..=num_layers {
            write!(out, "{layer}").unwrap();
            for kind in ModuleKind::ALL {
                let id = ModuleId::new(layer, kind);
                out.push_str(if self.fft_set.contains(&id) { ",FFT" } else { ",LoRA" });
            }
            out.push('\n');
        }
        out
    }
}
