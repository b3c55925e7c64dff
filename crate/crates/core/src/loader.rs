//! Budget resolution and incremental model loading.
//!
//! A byte budget maps to the longest affordable prefix of the universal
//! block order. Loading materializes the per-weight reconstructions for that
//! prefix; moving between budgets adds or subtracts only the blocks in the
//! symmetric difference, so a budget sweep touches each block once instead
//! of rebuilding the model per point.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::artifacts::ModelArtifacts;
use crate::avd::{reconstruct, WeightId};
use crate::linalg::DenseMatrix;
use crate::stack::{BlockRef, UniversalStack};

/// Errors produced while resolving or applying budget plans.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum PlanError {
    /// A plan was applied against artifacts or a model built from a
    /// different universal order.
    #[error("plan fingerprint {got:#018x} does not match expected {expected:#018x}")]
    PlanMismatch { expected: u64, got: u64 },
}

// ── Block sizes ─────────────────────────────────────────────────────────────

/// Storage bits for one block at the default half-precision factors:
/// one sign bit per matrix entry plus `16 * k * (rows + cols)` factor bits.
pub fn block_size_bits(rows: usize, cols: usize, k: usize) -> u64 {
    (rows * cols) as u64 + 16 * (k * (rows + cols)) as u64
}

/// Bytes expressed in binary mebibytes (2^20 bytes).
pub fn mib(bytes: u64) -> f64 {
    bytes as f64 / f64::from(1u32 << 20)
}

/// Mebibytes rounded to two decimals, half away from zero — the rounding the
/// documented size tables use (e.g. 29.125 renders as "29.13").
pub fn format_mib2(bytes: u64) -> String {
    format!("{:.2}", (mib(bytes) * 100.0).round() / 100.0)
}

// ── Budget plans ────────────────────────────────────────────────────────────

/// A resolved byte budget: which prefix to load and what it implies.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetPlan {
    /// The requested budget.
    pub budget_bytes: u64,
    /// Number of leading universal-order blocks the budget affords.
    pub prefix_len: usize,
    /// Loaded level of every weight covered by the order.
    pub per_weight_level: BTreeMap<WeightId, usize>,
    /// Bytes actually consumed by the prefix (each block rounded up to
    /// whole bytes).
    pub total_bytes: u64,
    /// True when at least one weight is left at level 0, i.e. the model
    /// cannot represent that weight at all.
    pub degenerate: bool,
    /// Digest of the universal order this plan indexes into.
    pub fingerprint: u64,
}

/// Longest-prefix resolution of a byte budget.
///
/// `block_bits` holds each block's storage bits, aligned with
/// `universal.order`; a block costs `ceil(bits / 8)` bytes. The returned
/// prefix is maximal: extending it by one more block would exceed the
/// budget.
pub fn resolve_budget(
    universal: &UniversalStack,
    block_bits: &[u64],
    budget_bytes: u64,
) -> BudgetPlan {
    assert_eq!(
        block_bits.len(),
        universal.order.len(),
        "one size per ordered block"
    );
    let mut total_bytes = 0u64;
    let mut prefix_len = 0usize;
    for &bits in block_bits {
        let bytes = bits.div_ceil(8);
        if total_bytes + bytes > budget_bytes {
            break;
        }
        total_bytes += bytes;
        prefix_len += 1;
    }

    let mut per_weight_level: BTreeMap<WeightId, usize> = universal
        .order
        .iter()
        .map(|r| (r.weight.clone(), 0))
        .collect();
    for r in &universal.order[..prefix_len] {
        *per_weight_level
            .get_mut(&r.weight)
            .expect("weight seeded above") += 1;
    }
    let degenerate = per_weight_level.values().any(|&level| level == 0);

    BudgetPlan {
        budget_bytes,
        prefix_len,
        per_weight_level,
        total_bytes,
        degenerate,
        fingerprint: universal.fingerprint(),
    }
}

/// Bytes a plan occupies once loaded.
pub fn total_memory(plan: &BudgetPlan) -> u64 {
    plan.total_bytes
}

// ── Loaded models ───────────────────────────────────────────────────────────

/// Blocks moved by one plan transition.
///
/// `loaded` lists blocks added in load order; `offloaded` lists blocks
/// removed in pop order (deepest-loaded first).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeltaReport {
    pub loaded: Vec<BlockRef>,
    pub offloaded: Vec<BlockRef>,
    pub bytes_loaded: u64,
    pub bytes_offloaded: u64,
}

/// Reconstructed (scaled) weights materialized for one budget plan.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedModel {
    weights: BTreeMap<WeightId, DenseMatrix>,
    plan: BudgetPlan,
}

impl LoadedModel {
    /// Current reconstruction of every weight. Callers that need an isolated
    /// snapshot across later [`apply_plan`] calls should clone the map.
    pub fn weights(&self) -> &BTreeMap<WeightId, DenseMatrix> {
        &self.weights
    }

    pub fn plan(&self) -> &BudgetPlan {
        &self.plan
    }

    pub fn level(&self, id: &WeightId) -> usize {
        self.plan.per_weight_level.get(id).copied().unwrap_or(0)
    }
}

fn check_fingerprint(expected: u64, got: u64) -> Result<(), PlanError> {
    if expected != got {
        return Err(PlanError::PlanMismatch { expected, got });
    }
    Ok(())
}

/// Materialize a plan from scratch.
///
/// Every weight is reconstructed at its planned level by summing restored
/// blocks in iteration order, so a freshly loaded model is the reference
/// against which incremental transitions are checked.
pub fn load_model(artifacts: &ModelArtifacts, plan: &BudgetPlan) -> Result<LoadedModel, PlanError> {
    let universal = artifacts
        .order
        .as_ref()
        .expect("loading requires sorted artifacts");
    check_fingerprint(plan.fingerprint, universal.fingerprint())?;

    let mut weights = BTreeMap::new();
    for stack in &artifacts.stacks {
        let level = plan
            .per_weight_level
            .get(&stack.weight)
            .copied()
            .unwrap_or(0);
        let matrix = reconstruct(stack, level).expect("plan levels lie within the stack");
        weights.insert(stack.weight.clone(), matrix);
    }
    Ok(LoadedModel {
        weights,
        plan: plan.clone(),
    })
}

/// Move a loaded model to a new plan by adding or removing only the blocks
/// in the prefix difference.
///
/// Growing appends restored blocks in load order; shrinking pops them in
/// reverse order. The returned report lists exactly what moved.
pub fn apply_plan(
    model: &mut LoadedModel,
    artifacts: &ModelArtifacts,
    target: &BudgetPlan,
) -> Result<DeltaReport, PlanError> {
    let universal = artifacts
        .order
        .as_ref()
        .expect("loading requires sorted artifacts");
    check_fingerprint(model.plan.fingerprint, universal.fingerprint())?;
    check_fingerprint(model.plan.fingerprint, target.fingerprint)?;

    let old_len = model.plan.prefix_len;
    let new_len = target.prefix_len;
    let mut report = DeltaReport::default();

    if new_len >= old_len {
        for r in &universal.order[old_len..new_len] {
            let block = artifacts.block(r).expect("order references resolve");
            let updated = model.weights[&r.weight]
                .add(&block.restore())
                .expect("uniform shape");
            model.weights.insert(r.weight.clone(), updated);
            report.loaded.push(r.clone());
            report.bytes_loaded += block.size_bits.div_ceil(8);
        }
    } else {
        for r in universal.order[new_len..old_len].iter().rev() {
            let block = artifacts.block(r).expect("order references resolve");
            let updated = model.weights[&r.weight]
                .sub(&block.restore())
                .expect("uniform shape");
            model.weights.insert(r.weight.clone(), updated);
            report.offloaded.push(r.clone());
            report.bytes_offloaded += block.size_bits.div_ceil(8);
        }
    }
    model.plan = target.clone();
    Ok(report)
}
