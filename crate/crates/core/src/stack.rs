//! Universal block ordering across all weights of a model.
//!
//! After decomposition every weight owns a stack of residual blocks. To serve
//! arbitrary memory budgets, all blocks are merged into one universal order:
//! a budget then simply loads the longest affordable prefix. The order is
//! built by measuring each block's importance — the model-quality score when
//! that block is loaded on top of a fixed baseline — and placing blocks that
//! help most (lowest score) first, subject to the structural rule that block
//! `i` of a weight can only be used once blocks `1..i` are present.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::avd::{reconstruct, WeightId, WeightStack};
use crate::linalg::DenseMatrix;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Errors produced while building a universal order.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum SortError {
    /// The evaluator failed or returned a non-finite score while measuring
    /// a candidate block of the named weight.
    #[error("evaluator failed while scoring {weight}: {detail}")]
    EvaluatorFailure { weight: WeightId, detail: String },
}

/// How the universal order was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SortStrategy {
    /// Round per iteration level: every weight's block `i` is scored on top
    /// of the uniform level-`i-1` baseline, and rounds are emitted in level
    /// order. Keeps per-weight levels within one of each other at any prefix.
    Average,
    /// All `(weight, iteration)` candidates are scored against a fixed
    /// mid-stack baseline and emitted purely by score, subject to per-weight
    /// iteration monotonicity.
    Greedy,
    /// Seeded uniform shuffle subject to monotonicity; no scores. Baseline
    /// for comparing measured strategies against chance.
    Random,
}

impl fmt::Display for SortStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SortStrategy::Average => "average",
            SortStrategy::Greedy => "greedy",
            SortStrategy::Random => "random",
        };
        f.write_str(name)
    }
}

/// Reference to one residual block of one weight.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockRef {
    pub weight: WeightId,
    pub iteration: usize,
}

impl fmt::Display for BlockRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.weight, self.iteration)
    }
}

/// The merged load order over every block of every weight.
///
/// `order[0]` is loaded first. `scores` is aligned with `order`; entries are
/// `None` for strategies that do not measure (Random).
#[derive(Debug, Clone, PartialEq)]
pub struct UniversalStack {
    pub order: Vec<BlockRef>,
    pub strategy: SortStrategy,
    pub scores: Vec<Option<f64>>,
}

impl UniversalStack {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Order-sensitive digest (FNV-1a over the reference sequence), used to
    /// detect plans built against a different universal order.
    pub fn fingerprint(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |byte: u8| {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for r in &self.order {
            for b in (r.weight.layer as u64).to_le_bytes() {
                feed(b);
            }
            for &b in r.weight.role.as_bytes() {
                feed(b);
            }
            feed(0xFF);
            for b in (r.iteration as u64).to_le_bytes() {
                feed(b);
            }
        }
        hash
    }
}

// ── Evaluation interface ────────────────────────────────────────────────────

/// Current reconstructed (scaled) weights for every weight in the model.
pub type WeightAssignment = BTreeMap<WeightId, DenseMatrix>;

/// Scores a full weight assignment; lower is better.
///
/// Implementations must be deterministic given identical weights and must
/// return finite values. The surrogate in the experiment harness compares
/// model outputs on calibration data, but any pure function works.
pub trait Evaluator {
    fn score(&self, weights: &WeightAssignment) -> Result<f64, String>;
}

fn score_candidate(
    evaluator: &dyn Evaluator,
    weights: &WeightAssignment,
    candidate: &WeightId,
) -> Result<f64, SortError> {
    let score = evaluator
        .score(weights)
        .map_err(|detail| SortError::EvaluatorFailure {
            weight: candidate.clone(),
            detail,
        })?;
    if !score.is_finite() {
        return Err(SortError::EvaluatorFailure {
            weight: candidate.clone(),
            detail: format!("non-finite score {score}"),
        });
    }
    Ok(score)
}

/// Weight ids in canonical order, asserting the stacks are sortable.
fn canonical_ids(stacks: &[WeightStack]) -> Vec<WeightId> {
    assert!(!stacks.is_empty(), "cannot sort zero stacks");
    let n = stacks[0].n_iters();
    assert!(
        stacks.iter().all(|s| s.n_iters() == n),
        "all stacks must have the same number of iterations"
    );
    let mut ids: Vec<WeightId> = stacks.iter().map(|s| s.weight.clone()).collect();
    ids.sort();
    let unique: BTreeSet<&WeightId> = ids.iter().collect();
    assert_eq!(unique.len(), ids.len(), "weight ids must be unique");
    ids
}

fn stack_by_id<'a>(stacks: &'a [WeightStack], id: &WeightId) -> &'a WeightStack {
    stacks
        .iter()
        .find(|s| &s.weight == id)
        .expect("id came from this stack set")
}

// ── Average strategy ────────────────────────────────────────────────────────

/// Build the universal order level by level.
///
/// Round `i` starts from the uniform baseline where every weight is at level
/// `i-1`. Each weight's block `i` is loaded alone on top of that baseline,
/// scored, and unloaded; the round's references are then appended in
/// ascending score order (ties broken by weight id) and every weight advances
/// to level `i` for the next round. The result interleaves weights within
/// each level, so any prefix keeps per-weight levels within one of each
/// other.
pub fn sort_average(
    stacks: &[WeightStack],
    evaluator: &dyn Evaluator,
) -> Result<UniversalStack, SortError> {
    let ids = canonical_ids(stacks);
    let n = stacks[0].n_iters();

    let mut current: WeightAssignment = ids
        .iter()
        .map(|id| {
            let s = stack_by_id(stacks, id);
            (id.clone(), DenseMatrix::zeros(s.rows(), s.cols()))
        })
        .collect();

    let mut order = Vec::with_capacity(ids.len() * n);
    let mut scores = Vec::with_capacity(ids.len() * n);
    for i in 1..=n {
        let restored: BTreeMap<&WeightId, DenseMatrix> = ids
            .iter()
            .map(|id| (id, stack_by_id(stacks, id).blocks[i - 1].restore()))
            .collect();

        let mut round: Vec<(f64, &WeightId)> = Vec::with_capacity(ids.len());
        for id in &ids {
            let candidate = current[id].add(&restored[id]).expect("uniform shape");
            let baseline = current.insert(id.clone(), candidate).expect("id present");
            let score = score_candidate(evaluator, &current, id)?;
            current.insert(id.clone(), baseline);
            round.push((score, id));
        }
        round.sort_by(|(sa, wa), (sb, wb)| sa.partial_cmp(sb).expect("finite").then(wa.cmp(wb)));
        for (score, id) in round {
            order.push(BlockRef {
                weight: id.clone(),
                iteration: i,
            });
            scores.push(Some(score));
        }

        for id in &ids {
            let advanced = current[id].add(&restored[id]).expect("uniform shape");
            current.insert(id.clone(), advanced);
        }
    }
    Ok(UniversalStack {
        order,
        strategy: SortStrategy::Average,
        scores,
    })
}

// ── Greedy strategy ─────────────────────────────────────────────────────────

/// Score every `(weight, iteration)` candidate against a fixed baseline and
/// order purely by score.
///
/// The baseline holds every *other* weight at the mid-stack level `n/2`;
/// the candidate weight alone is set to level `i`. The candidates are then
/// stably sorted by score (ties by weight id, then iteration) and emitted
/// with one structural constraint: a block may only appear once its
/// predecessor block of the same weight has been emitted, i.e. at each step
/// the best-scoring *eligible* candidate is taken.
pub fn sort_greedy(
    stacks: &[WeightStack],
    evaluator: &dyn Evaluator,
) -> Result<UniversalStack, SortError> {
    let ids = canonical_ids(stacks);
    let n = stacks[0].n_iters();
    let base_level = n / 2;

    // Reconstruction prefix table: levels 0..=n for every weight.
    let mut prefixes: BTreeMap<&WeightId, Vec<DenseMatrix>> = BTreeMap::new();
    for id in &ids {
        let s = stack_by_id(stacks, id);
        let levels: Vec<DenseMatrix> = (0..=n)
            .map(|lvl| reconstruct(s, lvl).expect("level within stack"))
            .collect();
        prefixes.insert(id, levels);
    }

    let mut assignment: WeightAssignment = ids
        .iter()
        .map(|id| (id.clone(), prefixes[id][base_level].clone()))
        .collect();

    let mut candidates: Vec<(f64, &WeightId, usize)> = Vec::with_capacity(ids.len() * n);
    for id in &ids {
        for i in 1..=n {
            let baseline = assignment
                .insert(id.clone(), prefixes[id][i].clone())
                .expect("id present");
            let score = score_candidate(evaluator, &assignment, id)?;
            assignment.insert(id.clone(), baseline);
            candidates.push((score, id, i));
        }
    }
    candidates.sort_by(|(sa, wa, ia), (sb, wb, ib)| {
        sa.partial_cmp(sb)
            .expect("finite")
            .then(wa.cmp(wb))
            .then(ia.cmp(ib))
    });

    // Emit the best eligible candidate until all are placed.
    let mut emitted_level: BTreeMap<&WeightId, usize> = ids.iter().map(|id| (id, 0)).collect();
    let mut used = vec![false; candidates.len()];
    let mut order = Vec::with_capacity(candidates.len());
    let mut scores = Vec::with_capacity(candidates.len());
    for _ in 0..candidates.len() {
        let (idx, &(score, id, iteration)) = candidates
            .iter()
            .enumerate()
            .find(|(idx, (_, id, iteration))| {
                !used[*idx] && *iteration == emitted_level[*id] + 1
            })
            .expect("some weight always has its next block pending");
        used[idx] = true;
        *emitted_level.get_mut(id).expect("id present") = iteration;
        order.push(BlockRef {
            weight: id.clone(),
            iteration,
        });
        scores.push(Some(score));
    }
    Ok(UniversalStack {
        order,
        strategy: SortStrategy::Greedy,
        scores,
    })
}

// ── Random strategy ─────────────────────────────────────────────────────────

/// Uniformly random interleaving that still respects per-weight iteration
/// monotonicity.
///
/// Shuffling the multiset holding each weight id `n` times and labeling the
/// j-th surviving occurrence of a weight as its block `j` samples uniformly
/// from all monotonicity-respecting orders.
pub fn sort_random(stacks: &[WeightStack], seed: u64) -> UniversalStack {
    let ids = canonical_ids(stacks);
    let n = stacks[0].n_iters();

    let mut sequence: Vec<usize> = (0..ids.len()).flat_map(|w| std::iter::repeat(w).take(n)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sequence.shuffle(&mut rng);

    let mut next_iteration = vec![1usize; ids.len()];
    let order: Vec<BlockRef> = sequence
        .into_iter()
        .map(|w| {
            let iteration = next_iteration[w];
            next_iteration[w] += 1;
            BlockRef {
                weight: ids[w].clone(),
                iteration,
            }
        })
        .collect();
    let scores = vec![None; order.len()];
    UniversalStack {
        order,
        strategy: SortStrategy::Random,
        scores,
    }
}

/// Copy the recorded scores back onto the blocks they grade.
pub fn apply_importance(stacks: &mut [WeightStack], universal: &UniversalStack) {
    for (r, score) in universal.order.iter().zip(&universal.scores) {
        if let Some(stack) = stacks.iter_mut().find(|s| s.weight == r.weight) {
            if let Some(block) = stack.blocks.get_mut(r.iteration - 1) {
                block.importance = *score;
            }
        }
    }
}

// ── Verification ────────────────────────────────────────────────────────────

/// A structural defect found in a universal order.
#[derive(Debug, Clone, PartialEq)]
pub enum OrderViolation {
    /// The same block is referenced more than once.
    DuplicateReference { position: usize, block: BlockRef },
    /// A `(weight, iteration)` pair is absent although the weight has blocks
    /// at higher iterations or peers cover that iteration.
    MissingReference { block: BlockRef },
    /// Blocks of one weight appear out of iteration order.
    MonotonicityViolation {
        position: usize,
        block: BlockRef,
        expected_iteration: usize,
    },
    /// (Average only) A block of level `i` appears after level `i+1` started.
    LayeringViolation { position: usize, block: BlockRef },
}

impl fmt::Display for OrderViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderViolation::DuplicateReference { position, block } => {
                write!(f, "duplicate reference {block} at position {position}")
            }
            OrderViolation::MissingReference { block } => {
                write!(f, "missing reference {block}")
            }
            OrderViolation::MonotonicityViolation {
                position,
                block,
                expected_iteration,
            } => write!(
                f,
                "monotonicity violation at position {position}: got {block}, expected iteration {expected_iteration}"
            ),
            OrderViolation::LayeringViolation { position, block } => {
                write!(f, "layering violation at position {position}: {block} arrives after a later level began")
            }
        }
    }
}

/// Result of checking a universal order's structural invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderReport {
    pub violations: Vec<OrderViolation>,
}

impl OrderReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check duplicate-freeness, full coverage (every weight present must cover
/// iterations `1..=n` where `n` is the largest iteration seen), per-weight
/// monotonicity, and — for the Average strategy — global level layering.
pub fn verify_order(universal: &UniversalStack) -> OrderReport {
    let mut violations = Vec::new();
    let mut seen: BTreeSet<&BlockRef> = BTreeSet::new();
    let mut emitted_level: BTreeMap<&WeightId, usize> = BTreeMap::new();
    let mut current_layer = 1usize;

    let n = universal
        .order
        .iter()
        .map(|r| r.iteration)
        .max()
        .unwrap_or(0);

    for (position, r) in universal.order.iter().enumerate() {
        if !seen.insert(r) {
            violations.push(OrderViolation::DuplicateReference {
                position,
                block: r.clone(),
            });
            continue;
        }
        let level = emitted_level.entry(&r.weight).or_insert(0);
        if r.iteration != *level + 1 {
            violations.push(OrderViolation::MonotonicityViolation {
                position,
                block: r.clone(),
                expected_iteration: *level + 1,
            });
        }
        *level = (*level).max(r.iteration);

        if universal.strategy == SortStrategy::Average {
            if r.iteration > current_layer {
                current_layer = r.iteration;
            } else if r.iteration < current_layer {
                violations.push(OrderViolation::LayeringViolation {
                    position,
                    block: r.clone(),
                });
            }
        }
    }

    for (weight, &level) in &emitted_level {
        for iteration in level + 1..=n {
            violations.push(OrderViolation::MissingReference {
                block: BlockRef {
                    weight: (*weight).clone(),
                    iteration,
                },
            });
        }
    }

    OrderReport { violations }
}
