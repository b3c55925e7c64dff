//! Iterative sign/magnitude decomposition of weight matrices.
//!
//! One step splits a residual into its elementwise signs (one bit each) and
//! its magnitude matrix, then compresses the magnitudes — which are far
//! better conditioned for low-rank approximation than the raw signed values —
//! into rank-k factors. The step's output is a [`ResidualBlock`]; subtracting
//! its restoration from the residual yields the next residual, so iterating
//! produces a stack of blocks whose prefix sums approximate the input with
//! monotonically improving fidelity.
//!
//! Factors are rounded to the storage precision *before* the next residual is
//! computed, so later iterations see and correct the rounding error of
//! earlier ones instead of compounding it.

use std::fmt;

use thiserror::Error;

use crate::linalg::{rank_k_factors, DenseMatrix, LinalgError};
use crate::precision::Precision;
use crate::signpack::{apply_signs, pack, sign_split, PackedSignMatrix};

/// Errors produced by decomposition and reconstruction.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum AvdError {
    /// A linear-algebra failure (rank out of range, non-convergence, ...).
    #[error(transparent)]
    Linalg(#[from] LinalgError),

    /// A reconstruction level beyond the number of blocks in the stack.
    #[error("level {level} out of range 0..={max}")]
    LevelOutOfRange { level: usize, max: usize },
}

// ── Identifiers ─────────────────────────────────────────────────────────────

/// Identifies one weight matrix inside a model: layer index plus the name of
/// the linear map within that layer.
///
/// The derived ordering (layer first, then role lexicographically) is the
/// canonical weight order used for deterministic iteration and tie-breaking.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WeightId {
    pub layer: usize,
    pub role: String,
}

impl WeightId {
    pub fn new(layer: usize, role: impl Into<String>) -> Self {
        Self {
            layer,
            role: role.into(),
        }
    }
}

impl fmt::Display for WeightId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.role)
    }
}

// ── Blocks and stacks ───────────────────────────────────────────────────────

/// One decomposition step's output: packed signs plus rounded rank-k factors.
///
/// `left` is `rows x k`, `right` is `cols x k`; the block restores to
/// `signs (x) (left * right^T)`. `size_bits` is the storage footprint:
/// one bit per sign plus the factor entries at storage precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub weight: WeightId,
    pub iteration: usize,
    pub signs: PackedSignMatrix,
    pub left: DenseMatrix,
    pub right: DenseMatrix,
    pub size_bits: u64,
    /// Importance score assigned during sorting; `None` until sorted.
    pub importance: Option<f64>,
}

impl ResidualBlock {
    pub fn rows(&self) -> usize {
        self.signs.rows()
    }

    pub fn cols(&self) -> usize {
        self.signs.cols()
    }

    pub fn rank(&self) -> usize {
        self.left.cols()
    }

    /// Dense contribution of this block: `signs (x) (left * right^T)`.
    pub fn restore(&self) -> DenseMatrix {
        let product = self
            .left
            .matmul(&self.right.transpose())
            .expect("factor shapes are consistent by construction");
        apply_signs(&self.signs, &product).expect("sign shape matches factors")
    }

    /// Storage bytes, rounding the bit count up to whole bytes.
    pub fn size_bytes(&self) -> u64 {
        self.size_bits.div_ceil(8)
    }
}

/// All residual blocks of one weight, ordered by iteration `1..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStack {
    pub weight: WeightId,
    pub blocks: Vec<ResidualBlock>,
    /// How many leading blocks are currently materialized by a loader.
    /// Decomposition leaves every block in memory, so it starts at `n`.
    pub loaded_level: usize,
}

impl WeightStack {
    pub fn n_iters(&self) -> usize {
        self.blocks.len()
    }

    pub fn rows(&self) -> usize {
        self.blocks[0].rows()
    }

    pub fn cols(&self) -> usize {
        self.blocks[0].cols()
    }

    /// Block for a given 1-based iteration.
    pub fn block(&self, iteration: usize) -> Option<&ResidualBlock> {
        iteration
            .checked_sub(1)
            .and_then(|idx| self.blocks.get(idx))
    }
}

/// Storage bits for one block of shape `rows x cols` at rank `k`:
/// one sign bit per entry plus two factors at the given precision.
pub fn block_bits(rows: usize, cols: usize, k: usize, precision: Precision) -> u64 {
    (rows * cols) as u64 + precision.bits_per_entry() * (k * (rows + cols)) as u64
}

// ── Decomposition ───────────────────────────────────────────────────────────

/// Output of one decomposition step.
#[derive(Debug, Clone, PartialEq)]
pub struct AvdStep {
    pub signs: PackedSignMatrix,
    pub left: DenseMatrix,
    pub right: DenseMatrix,
    /// `residual - signs (x) (left * right^T)` with the rounded factors.
    pub new_residual: DenseMatrix,
}

/// Decompose one residual into signs plus rounded rank-k magnitude factors.
pub fn avd_step(
    residual: &DenseMatrix,
    k: usize,
    precision: Precision,
) -> Result<AvdStep, AvdError> {
    let (signs, magnitudes) = sign_split(residual);
    let (left_exact, right_exact) = rank_k_factors(&magnitudes, k)?;
    let left = left_exact.map(|x| precision.round(x));
    let right = right_exact.map(|x| precision.round(x));
    let packed = pack(&signs);
    let restored = apply_signs(&packed, &left.matmul(&right.transpose()).expect("shapes agree"))
        .expect("sign shape matches input");
    let new_residual = residual.sub(&restored).expect("same shape");
    Ok(AvdStep {
        signs: packed,
        left,
        right,
        new_residual,
    })
}

/// Run `n_iters` decomposition steps on a (scaled) weight matrix.
///
/// Block `i` compresses the residual left by blocks `1..i`, so restoring a
/// prefix of the returned stack approximates the input, and longer prefixes
/// are never worse than shorter ones beyond storage-rounding noise.
pub fn decompose_weight(
    w_scaled: &DenseMatrix,
    weight: WeightId,
    n_iters: usize,
    k: usize,
    precision: Precision,
) -> Result<WeightStack, AvdError> {
    assert!(n_iters >= 1, "decomposition needs at least one iteration");
    let size_bits = block_bits(w_scaled.rows(), w_scaled.cols(), k, precision);
    let mut blocks = Vec::with_capacity(n_iters);
    let mut residual = w_scaled.clone();
    for iteration in 1..=n_iters {
        let step = avd_step(&residual, k, precision)?;
        blocks.push(ResidualBlock {
            weight: weight.clone(),
            iteration,
            signs: step.signs,
            left: step.left,
            right: step.right,
            size_bits,
            importance: None,
        });
        residual = step.new_residual;
    }
    Ok(WeightStack {
        weight,
        blocks,
        loaded_level: n_iters,
    })
}

/// Sum of the first `level` restored blocks (level 0 is the zero matrix).
///
/// Accumulates strictly in iteration order, so
/// `reconstruct(stack, t) == reconstruct(stack, t-1) + restore(block t)`
/// holds bit for bit.
pub fn reconstruct(stack: &WeightStack, level: usize) -> Result<DenseMatrix, AvdError> {
    if level > stack.blocks.len() {
        return Err(AvdError::LevelOutOfRange {
            level,
            max: stack.blocks.len(),
        });
    }
    let mut acc = DenseMatrix::zeros(stack.rows(), stack.cols());
    for block in &stack.blocks[..level] {
        acc = acc.add(&block.restore()).expect("uniform block shape");
    }
    Ok(acc)
}
