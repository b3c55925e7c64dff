//! Core library for compressing weight matrices into stacks of
//! importance-sorted one-bit residual blocks.
//!
//! The pipeline, in the order the modules implement it:
//!
//! 1. [`scaling`] — scale each weight row by its input channel's calibration
//!    activation norm, so reconstruction effort follows activation energy.
//! 2. [`avd`] — iteratively split each residual into a packed sign matrix
//!    and a rank-k factorization of its magnitudes ([`linalg`], [`signpack`],
//!    [`precision`]), producing a stack of equally-sized residual blocks.
//! 3. [`stack`] — order all blocks of all weights into one universal
//!    sequence by measured importance, so any prefix is a good model.
//! 4. [`loader`] — map a byte budget to a prefix of that sequence and
//!    reconstruct or delta-adjust the model it implies.
//! 5. [`store`] — persist everything as a single deterministic container
//!    file that supports partial reads.
//!
//! [`harness`] provides the self-contained reference network, calibration
//! data, and surrogate scoring used to measure block importance, and
//! [`artifacts`] ties a run's configuration and outputs together.

pub mod artifacts;
pub mod avd;
pub mod harness;
pub mod linalg;
pub mod loader;
pub mod precision;
pub mod scaling;
pub mod signpack;
pub mod stack;
pub mod store;

pub use artifacts::{CalibSource, ModelArtifacts, NetShape, RunParams, WeightSource};
pub use harness::{
    budget_sweep, build_calibration, build_network, decompose_model, evaluator_for,
    linspace_budgets, seeded_calibration, stream_seed, surrogate_score, sweep_csv, HarnessError,
    ReferenceNetwork, SurrogateEvaluator, SweepRow,
};
pub use avd::{
    avd_step, block_bits, decompose_weight, reconstruct, AvdError, ResidualBlock, WeightId,
    WeightStack,
};
pub use linalg::{frobenius_norm, rank_k_factors, svd, DenseMatrix, LinalgError, SvdResult};
pub use loader::{
    apply_plan, block_size_bits, format_mib2, load_model, mib, resolve_budget, total_memory,
    BudgetPlan, DeltaReport, LoadedModel, PlanError,
};
pub use precision::Precision;
pub use scaling::{apply_scaling, compute_scaling, scaled_product, ScalingError, ScalingVector};
pub use signpack::{pack, sign_split, unpack, PackError, PackedSignMatrix, SignMatrix};
pub use stack::{
    apply_importance, sort_average, sort_greedy, sort_random, verify_order, BlockRef, Evaluator,
    OrderReport, OrderViolation, SortError, SortStrategy, UniversalStack,
};
pub use store::{
    deserialize, read_block_range, read_container, serialize, write_container, StoreError,
};
