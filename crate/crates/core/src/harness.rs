//! Self-contained experiment harness: a deterministic reference network,
//! calibration data, surrogate scoring, and the end-to-end pipeline drivers
//! the command-line tool builds on.
//!
//! The reference network is a residual tanh MLP over a fixed-width stream:
//! layer 1 applies its maps directly (so a model with all-zero weights
//! outputs exactly zero), and every later layer adds its maps' result back
//! onto the stream. Each map is one square weight matrix, and those matrices
//! are what the compression pipeline decomposes.
//!
//! Everything here is seeded: the same master seed always yields the same
//! network, calibration batch, and therefore the same containers, bit for
//! bit. Distinct consumers draw from distinct streams derived from the
//! master seed, so e.g. enlarging the network never changes the calibration
//! batch.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::artifacts::{CalibSource, ModelArtifacts, NetShape, RunParams, WeightSource};
use crate::avd::{decompose_weight, AvdError, WeightId};
use crate::linalg::DenseMatrix;
use crate::loader::{apply_plan, load_model, resolve_budget, LoadedModel, PlanError};
use crate::scaling::{apply_scaling, compute_scaling, scaled_product, ScalingVector};
use crate::stack::{Evaluator, SortError, WeightAssignment};

/// Seed stream for the calibration batch.
pub const CALIB_STREAM: u64 = 0;
/// First seed stream used for network weights; weight `i` in canonical
/// order draws from stream `WEIGHT_STREAM_BASE + i`.
pub const WEIGHT_STREAM_BASE: u64 = 1;
/// Seed stream for the random-order shuffle.
pub const SHUFFLE_STREAM: u64 = u64::MAX;

/// Derive an independent seed for one consumer stream of a master seed.
///
/// Multiplying the stream index by an odd 64-bit constant spreads
/// consecutive indices across the seed space before the xor, so nearby
/// streams never collide or correlate.
pub fn stream_seed(master: u64, stream: u64) -> u64 {
    master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Errors from harness construction, file loading, or pipeline runs.
#[derive(Debug, Error)]
pub enum HarnessError {
    /// Underlying filesystem failure.
    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),

    /// A weight or calibration file that cannot be parsed.
    #[error("bad input file {path}: {detail}")]
    BadFile { path: String, detail: String },

    /// A run configuration no pipeline stage could satisfy.
    #[error("configuration error: {0}")]
    BadConfig(String),

    /// Mismatched matrix dimensions at a pipeline boundary.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Decomposition failure bubbled up from a weight.
    #[error(transparent)]
    Decomposition(#[from] AvdError),

    /// Budget plan failure during a sweep.
    #[error(transparent)]
    Plan(#[from] PlanError),

    /// Importance measurement failure during sorting.
    #[error(transparent)]
    Sort(#[from] SortError),
}

// ── Reference network ───────────────────────────────────────────────────────

/// A residual tanh MLP with `layers * maps_per_layer` square weight
/// matrices over a `hidden`-wide stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceNetwork {
    shape: NetShape,
    weights: BTreeMap<WeightId, DenseMatrix>,
}

/// Weight ids of a network shape in canonical order.
pub fn weight_ids(shape: &NetShape) -> Vec<WeightId> {
    let mut ids = Vec::with_capacity(shape.layers * shape.maps_per_layer);
    for layer in 1..=shape.layers {
        for map in 1..=shape.maps_per_layer {
            ids.push(WeightId::new(layer, format!("lin{map}")));
        }
    }
    ids.sort();
    ids
}

/// Shared layer/map traversal: threads the stream through every map's
/// product (supplied by the caller) followed by tanh, applying the
/// residual skip on every layer after the first.
fn forward_with<E>(
    shape: &NetShape,
    x: &DenseMatrix,
    mut product: impl FnMut(&WeightId, &DenseMatrix) -> Result<DenseMatrix, E>,
) -> Result<DenseMatrix, E> {
    let mut h = x.clone();
    for layer in 1..=shape.layers {
        let mut t = h.clone();
        for map in 1..=shape.maps_per_layer {
            let id = WeightId::new(layer, format!("lin{map}"));
            t = product(&id, &t)?.map(f64::tanh);
        }
        h = if layer == 1 {
            t
        } else {
            h.add(&t).expect("stream width is constant")
        };
    }
    Ok(h)
}

impl ReferenceNetwork {
    /// Draw a network from the master seed: every weight entry is normal
    /// with mean zero and variance `1 / hidden`, each weight on its own
    /// seed stream.
    pub fn seeded(shape: NetShape, master_seed: u64) -> Self {
        let std_dev = (1.0 / shape.hidden as f64).sqrt();
        let dist = Normal::new(0.0, std_dev).expect("finite standard deviation");
        let weights = weight_ids(&shape)
            .into_iter()
            .enumerate()
            .map(|(i, id)| {
                let seed = stream_seed(master_seed, WEIGHT_STREAM_BASE + i as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w = DenseMatrix::from_fn(shape.hidden, shape.hidden, |_, _| {
                    dist.sample(&mut rng)
                });
                (id, w)
            })
            .collect();
        Self { shape, weights }
    }

    /// Assemble a network from explicit weights (canonical ids required).
    pub fn from_weights(
        shape: NetShape,
        weights: BTreeMap<WeightId, DenseMatrix>,
    ) -> Result<Self, HarnessError> {
        let expected = weight_ids(&shape);
        let got: Vec<&WeightId> = weights.keys().collect();
        if got.len() != expected.len() || !expected.iter().zip(&got).all(|(a, b)| &a == b) {
            return Err(HarnessError::BadConfig(format!(
                "weight set does not match a {}x{} map grid",
                shape.layers, shape.maps_per_layer
            )));
        }
        for (id, w) in &weights {
            if w.rows() != shape.hidden || w.cols() != shape.hidden {
                return Err(HarnessError::ShapeMismatch(format!(
                    "weight {id} is {}x{}, expected {}x{}",
                    w.rows(),
                    w.cols(),
                    shape.hidden,
                    shape.hidden
                )));
            }
        }
        Ok(Self { shape, weights })
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn weights(&self) -> &BTreeMap<WeightId, DenseMatrix> {
        &self.weights
    }

    fn check_input(&self, x: &DenseMatrix) -> Result<(), HarnessError> {
        if x.cols() != self.shape.hidden {
            return Err(HarnessError::ShapeMismatch(format!(
                "input has {} columns, the stream is {} wide",
                x.cols(),
                self.shape.hidden
            )));
        }
        Ok(())
    }

    /// Run the network on a batch (rows are samples).
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix, HarnessError> {
        self.check_input(x)?;
        forward_with(&self.shape, x, |id, input| {
            Ok::<_, HarnessError>(
                input
                    .matmul(&self.weights[id])
                    .expect("square maps over a checked stream width"),
            )
        })
    }

    /// Run the network and record the input batch each map multiplies, i.e.
    /// the activations whose column energies drive the scaling step.
    pub fn collect_activations(
        &self,
        x: &DenseMatrix,
    ) -> Result<BTreeMap<WeightId, DenseMatrix>, HarnessError> {
        self.check_input(x)?;
        let mut inputs = BTreeMap::new();
        forward_with(&self.shape, x, |id, input| {
            inputs.insert(id.clone(), input.clone());
            Ok::<_, HarnessError>(
                input
                    .matmul(&self.weights[id])
                    .expect("square maps over a checked stream width"),
            )
        })?;
        Ok(inputs)
    }
}

/// Run the network structure with externally supplied scaled weights: every
/// map's product goes through [`scaled_product`], which un-scales the input
/// so the result matches `input * w` for `w_scaled = diag(s) * w`.
pub fn scaled_forward(
    shape: &NetShape,
    x: &DenseMatrix,
    weights: &WeightAssignment,
    scalings: &BTreeMap<WeightId, ScalingVector>,
) -> Result<DenseMatrix, String> {
    forward_with(shape, x, |id, input| {
        let w_scaled = weights
            .get(id)
            .ok_or_else(|| format!("no weight assigned for {id}"))?;
        let scales = scalings
            .get(id)
            .ok_or_else(|| format!("no scales known for {id}"))?;
        scaled_product(input, scales, w_scaled).map_err(|e| format!("map {id}: {e}"))
    })
}

// ── Calibration and scoring ─────────────────────────────────────────────────

/// Draw a standard-normal calibration batch from the master seed.
pub fn seeded_calibration(master_seed: u64, rows: usize, hidden: usize) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(master_seed, CALIB_STREAM));
    DenseMatrix::from_fn(rows, hidden, |_, _| StandardNormal.sample(&mut rng))
}

/// Copy of the first `n` rows of a batch.
pub fn first_rows(x: &DenseMatrix, n: usize) -> DenseMatrix {
    assert!(n >= 1 && n <= x.rows(), "row prefix must be nonempty and fit");
    DenseMatrix::from_fn(n, x.cols(), |i, j| x.get(i, j))
}

/// Mean over all entries of the squared difference of two equal-shape
/// batches.
pub fn mean_squared_difference(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    assert_eq!(a.rows(), b.rows(), "batch rows must agree");
    assert_eq!(a.cols(), b.cols(), "batch columns must agree");
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    total / (a.rows() * a.cols()) as f64
}

/// Output distortion between two same-shape networks on a batch: the mean
/// squared difference of their final outputs. Exactly zero when the outputs
/// agree; with an all-zero compressed network it degenerates to the mean
/// squared entry of the original's outputs.
pub fn surrogate_score(
    original: &ReferenceNetwork,
    compressed: &ReferenceNetwork,
    calib: &DenseMatrix,
) -> Result<f64, HarnessError> {
    if original.shape() != compressed.shape() {
        return Err(HarnessError::ShapeMismatch(format!(
            "networks differ: {:?} vs {:?}",
            original.shape(),
            compressed.shape()
        )));
    }
    let a = original.forward(calib)?;
    let b = compressed.forward(calib)?;
    Ok(mean_squared_difference(&b, &a))
}

/// Scores weight assignments by output distortion: run the network with the
/// assigned (scaled) weights on a fixed batch and compare against the
/// original network's outputs on that batch. Lower is better; zero means
/// the outputs match exactly.
#[derive(Debug, Clone)]
pub struct SurrogateEvaluator {
    shape: NetShape,
    scalings: BTreeMap<WeightId, ScalingVector>,
    x: DenseMatrix,
    y_reference: DenseMatrix,
}

impl SurrogateEvaluator {
    /// Fix the batch and precompute the original network's outputs on it.
    pub fn new(
        net: &ReferenceNetwork,
        scalings: BTreeMap<WeightId, ScalingVector>,
        x: DenseMatrix,
    ) -> Result<Self, HarnessError> {
        let y_reference = net.forward(&x)?;
        Ok(Self {
            shape: net.shape(),
            scalings,
            x,
            y_reference,
        })
    }

    pub fn batch_rows(&self) -> usize {
        self.x.rows()
    }
}

impl Evaluator for SurrogateEvaluator {
    fn score(&self, weights: &WeightAssignment) -> Result<f64, String> {
        let y = scaled_forward(&self.shape, &self.x, weights, &self.scalings)?;
        Ok(mean_squared_difference(&y, &self.y_reference))
    }
}

// ── Pipeline drivers ────────────────────────────────────────────────────────

/// Build the network a run configuration describes, drawing it from the
/// seed or loading it from the referenced file.
pub fn build_network(params: &RunParams) -> Result<ReferenceNetwork, HarnessError> {
    match &params.weight_source {
        WeightSource::Seeded => Ok(ReferenceNetwork::seeded(params.net, params.seed)),
        WeightSource::File(path) => {
            let net = read_bnet(Path::new(path))?;
            if net.shape() != params.net {
                return Err(HarnessError::BadConfig(format!(
                    "network file is {}x{} maps of width {}, run expects {}x{} of width {}",
                    net.shape().layers,
                    net.shape().maps_per_layer,
                    net.shape().hidden,
                    params.net.layers,
                    params.net.maps_per_layer,
                    params.net.hidden
                )));
            }
            Ok(net)
        }
    }
}

/// Build the calibration batch a run configuration describes.
pub fn build_calibration(params: &RunParams) -> Result<DenseMatrix, HarnessError> {
    match &params.calib_source {
        CalibSource::Seeded => Ok(seeded_calibration(
            params.seed,
            params.calib_rows,
            params.net.hidden,
        )),
        CalibSource::File(path) => {
            let x = read_bmat(Path::new(path))?;
            if x.cols() != params.net.hidden {
                return Err(HarnessError::BadConfig(format!(
                    "calibration batch is {} wide, the stream is {} wide",
                    x.cols(),
                    params.net.hidden
                )));
            }
            if x.rows() != params.calib_rows {
                return Err(HarnessError::BadConfig(format!(
                    "calibration batch has {} rows, run expects {}",
                    x.rows(),
                    params.calib_rows
                )));
            }
            Ok(x)
        }
    }
}

/// Decompose every weight of a network into residual block stacks.
///
/// Per weight: measure its input activations on the calibration batch,
/// fold their column norms into the weight, then split the scaled weight
/// into `n_iters` rank-`k` sign/factor blocks. Weights are independent, so
/// they run in parallel.
pub fn decompose_model(
    net: &ReferenceNetwork,
    calibration: &DenseMatrix,
    params: &RunParams,
) -> Result<ModelArtifacts, HarnessError> {
    params.validate().map_err(HarnessError::BadConfig)?;
    if net.shape() != params.net {
        return Err(HarnessError::BadConfig(
            "network shape does not match the run configuration".to_string(),
        ));
    }
    let activations = net.collect_activations(calibration)?;
    let ids = weight_ids(&net.shape());

    let per_weight: Result<Vec<_>, HarnessError> = ids
        .par_iter()
        .map(|id| {
            let scaling = compute_scaling(&activations[id]);
            let w_scaled = apply_scaling(&net.weights()[id], &scaling)
                .expect("scales come from this weight's own activations");
            let stack = decompose_weight(
                &w_scaled,
                id.clone(),
                params.n_iters,
                params.k,
                params.precision,
            )?;
            Ok((stack, (id.clone(), scaling)))
        })
        .collect();
    let (stacks, scalings) = per_weight?.into_iter().unzip();

    Ok(ModelArtifacts {
        params: params.clone(),
        stacks,
        scalings,
        order: None,
    })
}

/// Rebuild the evaluator a container's artifacts imply, using the first
/// `rows` calibration rows as the scoring batch.
pub fn evaluator_for(
    artifacts: &ModelArtifacts,
    rows: usize,
) -> Result<SurrogateEvaluator, HarnessError> {
    let net = build_network(&artifacts.params)?;
    let calibration = build_calibration(&artifacts.params)?;
    if rows == 0 || rows > calibration.rows() {
        return Err(HarnessError::BadConfig(format!(
            "scoring batch of {rows} rows does not fit the {}-row calibration batch",
            calibration.rows()
        )));
    }
    let scalings = artifacts
        .scalings
        .iter()
        .map(|(id, s)| (id.clone(), s.clone()))
        .collect();
    SurrogateEvaluator::new(&net, scalings, first_rows(&calibration, rows))
}

// ── Budget sweeps ───────────────────────────────────────────────────────────

/// One measured point of a budget sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// Requested budget.
    pub budget_bytes: u64,
    /// Bytes the resolved prefix actually occupies.
    pub loaded_bytes: u64,
    /// Blocks of the universal order the budget affords.
    pub prefix_len: usize,
    /// True when some weight got no blocks at all.
    pub degenerate: bool,
    /// Evaluator score of the loaded model (lower is better).
    pub score: f64,
}

/// Evenly spaced byte budgets from `min` to `max` inclusive.
pub fn linspace_budgets(min: u64, max: u64, points: usize) -> Vec<u64> {
    assert!(points >= 2, "a sweep needs at least two points");
    assert!(min <= max, "budget range must be ascending");
    (0..points)
        .map(|i| min + (max - min) * i as u64 / (points - 1) as u64)
        .collect()
}

/// Score the loaded model at each budget.
///
/// The first budget is materialized from scratch; every later budget is
/// reached incrementally by loading or offloading only the blocks in the
/// prefix difference, so the whole sweep restores each block at most a
/// handful of times rather than once per point.
pub fn budget_sweep(
    artifacts: &ModelArtifacts,
    evaluator: &dyn Evaluator,
    budgets: &[u64],
) -> Result<Vec<SweepRow>, HarnessError> {
    let universal = artifacts.order.as_ref().ok_or_else(|| {
        HarnessError::BadConfig("budget sweeps need sorted artifacts".to_string())
    })?;
    let bits = artifacts.block_bits_along(&universal.order);

    let mut rows = Vec::with_capacity(budgets.len());
    let mut model: Option<LoadedModel> = None;
    for &budget in budgets {
        let plan = resolve_budget(universal, &bits, budget);
        if let Some(m) = model.as_mut() {
            apply_plan(m, artifacts, &plan)?;
        } else {
            model = Some(load_model(artifacts, &plan)?);
        }
        let current = model.as_ref().expect("model materialized above");
        let score = evaluator
            .score(current.weights())
            .map_err(|detail| HarnessError::BadConfig(format!("evaluator failed: {detail}")))?;
        rows.push(SweepRow {
            budget_bytes: budget,
            loaded_bytes: current.plan().total_bytes,
            prefix_len: current.plan().prefix_len,
            degenerate: current.plan().degenerate,
            score,
        });
    }
    Ok(rows)
}

/// Render sweep rows as CSV, scores in scientific notation.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("budget_bytes,loaded_bytes,prefix_len,degenerate,eval_score\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{:e}\n",
            row.budget_bytes, row.loaded_bytes, row.prefix_len, row.degenerate, row.score
        ));
    }
    out
}

// ── Matrix and network files ────────────────────────────────────────────────

const BMAT_MAGIC: [u8; 4] = *b"BMAT";
const BNET_MAGIC: [u8; 4] = *b"BNET";

fn file_error(path: &Path, detail: impl Into<String>) -> HarnessError {
    HarnessError::BadFile {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

fn read_matrix_body(
    bytes: &[u8],
    at: &mut usize,
    rows: usize,
    cols: usize,
    path: &Path,
) -> Result<DenseMatrix, HarnessError> {
    let need = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| file_error(path, "matrix dimensions overflow"))?;
    let end = at
        .checked_add(need)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| file_error(path, "file ends before the matrix data does"))?;
    let data: Vec<f64> = bytes[*at..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();
    *at = end;
    DenseMatrix::new(rows, cols, data).map_err(|e| file_error(path, e.to_string()))
}

fn read_u32_at(bytes: &[u8], at: &mut usize, path: &Path) -> Result<u32, HarnessError> {
    let end = *at + 4;
    if end > bytes.len() {
        return Err(file_error(path, "file ends inside a header field"));
    }
    let v = u32::from_le_bytes(bytes[*at..end].try_into().expect("four bytes"));
    *at = end;
    Ok(v)
}

/// Read a single matrix file: magic, u32 rows, u32 cols, row-major f64 data,
/// all little-endian.
pub fn read_bmat(path: &Path) -> Result<DenseMatrix, HarnessError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || bytes[..4] != BMAT_MAGIC {
        return Err(file_error(path, "not a matrix file (bad magic)"));
    }
    let mut at = 4;
    let rows = read_u32_at(&bytes, &mut at, path)? as usize;
    let cols = read_u32_at(&bytes, &mut at, path)? as usize;
    let m = read_matrix_body(&bytes, &mut at, rows, cols, path)?;
    if at != bytes.len() {
        return Err(file_error(path, "trailing bytes after the matrix data"));
    }
    Ok(m)
}

/// Write a single matrix file in the [`read_bmat`] layout.
pub fn write_bmat(path: &Path, m: &DenseMatrix) -> Result<(), HarnessError> {
    let mut out = Vec::with_capacity(12 + m.data().len() * 8);
    out.extend_from_slice(&BMAT_MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &x in m.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a network file: magic, u32 layers, u32 maps per layer, u32 hidden,
/// then every weight matrix in canonical order, each hidden x hidden f64.
pub fn read_bnet(path: &Path) -> Result<ReferenceNetwork, HarnessError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || bytes[..4] != BNET_MAGIC {
        return Err(file_error(path, "not a network file (bad magic)"));
    }
    let mut at = 4;
    let layers = read_u32_at(&bytes, &mut at, path)? as usize;
    let maps_per_layer = read_u32_at(&bytes, &mut at, path)? as usize;
    let hidden = read_u32_at(&bytes, &mut at, path)? as usize;
    if layers == 0 || maps_per_layer == 0 || hidden == 0 {
        return Err(file_error(path, "network dimensions must be at least 1"));
    }
    let shape = NetShape {
        layers,
        maps_per_layer,
        hidden,
    };
    let mut weights = BTreeMap::new();
    for id in weight_ids(&shape) {
        let w = read_matrix_body(&bytes, &mut at, hidden, hidden, path)?;
        weights.insert(id, w);
    }
    if at != bytes.len() {
        return Err(file_error(path, "trailing bytes after the last weight"));
    }
    ReferenceNetwork::from_weights(shape, weights)
}

/// Write a network file in the [`read_bnet`] layout.
pub fn write_bnet(path: &Path, net: &ReferenceNetwork) -> Result<(), HarnessError> {
    let shape = net.shape();
    let mut out = Vec::new();
    out.extend_from_slice(&BNET_MAGIC);
    out.extend_from_slice(&(shape.layers as u32).to_le_bytes());
    out.extend_from_slice(&(shape.maps_per_layer as u32).to_le_bytes());
    out.extend_from_slice(&(shape.hidden as u32).to_le_bytes());
    for id in weight_ids(&shape) {
        for &x in net.weights()[&id].data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}
