//! Shared oracles for the integration tests.
//!
//! Everything here is deliberately written *against the grain* of the main
//! crate: matrix products are plain triple loops over `Vec<Vec<f64>>`,
//! singular values come from power iteration on the Gram matrix rather than
//! one-sided Jacobi, and sign bits are decoded straight from the packed
//! bytes. Agreement between these and the library is the evidence the tests
//! are after, so none of the helpers may call into the code paths they
//! check.

#![allow(dead_code)] // each test binary links this module and uses a subset

use bitstack_core::avd::{ResidualBlock, WeightStack};
use bitstack_core::linalg::DenseMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Deterministic Gaussian test matrix.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// Largest elementwise absolute difference.
pub fn max_abs_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()), "shape mismatch");
    let mut worst = 0.0f64;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            worst = worst.max((a.get(i, j) - b.get(i, j)).abs());
        }
    }
    worst
}

/// Frobenius norm as an explicit double loop.
pub fn naive_frobenius(m: &DenseMatrix) -> f64 {
    let mut sum = 0.0;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            sum += m.get(i, j) * m.get(i, j);
        }
    }
    sum.sqrt()
}

/// Matrix product as an explicit triple loop.
pub fn naive_product(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(a.cols(), b.rows(), "inner dimensions must agree");
    DenseMatrix::from_fn(a.rows(), b.cols(), |i, j| {
        let mut sum = 0.0;
        for l in 0..a.cols() {
            sum += a.get(i, l) * b.get(l, j);
        }
        sum
    })
}

// ── Spectral oracle: power iteration on the Gram matrix ─────────────────────

/// Eigen-decomposition of the symmetric PSD Gram matrix `m^T m` by power
/// iteration with deflation. Returns `(eigenvalue, eigenvector)` pairs in
/// descending eigenvalue order; eigenvalues below `1e-14 * trace` are
/// reported as zero.
pub fn gram_eigen(m: &DenseMatrix) -> Vec<(f64, Vec<f64>)> {
    let n = m.cols();
    // gram[i][j] = sum_r m[r][i] * m[r][j]
    let mut gram = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut sum = 0.0;
            for r in 0..m.rows() {
                sum += m.get(r, i) * m.get(r, j);
            }
            gram[i][j] = sum;
        }
    }
    let trace: f64 = (0..n).map(|i| gram[i][i]).sum();
    let floor = 1e-14 * trace.max(1.0);

    let mut pairs = Vec::with_capacity(n);
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);
    for _ in 0..n {
        // Random start so we never begin orthogonal to the dominant vector.
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..200_000 {
            let mut next = vec![0.0f64; n];
            for (i, row) in gram.iter().enumerate() {
                next[i] = row.iter().zip(&v).map(|(g, x)| g * x).sum();
            }
            lambda = dot(&next, &v);
            if normalize(&mut next) <= floor {
                lambda = 0.0;
                break;
            }
            let drift: f64 = next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = next;
            if drift <= 1e-15 {
                break;
            }
        }
        let lambda = lambda.max(0.0);
        // Deflate: gram -= lambda * v v^T
        for i in 0..n {
            for j in 0..n {
                gram[i][j] -= lambda * v[i] * v[j];
            }
        }
        pairs.push((if lambda <= floor { 0.0 } else { lambda }, v));
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite eigenvalues"));
    pairs
}

/// Singular values of `m`, descending, via the Gram eigen oracle.
pub fn oracle_singular_values(m: &DenseMatrix) -> Vec<f64> {
    gram_eigen(m).into_iter().map(|(l, _)| l.sqrt()).collect()
}

/// Best rank-`k` approximation via the Gram eigen oracle.
///
/// With right singular vectors `v_i` of unit norm, each rank-one term
/// `sigma_i u_i v_i^T` equals `m v_i v_i^T`, so the truncation is just `m`
/// projected onto the span of the top-k right vectors.
pub fn oracle_rank_k(m: &DenseMatrix, k: usize) -> DenseMatrix {
    let pairs = gram_eigen(m);
    assert!(k <= pairs.len(), "rank exceeds the spectrum");
    let mut approx = DenseMatrix::zeros(m.rows(), m.cols());
    for (_, v) in pairs.into_iter().take(k) {
        // mv[r] = (m v)[r]
        let mv: Vec<f64> = (0..m.rows())
            .map(|r| (0..m.cols()).map(|c| m.get(r, c) * v[c]).sum())
            .collect();
        approx = DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| {
            approx.get(i, j) + mv[i] * v[j]
        });
    }
    approx
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normalize in place; returns the pre-normalization Euclidean norm.
fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

// ── Block restoration decoded from raw storage ──────────────────────────────

/// Restore a residual block reading the sign bits straight out of the packed
/// bytes (one contiguous row-major bit stream, LSB-first within each byte)
/// and multiplying the factors with the triple-loop product.
pub fn naive_restore(block: &ResidualBlock) -> DenseMatrix {
    let bytes = block.signs.bytes();
    let cols = block.cols();
    let product = naive_product(&block.left, &transpose(&block.right));
    DenseMatrix::from_fn(block.rows(), cols, |i, j| {
        let idx = i * cols + j;
        let bit = bytes[idx / 8] >> (idx % 8) & 1;
        let sign = if bit == 1 { 1.0 } else { -1.0 };
        sign * product.get(i, j)
    })
}

/// Prefix reconstruction as a plain left-to-right block sum.
pub fn naive_block_sum(stack: &WeightStack, level: usize) -> DenseMatrix {
    let mut acc = DenseMatrix::zeros(stack.rows(), stack.cols());
    for block in &stack.blocks[..level] {
        let restored = naive_restore(block);
        acc = DenseMatrix::from_fn(acc.rows(), acc.cols(), |i, j| {
            acc.get(i, j) + restored.get(i, j)
        });
    }
    acc
}

fn transpose(m: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(m.cols(), m.rows(), |i, j| m.get(j, i))
}
