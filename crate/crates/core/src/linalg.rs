//! Dense matrices and the singular value decomposition.
//!
//! Everything in this crate flows through [`DenseMatrix`]: a row-major,
//! heap-backed `f64` matrix that is validated to be nonempty and fully
//! finite on construction. The SVD is a one-sided Jacobi implementation —
//! chosen so the crate needs no external numerics — and powers the rank-k
//! factor extraction used by the decomposition loop.

use thiserror::Error;

/// Default relative convergence threshold for Jacobi sweeps.
///
/// A column pair (p, q) counts as orthogonal once
/// `|dot(p, q)| <= JACOBI_REL_TOL * ||p|| * ||q||`.
pub const JACOBI_REL_TOL: f64 = 1e-12;

/// Default maximum number of full Jacobi sweeps before giving up.
pub const JACOBI_MAX_SWEEPS: usize = 60;

// ── Errors ──────────────────────────────────────────────────────────────────

/// Errors produced by matrix construction and decomposition.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum LinalgError {
    /// Matrices must have at least one row and one column.
    #[error("matrix must be nonempty, got {rows}x{cols}")]
    EmptyMatrix { rows: usize, cols: usize },

    /// Every entry must be a finite `f64` (no NaN, no infinities).
    #[error("matrix entry ({row},{col}) is not finite: {value}")]
    NonFiniteEntry { row: usize, col: usize, value: f64 },

    /// The backing buffer does not match the requested shape.
    #[error("data length {len} does not match shape {rows}x{cols}")]
    DataLengthMismatch { rows: usize, cols: usize, len: usize },

    /// Two operands have incompatible shapes for the requested operation.
    #[error("shape mismatch in {op}: left {a_rows}x{a_cols}, right {b_rows}x{b_cols}")]
    ShapeMismatch {
        op: &'static str,
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },

    /// The requested rank is outside `1..=min(rows, cols)`.
    #[error("rank k={k} out of range 1..={max} for a {rows}x{cols} matrix")]
    InvalidRank {
        k: usize,
        max: usize,
        rows: usize,
        cols: usize,
    },

    /// The Jacobi iteration did not reach the threshold within the sweep
    /// budget. `off_diagonal` is the worst remaining relative column-pair
    /// correlation, for diagnostics.
    #[error("jacobi SVD did not converge in {max_sweeps} sweeps (worst off-diagonal ratio {off_diagonal:.3e})")]
    NonConvergence {
        max_sweeps: usize,
        off_diagonal: f64,
    },
}

// ── DenseMatrix ─────────────────────────────────────────────────────────────

/// Row-major dense matrix of finite `f64` values.
///
/// The shape is fixed at construction and every public constructor rejects
/// empty shapes and non-finite entries, so downstream code may rely on both.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Build a matrix from a row-major buffer, validating shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::EmptyMatrix { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(LinalgError::DataLengthMismatch {
                rows,
                cols,
                len: data.len(),
            });
        }
        for (idx, &value) in data.iter().enumerate() {
            if !value.is_finite() {
                return Err(LinalgError::NonFiniteEntry {
                    row: idx / cols,
                    col: idx % cols,
                    value,
                });
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// All-zero matrix. Panics on an empty shape (programmer error).
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zeros() requires a nonempty shape");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// n-by-n identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build a matrix entry by entry from a closure over `(row, col)`.
    ///
    /// The closure must return finite values; this is checked in debug builds.
    pub fn from_fn<F: FnMut(usize, usize) -> f64>(rows: usize, cols: usize, mut f: F) -> Self {
        assert!(rows > 0 && cols > 0, "from_fn() requires a nonempty shape");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let value = f(i, j);
                debug_assert!(value.is_finite(), "from_fn produced {value} at ({i},{j})");
                data.push(value);
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major view of the backing buffer.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col] = value;
    }

    /// Borrow one row as a slice.
    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        debug_assert!(row < self.rows);
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Matrix product `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::ShapeMismatch {
                op: "matmul",
                a_rows: self.rows,
                a_cols: self.cols,
                b_rows: other.rows,
                b_cols: other.cols,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (l, &a_il) in a_row.iter().enumerate() {
                if a_il == 0.0 {
                    continue;
                }
                let b_row = &other.data[l * other.cols..(l + 1) * other.cols];
                for (j, &b_lj) in b_row.iter().enumerate() {
                    out_row[j] += a_il * b_lj;
                }
            }
        }
        Ok(out)
    }

    /// Entrywise sum `self + other`.
    pub fn add(&self, other: &Self) -> Result<Self, LinalgError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    /// Entrywise difference `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self, LinalgError> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Entrywise map with a pure function.
    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Entrywise absolute value.
    pub fn abs(&self) -> Self {
        self.map(f64::abs)
    }

    fn zip_with<F: Fn(f64, f64) -> f64>(
        &self,
        other: &Self,
        op: &'static str,
        f: F,
    ) -> Result<Self, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::ShapeMismatch {
                op,
                a_rows: self.rows,
                a_cols: self.cols,
                b_rows: other.rows,
                b_cols: other.cols,
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

/// Frobenius norm: square root of the sum of squared entries.
pub fn frobenius_norm(m: &DenseMatrix) -> f64 {
    m.data().iter().map(|&x| x * x).sum::<f64>().sqrt()
}

// ── SVD ─────────────────────────────────────────────────────────────────────

/// Thin singular value decomposition `m = u * diag(sigma) * v^T`.
///
/// With `d = min(rows, cols)`: `u` is `rows x d`, `sigma` has length `d` and
/// is sorted descending, `v` is `cols x d`. Both `u` and `v` have orthonormal
/// columns. Each column of `u` has its largest-magnitude entry nonnegative
/// (ties broken by the lowest row index), with the matching `v` column
/// flipped in tandem, so the decomposition is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub v: DenseMatrix,
}

/// One-sided Jacobi SVD with default threshold and sweep budget.
pub fn svd(m: &DenseMatrix) -> Result<SvdResult, LinalgError> {
    svd_with_params(m, JACOBI_MAX_SWEEPS, JACOBI_REL_TOL)
}

/// One-sided Jacobi SVD with explicit sweep budget and relative threshold.
///
/// Exposed so callers (and tests) can tighten or starve the iteration;
/// [`svd`] uses [`JACOBI_MAX_SWEEPS`] and [`JACOBI_REL_TOL`].
pub fn svd_with_params(
    m: &DenseMatrix,
    max_sweeps: usize,
    rel_tol: f64,
) -> Result<SvdResult, LinalgError> {
    if m.rows >= m.cols {
        jacobi_tall(m, max_sweeps, rel_tol)
    } else {
        // Wide matrices are handled by decomposing the transpose and swapping
        // the roles of u and v: if m^T = u' S v'^T then m = v' S u'^T.
        let t = jacobi_tall(&m.transpose(), max_sweeps, rel_tol)?;
        let mut result = SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        };
        normalize_signs(&mut result);
        Ok(result)
    }
}

/// Jacobi kernel for `rows >= cols`.
///
/// Orthogonalizes the columns of a working copy with Givens rotations while
/// accumulating them into `v`; converged column norms are the singular
/// values and the normalized columns form `u`.
fn jacobi_tall(
    m: &DenseMatrix,
    max_sweeps: usize,
    rel_tol: f64,
) -> Result<SvdResult, LinalgError> {
    let (rows, cols) = (m.rows, m.cols);
    let mut work = m.clone();
    let mut v = DenseMatrix::identity(cols);

    let mut converged = cols < 2;
    for _ in 0..max_sweeps {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let (alpha, beta, gamma) = column_moments(&work, p, q);
                let denom = (alpha * beta).sqrt();
                if denom == 0.0 || gamma.abs() <= rel_tol * denom {
                    continue;
                }
                rotated = true;
                // Closed-form Givens angle that zeroes the (p, q) correlation.
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = sign_of(zeta) / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut work, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }

    if !converged {
        return Err(LinalgError::NonConvergence {
            max_sweeps,
            off_diagonal: worst_off_diagonal(&work),
        });
    }

    // Singular values are the converged column norms, sorted descending with
    // the original column index as a stable tie-break.
    let norms: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| work.get(i, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let zero_cutoff = sigma[0] * rows.max(cols) as f64 * f64::EPSILON;

    let mut u = DenseMatrix::zeros(rows, cols);
    let mut v_sorted = DenseMatrix::zeros(cols, cols);
    let mut needs_basis: Vec<usize> = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..cols {
            v_sorted.set(i, dst, v.get(i, src));
        }
        if sigma[dst] > zero_cutoff {
            for i in 0..rows {
                u.set(i, dst, work.get(i, src) / norms[src]);
            }
        } else {
            needs_basis.push(dst);
        }
    }
    for dst in needs_basis {
        complete_column(&mut u, dst);
    }

    let mut result = SvdResult {
        u,
        sigma,
        v: v_sorted,
    };
    normalize_signs(&mut result);
    Ok(result)
}

/// Column norms-squared and cross-correlation for a Jacobi pair.
fn column_moments(m: &DenseMatrix, p: usize, q: usize) -> (f64, f64, f64) {
    let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
    for i in 0..m.rows {
        let a = m.get(i, p);
        let b = m.get(i, q);
        alpha += a * a;
        beta += b * b;
        gamma += a * b;
    }
    (alpha, beta, gamma)
}

/// Apply the rotation `(p, q) <- (c*p - s*q, s*p + c*q)` to two columns.
fn rotate_columns(m: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.rows {
        let a = m.get(i, p);
        let b = m.get(i, q);
        m.set(i, p, c * a - s * b);
        m.set(i, q, s * a + c * b);
    }
}

/// Worst remaining relative column-pair correlation, for failure reports.
fn worst_off_diagonal(m: &DenseMatrix) -> f64 {
    let mut worst: f64 = 0.0;
    for p in 0..m.cols - 1 {
        for q in p + 1..m.cols {
            let (alpha, beta, gamma) = column_moments(m, p, q);
            let denom = (alpha * beta).sqrt();
            if denom > 0.0 {
                worst = worst.max(gamma.abs() / denom);
            }
        }
    }
    worst
}

/// `+1` for nonnegative values, `-1` otherwise (so `sign_of(0) == 1`).
fn sign_of(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Fill a left-singular column whose singular value vanished.
///
/// Picks the canonical basis vector whose projection onto the complement of
/// the columns filled so far is largest (lowest index on ties), orthogonalizes
/// it against them, and normalizes. For an all-zero input this reproduces the
/// leading columns of the identity.
fn complete_column(u: &mut DenseMatrix, col: usize) {
    let rows = u.rows();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for candidate in 0..rows {
        let mut vec = vec![0.0; rows];
        vec[candidate] = 1.0;
        for other in 0..u.cols() {
            if other == col {
                continue;
            }
            // Skip columns not yet filled: they are still all-zero.
            let dot: f64 = (0..rows).map(|i| u.get(i, other) * vec[i]).sum();
            if dot != 0.0 {
                for (i, entry) in vec.iter_mut().enumerate() {
                    *entry -= dot * u.get(i, other);
                }
            }
        }
        let norm_sq: f64 = vec.iter().map(|x| x * x).sum();
        if best.as_ref().map_or(true, |(b, _)| norm_sq > *b) {
            best = Some((norm_sq, vec));
        }
    }
    let (norm_sq, vec) = best.expect("matrix has at least one row");
    let norm = norm_sq.sqrt();
    for (i, entry) in vec.iter().enumerate() {
        u.set(i, col, entry / norm);
    }
}

/// Make each `u` column's largest-magnitude entry nonnegative, flipping the
/// paired `v` column so the product is unchanged. Ties pick the lowest index.
fn normalize_signs(result: &mut SvdResult) {
    for j in 0..result.sigma.len() {
        let mut pivot = 0;
        let mut pivot_abs = result.u.get(0, j).abs();
        for i in 1..result.u.rows() {
            let a = result.u.get(i, j).abs();
            if a > pivot_abs {
                pivot = i;
                pivot_abs = a;
            }
        }
        if result.u.get(pivot, j) < 0.0 {
            for i in 0..result.u.rows() {
                let x = result.u.get(i, j);
                result.u.set(i, j, -x);
            }
            for i in 0..result.v.rows() {
                let x = result.v.get(i, j);
                result.v.set(i, j, -x);
            }
        }
    }
}

// ── Rank-k factors ──────────────────────────────────────────────────────────

/// Split the best rank-k approximation into two thin factors.
///
/// Returns `(a, b)` with `a` of shape `rows x k` and `b` of shape `cols x k`,
/// where column `j` is the corresponding singular vector scaled by
/// `sqrt(sigma_j)`. Their product `a * b^T` is the closest rank-k matrix in
/// Frobenius norm, and distributing `sqrt(sigma)` over both sides keeps the
/// two factors on the same numeric scale for storage rounding.
pub fn rank_k_factors(
    m: &DenseMatrix,
    k: usize,
) -> Result<(DenseMatrix, DenseMatrix), LinalgError> {
    let max = m.rows().min(m.cols());
    if k == 0 || k > max {
        return Err(LinalgError::InvalidRank {
            k,
            max,
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let decomp = svd(m)?;
    let a = DenseMatrix::from_fn(m.rows(), k, |i, j| {
        decomp.sigma[j].sqrt() * decomp.u.get(i, j)
    });
    let b = DenseMatrix::from_fn(m.cols(), k, |i, j| {
        decomp.sigma[j].sqrt() * decomp.v.get(i, j)
    });
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_near(a: f64, b: f64, tol: f64, msg: &str) {
        assert!((a - b).abs() <= tol, "{msg}: {a} vs {b} (tol {tol})");
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn reconstruct(svd: &SvdResult) -> DenseMatrix {
        let d = svd.sigma.len();
        DenseMatrix::from_fn(svd.u.rows(), svd.v.rows(), |i, j| {
            (0..d)
                .map(|l| svd.u.get(i, l) * svd.sigma[l] * svd.v.get(j, l))
                .sum()
        })
    }

    fn assert_orthonormal_columns(m: &DenseMatrix, tol: f64) {
        for a in 0..m.cols() {
            for b in a..m.cols() {
                let dot: f64 = (0..m.rows()).map(|i| m.get(i, a) * m.get(i, b)).sum();
                let expected = if a == b { 1.0 } else { 0.0 };
                assert_near(dot, expected, tol, &format!("column pair ({a},{b})"));
            }
        }
    }

    // ── Construction ────────────────────────────────────────────────────

    #[test]
    fn new_rejects_empty_shapes() {
        assert_eq!(
            DenseMatrix::new(0, 3, vec![]),
            Err(LinalgError::EmptyMatrix { rows: 0, cols: 3 })
        );
        assert_eq!(
            DenseMatrix::new(2, 0, vec![]),
            Err(LinalgError::EmptyMatrix { rows: 2, cols: 0 })
        );
    }

    #[test]
    fn new_rejects_wrong_buffer_length() {
        assert_eq!(
            DenseMatrix::new(2, 2, vec![1.0, 2.0, 3.0]),
            Err(LinalgError::DataLengthMismatch {
                rows: 2,
                cols: 2,
                len: 3
            })
        );
    }

    #[test]
    fn new_rejects_non_finite_entries() {
        let err = DenseMatrix::new(2, 2, vec![1.0, 2.0, f64::NAN, 4.0]).unwrap_err();
        match err {
            LinalgError::NonFiniteEntry { row, col, .. } => {
                assert_eq!((row, col), (1, 0));
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(DenseMatrix::new(1, 2, vec![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let m = random_matrix(4, 7, 3);
        assert_eq!(m.transpose().transpose(), m);
    }

    #[test]
    fn matmul_small_known_product() {
        let a = DenseMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = DenseMatrix::new(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_shapes() {
        let a = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::zeros(2, 3);
        assert!(matches!(
            a.matmul(&b),
            Err(LinalgError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    // ── Frobenius norm ──────────────────────────────────────────────────

    #[test]
    fn frobenius_norm_of_three_four_row() {
        let m = DenseMatrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(frobenius_norm(&m), 5.0);
    }

    #[test]
    fn frobenius_norm_of_zero_matrix() {
        assert_eq!(frobenius_norm(&DenseMatrix::zeros(3, 5)), 0.0);
    }

    // ── SVD: fixed cases ────────────────────────────────────────────────

    #[test]
    fn svd_of_diagonal_matrix() {
        let m = DenseMatrix::new(2, 2, vec![3.0, 0.0, 0.0, 2.0]).unwrap();
        let result = svd(&m).unwrap();
        assert_eq!(result.sigma, vec![3.0, 2.0]);
        assert_eq!(result.u, DenseMatrix::identity(2));
        assert_eq!(result.v, DenseMatrix::identity(2));
    }

    #[test]
    fn svd_of_zero_matrix_uses_identity_convention() {
        let m = DenseMatrix::zeros(3, 2);
        let result = svd(&m).unwrap();
        assert_eq!(result.sigma, vec![0.0, 0.0]);
        // u is the first two columns of the 3x3 identity, v the full 2x2.
        for i in 0..3 {
            for j in 0..2 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert_eq!(result.u.get(i, j), expected);
            }
        }
        assert_eq!(result.v, DenseMatrix::identity(2));
    }

    #[test]
    fn svd_sorts_singular_values_descending() {
        let m = DenseMatrix::new(3, 3, vec![1.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 3.0]).unwrap();
        let result = svd(&m).unwrap();
        assert_eq!(result.sigma, vec![5.0, 3.0, 1.0]);
    }

    #[test]
    fn svd_sign_convention_pins_largest_entry_positive() {
        // -4 at (0,0): the singular vector pair would naturally come out
        // negative; the convention must flip both u and v together.
        let m = DenseMatrix::new(2, 2, vec![-4.0, 0.0, 0.0, 1.0]).unwrap();
        let result = svd(&m).unwrap();
        assert_eq!(result.sigma, vec![4.0, 1.0]);
        assert!(result.u.get(0, 0) > 0.0);
        assert_near(result.v.get(0, 0), -1.0, 1e-12, "v must carry the sign");
        let rec = reconstruct(&result);
        assert_near(rec.get(0, 0), -4.0, 1e-12, "reconstruction");
    }

    // ── SVD: randomized invariants ──────────────────────────────────────

    #[test]
    fn svd_reconstructs_random_matrices() {
        for (rows, cols, seed) in [(5usize, 3usize, 1u64), (3, 5, 2), (6, 6, 3), (1, 4, 4), (7, 1, 5)] {
            let m = random_matrix(rows, cols, seed);
            let result = svd(&m).unwrap();
            let err = frobenius_norm(&m.sub(&reconstruct(&result)).unwrap());
            assert!(
                err <= 1e-10 * frobenius_norm(&m).max(1.0),
                "{rows}x{cols} seed {seed}: reconstruction error {err}"
            );
            assert_orthonormal_columns(&result.u, 1e-10);
            assert_orthonormal_columns(&result.v, 1e-10);
            for w in result.sigma.windows(2) {
                assert!(w[0] >= w[1], "sigma not descending: {:?}", result.sigma);
            }
        }
    }

    #[test]
    fn svd_handles_rank_deficient_input() {
        // Two identical columns next to a zero column: rank 1.
        let m = DenseMatrix::new(4, 3, vec![
            1.0, 1.0, 0.0,
            2.0, 2.0, 0.0,
            3.0, 3.0, 0.0,
            4.0, 4.0, 0.0,
        ])
        .unwrap();
        let result = svd(&m).unwrap();
        assert_near(result.sigma[0], (60.0f64).sqrt(), 1e-10, "sigma_0");
        assert!(result.sigma[1].abs() <= 1e-10);
        assert!(result.sigma[2].abs() <= 1e-10);
        assert_orthonormal_columns(&result.u, 1e-10);
        assert_orthonormal_columns(&result.v, 1e-10);
    }

    #[test]
    fn svd_is_deterministic() {
        let m = random_matrix(8, 5, 99);
        let a = svd(&m).unwrap();
        let b = svd(&m).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn svd_with_starved_sweep_budget_reports_non_convergence() {
        let m = random_matrix(6, 6, 11);
        let err = svd_with_params(&m, 0, JACOBI_REL_TOL).unwrap_err();
        match err {
            LinalgError::NonConvergence {
                max_sweeps,
                off_diagonal,
            } => {
                assert_eq!(max_sweeps, 0);
                assert!(off_diagonal > 0.0, "residual must be reported");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    // ── Rank-k factors ──────────────────────────────────────────────────

    #[test]
    fn rank_one_factors_of_diagonal_matrix() {
        let m = DenseMatrix::new(2, 2, vec![3.0, 0.0, 0.0, 2.0]).unwrap();
        let (a, b) = rank_k_factors(&m, 1).unwrap();
        let s = 3.0f64.sqrt();
        assert_eq!(a.data(), &[s, 0.0]);
        assert_eq!(b.data(), &[s, 0.0]);
    }

    #[test]
    fn full_rank_factors_reconstruct_input() {
        let m = random_matrix(5, 4, 21);
        let (a, b) = rank_k_factors(&m, 4).unwrap();
        let err = frobenius_norm(&m.sub(&a.matmul(&b.transpose()).unwrap()).unwrap());
        assert!(err <= 1e-6, "full-rank reconstruction error {err}");
    }

    #[test]
    fn rank_out_of_range_is_rejected() {
        let m = DenseMatrix::zeros(4, 3);
        assert!(matches!(
            rank_k_factors(&m, 0),
            Err(LinalgError::InvalidRank { k: 0, max: 3, .. })
        ));
        assert!(matches!(
            rank_k_factors(&m, 4),
            Err(LinalgError::InvalidRank { k: 4, max: 3, .. })
        ));
    }

    #[test]
    fn factor_columns_share_the_sqrt_sigma_scale() {
        let m = random_matrix(6, 4, 33);
        let decomp = svd(&m).unwrap();
        let (a, b) = rank_k_factors(&m, 2).unwrap();
        for j in 0..2 {
            let a_norm: f64 = (0..6).map(|i| a.get(i, j).powi(2)).sum::<f64>().sqrt();
            let b_norm: f64 = (0..4).map(|i| b.get(i, j).powi(2)).sum::<f64>().sqrt();
            assert_near(a_norm, decomp.sigma[j].sqrt(), 1e-10, "left column norm");
            assert_near(b_norm, decomp.sigma[j].sqrt(), 1e-10, "right column norm");
        }
    }
}
