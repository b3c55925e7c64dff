//! Sign extraction and one-bit packing.
//!
//! A weight matrix splits into an elementwise sign matrix and a nonnegative
//! magnitude matrix. The signs cost one bit per entry: packed row-major,
//! least-significant bit first within each byte, `1` for `+1` and `0` for
//! `-1`, with any trailing pad bits in the final byte held at zero so a
//! packed buffer has exactly one valid encoding.

use thiserror::Error;

use crate::linalg::DenseMatrix;

/// Errors produced when interpreting packed sign buffers.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum PackError {
    /// The buffer cannot encode the claimed shape: wrong length or nonzero
    /// padding bits.
    #[error("malformed sign buffer for {rows}x{cols}: {detail}")]
    MalformedBuffer {
        rows: usize,
        cols: usize,
        detail: String,
    },

    /// A sign matrix was applied to magnitudes of a different shape.
    #[error("sign shape {sign_rows}x{sign_cols} does not match value shape {value_rows}x{value_cols}")]
    ShapeMismatch {
        sign_rows: usize,
        sign_cols: usize,
        value_rows: usize,
        value_cols: usize,
    },
}

// ── Unpacked signs ──────────────────────────────────────────────────────────

/// Dense matrix of `+1` / `-1` entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignMatrix {
    rows: usize,
    cols: usize,
    signs: Vec<i8>,
}

impl SignMatrix {
    /// Wrap a row-major buffer of `+1` / `-1` values.
    pub fn new(rows: usize, cols: usize, signs: Vec<i8>) -> Self {
        assert!(rows > 0 && cols > 0, "sign matrix must be nonempty");
        assert_eq!(signs.len(), rows * cols, "sign buffer length mismatch");
        assert!(
            signs.iter().all(|&s| s == 1 || s == -1),
            "sign entries must be +1 or -1"
        );
        Self { rows, cols, signs }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.signs[row * self.cols + col]
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    /// Count of `+1` entries (equals the number of set bits once packed).
    pub fn positive_count(&self) -> usize {
        self.signs.iter().filter(|&&s| s == 1).count()
    }
}

// ── Packed signs ────────────────────────────────────────────────────────────

/// Bit-packed sign matrix: `ceil(rows*cols/8)` bytes, pad bits zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSignMatrix {
    rows: usize,
    cols: usize,
    bytes: Vec<u8>,
}

impl PackedSignMatrix {
    /// Exact byte length of a packed buffer for the given shape.
    pub fn packed_len(rows: usize, cols: usize) -> usize {
        (rows * cols).div_ceil(8)
    }

    /// Validate and adopt a raw packed buffer.
    ///
    /// Rejects buffers whose length differs from `ceil(rows*cols/8)` and
    /// buffers with any nonzero bit beyond the last matrix entry, so every
    /// accepted buffer is the canonical encoding of its sign matrix.
    pub fn from_bytes(rows: usize, cols: usize, bytes: Vec<u8>) -> Result<Self, PackError> {
        if rows == 0 || cols == 0 {
            return Err(PackError::MalformedBuffer {
                rows,
                cols,
                detail: "shape must be nonempty".to_string(),
            });
        }
        let expected = Self::packed_len(rows, cols);
        if bytes.len() != expected {
            return Err(PackError::MalformedBuffer {
                rows,
                cols,
                detail: format!("expected {expected} bytes, got {}", bytes.len()),
            });
        }
        let used_bits = rows * cols;
        let pad_bits = expected * 8 - used_bits;
        if pad_bits > 0 {
            let last = bytes[expected - 1];
            let mask = !0u8 << (8 - pad_bits);
            if last & mask != 0 {
                return Err(PackError::MalformedBuffer {
                    rows,
                    cols,
                    detail: format!("nonzero padding bits in final byte {last:#04x}"),
                });
            }
        }
        Ok(Self { rows, cols, bytes })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Sign at a row-major position: `+1` for a set bit, `-1` for clear.
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> i8 {
        let idx = row * self.cols + col;
        if self.bytes[idx / 8] >> (idx % 8) & 1 == 1 {
            1
        } else {
            -1
        }
    }
}

// ── Operations ──────────────────────────────────────────────────────────────

/// Split a matrix into elementwise signs and magnitudes.
///
/// Zero maps to `+1`, so `signs (x) magnitudes` reproduces the input exactly
/// and the magnitude matrix is entrywise nonnegative.
pub fn sign_split(w: &DenseMatrix) -> (SignMatrix, DenseMatrix) {
    let signs: Vec<i8> = w
        .data()
        .iter()
        .map(|&x| if x >= 0.0 { 1 } else { -1 })
        .collect();
    (
        SignMatrix {
            rows: w.rows(),
            cols: w.cols(),
            signs,
        },
        w.abs(),
    )
}

/// Pack a sign matrix into its canonical bit buffer.
pub fn pack(signs: &SignMatrix) -> PackedSignMatrix {
    let mut bytes = vec![0u8; PackedSignMatrix::packed_len(signs.rows, signs.cols)];
    for (idx, &s) in signs.signs.iter().enumerate() {
        if s == 1 {
            bytes[idx / 8] |= 1 << (idx % 8);
        }
    }
    PackedSignMatrix {
        rows: signs.rows,
        cols: signs.cols,
        bytes,
    }
}

/// Expand a packed buffer back into an explicit sign matrix.
pub fn unpack(packed: &PackedSignMatrix) -> SignMatrix {
    let signs: Vec<i8> = (0..packed.rows * packed.cols)
        .map(|idx| {
            if packed.bytes[idx / 8] >> (idx % 8) & 1 == 1 {
                1
            } else {
                -1
            }
        })
        .collect();
    SignMatrix {
        rows: packed.rows,
        cols: packed.cols,
        signs,
    }
}

/// Elementwise product of packed signs and a value matrix.
pub fn apply_signs(
    packed: &PackedSignMatrix,
    values: &DenseMatrix,
) -> Result<DenseMatrix, PackError> {
    if packed.rows != values.rows() || packed.cols != values.cols() {
        return Err(PackError::ShapeMismatch {
            sign_rows: packed.rows,
            sign_cols: packed.cols,
            value_rows: values.rows(),
            value_cols: values.cols(),
        });
    }
    Ok(DenseMatrix::from_fn(values.rows(), values.cols(), |i, j| {
        f64::from(packed.get(i, j)) * values.get(i, j)
    }))
}
