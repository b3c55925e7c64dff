//! Activation-aware channel scaling.
//!
//! Weight rows that feed busy input channels matter more than rows that feed
//! quiet ones. To make the decomposition spend its capacity accordingly, each
//! input channel gets a scale equal to the L2 norm of its activation column
//! over a calibration batch; the weight is stored pre-multiplied by those
//! scales and the inverse is folded into the input at inference time, so the
//! layer's output is unchanged.

use thiserror::Error;

use crate::linalg::DenseMatrix;

/// Floor factor that keeps scales strictly positive when a channel is silent.
const ZERO_CHANNEL_FLOOR: f64 = 1e-8;

/// Errors produced when building or applying scale vectors.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ScalingError {
    /// The scale vector length does not match the dimension it multiplies.
    #[error("scaling length {got} does not match dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A scale entry was zero, negative, or non-finite and therefore cannot
    /// be inverted at inference time.
    #[error("scale entry {index} is not strictly positive and finite: {value}")]
    InvalidScale { index: usize, value: f64 },
}

/// Strictly positive per-channel scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingVector {
    values: Vec<f64>,
}

impl ScalingVector {
    /// Wrap a raw vector of scales, which must be finite and strictly positive.
    pub fn new(values: Vec<f64>) -> Result<Self, ScalingError> {
        if values.is_empty() {
            return Err(ScalingError::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() || value <= 0.0 {
                return Err(ScalingError::InvalidScale { index, value });
            }
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Entrywise reciprocal; strictly positive in, strictly positive out.
    pub fn invert(&self) -> Self {
        Self {
            values: self.values.iter().map(|&v| 1.0 / v).collect(),
        }
    }
}

/// Per-channel L2 norms of a calibration activation matrix.
///
/// `activations` has one row per calibration sample and one column per input
/// channel. Silent channels would produce zero scales, so every entry is
/// clamped below at `1e-8 * max_j s_j` (or plain `1e-8` when the whole batch
/// is zero), keeping the result safely invertible.
pub fn compute_scaling(activations: &DenseMatrix) -> ScalingVector {
    let mut norms: Vec<f64> = (0..activations.cols())
        .map(|j| {
            (0..activations.rows())
                .map(|i| activations.get(i, j).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let floor = if max > 0.0 {
        ZERO_CHANNEL_FLOOR * max
    } else {
        ZERO_CHANNEL_FLOOR
    };
    for n in &mut norms {
        if *n < floor {
            *n = floor;
        }
    }
    ScalingVector { values: norms }
}

/// Fold scales into a weight: row `i` of the result is `s_i` times row `i`
/// of `weight` (i.e. `diag(s) * weight`).
pub fn apply_scaling(
    weight: &DenseMatrix,
    scales: &ScalingVector,
) -> Result<DenseMatrix, ScalingError> {
    if scales.len() != weight.rows() {
        return Err(ScalingError::DimensionMismatch {
            expected: weight.rows(),
            got: scales.len(),
        });
    }
    Ok(DenseMatrix::from_fn(weight.rows(), weight.cols(), |i, j| {
        scales.values[i] * weight.get(i, j)
    }))
}

/// Inference-time product `(x * diag(1/s)) * w_scaled`.
///
/// When `w_scaled == apply_scaling(w, s)`, this equals `x * w` up to
/// floating-point rounding: the scales cancel between input and weight.
pub fn scaled_product(
    x: &DenseMatrix,
    scales: &ScalingVector,
    w_scaled: &DenseMatrix,
) -> Result<DenseMatrix, ScalingError> {
    if scales.len() != x.cols() {
        return Err(ScalingError::DimensionMismatch {
            expected: x.cols(),
            got: scales.len(),
        });
    }
    if x.cols() != w_scaled.rows() {
        return Err(ScalingError::DimensionMismatch {
            expected: x.cols(),
            got: w_scaled.rows(),
        });
    }
    let descaled = DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| {
        x.get(i, j) / scales.values[j]
    });
    Ok(descaled
        .matmul(w_scaled)
        .expect("shapes validated above"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frobenius_norm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn identity_activations_give_unit_scales() {
        let s = compute_scaling(&DenseMatrix::identity(2));
        assert_eq!(s.values(), &[1.0, 1.0]);
    }

    #[test]
    fn silent_channel_is_clamped_to_relative_floor() {
        let x = DenseMatrix::new(2, 2, vec![3.0, 0.0, 4.0, 0.0]).unwrap();
        let s = compute_scaling(&x);
        assert_eq!(s.values()[0], 5.0);
        assert_eq!(s.values()[1], 1e-8 * 5.0);
    }

    #[test]
    fn all_zero_batch_falls_back_to_absolute_floor() {
        let s = compute_scaling(&DenseMatrix::zeros(4, 3));
        assert_eq!(s.values(), &[1e-8, 1e-8, 1e-8]);
    }

    #[test]
    fn scales_match_naive_column_norms() {
        let x = random_matrix(16, 8, 40);
        let s = compute_scaling(&x);
        for j in 0..8 {
            let mut sum = 0.0;
            for i in 0..16 {
                sum += x.get(i, j) * x.get(i, j);
            }
            assert!(
                (s.values()[j] - sum.sqrt()).abs() <= 1e-12,
                "column {j}: {} vs {}",
                s.values()[j],
                sum.sqrt()
            );
        }
    }

    #[test]
    fn non_positive_scales_are_rejected() {
        assert_eq!(
            ScalingVector::new(vec![1.0, 0.0]),
            Err(ScalingError::InvalidScale {
                index: 1,
                value: 0.0
            })
        );
        assert!(ScalingVector::new(vec![-1.0]).is_err());
        assert!(ScalingVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn unit_scales_leave_weight_unchanged() {
        let w = random_matrix(5, 3, 41);
        let s = ScalingVector::new(vec![1.0; 5]).unwrap();
        assert_eq!(apply_scaling(&w, &s).unwrap(), w);
    }

    #[test]
    fn apply_scaling_multiplies_rows() {
        let w = DenseMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = ScalingVector::new(vec![2.0, 3.0]).unwrap();
        let scaled = apply_scaling(&w, &s).unwrap();
        assert_eq!(scaled.data(), &[2.0, 4.0, 9.0, 12.0]);
    }

    #[test]
    fn apply_scaling_rejects_wrong_length() {
        let w = DenseMatrix::zeros(3, 2);
        let s = ScalingVector::new(vec![1.0, 2.0]).unwrap();
        assert_eq!(
            apply_scaling(&w, &s),
            Err(ScalingError::DimensionMismatch {
                expected: 3,
                got: 2
            })
        );
    }

    #[test]
    fn scaled_product_cancels_the_scales() {
        let x = random_matrix(6, 4, 42);
        let w = random_matrix(4, 5, 43);
        let s = compute_scaling(&x);
        let w_scaled = apply_scaling(&w, &s).unwrap();
        let direct = x.matmul(&w).unwrap();
        let via_scales = scaled_product(&x, &s, &w_scaled).unwrap();
        let err = frobenius_norm(&direct.sub(&via_scales).unwrap());
        assert!(
            err <= 1e-10 * frobenius_norm(&direct).max(1.0),
            "scale cancellation error {err}"
        );
    }

    #[test]
    fn scaled_product_matches_triple_loop_oracle() {
        let x = random_matrix(3, 4, 11);
        let w_scaled = random_matrix(4, 2, 12);
        let s = ScalingVector::new(vec![0.5, 2.0, 1.5, 4.0]).unwrap();
        let got = scaled_product(&x, &s, &w_scaled).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut expect = 0.0;
                for l in 0..4 {
                    expect += x.get(i, l) / s.values()[l] * w_scaled.get(l, j);
                }
                assert!(
                    (got.get(i, j) - expect).abs() <= 1e-12,
                    "entry ({i},{j}): {} vs {expect}",
                    got.get(i, j)
                );
            }
        }
    }

    #[test]
    fn invert_then_apply_round_trips() {
        let w = random_matrix(6, 3, 44);
        let s = ScalingVector::new(vec![0.25, 3.0, 7.5, 0.01, 2.0, 1.0]).unwrap();
        let back = apply_scaling(&apply_scaling(&w, &s).unwrap(), &s.invert()).unwrap();
        let err = frobenius_norm(&w.sub(&back).unwrap());
        assert!(err <= 1e-12 * frobenius_norm(&w), "round-trip error {err}");
    }

    #[test]
    fn appending_rows_never_shrinks_scales() {
        for seed in 0..20u64 {
            let x = random_matrix(8, 5, seed);
            let mut extended = Vec::from(x.data());
            let extra = random_matrix(3, 5, seed + 1000);
            extended.extend_from_slice(extra.data());
            let x_ext = DenseMatrix::new(11, 5, extended).unwrap();
            let s = compute_scaling(&x);
            let s_ext = compute_scaling(&x_ext);
            for j in 0..5 {
                assert!(
                    s_ext.values()[j] >= s.values()[j] - 1e-12,
                    "seed {seed} column {j} shrank"
                );
            }
        }
    }
}
