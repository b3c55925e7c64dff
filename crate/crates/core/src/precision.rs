//! Storage precision for factor matrices.
//!
//! Factors are computed in `f64` and rounded to a storage precision before
//! they are kept, serialized, or used to update a residual. Half precision
//! is the default; single precision is available for comparison runs.

use half::f16;

/// Numeric format used to store factor entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// IEEE 754 binary16 (2 bytes per entry). Default.
    Half,
    /// IEEE 754 binary32 (4 bytes per entry).
    Single,
}

impl Precision {
    /// Bits occupied by one stored factor entry.
    pub fn bits_per_entry(self) -> u64 {
        match self {
            Precision::Half => 16,
            Precision::Single => 32,
        }
    }

    /// Bytes occupied by one stored factor entry.
    pub fn bytes_per_entry(self) -> usize {
        match self {
            Precision::Half => 2,
            Precision::Single => 4,
        }
    }

    /// Round a value to this precision and return it widened back to `f64`.
    ///
    /// Values beyond the target format's finite range saturate to the largest
    /// finite value instead of overflowing to infinity, so rounding a finite
    /// input always yields a finite output.
    pub fn round(self, value: f64) -> f64 {
        match self {
            Precision::Half => {
                let max = f64::from(f16::MAX);
                f64::from(f16::from_f64(value.clamp(-max, max)))
            }
            Precision::Single => {
                let clamped = value.clamp(f64::from(f32::MIN), f64::from(f32::MAX));
                f64::from(clamped as f32)
            }
        }
    }

    /// Encode one already-rounded value into little-endian storage bytes.
    pub fn encode(self, value: f64, out: &mut Vec<u8>) {
        match self {
            Precision::Half => out.extend_from_slice(&f16::from_f64(value).to_le_bytes()),
            Precision::Single => out.extend_from_slice(&(value as f32).to_le_bytes()),
        }
    }

    /// Decode one value from little-endian storage bytes.
    ///
    /// `bytes` must be exactly [`Self::bytes_per_entry`] long.
    pub fn decode(self, bytes: &[u8]) -> f64 {
        match self {
            Precision::Half => f64::from(f16::from_le_bytes([bytes[0], bytes[1]])),
            Precision::Single => {
                f64::from(f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]))
            }
        }
    }
}

impl Default for Precision {
    fn default() -> Self {
        Precision::Half
    }
}
