//! The bundle a decomposition run produces: configuration, per-weight block
//! stacks, per-weight scales, and (once sorted) the universal block order.
//!
//! This is the unit the container format serializes and the loader consumes.

use crate::avd::{ResidualBlock, WeightId, WeightStack};
use crate::precision::Precision;
use crate::scaling::ScalingVector;
use crate::stack::{BlockRef, UniversalStack};

/// Where the reference model's weights came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightSource {
    /// Generated from the run seed; reproducible from the config alone.
    Seeded,
    /// Loaded from a network weight file; the path is kept so readers can
    /// report where the model came from.
    File(String),
}

/// Where the calibration batch came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CalibSource {
    /// Generated from the run seed; reproducible from the config alone.
    Seeded,
    /// Loaded from a matrix file; the path is kept so readers can report
    /// where the batch came from.
    File(String),
}

/// Shape of the reference network: `layers` residual blocks of
/// `maps_per_layer` square linear maps over a `hidden`-wide stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub layers: usize,
    pub maps_per_layer: usize,
    pub hidden: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            layers: 4,
            maps_per_layer: 2,
            hidden: 64,
        }
    }
}

/// Full configuration of one decomposition run, echoed into the container.
#[derive(Debug, Clone, PartialEq)]
pub struct RunParams {
    /// Master seed; network, calibration, and shuffle seeds derive from it.
    pub seed: u64,
    /// Residual blocks per weight.
    pub n_iters: usize,
    /// Rank of each block's factors.
    pub k: usize,
    /// Storage precision for factor entries.
    pub precision: Precision,
    pub net: NetShape,
    pub weight_source: WeightSource,
    /// Calibration rows used for scaling and final evaluation.
    pub calib_rows: usize,
    /// Leading calibration rows used while measuring block importance.
    pub sort_rows: usize,
    pub calib_source: CalibSource,
}

impl Default for RunParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_iters: 16,
            k: 16,
            precision: Precision::Half,
            net: NetShape::default(),
            weight_source: WeightSource::Seeded,
            calib_rows: 256,
            sort_rows: 32,
            calib_source: CalibSource::Seeded,
        }
    }
}

impl RunParams {
    /// Reject configurations no pipeline stage could satisfy.
    pub fn validate(&self) -> Result<(), String> {
        if self.n_iters == 0 {
            return Err("n_iters must be at least 1".to_string());
        }
        if self.k == 0 {
            return Err("k must be at least 1".to_string());
        }
        if self.k > self.net.hidden {
            return Err(format!(
                "k = {} exceeds the hidden dimension {}",
                self.k, self.net.hidden
            ));
        }
        if self.net.layers == 0 || self.net.maps_per_layer == 0 || self.net.hidden == 0 {
            return Err("network shape dimensions must be at least 1".to_string());
        }
        if self.sort_rows == 0 || self.calib_rows == 0 {
            return Err("calibration batches must be nonempty".to_string());
        }
        if self.sort_rows > self.calib_rows {
            return Err(format!(
                "sort_rows = {} exceeds calib_rows = {}",
                self.sort_rows, self.calib_rows
            ));
        }
        Ok(())
    }
}

/// Everything a run produces, keyed consistently by [`WeightId`].
///
/// `stacks` and `scalings` are parallel vectors in canonical (ascending)
/// weight order; `order` is present once a sort has run.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifacts {
    pub params: RunParams,
    pub stacks: Vec<WeightStack>,
    pub scalings: Vec<(WeightId, ScalingVector)>,
    pub order: Option<UniversalStack>,
}

impl ModelArtifacts {
    pub fn weight_ids(&self) -> impl Iterator<Item = &WeightId> {
        self.stacks.iter().map(|s| &s.weight)
    }

    pub fn stack(&self, id: &WeightId) -> Option<&WeightStack> {
        self.stacks.iter().find(|s| &s.weight == id)
    }

    pub fn scaling(&self, id: &WeightId) -> Option<&ScalingVector> {
        self.scalings
            .iter()
            .find(|(sid, _)| sid == id)
            .map(|(_, s)| s)
    }

    pub fn block(&self, r: &BlockRef) -> Option<&ResidualBlock> {
        self.stack(&r.weight).and_then(|s| s.block(r.iteration))
    }

    /// Block references in storage order: the universal order when sorted,
    /// otherwise canonical weight-major, iteration-ascending order.
    pub fn stored_refs(&self) -> Vec<BlockRef> {
        match &self.order {
            Some(universal) => universal.order.clone(),
            None => self
                .stacks
                .iter()
                .flat_map(|s| {
                    let weight = s.weight.clone();
                    (1..=s.n_iters()).map(move |iteration| BlockRef {
                        weight: weight.clone(),
                        iteration,
                    })
                })
                .collect(),
        }
    }

    /// Storage bits of each block along a reference sequence.
    pub fn block_bits_along(&self, refs: &[BlockRef]) -> Vec<u64> {
        refs.iter()
            .map(|r| {
                self.block(r)
                    .expect("reference resolves within these artifacts")
                    .size_bits
            })
            .collect()
    }

    /// Total payload bytes across all blocks (each block rounded up to
    /// whole bytes).
    pub fn total_block_bytes(&self) -> u64 {
        self.stacks
            .iter()
            .flat_map(|s| &s.blocks)
            .map(|b| b.size_bits.div_ceil(8))
            .sum()
    }
}
