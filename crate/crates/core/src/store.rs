//! Binary container format for decomposition artifacts (format v1).
//!
//! One file carries the run configuration, every weight's scales, every
//! residual block, and — once sorted — the universal load order. Blocks are
//! stored in load order so a byte budget corresponds to one contiguous file
//! range, and a record-offset index in the trailer makes partial loads
//! possible without scanning. See `docs/FORMAT.md` for the byte-level layout
//! and a hex dump.
//!
//! Serialization is deterministic: the same artifacts always produce the
//! same bytes. Deserialization validates everything it touches and returns
//! typed errors — it must never panic, whatever the input bytes are.

use std::fs;
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;

use thiserror::Error;

use crate::artifacts::{CalibSource, ModelArtifacts, NetShape, RunParams, WeightSource};
use crate::avd::{block_bits, ResidualBlock, WeightId, WeightStack};
use crate::linalg::DenseMatrix;
use crate::precision::Precision;
use crate::scaling::ScalingVector;
use crate::signpack::PackedSignMatrix;
use crate::stack::{verify_order, BlockRef, SortStrategy, UniversalStack};

/// File magic, first four bytes of every container.
pub const MAGIC: [u8; 4] = *b"BSTK";
/// Reversed magic closing the trailer.
pub const END_MAGIC: [u8; 4] = *b"KTSB";
/// Little-endian marker value; a byte-swapped reader sees 0x3412.
pub const ENDIAN_MARKER: u16 = 0x1234;
/// Current format version.
pub const FORMAT_VERSION: u16 = 1;

/// Errors produced by container reading and writing.
#[derive(Debug, Error)]
pub enum StoreError {
    /// Underlying filesystem or stream failure.
    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),

    /// The stream does not start with the container magic.
    #[error("bad magic {found:02x?}, expected {MAGIC:02x?}")]
    BadMagic { found: [u8; 4] },

    /// The stream uses a format version this build does not speak.
    #[error("unsupported format version {found}, expected {FORMAT_VERSION}")]
    VersionMismatch { found: u16 },

    /// A structurally invalid field at the given stream offset.
    #[error("corrupt record at offset {offset}: {detail}")]
    CorruptRecord { offset: u64, detail: String },

    /// The stream ended before a field could be read.
    #[error("truncated stream at offset {offset}: needed {needed} more bytes")]
    TruncatedStream { offset: u64, needed: u64 },

    /// A partial-load range does not fit the container's block count.
    #[error("block range {from}..{to} out of bounds for {len} blocks")]
    RangeOutOfBounds { from: usize, to: usize, len: usize },
}

fn corrupt(offset: u64, detail: impl Into<String>) -> StoreError {
    StoreError::CorruptRecord {
        offset,
        detail: detail.into(),
    }
}

// ── Enum codes ──────────────────────────────────────────────────────────────

fn precision_code(p: Precision) -> u8 {
    match p {
        Precision::Half => 0,
        Precision::Single => 1,
    }
}

fn decode_precision(code: u8, offset: u64) -> Result<Precision, StoreError> {
    match code {
        0 => Ok(Precision::Half),
        1 => Ok(Precision::Single),
        other => Err(corrupt(offset, format!("unknown precision code {other}"))),
    }
}

fn strategy_code(s: Option<SortStrategy>) -> u8 {
    match s {
        None => 0,
        Some(SortStrategy::Average) => 1,
        Some(SortStrategy::Greedy) => 2,
        Some(SortStrategy::Random) => 3,
    }
}

fn decode_strategy(code: u8, offset: u64) -> Result<Option<SortStrategy>, StoreError> {
    match code {
        0 => Ok(None),
        1 => Ok(Some(SortStrategy::Average)),
        2 => Ok(Some(SortStrategy::Greedy)),
        3 => Ok(Some(SortStrategy::Random)),
        other => Err(corrupt(offset, format!("unknown sort strategy code {other}"))),
    }
}

// ── Serialization ───────────────────────────────────────────────────────────

fn put_str16(out: &mut Vec<u8>, s: &str, what: &str) {
    assert!(
        s.len() <= usize::from(u16::MAX),
        "{what} longer than a str16 can hold"
    );
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Encode artifacts into the container byte stream.
///
/// Blocks are written in [`ModelArtifacts::stored_refs`] order: the universal
/// order when sorted, canonical weight-major order otherwise.
pub fn serialize(artifacts: &ModelArtifacts) -> Vec<u8> {
    let params = &artifacts.params;
    let weight_ids: Vec<&WeightId> = artifacts.weight_ids().collect();
    let index_of = |id: &WeightId| -> u32 {
        weight_ids
            .iter()
            .position(|w| *w == id)
            .expect("block weight is in the weight table") as u32
    };

    let mut out = Vec::new();

    // Header.
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&ENDIAN_MARKER.to_le_bytes());
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(weight_ids.len() as u32).to_le_bytes());
    out.extend_from_slice(&(params.n_iters as u32).to_le_bytes());
    out.extend_from_slice(&(params.k as u32).to_le_bytes());
    out.push(precision_code(params.precision));
    out.push(strategy_code(artifacts.order.as_ref().map(|u| u.strategy)));
    out.extend_from_slice(&0u16.to_le_bytes()); // reserved
    out.extend_from_slice(&params.seed.to_le_bytes());
    out.extend_from_slice(&(params.net.layers as u32).to_le_bytes());
    out.extend_from_slice(&(params.net.maps_per_layer as u32).to_le_bytes());
    out.extend_from_slice(&(params.net.hidden as u32).to_le_bytes());
    out.extend_from_slice(&(params.calib_rows as u32).to_le_bytes());
    out.extend_from_slice(&(params.sort_rows as u32).to_le_bytes());
    match &params.weight_source {
        WeightSource::Seeded => out.push(0),
        WeightSource::File(path) => {
            out.push(1);
            put_str16(&mut out, path, "weight source path");
        }
    }
    match &params.calib_source {
        CalibSource::Seeded => out.push(0),
        CalibSource::File(path) => {
            out.push(1);
            put_str16(&mut out, path, "calibration source path");
        }
    }

    // Weight table: id, shape, and scales per weight, canonical order.
    for stack in &artifacts.stacks {
        out.extend_from_slice(&(stack.weight.layer as u32).to_le_bytes());
        put_str16(&mut out, &stack.weight.role, "weight role");
        out.extend_from_slice(&(stack.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(stack.cols() as u32).to_le_bytes());
        let scaling = artifacts
            .scaling(&stack.weight)
            .expect("every stack has a scaling vector");
        assert_eq!(scaling.len(), stack.rows(), "scales cover the weight rows");
        for &s in scaling.values() {
            out.extend_from_slice(&s.to_le_bytes());
        }
    }

    // Block records in stored order, collecting the offset index.
    let refs = artifacts.stored_refs();
    let mut index: Vec<u64> = Vec::with_capacity(refs.len());
    for r in &refs {
        let block = artifacts.block(r).expect("ordered refs resolve");
        index.push(out.len() as u64);

        let mut record = Vec::new();
        record.extend_from_slice(&index_of(&r.weight).to_le_bytes());
        record.extend_from_slice(&(block.iteration as u32).to_le_bytes());
        record.extend_from_slice(&(block.rank() as u32).to_le_bytes());
        record.extend_from_slice(&block.size_bits.to_le_bytes());
        match block.importance {
            Some(score) => {
                record.push(1);
                record.extend_from_slice(&score.to_le_bytes());
            }
            None => {
                record.push(0);
                record.extend_from_slice(&0f64.to_le_bytes());
            }
        }
        record.extend_from_slice(block.signs.bytes());
        for &x in block.left.data() {
            artifacts.params.precision.encode(x, &mut record);
        }
        for &x in block.right.data() {
            artifacts.params.precision.encode(x, &mut record);
        }

        out.extend_from_slice(&(record.len() as u64).to_le_bytes());
        out.extend_from_slice(&record);
    }

    // Offset index and trailer.
    let index_offset = out.len() as u64;
    for offset in index {
        out.extend_from_slice(&offset.to_le_bytes());
    }
    out.extend_from_slice(&index_offset.to_le_bytes());
    out.extend_from_slice(&END_MAGIC);
    out
}

/// Serialize to a file, writing a sibling temp file first and renaming it
/// into place so a crash never leaves a half-written container at `path`.
pub fn write_container(path: &Path, artifacts: &ModelArtifacts) -> Result<(), StoreError> {
    let bytes = serialize(artifacts);
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

// ── Byte cursor ─────────────────────────────────────────────────────────────

/// Bounds-checked reader over a byte slice.
///
/// `base` is the absolute stream offset of the slice's first byte, so error
/// offsets stay meaningful when parsing a partial read.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], base: u64) -> Self {
        Self { bytes, pos: 0, base }
    }

    fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        if n > self.remaining() {
            return Err(StoreError::TruncatedStream {
                offset: self.offset(),
                needed: (n - self.remaining()) as u64,
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, StoreError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, StoreError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, StoreError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }

    fn f64(&mut self) -> Result<f64, StoreError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("eight bytes")))
    }

    fn str16(&mut self, what: &str) -> Result<String, StoreError> {
        let at = self.offset();
        let len = usize::from(self.u16()?);
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| corrupt(at, format!("{what} is not valid UTF-8")))
    }
}

// ── Parsed header ───────────────────────────────────────────────────────────

struct Header {
    params: RunParams,
    n_weights: usize,
    strategy: Option<SortStrategy>,
}

fn parse_header(cur: &mut Cursor) -> Result<Header, StoreError> {
    let magic_at = cur.offset();
    let magic: [u8; 4] = cur.take(4)?.try_into().expect("four bytes");
    if magic != MAGIC {
        return Err(StoreError::BadMagic { found: magic });
    }
    let endian_at = cur.offset();
    let endian = cur.u16()?;
    if endian != ENDIAN_MARKER {
        return Err(corrupt(
            endian_at,
            format!("endianness marker {endian:#06x}, expected {ENDIAN_MARKER:#06x}"),
        ));
    }
    let version = cur.u16()?;
    if version != FORMAT_VERSION {
        return Err(StoreError::VersionMismatch { found: version });
    }
    let _ = magic_at;

    let n_weights = cur.u32()? as usize;
    let n_iters = cur.u32()? as usize;
    let k = cur.u32()? as usize;
    let precision_at = cur.offset();
    let precision = decode_precision(cur.u8()?, precision_at)?;
    let strategy_at = cur.offset();
    let strategy = decode_strategy(cur.u8()?, strategy_at)?;
    let reserved_at = cur.offset();
    let reserved = cur.u16()?;
    if reserved != 0 {
        return Err(corrupt(reserved_at, format!("reserved field is {reserved}")));
    }
    let seed = cur.u64()?;
    let layers = cur.u32()? as usize;
    let maps_per_layer = cur.u32()? as usize;
    let hidden = cur.u32()? as usize;
    let calib_rows = cur.u32()? as usize;
    let sort_rows = cur.u32()? as usize;

    let ws_at = cur.offset();
    let weight_source = match cur.u8()? {
        0 => WeightSource::Seeded,
        1 => WeightSource::File(cur.str16("weight source path")?),
        other => return Err(corrupt(ws_at, format!("unknown weight source code {other}"))),
    };
    let cs_at = cur.offset();
    let calib_source = match cur.u8()? {
        0 => CalibSource::Seeded,
        1 => CalibSource::File(cur.str16("calibration source path")?),
        other => return Err(corrupt(cs_at, format!("unknown calibration source code {other}"))),
    };

    Ok(Header {
        params: RunParams {
            seed,
            n_iters,
            k,
            precision,
            net: NetShape {
                layers,
                maps_per_layer,
                hidden,
            },
            weight_source,
            calib_rows,
            sort_rows,
            calib_source,
        },
        n_weights,
        strategy,
    })
}

struct WeightEntry {
    id: WeightId,
    rows: usize,
    cols: usize,
    scaling: ScalingVector,
}

fn parse_weight_table(cur: &mut Cursor, n_weights: usize) -> Result<Vec<WeightEntry>, StoreError> {
    let mut entries: Vec<WeightEntry> = Vec::new();
    for _ in 0..n_weights {
        let entry_at = cur.offset();
        let layer = cur.u32()? as usize;
        let role = cur.str16("weight role")?;
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        if rows == 0 || cols == 0 {
            return Err(corrupt(entry_at, format!("empty weight shape {rows}x{cols}")));
        }
        let scales_at = cur.offset();
        let raw = cur.take(rows * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        let scaling = ScalingVector::new(values)
            .map_err(|e| corrupt(scales_at, format!("invalid scales: {e}")))?;
        let id = WeightId { layer, role };
        if entries.iter().any(|e| e.id == id) {
            return Err(corrupt(entry_at, format!("duplicate weight id {id}")));
        }
        if let Some(prev) = entries.last() {
            if prev.id > id {
                return Err(corrupt(
                    entry_at,
                    format!("weight table not in canonical order: {} after {}", id, prev.id),
                ));
            }
        }
        entries.push(WeightEntry {
            id,
            rows,
            cols,
            scaling,
        });
    }
    Ok(entries)
}

/// Parse one length-prefixed block record.
fn parse_block_record(
    cur: &mut Cursor,
    weights: &[WeightEntry],
    header: &Header,
) -> Result<(usize, ResidualBlock), StoreError> {
    let record_at = cur.offset();
    let record_len = cur.u64()?;
    if record_len > cur.remaining() as u64 {
        return Err(StoreError::TruncatedStream {
            offset: cur.offset(),
            needed: record_len - cur.remaining() as u64,
        });
    }
    let mut rec = Cursor::new(cur.take(record_len as usize)?, record_at + 8);

    let widx_at = rec.offset();
    let weight_idx = rec.u32()? as usize;
    let entry = weights
        .get(weight_idx)
        .ok_or_else(|| corrupt(widx_at, format!("weight index {weight_idx} out of range")))?;
    let iter_at = rec.offset();
    let iteration = rec.u32()? as usize;
    if iteration == 0 || iteration > header.params.n_iters {
        return Err(corrupt(
            iter_at,
            format!("iteration {iteration} outside 1..={}", header.params.n_iters),
        ));
    }
    let rank_at = rec.offset();
    let rank = rec.u32()? as usize;
    if rank != header.params.k {
        return Err(corrupt(
            rank_at,
            format!("record rank {rank} does not match configured k {}", header.params.k),
        ));
    }
    let size_at = rec.offset();
    let size_bits = rec.u64()?;
    let expected_bits = block_bits(entry.rows, entry.cols, rank, header.params.precision);
    if size_bits != expected_bits {
        return Err(corrupt(
            size_at,
            format!("size_bits {size_bits} does not match computed {expected_bits}"),
        ));
    }
    let flag_at = rec.offset();
    let importance = match rec.u8()? {
        0 => {
            let raw = rec.f64()?;
            if raw.to_bits() != 0 {
                return Err(corrupt(flag_at, "absent importance must encode as 0.0"));
            }
            None
        }
        1 => {
            let score_at = rec.offset();
            let score = rec.f64()?;
            if !score.is_finite() {
                return Err(corrupt(score_at, format!("non-finite importance {score}")));
            }
            Some(score)
        }
        other => return Err(corrupt(flag_at, format!("unknown importance flag {other}"))),
    };

    let signs_at = rec.offset();
    let sign_len = PackedSignMatrix::packed_len(entry.rows, entry.cols);
    let sign_bytes = rec.take(sign_len)?.to_vec();
    let signs = PackedSignMatrix::from_bytes(entry.rows, entry.cols, sign_bytes)
        .map_err(|e| corrupt(signs_at, format!("invalid sign buffer: {e}")))?;

    let mut read_factor = |rows: usize, what: &str| -> Result<DenseMatrix, StoreError> {
        let at = rec.offset();
        let width = header.params.precision.bytes_per_entry();
        let raw = rec.take(rows * rank * width)?;
        let data: Vec<f64> = raw
            .chunks_exact(width)
            .map(|c| header.params.precision.decode(c))
            .collect();
        DenseMatrix::new(rows, rank, data)
            .map_err(|e| corrupt(at, format!("invalid {what} factor: {e}")))
    };
    let left = read_factor(entry.rows, "left")?;
    let right = read_factor(entry.cols, "right")?;

    if rec.remaining() != 0 {
        return Err(corrupt(
            rec.offset(),
            format!("{} unexpected trailing bytes in record", rec.remaining()),
        ));
    }

    Ok((
        weight_idx,
        ResidualBlock {
            weight: entry.id.clone(),
            iteration,
            signs,
            left,
            right,
            size_bits,
            importance,
        },
    ))
}

// ── Full deserialization ────────────────────────────────────────────────────

/// Decode and validate a complete container byte stream.
pub fn deserialize(bytes: &[u8]) -> Result<ModelArtifacts, StoreError> {
    let mut cur = Cursor::new(bytes, 0);
    let header = parse_header(&mut cur)?;
    let weights = parse_weight_table(&mut cur, header.n_weights)?;

    let n_blocks = header.n_weights * header.params.n_iters;
    let mut refs: Vec<BlockRef> = Vec::new();
    let mut scores: Vec<Option<f64>> = Vec::new();
    let mut offsets: Vec<u64> = Vec::new();
    let mut stacks: Vec<WeightStack> = weights
        .iter()
        .map(|e| WeightStack {
            weight: e.id.clone(),
            blocks: Vec::new(),
            loaded_level: header.params.n_iters,
        })
        .collect();

    for _ in 0..n_blocks {
        offsets.push(cur.offset());
        let (weight_idx, block) = parse_block_record(&mut cur, &weights, &header)?;
        refs.push(BlockRef {
            weight: block.weight.clone(),
            iteration: block.iteration,
        });
        scores.push(block.importance);
        stacks[weight_idx].blocks.push(block);
    }

    // Every stack must hold iterations 1..=n in order; if anything is
    // missing or duplicated the counts or sequence break.
    for stack in &stacks {
        if stack.blocks.len() != header.params.n_iters {
            return Err(corrupt(
                cur.offset(),
                format!(
                    "weight {} has {} blocks, expected {}",
                    stack.weight,
                    stack.blocks.len(),
                    header.params.n_iters
                ),
            ));
        }
        for (idx, block) in stack.blocks.iter().enumerate() {
            if block.iteration != idx + 1 {
                return Err(corrupt(
                    cur.offset(),
                    format!(
                        "weight {} stores iteration {} where {} belongs",
                        stack.weight,
                        block.iteration,
                        idx + 1
                    ),
                ));
            }
        }
    }

    let order = match header.strategy {
        None => {
            // Unsorted containers must store blocks canonically and carry
            // no importance scores.
            let mut expected = Vec::with_capacity(n_blocks);
            for entry in &weights {
                for iteration in 1..=header.params.n_iters {
                    expected.push(BlockRef {
                        weight: entry.id.clone(),
                        iteration,
                    });
                }
            }
            if refs != expected {
                return Err(corrupt(
                    cur.offset(),
                    "unsorted container stores blocks out of canonical order",
                ));
            }
            if scores.iter().any(Option::is_some) {
                return Err(corrupt(
                    cur.offset(),
                    "unsorted container carries importance scores",
                ));
            }
            None
        }
        Some(strategy) => {
            let universal = UniversalStack {
                order: refs,
                strategy,
                scores,
            };
            let report = verify_order(&universal);
            if let Some(first) = report.violations.first() {
                return Err(corrupt(cur.offset(), format!("invalid block order: {first}")));
            }
            let scored = universal.scores.iter().filter(|s| s.is_some()).count();
            let want_scores = match strategy {
                SortStrategy::Average | SortStrategy::Greedy => universal.len(),
                SortStrategy::Random => 0,
            };
            if scored != want_scores {
                return Err(corrupt(
                    cur.offset(),
                    format!(
                        "{strategy} order carries {scored} scores, expected {want_scores}"
                    ),
                ));
            }
            Some(universal)
        }
    };

    // Offset index and trailer.
    let index_at = cur.offset();
    for (i, &expected) in offsets.iter().enumerate() {
        let got = cur.u64()?;
        if got != expected {
            return Err(corrupt(
                index_at + 8 * i as u64,
                format!("index entry {i} is {got}, record is at {expected}"),
            ));
        }
    }
    let stored_index_offset = cur.u64()?;
    if stored_index_offset != index_at {
        return Err(corrupt(
            cur.offset() - 8,
            format!("index offset {stored_index_offset}, index is at {index_at}"),
        ));
    }
    let end_at = cur.offset();
    let end: [u8; 4] = cur.take(4)?.try_into().expect("four bytes");
    if end != END_MAGIC {
        return Err(corrupt(end_at, format!("bad end magic {end:02x?}")));
    }
    if cur.remaining() != 0 {
        return Err(corrupt(
            cur.offset(),
            format!("{} trailing bytes after trailer", cur.remaining()),
        ));
    }

    let scalings = weights
        .into_iter()
        .map(|e| (e.id, e.scaling))
        .collect();
    Ok(ModelArtifacts {
        params: header.params,
        stacks,
        scalings,
        order,
    })
}

/// Read and validate a container file.
pub fn read_container(path: &Path) -> Result<ModelArtifacts, StoreError> {
    deserialize(&fs::read(path)?)
}

// ── Partial loads ───────────────────────────────────────────────────────────

/// Read only the block records in positions `from..to` of the stored order.
///
/// Uses the trailer's offset index to touch just the header, the weight
/// table, and the requested byte range, so the cost is proportional to the
/// range, not the container.
pub fn read_block_range<R: Read + Seek>(
    reader: &mut R,
    from: usize,
    to: usize,
) -> Result<Vec<ResidualBlock>, StoreError> {
    let file_len = reader.seek(SeekFrom::End(0))?;
    if file_len < 12 {
        return Err(StoreError::TruncatedStream {
            offset: file_len,
            needed: 12 - file_len,
        });
    }
    let mut trailer = [0u8; 12];
    reader.seek(SeekFrom::Start(file_len - 12))?;
    reader.read_exact(&mut trailer)?;
    let index_offset = u64::from_le_bytes(trailer[..8].try_into().expect("eight bytes"));
    let end: [u8; 4] = trailer[8..].try_into().expect("four bytes");
    if end != END_MAGIC {
        return Err(corrupt(file_len - 4, format!("bad end magic {end:02x?}")));
    }
    if index_offset > file_len - 12 {
        return Err(corrupt(
            file_len - 12,
            format!("index offset {index_offset} beyond trailer"),
        ));
    }
    let index_len = file_len - 12 - index_offset;
    if index_len % 8 != 0 {
        return Err(corrupt(
            index_offset,
            format!("index length {index_len} is not a multiple of 8"),
        ));
    }
    let n_blocks = (index_len / 8) as usize;
    if from > to || to > n_blocks {
        return Err(StoreError::RangeOutOfBounds {
            from,
            to,
            len: n_blocks,
        });
    }

    // Offsets for the requested range, plus the end of the last record.
    let mut index_bytes = vec![0u8; index_len as usize];
    reader.seek(SeekFrom::Start(index_offset))?;
    reader.read_exact(&mut index_bytes)?;
    let offsets: Vec<u64> = index_bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();

    // Header and weight table end where the first block record begins (or
    // at the index when there are no blocks).
    let prelude_end = offsets.first().copied().unwrap_or(index_offset);
    if prelude_end > index_offset {
        return Err(corrupt(0, format!("first record offset {prelude_end} beyond index")));
    }
    let mut prelude = vec![0u8; prelude_end as usize];
    reader.seek(SeekFrom::Start(0))?;
    reader.read_exact(&mut prelude)?;
    let mut cur = Cursor::new(&prelude, 0);
    let header = parse_header(&mut cur)?;
    let weights = parse_weight_table(&mut cur, header.n_weights)?;
    if header.n_weights * header.params.n_iters != n_blocks {
        return Err(corrupt(
            index_offset,
            format!(
                "index holds {n_blocks} blocks, header implies {}",
                header.n_weights * header.params.n_iters
            ),
        ));
    }
    if from == to {
        return Ok(Vec::new());
    }

    let start = offsets[from];
    let end = if to < n_blocks { offsets[to] } else { index_offset };
    if end < start || end > file_len {
        return Err(corrupt(start, "record offsets are not monotonic"));
    }
    let mut range = vec![0u8; (end - start) as usize];
    reader.seek(SeekFrom::Start(start))?;
    reader.read_exact(&mut range)?;

    let mut cur = Cursor::new(&range, start);
    let mut blocks = Vec::with_capacity(to - from);
    for i in from..to {
        if cur.offset() != offsets[i] {
            return Err(corrupt(
                cur.offset(),
                format!("record {i} expected at {}, parser is at {}", offsets[i], cur.offset()),
            ));
        }
        let (_, block) = parse_block_record(&mut cur, &weights, &header)?;
        blocks.push(block);
    }
    if cur.remaining() != 0 {
        return Err(corrupt(
            cur.offset(),
            format!("{} stray bytes between records and index", cur.remaining()),
        ));
    }
    Ok(blocks)
}
