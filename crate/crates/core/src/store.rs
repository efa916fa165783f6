//! QVGC: an append-only container of compressed chunks.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! header (32 bytes)
//!   0  magic "QVGC"         4
//!   4  version = 1          u16
//!   6  bits                 u8
//!   7  group_size           u16
//!   9  stages               u8
//!  10  centroids            u16
//!  12  head_dim             u32
//!  16  method_tag           u8   0=RTN 1=KIVI 2=QUAROT 3=QVG
//!  17  seed                 u64
//!  25  reserved, zero       7
//!
//! record, repeated
//!   chunk_index u32, n_tokens u32, payload_len u32, scales_len u32
//!   payload, scales
//!   per stage: K*d bf16 centroids, n_tokens assignment bytes
//!   crc32 u32 (IEEE) over everything above in this record
//! ```
//!
//! A record occupies 20 bytes of framing plus exactly the bytes counted by
//! [`crate::metrics::breakdown_for`]. Records are located by scanning; the
//! length of each follows from its `n_tokens` and the header.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use half::bf16;
use rayon::prelude::*;

use crate::baselines::KvRole;
use crate::codec::decompress;
use crate::error::{Error, Result};
use crate::types::{ChunkParams, ChunkSpec, CompressedChunk, GroupAxis, KVPlane, Method, StageMeta};

pub const MAGIC: [u8; 4] = *b"QVGC";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;
/// Fixed per-record bytes: four `u32` fields and the trailing CRC.
pub const RECORD_FRAMING: usize = 20;
const PREFIX_LEN: usize = 16;

/// Container-wide parameters shared by every record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QvgcHeader {
    pub method: Method,
    pub params: ChunkParams,
    pub head_dim: usize,
    pub seed: u64,
}

fn field<T: TryFrom<usize>>(v: usize, name: &str) -> Result<T> {
    T::try_from(v).map_err(|_| Error::BadHeader(format!("{name} = {v} does not fit its field")))
}

impl QvgcHeader {
    pub fn new(method: Method, params: ChunkParams, head_dim: usize, seed: u64) -> Self {
        Self {
            method,
            params,
            head_dim,
            seed,
        }
    }

    /// Header describing a stream of chunks like `chunk`.
    pub fn for_chunk(chunk: &CompressedChunk) -> Self {
        Self::new(chunk.method, chunk.params, chunk.spec.head_dim, chunk.seed)
    }

    pub fn to_bytes(&self) -> Result<[u8; HEADER_LEN]> {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..6].copy_from_slice(&VERSION.to_le_bytes());
        b[6] = self.params.bits;
        b[7..9].copy_from_slice(&field::<u16>(self.params.group_size, "group_size")?.to_le_bytes());
        b[9] = field::<u8>(self.params.stages, "stages")?;
        b[10..12].copy_from_slice(&field::<u16>(self.params.centroids, "centroids")?.to_le_bytes());
        b[12..16].copy_from_slice(&field::<u32>(self.head_dim, "head_dim")?.to_le_bytes());
        b[16] = self.method.tag();
        b[17..25].copy_from_slice(&self.seed.to_le_bytes());
        // never write a header the reader would refuse
        Self::from_bytes(&b)?;
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                needed: HEADER_LEN,
                available: bytes.len(),
            });
        }
        let found: [u8; 4] = bytes[0..4].try_into().unwrap();
        if found != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found,
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::BadVersion(version));
        }
        if bytes[25..HEADER_LEN].iter().any(|&b| b != 0) {
            return Err(Error::BadHeader("reserved bytes are not zero".into()));
        }
        let header = Self {
            params: ChunkParams {
                bits: bytes[6],
                group_size: u16::from_le_bytes([bytes[7], bytes[8]]) as usize,
                stages: bytes[9] as usize,
                centroids: u16::from_le_bytes([bytes[10], bytes[11]]) as usize,
            },
            head_dim: u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize,
            method: Method::from_tag(bytes[16])?,
            seed: u64::from_le_bytes(bytes[17..25].try_into().unwrap()),
        };
        if !matches!(header.params.bits, 2 | 4 | 8) {
            return Err(Error::BadHeader(format!("bits = {}", header.params.bits)));
        }
        if header.params.group_size == 0 || header.head_dim == 0 {
            return Err(Error::BadHeader("zero group size or head_dim".into()));
        }
        Ok(header)
    }

    /// Grouping orientation of chunk `chunk_index` in this container.
    pub fn axis_for(&self, chunk_index: usize) -> GroupAxis {
        match self.method {
            Method::Kivi => KvRole::for_chunk(chunk_index).axis(),
            _ => GroupAxis::Channel,
        }
    }

    pub fn payload_len(&self, n_tokens: usize) -> usize {
        (n_tokens * self.head_dim * self.params.bits as usize).div_ceil(8)
    }

    pub fn scales_len(&self, n_tokens: usize) -> usize {
        n_tokens * self.head_dim / self.params.group_size
    }

    fn stage_len(&self, n_tokens: usize) -> usize {
        self.params.centroids * self.head_dim * 2 + n_tokens
    }

    /// Total bytes of a record holding `n_tokens` tokens.
    pub fn record_len(&self, n_tokens: usize) -> usize {
        RECORD_FRAMING
            + self.payload_len(n_tokens)
            + self.scales_len(n_tokens)
            + self.params.stages * self.stage_len(n_tokens)
    }

    fn check_chunk(&self, chunk: &CompressedChunk, index: usize) -> Result<()> {
        let mismatch = |what: String| Err(Error::ConfigMismatch(what));
        if chunk.method != self.method {
            return mismatch(format!("method {} vs header {}", chunk.method, self.method));
        }
        if chunk.params != self.params {
            return mismatch(format!("params {:?} vs header {:?}", chunk.params, self.params));
        }
        if chunk.spec.head_dim != self.head_dim {
            return mismatch(format!("head_dim {} vs header {}", chunk.spec.head_dim, self.head_dim));
        }
        if chunk.seed != self.seed {
            return mismatch(format!("seed {} vs header {}", chunk.seed, self.seed));
        }
        if chunk.spec.chunk_index != index {
            return mismatch(format!(
                "chunk_index {} appended at position {index}",
                chunk.spec.chunk_index
            ));
        }
        if chunk.axis != self.axis_for(index) {
            return mismatch(format!("group axis {:?} at position {index}", chunk.axis));
        }
        if u32::try_from(chunk.spec.n_tokens).is_err() {
            return mismatch(format!("{} tokens do not fit a u32", chunk.spec.n_tokens));
        }
        Ok(())
    }
}

/// Serializes one record, CRC included.
fn encode_record(chunk: &CompressedChunk) -> Vec<u8> {
    let spec = &chunk.spec;
    let stage_bytes: usize = chunk
        .stages
        .iter()
        .map(|s| s.centroids.len() * 2 + s.assignments.len())
        .sum();
    let mut out = Vec::with_capacity(RECORD_FRAMING + chunk.payload.len() + chunk.scales.len() + stage_bytes);
    for v in [spec.chunk_index, spec.n_tokens, chunk.payload.len(), chunk.scales.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&chunk.payload);
    out.extend_from_slice(&chunk.scales);
    for stage in &chunk.stages {
        for c in &stage.centroids {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&stage.assignments);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Append-only chunk writer over any byte sink.
///
/// Each record is handed to the sink in one `write_all` followed by a
/// flush, so a concurrent reader sees either the whole record or none of it
/// except when the process dies mid-write; such a tail reads back as
/// [`Error::CorruptChunk`].
#[derive(Debug)]
pub struct QvgcWriter<W: Write> {
    sink: W,
    header: QvgcHeader,
    count: usize,
    bytes_written: u64,
}

/// Writes the header to `sink` and returns a writer for its records.
pub fn open_writer<W: Write>(sink: W, header: QvgcHeader) -> Result<QvgcWriter<W>> {
    QvgcWriter::new(sink, header)
}

impl<W: Write> QvgcWriter<W> {
    pub fn new(mut sink: W, header: QvgcHeader) -> Result<Self> {
        sink.write_all(&header.to_bytes()?)?;
        sink.flush()?;
        Ok(Self {
            sink,
            header,
            count: 0,
            bytes_written: HEADER_LEN as u64,
        })
    }

    pub fn header(&self) -> &QvgcHeader {
        &self.header
    }

    /// Chunks written so far.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn bytes_written(&self) -> u64 {
        self.bytes_written
    }

    /// Appends `chunk` as the next record and returns its index.
    ///
    /// The chunk's own `chunk_index` must equal that position.
    pub fn append_chunk(&mut self, chunk: &CompressedChunk) -> Result<usize> {
        self.header.check_chunk(chunk, self.count)?;
        chunk.validate()?;
        let record = encode_record(chunk);
        self.sink.write_all(&record)?;
        self.sink.flush()?;
        self.bytes_written += record.len() as u64;
        self.count += 1;
        Ok(self.count - 1)
    }

    /// Flushes and returns the sink.
    pub fn finish(mut self) -> Result<W> {
        self.sink.flush()?;
        Ok(self.sink)
    }
}

impl QvgcWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, header: QvgcHeader) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?), header)
    }
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Whole { offset: usize, len: usize },
    Truncated { needed: usize, available: usize },
}

/// Random-access reader over a complete container image.
#[derive(Debug, Clone)]
pub struct QvgcReader {
    bytes: Vec<u8>,
    header: QvgcHeader,
    slots: Vec<Slot>,
}

impl QvgcReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let header = QvgcHeader::from_bytes(&bytes)?;
        let mut slots = Vec::new();
        let mut pos = HEADER_LEN;
        while pos < bytes.len() {
            let available = bytes.len() - pos;
            if available < 8 {
                slots.push(Slot::Truncated { needed: PREFIX_LEN, available });
                break;
            }
            let n_tokens = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
            let len = header.record_len(n_tokens);
            if len > available {
                slots.push(Slot::Truncated { needed: len, available });
                break;
            }
            slots.push(Slot::Whole { offset: pos, len });
            pos += len;
        }
        Ok(Self {
            bytes,
            header,
            slots,
        })
    }

    pub fn header(&self) -> &QvgcHeader {
        &self.header
    }

    /// Number of records, counting a truncated trailing one.
    pub fn count(&self) -> usize {
        self.slots.len()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn read_chunk(&self, index: usize) -> Result<CompressedChunk> {
        let corrupt = |reason: String| Error::CorruptChunk { index, reason };
        let (offset, len) = match self.slots.get(index) {
            None => {
                return Err(Error::OutOfRange {
                    index,
                    count: self.count(),
                })
            }
            Some(Slot::Truncated { needed, available }) => {
                return Err(corrupt(format!(
                    "record truncated: {available} of {needed} bytes present"
                )))
            }
            Some(&Slot::Whole { offset, len }) => (offset, len),
        };
        let rec = &self.bytes[offset..offset + len];
        let (body, tail) = rec.split_at(len - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(corrupt(format!("crc {actual:08x} != stored {stored:08x}")));
        }

        let u32_at = |at: usize| u32::from_le_bytes(body[at..at + 4].try_into().unwrap()) as usize;
        let (chunk_index, n_tokens, payload_len, scales_len) = (u32_at(0), u32_at(4), u32_at(8), u32_at(12));
        let h = &self.header;
        if chunk_index != index {
            return Err(corrupt(format!("record claims index {chunk_index}")));
        }
        if payload_len != h.payload_len(n_tokens) || scales_len != h.scales_len(n_tokens) {
            return Err(corrupt(format!(
                "declared lengths {payload_len}/{scales_len} disagree with {n_tokens} tokens"
            )));
        }

        let mut pos = PREFIX_LEN;
        let mut take = |n: usize| {
            let s = &body[pos..pos + n];
            pos += n;
            s
        };
        let payload = take(payload_len).to_vec();
        let scales = take(scales_len).to_vec();
        let k = h.params.centroids;
        let stages = (0..h.params.stages)
            .map(|_| StageMeta {
                centroids: take(k * h.head_dim * 2)
                    .chunks_exact(2)
                    .map(|b| bf16::from_le_bytes([b[0], b[1]]))
                    .collect(),
                assignments: take(n_tokens).to_vec(),
                k,
                head_dim: h.head_dim,
            })
            .collect();

        let chunk = CompressedChunk {
            spec: ChunkSpec::new(n_tokens, h.head_dim).with_chunk_index(index),
            method: h.method,
            params: h.params,
            axis: h.axis_for(index),
            seed: h.seed,
            payload,
            scales,
            stages,
        };
        if n_tokens == 0 {
            return Err(corrupt("record holds no tokens".into()));
        }
        chunk.validate().map_err(|e| match e {
            e @ Error::CorruptChunk { .. } => e,
            other => corrupt(other.to_string()),
        })?;
        Ok(chunk)
    }

    /// Decompresses chunks `range.start..range.end` with the decoder the
    /// header's method requires.
    pub fn dequantize_range(&self, range: Range<usize>) -> Result<Vec<KVPlane>> {
        if range.start > range.end || range.end > self.count() {
            return Err(Error::OutOfRange {
                index: range.end.max(range.start),
                count: self.count(),
            });
        }
        range
            .into_par_iter()
            .map(|i| decompress(&self.read_chunk(i)?))
            .collect()
    }
}

/// In-memory container holding `chunks` under `header`.
pub fn to_bytes<'a>(header: QvgcHeader, chunks: impl IntoIterator<Item = &'a CompressedChunk>) -> Result<Vec<u8>> {
    let mut w = QvgcWriter::new(Vec::new(), header)?;
    for c in chunks {
        w.append_chunk(c)?;
    }
    w.finish()
}

/// Single-chunk container: the byte form exchanged with foreign callers.
pub fn encode_single_chunk(chunk: &CompressedChunk) -> Result<Vec<u8>> {
    to_bytes(QvgcHeader::for_chunk(chunk), [chunk])
}

pub fn decode_single_chunk(bytes: &[u8]) -> Result<CompressedChunk> {
    let reader = QvgcReader::from_bytes(bytes.to_vec())?;
    if reader.count() != 1 {
        return Err(Error::CorruptChunk {
            index: 0,
            reason: format!("expected one chunk, found {}", reader.count()),
        });
    }
    reader.read_chunk(0)
}
