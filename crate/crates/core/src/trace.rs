//! SCAT attention-trace files.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! "SCAT"                      4 bytes
//! version                     u32 (= 1)
//! metadata length             u32
//! metadata                    UTF-8 JSON
//! block count                 u32
//! per block:
//!   timestep                  i32
//!   layer_id                  u32
//!   head_count                u32
//!   cross                     f32[head_count][tokens][h][w]
//!   self                      f32[head_count][h*w][h*w]
//! ```
//!
//! The metadata object carries `prompt`, `token_strings`, `subject_indices`,
//! `model_id`, `grid: {h, w}`, `layers` and `heads`; `tokens`, `h` and `w`
//! above come from it.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionRecord, CrossAttentionMap, HeadMaps, PatchGrid, SelfAttentionField};
use crate::error::{Error, FormatError, Result};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"SCAT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub prompt: String,
    pub token_strings: Vec<String>,
    pub subject_indices: Vec<usize>,
    pub model_id: String,
    pub grid: PatchGrid,
    pub layers: Vec<u32>,
    pub heads: u32,
}

fn inconsistent(msg: impl Into<String>) -> Error {
    Error::Format(FormatError::Inconsistent(msg.into()))
}

/// Serializes records to SCAT bytes.
pub fn write_trace<T: Scalar>(records: &[AttentionRecord<T>], metadata: &TraceMetadata) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_trace_to(&mut out, records, metadata)?;
    Ok(out)
}

pub fn write_trace_to<T: Scalar, W: Write>(
    writer: &mut W,
    records: &[AttentionRecord<T>],
    metadata: &TraceMetadata,
) -> Result<()> {
    if records.is_empty() {
        return Err(inconsistent("trace needs at least one record"));
    }
    for (i, r) in records.iter().enumerate() {
        if r.grid() != metadata.grid {
            return Err(inconsistent(format!("record {i}: grid differs from metadata")));
        }
        if r.token_strings != metadata.token_strings {
            return Err(inconsistent(format!("record {i}: tokens differ from metadata")));
        }
    }
    let json = serde_json::to_vec(metadata).map_err(|e| inconsistent(e.to_string()))?;
    let count = u32::try_from(records.len()).map_err(|_| inconsistent("too many records"))?;
    let json_len = u32::try_from(json.len()).map_err(|_| inconsistent("metadata too large"))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&json_len.to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&count.to_le_bytes());
    for r in records {
        buf.extend_from_slice(&r.timestep.to_le_bytes());
        buf.extend_from_slice(&r.layer_id.to_le_bytes());
        buf.extend_from_slice(&(r.head_count() as u32).to_le_bytes());
        for head in &r.heads {
            for map in &head.cross {
                for v in map.values() {
                    buf.extend_from_slice(&to_f32(*v).to_le_bytes());
                }
            }
        }
        for head in &r.heads {
            for v in head.self_attn.values().iter() {
                buf.extend_from_slice(&to_f32(*v).to_le_bytes());
            }
        }
    }
    writer.write_all(&buf).map_err(FormatError::from)?;
    Ok(())
}

fn to_f32<T: Scalar>(v: T) -> f32 {
    v.to_f32().unwrap_or(f32::NAN)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let remaining = self.bytes.len() - self.offset;
        if remaining < n {
            return Err(FormatError::Truncated {
                offset: self.offset,
                needed: n - remaining,
                what,
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn i32(&mut self, what: &'static str) -> Result<i32, FormatError> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn floats<T: Scalar>(&mut self, n: usize, what: &'static str) -> Result<Vec<T>, FormatError> {
        let bytes = self.take(n * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect())
    }
}

/// Parses SCAT bytes, validating magic, version, shapes and counts.
pub fn read_trace<T: Scalar>(bytes: &[u8]) -> Result<(TraceMetadata, Vec<AttentionRecord<T>>)> {
    let mut cur = Cursor { bytes, offset: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic { found: magic }.into());
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(FormatError::Version {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let meta_len = cur.u32("metadata length")? as usize;
    let meta_offset = cur.offset;
    let meta_bytes = cur.take(meta_len, "metadata")?;
    let metadata: TraceMetadata = serde_json::from_slice(meta_bytes).map_err(|e| FormatError::Metadata {
        offset: meta_offset,
        reason: e.to_string(),
    })?;
    let grid = PatchGrid::new(metadata.grid.height, metadata.grid.width).map_err(|e| FormatError::Metadata {
        offset: meta_offset,
        reason: e.to_string(),
    })?;
    let tokens = metadata.token_strings.len();
    let p = grid.patches();

    let count = cur.u32("block count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for block in 0..count {
        let block_offset = cur.offset;
        let timestep = cur.i32("timestep")?;
        let layer_id = cur.u32("layer id")?;
        let heads = cur.u32("head count")? as usize;
        if heads == 0 {
            return Err(FormatError::CountMismatch {
                offset: block_offset,
                what: format!("block {block} declares zero heads"),
            }
            .into());
        }
        let per_head = tokens * p + p * p;
        let needed = heads
            .checked_mul(per_head)
            .and_then(|n| n.checked_mul(4))
            .ok_or(FormatError::CountMismatch {
                offset: block_offset,
                what: format!("block {block} tensor size overflows"),
            })?;
        if bytes.len() - cur.offset < needed {
            return Err(FormatError::Truncated {
                offset: cur.offset,
                needed: needed - (bytes.len() - cur.offset),
                what: "tensor section",
            }
            .into());
        }
        let cross: Vec<T> = cur.floats(heads * tokens * p, "cross tensor")?;
        let selfs: Vec<T> = cur.floats(heads * p * p, "self tensor")?;
        let bad = |e: Error| FormatError::Inconsistent(format!("block {block} at byte {block_offset}: {e}"));
        let mut head_maps = Vec::with_capacity(heads);
        for h in 0..heads {
            let maps = (0..tokens)
                .map(|k| {
                    let start = (h * tokens + k) * p;
                    CrossAttentionMap::new(k, grid, cross[start..start + p].to_vec())
                })
                .collect::<Result<Vec<_>>>()
                .map_err(bad)?;
            let field =
                Array2::from_shape_vec((p, p), selfs[h * p * p..(h + 1) * p * p].to_vec()).expect("self tensor shape");
            head_maps.push(HeadMaps {
                cross: maps,
                self_attn: SelfAttentionField::new(grid, field).map_err(bad)?,
            });
        }
        records.push(AttentionRecord::new(timestep, layer_id, head_maps, metadata.token_strings.clone()).map_err(bad)?);
    }
    if cur.offset != bytes.len() {
        return Err(FormatError::CountMismatch {
            offset: cur.offset,
            what: format!("{} bytes after the {count} declared blocks", bytes.len() - cur.offset),
        }
        .into());
    }
    Ok((metadata, records))
}

pub fn write_trace_file<T: Scalar>(
    path: impl AsRef<Path>,
    records: &[AttentionRecord<T>],
    metadata: &TraceMetadata,
) -> Result<()> {
    let bytes = write_trace(records, metadata)?;
    std::fs::write(path, bytes).map_err(FormatError::from)?;
    Ok(())
}

pub fn read_trace_file<T: Scalar>(path: impl AsRef<Path>) -> Result<(TraceMetadata, Vec<AttentionRecord<T>>)> {
    let bytes = std::fs::read(path).map_err(FormatError::from)?;
    read_trace(&bytes)
}
