//! Binary trace file format (`ZTPT`, version 1).
//!
//! Layout, all integers little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic `"ZTPT"` | 4 bytes |
//! | version = 1 | u16 |
//! | flags | u16: bit0 cls_present, bit1 has_qv, bit2 has_x, bit3 has_k |
//! | num_blocks, num_heads, embed_dim, num_tokens | u32 each |
//! | ffn_ratio_num, ffn_ratio_den | u32 each |
//! | label (`0xFFFFFFFF` = none) | u32 |
//! | source_id length, then UTF-8 bytes | u32 + bytes |
//!
//! Then per layer, in order: attention `[N_h·N·N]`, keys `[N_h·N·d_h]` if
//! has_k, queries and values `[N_h·N·d_h]` if has_qv, x_pre and x_out
//! `[N·d]` if has_x. Tensors are row-major little-endian f32.

use std::io::{self, Read, Write};

use ndarray::{Array, Array2, Array3, Dimension};

use crate::error::{Error, Result};
use crate::trace::{FfnRatio, LayerTrace, ModelGeometry, ModelTrace, READ_ROW_SUM_TOL};

pub const MAGIC: [u8; 4] = *b"ZTPT";
pub const VERSION: u16 = 1;

const FLAG_CLS: u16 = 1 << 0;
const FLAG_QV: u16 = 1 << 1;
const FLAG_X: u16 = 1 << 2;
const FLAG_K: u16 = 1 << 3;
const KNOWN_FLAGS: u16 = FLAG_CLS | FLAG_QV | FLAG_X | FLAG_K;
const NO_LABEL: u32 = u32::MAX;

/// Options for [`read_trace_with`].
#[derive(Debug, Clone, Copy)]
pub struct ReadOptions {
    /// Skip the row-sum check (NaN and shape checks still apply).
    pub lenient: bool,
    pub row_tol: f64,
}

impl Default for ReadOptions {
    fn default() -> Self {
        Self {
            lenient: false,
            row_tol: READ_ROW_SUM_TOL,
        }
    }
}

/// Size in bytes of the header for a given source id.
pub fn header_len(source_id: &str) -> usize {
    4 + 2 + 2 + 4 * 4 + 4 * 2 + 4 + 4 + source_id.len()
}

/// Serializes `trace`, returning the number of bytes written.
///
/// The trace is validated before anything is written.
pub fn write_trace<W: Write>(trace: &ModelTrace, mut sink: W) -> Result<u64> {
    trace.validate(READ_ROW_SUM_TOL)?;
    let g = &trace.geometry;
    let flags = trace.flags();
    let mut bits = 0u16;
    if g.cls_present {
        bits |= FLAG_CLS;
    }
    if flags.has_qv {
        bits |= FLAG_QV;
    }
    if flags.has_x {
        bits |= FLAG_X;
    }
    if flags.has_k {
        bits |= FLAG_K;
    }

    let mut header = Vec::with_capacity(header_len(&trace.source_id));
    header.extend_from_slice(&MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&bits.to_le_bytes());
    for v in [g.num_blocks, g.num_heads, g.embed_dim, g.num_tokens] {
        header.extend_from_slice(&to_u32(v, "geometry field")?.to_le_bytes());
    }
    header.extend_from_slice(&g.ffn_ratio.num.to_le_bytes());
    header.extend_from_slice(&g.ffn_ratio.den.to_le_bytes());
    header.extend_from_slice(&trace.label.unwrap_or(NO_LABEL).to_le_bytes());
    let id = trace.source_id.as_bytes();
    header.extend_from_slice(&to_u32(id.len(), "source id length")?.to_le_bytes());
    header.extend_from_slice(id);
    sink.write_all(&header)?;

    let mut written = header.len() as u64;
    for layer in &trace.layers {
        written += write_tensor(&mut sink, &layer.attention)?;
        let tensors3 = [&layer.keys, &layer.queries, &layer.values];
        for t in tensors3.into_iter().flatten() {
            written += write_tensor(&mut sink, t)?;
        }
        for t in [&layer.x_pre, &layer.x_out].into_iter().flatten() {
            written += write_tensor(&mut sink, t)?;
        }
    }
    sink.flush()?;
    Ok(written)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Geometry(format!("{what} {v} exceeds u32")))
}

fn write_tensor<W: Write, D: Dimension>(sink: &mut W, t: &Array<f32, D>) -> Result<u64> {
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(buf.len() as u64)
}

/// Reads and validates a trace with default options.
pub fn read_trace<R: Read>(source: R) -> Result<ModelTrace> {
    read_trace_with(source, ReadOptions::default())
}

pub fn read_trace_with<R: Read>(mut source: R, opts: ReadOptions) -> Result<ModelTrace> {
    let mut magic = [0u8; 4];
    read_exact(&mut source, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = read_u16(&mut source, "version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let bits = read_u16(&mut source, "flags")?;
    if bits & !KNOWN_FLAGS != 0 {
        return Err(Error::Geometry(format!("unknown flag bits {bits:#06x}")));
    }
    let num_blocks = read_u32(&mut source, "num_blocks")? as usize;
    let num_heads = read_u32(&mut source, "num_heads")? as usize;
    let embed_dim = read_u32(&mut source, "embed_dim")? as usize;
    let num_tokens = read_u32(&mut source, "num_tokens")? as usize;
    let ffn_num = read_u32(&mut source, "ffn_ratio_num")?;
    let ffn_den = read_u32(&mut source, "ffn_ratio_den")?;
    let label = read_u32(&mut source, "label")?;
    let id_len = read_u32(&mut source, "source id length")? as usize;
    let id_bytes = read_vec(&mut source, id_len, "source id")?;
    let source_id = String::from_utf8(id_bytes)
        .map_err(|_| Error::Geometry("source id is not valid UTF-8".into()))?;

    let geometry = ModelGeometry {
        num_blocks,
        num_heads,
        embed_dim,
        num_tokens,
        cls_present: bits & FLAG_CLS != 0,
        ffn_ratio: FfnRatio {
            num: ffn_num,
            den: ffn_den,
        },
    };
    geometry.validate()?;

    let (h, n, dh, d) = (num_heads, num_tokens, geometry.head_dim(), embed_dim);
    let mut layers = Vec::with_capacity(num_blocks.min(1024));
    for _ in 0..num_blocks {
        let attention = read_tensor3(&mut source, (h, n, n), "attention")?;
        let keys = if bits & FLAG_K != 0 {
            Some(read_tensor3(&mut source, (h, n, dh), "keys")?)
        } else {
            None
        };
        let (queries, values) = if bits & FLAG_QV != 0 {
            (
                Some(read_tensor3(&mut source, (h, n, dh), "queries")?),
                Some(read_tensor3(&mut source, (h, n, dh), "values")?),
            )
        } else {
            (None, None)
        };
        let (x_pre, x_out) = if bits & FLAG_X != 0 {
            (
                Some(read_tensor2(&mut source, (n, d), "x_pre")?),
                Some(read_tensor2(&mut source, (n, d), "x_out")?),
            )
        } else {
            (None, None)
        };
        layers.push(LayerTrace {
            attention,
            keys,
            queries,
            values,
            x_pre,
            x_out,
        });
    }

    let label = (label != NO_LABEL).then_some(label);
    let trace = ModelTrace::new(geometry, layers, label, source_id)?;
    if !opts.lenient {
        trace.validate(opts.row_tol)?;
    }
    Ok(trace)
}

fn read_exact<R: Read>(source: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated { what },
        _ => Error::Io(e),
    })
}

fn read_u16<R: Read>(source: &mut R, what: &'static str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(source, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(source: &mut R, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(source, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads exactly `len` bytes without trusting `len` for the allocation.
fn read_vec<R: Read>(source: &mut R, len: usize, what: &'static str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    source.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::Truncated { what });
    }
    Ok(buf)
}

fn read_f32s<R: Read>(source: &mut R, count: usize, what: &'static str) -> Result<Vec<f32>> {
    let bytes = count
        .checked_mul(4)
        .ok_or_else(|| Error::Geometry(format!("{what} size overflows")))?;
    let raw = read_vec(source, bytes, what)?;
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: what.into() });
    }
    Ok(values)
}

fn read_tensor3<R: Read>(
    source: &mut R,
    shape: (usize, usize, usize),
    what: &'static str,
) -> Result<Array3<f32>> {
    let v = read_f32s(source, shape.0 * shape.1 * shape.2, what)?;
    Array3::from_shape_vec(shape, v).map_err(|e| Error::Shape(e.to_string()))
}

fn read_tensor2<R: Read>(
    source: &mut R,
    shape: (usize, usize),
    what: &'static str,
) -> Result<Array2<f32>> {
    let v = read_f32s(source, shape.0 * shape.1, what)?;
    Array2::from_shape_vec(shape, v).map_err(|e| Error::Shape(e.to_string()))
}
