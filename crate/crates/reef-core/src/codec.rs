//! Bit-exact encoder/decoder for the on-disk model-blob format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset 0    magic "RFB1", u32 format version, zeros          (116 bytes)
//! offset 116  u32 data-section size in bytes                   (4 bytes)
//! offset 120  data: row-major u8 codes, each dimension padded
//!             up to a multiple of 128 with the zero point
//! then        metadata: u32 rows (padded), u32 cols (padded),
//!             f32 scale                                        (12 bytes)
//! then        extension: u32 logical rows, u32 logical cols,
//!             u8 zero point, u8 instruction tag                (10 bytes)
//! ```
//!
//! The header bytes before the size field are a fixed constant of this
//! format; blobs are self-describing within this project and are not claimed
//! compatible with any vendor toolchain. The extension records the
//! pre-padding shape, since padded dimensions do not reflect it.
//!
//! The scale travels as f32. Blocks whose scale is not representable in f32
//! round to the nearest f32 on encode.

use std::path::Path;

use crate::device::InstructionKind;
use crate::error::{Error, Result};
use crate::quant::QuantizedBlock;
use crate::tensor::TensorShape;

pub const HEADER_LEN: usize = 120;
pub const MAGIC: &[u8; 4] = b"RFB1";
pub const FORMAT_VERSION: u32 = 1;
/// Each data-section dimension is padded up to a multiple of this.
pub const PAD_MULTIPLE: usize = 128;
const METADATA_LEN: usize = 12;
const EXTENSION_LEN: usize = 10;

/// Decoded facts about a blob, beyond the block itself.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobInfo {
    pub version: u32,
    pub data_len: usize,
    pub padded_shape: TensorShape,
    pub logical_shape: TensorShape,
    pub scale: f32,
    pub zero_point: u8,
    pub kind: InstructionKind,
}

fn pad_up(n: usize) -> usize {
    n.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE
}

/// Size in bytes of the encoding of a `rows x cols` block.
pub fn encoded_len(rows: usize, cols: usize) -> usize {
    HEADER_LEN + pad_up(rows) * pad_up(cols) + METADATA_LEN + EXTENSION_LEN
}

pub fn encode(block: &QuantizedBlock, kind: InstructionKind) -> Vec<u8> {
    let (rows, cols) = (block.shape.rows, block.shape.cols);
    let (prows, pcols) = (pad_up(rows), pad_up(cols));
    let data_len = prows * pcols;
    let mut out = Vec::with_capacity(HEADER_LEN + data_len + METADATA_LEN + EXTENSION_LEN);

    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.resize(HEADER_LEN - 4, 0);
    out.extend_from_slice(&(data_len as u32).to_le_bytes());

    let zp = block.zero_point;
    for r in 0..rows {
        out.extend_from_slice(&block.values[r * cols..(r + 1) * cols]);
        out.resize(out.len() + (pcols - cols), zp);
    }
    out.resize(out.len() + (prows - rows) * pcols, zp);

    out.extend_from_slice(&(prows as u32).to_le_bytes());
    out.extend_from_slice(&(pcols as u32).to_le_bytes());
    out.extend_from_slice(&(block.scale as f32).to_le_bytes());

    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out.push(zp);
    out.push(kind as u8);
    out
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<(QuantizedBlock, BlobInfo)> {
    let malformed = |msg: &str| Error::MalformedBlob(msg.to_string());
    if bytes.len() < HEADER_LEN {
        return Err(malformed("shorter than the 120-byte header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(malformed("bad magic"));
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::MalformedBlob(format!(
            "unsupported format version {version}"
        )));
    }
    let data_len = read_u32(bytes, HEADER_LEN - 4) as usize;
    let expected = HEADER_LEN + data_len + METADATA_LEN + EXTENSION_LEN;
    if bytes.len() != expected {
        return Err(Error::MalformedBlob(format!(
            "size field implies {expected} bytes, blob has {}",
            bytes.len()
        )));
    }
    let meta = HEADER_LEN + data_len;
    let prows = read_u32(bytes, meta) as usize;
    let pcols = read_u32(bytes, meta + 4) as usize;
    if prows == 0
        || pcols == 0
        || !prows.is_multiple_of(PAD_MULTIPLE)
        || !pcols.is_multiple_of(PAD_MULTIPLE)
    {
        return Err(malformed(
            "padded dimensions must be positive multiples of 128",
        ));
    }
    if prows * pcols != data_len {
        return Err(Error::MalformedBlob(format!(
            "dimensions {prows}x{pcols} do not cover the {data_len}-byte data section"
        )));
    }
    let scale = f32::from_le_bytes(bytes[meta + 8..meta + 12].try_into().unwrap());
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::MalformedBlob(format!("non-positive scale {scale}")));
    }
    let ext = meta + METADATA_LEN;
    let rows = read_u32(bytes, ext) as usize;
    let cols = read_u32(bytes, ext + 4) as usize;
    if rows == 0 || cols == 0 || rows > prows || cols > pcols {
        return Err(malformed("logical shape outside padded shape"));
    }
    let zero_point = bytes[ext + 8];
    let kind_tag = bytes[ext + 9];
    let kind = InstructionKind::ALL
        .get(kind_tag as usize)
        .copied()
        .ok_or_else(|| malformed("unknown instruction tag"))?;

    let data = &bytes[HEADER_LEN..meta];
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let start = r * pcols;
        values.extend_from_slice(&data[start..start + cols]);
    }
    let block = QuantizedBlock::new(
        TensorShape::new(rows, cols)?,
        values,
        scale as f64,
        zero_point,
    )?;
    let info = BlobInfo {
        version,
        data_len,
        padded_shape: TensorShape::new(prows, pcols)?,
        logical_shape: TensorShape::new(rows, cols)?,
        scale,
        zero_point,
        kind,
    };
    Ok((block, info))
}

pub fn encode_to_file(
    block: &QuantizedBlock,
    kind: InstructionKind,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, encode(block, kind))?;
    Ok(())
}

pub fn decode_from_file(path: impl AsRef<Path>) -> Result<(QuantizedBlock, BlobInfo)> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}
