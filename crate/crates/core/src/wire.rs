//! Sender/receiver wire format.
//!
//! ## Frame layout
//!
//! All multi-byte integers are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MMGS"
//! 4       1     version (1)
//! 5       1     flags (bit0 = payload is zlib-compressed)
//! 6       2     width
//! 8       2     height
//! 10      1     num_classes
//! 11      1     modality_mask (bit0 = RGB, bit1 = IR)
//! 12      4     payload_len
//! 16      n     payload
//! 16+n    4     CRC-32 (IEEE) over bytes 0..16+n
//! ```
//!
//! The payload is `compress(pack_bits(one_hot_encode(seg)))`: the one-hot
//! tensor packed MSB-first and wrapped in an RFC 1950 zlib stream at the
//! maximum DEFLATE level.

use std::io::{Read, Write};

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmap::{one_hot_decode, one_hot_encode, OneHotMap, SegMap, SegMapError};

pub const FRAME_MAGIC: &[u8; 4] = b"MMGS";
pub const FRAME_VERSION: u8 = 1;
pub const FLAG_COMPRESSED: u8 = 0b0000_0001;
pub const MODALITY_RGB: u8 = 0b01;
pub const MODALITY_IR: u8 = 0b10;
pub const HEADER_LEN: usize = 16;
pub const TRAILER_LEN: usize = 4;

/// DEFLATE effort. Frozen: changing it changes frame bytes.
const DEFLATE_LEVEL: u32 = 9;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame too short: {0} bytes")]
    Truncated(usize),
    #[error("bad frame magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u8),
    #[error("frame length {actual} does not match header (expected {expected})")]
    FrameLengthMismatch { expected: usize, actual: usize },
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("invalid header field: {0}")]
    InvalidHeader(String),
    #[error("corrupt compressed stream: {0}")]
    CorruptStream(String),
    #[error("packed length {actual} does not match {expected} for the stated dimensions")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-zero padding bits in packed payload")]
    NonZeroPadding,
    #[error("malformed one-hot payload: {0}")]
    MalformedOneHot(SegMapError),
}

pub type Result<T, E = WireError> = std::result::Result<T, E>;

/// Number of bytes needed to hold `bits` bits.
pub fn packed_len(bits: usize) -> usize {
    bits.div_ceil(8)
}

/// Packs the one-hot bits MSB-first, zero-padding the final byte.
pub fn pack_bits(oh: &OneHotMap) -> Vec<u8> {
    let bits = oh.bits();
    let mut out = vec![0u8; packed_len(bits.len())];
    for (i, &b) in bits.iter().enumerate() {
        if b != 0 {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

pub fn unpack_bits(data: &[u8], width: usize, height: usize, num_classes: u8) -> Result<OneHotMap> {
    let n = width * height * num_classes as usize;
    let expected = packed_len(n);
    if data.len() != expected {
        return Err(WireError::LengthMismatch {
            expected,
            actual: data.len(),
        });
    }
    if n % 8 != 0 {
        let tail_mask = 0xFFu8 >> (n % 8);
        if data[expected - 1] & tail_mask != 0 {
            return Err(WireError::NonZeroPadding);
        }
    }
    let bits = (0..n).map(|i| (data[i / 8] >> (7 - i % 8)) & 1).collect();
    OneHotMap::from_bits(width, height, num_classes, bits).map_err(WireError::MalformedOneHot)
}

/// zlib (RFC 1950) stream at the frozen compression level.
pub fn compress(data: &[u8]) -> Vec<u8> {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::new(DEFLATE_LEVEL));
    enc.write_all(data).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

pub fn decompress(data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    ZlibDecoder::new(data)
        .read_to_end(&mut out)
        .map_err(|e| WireError::CorruptStream(e.to_string()))?;
    Ok(out)
}

/// Parsed frame header plus payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub version: u8,
    pub flags: u8,
    pub width: u16,
    pub height: u16,
    pub num_classes: u8,
    pub modality_mask: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() + TRAILER_LEN);
        out.extend_from_slice(FRAME_MAGIC);
        out.push(self.version);
        out.push(self.flags);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.num_classes);
        out.push(self.modality_mask);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Validates magic, version, length and CRC, in that order.
    pub fn parse(data: &[u8]) -> Result<Self> {
        if data.len() < HEADER_LEN + TRAILER_LEN {
            return Err(WireError::Truncated(data.len()));
        }
        let magic: [u8; 4] = data[..4].try_into().unwrap();
        if &magic != FRAME_MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        let version = data[4];
        if version != FRAME_VERSION {
            return Err(WireError::UnsupportedVersion(version));
        }
        let payload_len = u32::from_le_bytes(data[12..16].try_into().unwrap()) as usize;
        let expected = HEADER_LEN + payload_len + TRAILER_LEN;
        if data.len() != expected {
            return Err(WireError::FrameLengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        let body_end = HEADER_LEN + payload_len;
        let stored = u32::from_le_bytes(data[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&data[..body_end]);
        if stored != computed {
            return Err(WireError::CrcMismatch { stored, computed });
        }
        Ok(Self {
            version,
            flags: data[5],
            width: u16::from_le_bytes([data[6], data[7]]),
            height: u16::from_le_bytes([data[8], data[9]]),
            num_classes: data[10],
            modality_mask: data[11],
            payload: data[HEADER_LEN..body_end].to_vec(),
        })
    }
}

/// Sender path: one-hot, bit-pack, compress, frame.
pub fn encode_frame(seg: &SegMap, modality_mask: u8) -> Vec<u8> {
    debug_assert!(modality_mask & (MODALITY_RGB | MODALITY_IR) != 0);
    let packed = pack_bits(&one_hot_encode(seg));
    Frame {
        version: FRAME_VERSION,
        flags: FLAG_COMPRESSED,
        width: seg.width() as u16,
        height: seg.height() as u16,
        num_classes: seg.num_classes(),
        modality_mask,
        payload: compress(&packed),
    }
    .to_bytes()
}

/// Receiver path, inverse of [`encode_frame`].
pub fn decode_frame(data: &[u8]) -> Result<(SegMap, u8)> {
    let frame = Frame::parse(data)?;
    if frame.flags & !FLAG_COMPRESSED != 0 {
        return Err(WireError::InvalidHeader(format!(
            "reserved flag bits set: {:#04x}",
            frame.flags
        )));
    }
    let mask = frame.modality_mask;
    if mask == 0 || mask & !(MODALITY_RGB | MODALITY_IR) != 0 {
        return Err(WireError::InvalidHeader(format!("modality mask {mask:#04x}")));
    }
    if frame.width == 0 || frame.height == 0 || frame.num_classes == 0 {
        return Err(WireError::InvalidHeader(format!(
            "dimensions {}x{} with {} classes",
            frame.width, frame.height, frame.num_classes
        )));
    }
    let packed = if frame.flags & FLAG_COMPRESSED != 0 {
        decompress(&frame.payload)?
    } else {
        frame.payload
    };
    let oh = unpack_bits(
        &packed,
        frame.width as usize,
        frame.height as usize,
        frame.num_classes,
    )?;
    let seg = one_hot_decode(&oh).map_err(WireError::MalformedOneHot)?;
    Ok((seg, mask))
}

/// Size accounting for one transmitted map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    /// One byte per one-hot element: `W * H * C`.
    pub raw_onehot_bytes: usize,
    pub packed_bytes: usize,
    /// Payload only, header and CRC excluded.
    pub compressed_bytes: usize,
    pub frame_bytes: usize,
    pub ratio_onehot: f64,
    pub ratio_packed: f64,
}

impl CompressionReport {
    pub fn from_sizes(raw_onehot_bytes: usize, compressed_bytes: usize) -> Self {
        let packed_bytes = packed_len(raw_onehot_bytes);
        Self {
            raw_onehot_bytes,
            packed_bytes,
            compressed_bytes,
            frame_bytes: HEADER_LEN + compressed_bytes + TRAILER_LEN,
            ratio_onehot: raw_onehot_bytes as f64 / compressed_bytes as f64,
            ratio_packed: packed_bytes as f64 / compressed_bytes as f64,
        }
    }
}

pub fn measure_compression(seg: &SegMap) -> CompressionReport {
    let oh = one_hot_encode(seg);
    let compressed = compress(&pack_bits(&oh));
    CompressionReport::from_sizes(oh.bits().len(), compressed.len())
}

/// Baseline: compress the raw label bytes instead of the one-hot tensor.
pub fn label_map_compressed_len(seg: &SegMap) -> usize {
    compress(seg.labels()).len()
}
