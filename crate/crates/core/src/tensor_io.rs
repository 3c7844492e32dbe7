//! `SHRPVID1` video tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! 0   8 bytes  magic "SHRPVID1"
//! 8   u32      n (frames)
//! 12  u32      f (tokens per frame)
//! 16  u32      d (embedding dim)
//! 20  f32 * n*f*d, frame-major
//! ```

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::math::Mat;
use crate::visual::VideoTokens;

pub const MAGIC: &[u8; 8] = b"SHRPVID1";
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("bad magic {0:?}, expected \"SHRPVID1\"")]
    BadMagic([u8; 8]),
    #[error("truncated file: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("dimensions {n}x{f}x{d} overflow the addressable size")]
    DimensionOverflow { n: u32, f: u32, d: u32 },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid tensor: {0}")]
    Invalid(String),
    #[error("dimension {0} does not fit in u32")]
    TooLarge(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TensorFileError {
    /// Stable numeric code per failure kind.
    pub fn code(&self) -> u8 {
        match self {
            TensorFileError::BadMagic(_) => 10,
            TensorFileError::Truncated { .. } => 11,
            TensorFileError::DimensionOverflow { .. } => 12,
            TensorFileError::TrailingBytes(_) => 13,
            TensorFileError::Invalid(_) => 14,
            TensorFileError::TooLarge(_) => 15,
            TensorFileError::Io(_) => 16,
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorFileError>;

/// Serializes a video. Values are narrowed to `f32`.
pub fn encode(video: &VideoTokens) -> Result<Vec<u8>> {
    let dims = [video.frames(), video.tokens_per_frame(), video.dim()];
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * video.data().as_slice().len());
    out.extend_from_slice(MAGIC);
    for dim in dims {
        let dim = u32::try_from(dim).map_err(|_| TensorFileError::TooLarge(dim))?;
        out.extend_from_slice(&dim.to_le_bytes());
    }
    for &v in video.data().as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode(bytes: &[u8]) -> Result<VideoTokens> {
    if bytes.len() < MAGIC.len() {
        return Err(TensorFileError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 8] = bytes[..8].try_into().expect("8-byte slice");
    if &magic != MAGIC {
        return Err(TensorFileError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(TensorFileError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let (n, f, d) = (read_u32(bytes, 8), read_u32(bytes, 12), read_u32(bytes, 16));
    let overflow = TensorFileError::DimensionOverflow { n, f, d };
    let count = (n as usize)
        .checked_mul(f as usize)
        .and_then(|x| x.checked_mul(d as usize));
    let payload = count.and_then(|c| c.checked_mul(4));
    let expected = payload.and_then(|p| p.checked_add(HEADER_LEN));
    let (Some(count), Some(expected)) = (count, expected) else {
        return Err(overflow);
    };
    if bytes.len() < expected {
        return Err(TensorFileError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(TensorFileError::TrailingBytes(bytes.len() - expected));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    debug_assert_eq!(data.len(), count);
    let (n, f, d) = (n as usize, f as usize, d as usize);
    let mat = Mat::new(n * f, d, data).map_err(|e| TensorFileError::Invalid(e.to_string()))?;
    VideoTokens::new(n, f, d, mat).map_err(|e| TensorFileError::Invalid(e.to_string()))
}

pub fn write_path(path: impl AsRef<Path>, video: &VideoTokens) -> Result<()> {
    fs::write(path, encode(video)?)?;
    Ok(())
}

pub fn read_path(path: impl AsRef<Path>) -> Result<VideoTokens> {
    decode(&fs::read(path)?)
}

/// Rounds every value to the nearest `f32`, the precision the file stores.
pub fn quantize(video: &VideoTokens) -> VideoTokens {
    let data = video
        .data()
        .as_slice()
        .iter()
        .map(|&v| v as f32 as f64)
        .collect();
    let mat = Mat::new(video.total_tokens(), video.dim(), data).expect("f32 values are finite");
    VideoTokens::new(video.frames(), video.tokens_per_frame(), video.dim(), mat)
        .expect("shape unchanged")
}
