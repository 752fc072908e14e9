//! Token (`CUBQ`) and feature (`CUBF`) tensor files.
//!
//! Token file, all integers little-endian:
//!
//! ```text
//! "CUBQ" | version u32 | h u32 | w u32 | d u32 | L u32 | id width u32 (8 or 16)
//!        | ids (h*w*d values of the given width) | crc32 u32
//! ```
//!
//! Feature file, one or more tensors of a common shape:
//!
//! ```text
//! "CUBF" | version u32 | count u64 | h u32 | w u32 | d u32 | dtype u32 (1 = f32)
//!        | count * h*w*d f32 values | crc32 u32
//! ```
//!
//! The trailing CRC-32 covers every preceding byte.

use std::path::Path;

use crate::codec::{checksum, read_file, write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::{FeatureTensor, Shape3, TokenTensor};

pub const TOKEN_MAGIC: &[u8; 4] = b"CUBQ";
pub const FEATURE_MAGIC: &[u8; 4] = b"CUBF";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u32 = 1;

/// Size of the fixed feature-file header in bytes.
pub const FEATURE_HEADER_LEN: usize = 32;

fn finish(mut w: ByteWriter) -> Vec<u8> {
    let crc = checksum(&w.buf);
    w.u32(crc);
    w.buf
}

/// Verifies magic, trailing checksum and version; returns a reader past the magic.
fn open<'a>(bytes: &'a [u8], magic: &[u8; 4], path: &'a Path) -> Result<ByteReader<'a>> {
    if bytes.len() < 12 {
        return Err(Error::integrity(path, "file too short"));
    }
    if &bytes[..4] != magic {
        return Err(Error::integrity(path, "bad magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if checksum(body) != stored {
        return Err(Error::integrity(path, "checksum mismatch"));
    }
    let mut r = ByteReader::new(body, path);
    r.take(4)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(r)
}

fn read_shape(r: &mut ByteReader<'_>) -> Result<Shape3> {
    let (h, w, d) = (r.u32()?, r.u32()?, r.u32()?);
    Shape3::new(h as usize, w as usize, d as usize).map_err(|e| r.corrupt(e.to_string()))
}

pub fn encode_tokens(q: &TokenTensor) -> Vec<u8> {
    let s = q.shape();
    let width: u32 = if q.levels() <= 256 { 8 } else { 16 };
    let mut w = ByteWriter::default();
    w.bytes(TOKEN_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(s.h as u32);
    w.u32(s.w as u32);
    w.u32(s.d as u32);
    w.u32(q.levels() as u32);
    w.u32(width);
    for &id in q.ids() {
        if width == 8 {
            w.u8(id as u8);
        } else {
            w.bytes(&id.to_le_bytes());
        }
    }
    finish(w)
}

pub fn decode_tokens(bytes: &[u8], path: &Path) -> Result<TokenTensor> {
    let mut r = open(bytes, TOKEN_MAGIC, path)?;
    let shape = read_shape(&mut r)?;
    let levels = r.u32()? as usize;
    let width = r.u32()?;
    let n = shape.total();
    let ids: Vec<u16> = match width {
        8 => r.take(n)?.iter().map(|&b| b as u16).collect(),
        16 => r
            .take(n * 2)?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect(),
        other => return Err(r.corrupt(format!("unsupported id width {other}"))),
    };
    if r.remaining() != 0 {
        return Err(r.corrupt("trailing bytes after payload"));
    }
    TokenTensor::new(shape, levels, ids).map_err(|e| r.corrupt(e.to_string()))
}

pub fn write_tokens(path: &Path, q: &TokenTensor) -> Result<()> {
    write_atomic(path, &encode_tokens(q))
}

pub fn read_tokens(path: &Path) -> Result<TokenTensor> {
    decode_tokens(&read_file(path)?, path)
}

pub fn encode_features(tensors: &[FeatureTensor]) -> Result<Vec<u8>> {
    let shape = tensors
        .first()
        .map(|t| t.shape())
        .ok_or_else(|| Error::InvalidInput("feature file needs at least one tensor".into()))?;
    if tensors.iter().any(|t| t.shape() != shape) {
        return Err(Error::ShapeMismatch("feature file tensors must share a shape".into()));
    }
    let mut w = ByteWriter::default();
    w.bytes(FEATURE_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(tensors.len() as u64);
    w.u32(shape.h as u32);
    w.u32(shape.w as u32);
    w.u32(shape.d as u32);
    w.u32(DTYPE_F32);
    w.buf.reserve(tensors.len() * shape.total() * 4 + 4);
    for t in tensors {
        for &v in t.values() {
            w.bytes(&v.to_le_bytes());
        }
    }
    Ok(finish(w))
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Vec<FeatureTensor>> {
    let mut r = open(bytes, FEATURE_MAGIC, path)?;
    let count = r.u64()? as usize;
    let shape = read_shape(&mut r)?;
    let dtype = r.u32()?;
    if dtype != DTYPE_F32 {
        return Err(r.corrupt(format!("unsupported dtype flag {dtype}")));
    }
    let n = shape.total();
    if count == 0 || r.remaining() != count.saturating_mul(n).saturating_mul(4) {
        return Err(r.corrupt("payload length does not match header"));
    }
    (0..count)
        .map(|_| {
            let values = r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            FeatureTensor::new(shape, values).map_err(|e| r.corrupt(e.to_string()))
        })
        .collect()
}

pub fn write_features(path: &Path, tensors: &[FeatureTensor]) -> Result<()> {
    write_atomic(path, &encode_features(tensors)?)
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureTensor>> {
    decode_features(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn tokens(shape: Shape3, levels: usize, seed: u64) -> TokenTensor {
        let mut rng = SeededRng::new(seed);
        let ids = (0..shape.total()).map(|_| rng.below(levels) as u16).collect();
        TokenTensor::new(shape, levels, ids).unwrap()
    }

    #[test]
    fn token_round_trip_both_widths() {
        let dir = tempfile::tempdir().unwrap();
        for levels in [2, 256, 257, 4096] {
            let q = tokens(Shape3::new(3, 2, 5).unwrap(), levels, levels as u64);
            let path = dir.path().join(format!("t{levels}.cubq"));
            write_tokens(&path, &q).unwrap();
            assert_eq!(read_tokens(&path).unwrap(), q);
        }
    }

    #[test]
    fn token_header_layout() {
        let q = tokens(Shape3::new(1, 2, 3).unwrap(), 8, 0);
        let bytes = encode_tokens(&q);
        assert_eq!(&bytes[..4], b"CUBQ");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 8);
        assert_eq!(bytes.len(), 28 + 6 + 4);
    }

    #[test]
    fn corrupted_and_truncated_files_rejected() {
        let path = Path::new("mem");
        let q = tokens(Shape3::new(2, 2, 2).unwrap(), 4, 1);
        let mut bytes = encode_tokens(&q);
        assert!(matches!(
            decode_tokens(&bytes[..bytes.len() - 3], path),
            Err(Error::Integrity { .. })
        ));
        bytes[30] ^= 1;
        assert!(matches!(decode_tokens(&bytes, path), Err(Error::Integrity { .. })));
        assert!(matches!(decode_tokens(b"CUBQ", path), Err(Error::Integrity { .. })));
    }

    #[test]
    fn feature_round_trip_and_size() {
        let shape = Shape3::new(2, 1, 3).unwrap();
        let a = FeatureTensor::new(shape, vec![0.5, -1.25, 3.0, 1e-7, 2.5, -0.0]).unwrap();
        let b = FeatureTensor::new(shape, vec![1.0; 6]).unwrap();
        let bytes = encode_features(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(bytes.len(), FEATURE_HEADER_LEN + 2 * 6 * 4 + 4);
        assert_eq!(decode_features(&bytes, Path::new("mem")).unwrap(), vec![a, b]);
    }

    #[test]
    fn feature_payload_size_at_encoder_scale() {
        let shape = Shape3::new(16, 16, 768).unwrap();
        let t = FeatureTensor::new(shape, vec![0.0; shape.total()]).unwrap();
        let bytes = encode_features(&[t]).unwrap();
        assert_eq!(bytes.len(), 16 * 16 * 768 * 4 + FEATURE_HEADER_LEN + 4);
    }
}
