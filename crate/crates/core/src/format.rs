//! Binary container shared by checkpoint (`DMMC`) and dataset (`DMMD`) files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes
//! version      u16 (= 1)
//! header_len   u32, followed by that many bytes of UTF-8 JSON
//! arrays       repeated until the trailer, sorted by name:
//!                name_len u16, name bytes (UTF-8)
//!                rank u8, dims u32 * rank
//!                payload f32 * prod(dims)
//! crc32        u32 over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const VERSION: u16 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DMMC";
pub const DATASET_MAGIC: [u8; 4] = *b"DMMD";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {0} (this build reads version {VERSION})")]
    Version(u16),
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed container: {0}")]
    Malformed(String),
}

/// JSON header plus named `f32` arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: String,
    pub arrays: BTreeMap<String, Tensor<f32>>,
}

pub fn encode(magic: [u8; 4], c: &Container) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(c.header.len() as u32).to_le_bytes());
    out.extend_from_slice(c.header.as_bytes());
    for (name, t) in &c.arrays {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated(format!("need {n} bytes for {what} at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Decodes a container, checking in order: magic, version, framing, checksum.
pub fn decode(magic: [u8; 4], bytes: &[u8]) -> Result<Container, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated(format!("{} bytes is shorter than the magic", bytes.len())));
    }
    if bytes[..4] != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(&magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let header_len = r.u32("header length")? as usize;
    if r.remaining() < header_len + 4 {
        return Err(FormatError::Truncated(format!(
            "header declares {header_len} bytes but only {} remain",
            r.remaining()
        )));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }

    let header = std::str::from_utf8(r.take(header_len, "header")?)
        .map_err(|e| FormatError::Malformed(format!("header is not UTF-8: {e}")))?
        .to_owned();
    let mut body = Reader { buf: &bytes[..body_end], pos: r.pos };
    let mut arrays = BTreeMap::new();
    let mut last: Option<String> = None;
    while body.remaining() > 0 {
        let name_len = body.u16("array name length")? as usize;
        let name = std::str::from_utf8(body.take(name_len, "array name")?)
            .map_err(|e| FormatError::Malformed(format!("array name is not UTF-8: {e}")))?
            .to_owned();
        if last.as_ref().is_some_and(|prev| prev >= &name) {
            return Err(FormatError::Malformed(format!("array {name:?} out of canonical order")));
        }
        let rank = body.take(1, "rank")?[0] as usize;
        let dims = (0..rank).map(|_| body.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let payload = body.take(n * 4, "payload")?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(dims, data).map_err(|e| FormatError::Malformed(format!("array {name:?}: {e}")))?;
        arrays.insert(name.clone(), t);
        last = Some(name);
    }
    Ok(Container { header, arrays })
}

pub fn write_file(path: &Path, magic: [u8; 4], c: &Container) -> crate::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| crate::Error::io(parent, e))?;
    }
    std::fs::write(path, encode(magic, c)).map_err(|e| crate::Error::io(path, e))
}

pub fn read_file(path: &Path, magic: [u8; 4]) -> crate::Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    Ok(decode(magic, &bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut arrays = BTreeMap::new();
        arrays.insert("a".into(), Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap());
        arrays.insert("b".into(), Tensor::new(vec![3], vec![f32::MIN_POSITIVE, 7.0, -0.0]).unwrap());
        Container { header: r#"{"k":1}"#.into(), arrays }
    }

    #[test]
    fn round_trip() {
        let bytes = encode(CHECKPOINT_MAGIC, &sample());
        let back = decode(CHECKPOINT_MAGIC, &bytes).unwrap();
        assert_eq!(encode(CHECKPOINT_MAGIC, &back), bytes);
    }

    #[test]
    fn error_taxonomy() {
        let bytes = encode(CHECKPOINT_MAGIC, &sample());
        assert!(matches!(decode(DATASET_MAGIC, &bytes), Err(FormatError::BadMagic { .. })));

        let mut v99 = bytes.clone();
        v99[4..6].copy_from_slice(&99u16.to_le_bytes());
        assert_eq!(decode(CHECKPOINT_MAGIC, &v99), Err(FormatError::Version(99)));

        assert!(matches!(decode(CHECKPOINT_MAGIC, &bytes[..12]), Err(FormatError::Truncated(_))));
        assert!(matches!(decode(CHECKPOINT_MAGIC, &bytes[..3]), Err(FormatError::Truncated(_))));

        let mut flipped = bytes.clone();
        let i = bytes.len() - 8;
        flipped[i] ^= 0x40;
        assert!(matches!(decode(CHECKPOINT_MAGIC, &flipped), Err(FormatError::Checksum { .. })));
    }
}
