//! TEDH: binary interchange format for per-layer hidden-state dumps.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "TEDH"
//! 4       2     version (u16) = 1
//! 6       2     flags (u16)
//! 8       4     L layers (u32)
//! 12      4     N tokens (u32)
//! 16      4     D dim (u32)
//! 20      1     dtype (u8), 0 = float32 LE
//! 21      4     metadata length M (u32)
//! 25      M     metadata, UTF-8 `key=value` lines joined by '\n'
//! 25+M    N     mask bytes, 0 or 1
//! 25+M+N  4LND  payload, row-major [layer][token][dim]
//! ```

use std::fs;
use std::path::Path;

use super::hidden::HiddenStates;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TEDH";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
/// Bytes before the metadata blob.
pub const HEADER_LEN: usize = 25;

/// Format errors; each has a stable code.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TedhError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u8),
    #[error("truncated {section}: need {needed} bytes, have {available}")]
    Truncated {
        section: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("payload length mismatch: header implies {expected} bytes, file has {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid shape L={layers} N={tokens} D={dim}")]
    InvalidShape { layers: u32, tokens: u32, dim: u32 },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid metadata: {0}")]
    BadMetadata(String),
    #[error("non-finite payload value at index {0}")]
    NonFinite(usize),
    #[error("big-endian hosts are not supported")]
    BigEndianHost,
}

impl TedhError {
    pub fn code(&self) -> &'static str {
        match self {
            TedhError::BadMagic(_) => "TEDH_BAD_MAGIC",
            TedhError::UnsupportedVersion(_) => "TEDH_VERSION",
            TedhError::UnsupportedDtype(_) => "TEDH_DTYPE",
            TedhError::Truncated { .. } => "TEDH_TRUNCATED",
            TedhError::LengthMismatch { .. } => "TEDH_LENGTH",
            TedhError::InvalidShape { .. } => "TEDH_SHAPE",
            TedhError::InvalidMask(_) => "TEDH_MASK",
            TedhError::BadMetadata(_) => "TEDH_META",
            TedhError::NonFinite(_) => "TEDH_NONFINITE",
            TedhError::BigEndianHost => "TEDH_ENDIAN",
        }
    }
}

fn host_check() -> Result<(), TedhError> {
    if cfg!(target_endian = "big") {
        return Err(TedhError::BigEndianHost);
    }
    Ok(())
}

pub fn encoded_len(h: &HiddenStates) -> usize {
    HEADER_LEN + meta_blob(h).len() + h.tokens() + 4 * h.data().len()
}

fn meta_blob(h: &HiddenStates) -> String {
    h.meta()
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn encode(h: &HiddenStates) -> Result<Vec<u8>, TedhError> {
    host_check()?;
    let meta = meta_blob(h);
    let mut out = Vec::with_capacity(encoded_len(h));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&h.flags().to_le_bytes());
    out.extend_from_slice(&(h.layers() as u32).to_le_bytes());
    out.extend_from_slice(&(h.tokens() as u32).to_le_bytes());
    out.extend_from_slice(&(h.dim() as u32).to_le_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend(h.mask().iter().map(|&m| m as u8));
    for v in h.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(
    bytes: &'a [u8],
    pos: &mut usize,
    n: usize,
    section: &'static str,
) -> Result<&'a [u8], TedhError> {
    let available = bytes.len().saturating_sub(*pos);
    if available < n {
        return Err(TedhError::Truncated {
            section,
            needed: n,
            available,
        });
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn u16_at(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn u32_at(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

pub fn decode(bytes: &[u8]) -> Result<HiddenStates, TedhError> {
    host_check()?;
    let mut pos = 0;
    let magic = take(bytes, &mut pos, 4, "magic")?;
    if magic != MAGIC {
        let mut m = [0u8; 4];
        m.copy_from_slice(magic);
        return Err(TedhError::BadMagic(m));
    }
    let header = take(bytes, &mut pos, HEADER_LEN - 4, "header")?;
    let version = u16_at(&header[0..2]);
    if version != VERSION {
        return Err(TedhError::UnsupportedVersion(version));
    }
    let flags = u16_at(&header[2..4]);
    let (l, n, d) = (u32_at(&header[4..8]), u32_at(&header[8..12]), u32_at(&header[12..16]));
    let dtype = header[16];
    if dtype != DTYPE_F32 {
        return Err(TedhError::UnsupportedDtype(dtype));
    }
    if l == 0 || n == 0 || d == 0 {
        return Err(TedhError::InvalidShape {
            layers: l,
            tokens: n,
            dim: d,
        });
    }
    let meta_len = u32_at(&header[17..21]) as usize;
    let meta_raw = take(bytes, &mut pos, meta_len, "metadata")?;
    let meta_str = std::str::from_utf8(meta_raw)
        .map_err(|e| TedhError::BadMetadata(format!("not UTF-8: {e}")))?;
    let mut meta = Vec::new();
    if !meta_str.is_empty() {
        for line in meta_str.split('\n') {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TedhError::BadMetadata(format!("line without '=': {line:?}")))?;
            if k.is_empty() {
                return Err(TedhError::BadMetadata("empty key".into()));
            }
            meta.push((k.to_string(), v.to_string()));
        }
    }
    let (l, n, d) = (l as usize, n as usize, d as usize);
    let mask_raw = take(bytes, &mut pos, n, "mask")?;
    let mut mask = Vec::with_capacity(n);
    for (i, &b) in mask_raw.iter().enumerate() {
        match b {
            0 => mask.push(false),
            1 => mask.push(true),
            other => return Err(TedhError::InvalidMask(format!("byte {other} at token {i}"))),
        }
    }
    if !mask.iter().any(|&m| m) {
        return Err(TedhError::InvalidMask("no valid token".into()));
    }
    let payload_len = l
        .checked_mul(n)
        .and_then(|v| v.checked_mul(d))
        .and_then(|v| v.checked_mul(4))
        .ok_or(TedhError::InvalidShape {
            layers: l as u32,
            tokens: n as u32,
            dim: d as u32,
        })?;
    let rest = bytes.len() - pos;
    if rest < payload_len {
        return Err(TedhError::Truncated {
            section: "payload",
            needed: payload_len,
            available: rest,
        });
    }
    if rest > payload_len {
        return Err(TedhError::LengthMismatch {
            expected: payload_len,
            actual: rest,
        });
    }
    let data: Vec<f32> = bytes[pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(TedhError::NonFinite(i));
    }
    let mut h = HiddenStates::new(l, n, d, mask, data)
        .expect("validated above")
        .with_flags(flags);
    h.set_meta_unchecked(meta);
    Ok(h)
}

pub fn write_tedh(h: &HiddenStates, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(h)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_tedh(path: impl AsRef<Path>) -> Result<HiddenStates> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> HiddenStates {
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
        HiddenStates::new(2, 3, 4, vec![true, true, false], data)
            .unwrap()
            .with_meta("encoder", "toy:seed=7")
            .unwrap()
            .with_meta("includes_embedding_layer", "true")
            .unwrap()
    }

    #[test]
    fn file_size_matches_layout() {
        let h = sample();
        let meta = "encoder=toy:seed=7\nincludes_embedding_layer=true";
        let bytes = encode(&h).unwrap();
        assert_eq!(bytes.len(), 25 + meta.len() + 3 + 2 * 3 * 4 * 4);
        assert_eq!(bytes.len(), encoded_len(&h));
        assert_eq!(&bytes[..4], b"TEDH");
        assert_eq!(bytes[20], 0);
    }

    #[test]
    fn round_trip_is_exact() {
        let h = sample().with_flags(5);
        let bytes = encode(&h).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, h);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupted_inputs_map_to_codes() {
        let good = encode(&sample()).unwrap();

        let mut b = good.clone();
        b[0] = b'X';
        assert_eq!(decode(&b).unwrap_err().code(), "TEDH_BAD_MAGIC");

        let mut b = good.clone();
        b[4] = 2;
        assert_eq!(decode(&b).unwrap_err().code(), "TEDH_VERSION");

        let mut b = good.clone();
        b[20] = 1;
        assert_eq!(decode(&b).unwrap_err().code(), "TEDH_DTYPE");

        let b = &good[..good.len() - 1];
        assert_eq!(decode(b).unwrap_err().code(), "TEDH_TRUNCATED");

        let mut b = good.clone();
        b.push(0);
        assert_eq!(decode(&b).unwrap_err().code(), "TEDH_LENGTH");

        assert_eq!(decode(b"TE").unwrap_err().code(), "TEDH_TRUNCATED");
        assert_eq!(decode(&[]).unwrap_err().code(), "TEDH_TRUNCATED");
    }
}
