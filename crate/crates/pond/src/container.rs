//! Binary artifact container shared by datasets and checkpoints.
//!
//! Layout, in file order:
//!
//! 1. 8 magic bytes identifying the artifact kind,
//! 2. a `u32` little-endian header length,
//! 3. that many bytes of UTF-8 JSON header,
//! 4. the payload: little-endian IEEE-754 `f64` values,
//! 5. a CRC-32 of the payload bytes, little-endian.
//!
//! The header declares how many payload values to expect, so reading is a
//! two-step handshake: [`read_raw`] peels magic and header off the file, the
//! caller parses the header to learn the expected count, and
//! [`decode_payload`] validates length and checksum before decoding. Each
//! failure mode (wrong magic, short file, checksum mismatch, malformed
//! header) maps to a distinct [`PondError`] variant.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::PondError;
use crate::Result;

/// Magic bytes for dataset files.
pub const DATASET_MAGIC: &[u8; 8] = b"PONDDS1\0";
/// Magic bytes for checkpoint files.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PONDCK1\0";

/// A container with the magic verified and the header split off, but the
/// payload not yet validated.
#[derive(Debug)]
pub struct Raw {
    /// UTF-8 JSON header bytes.
    pub header: Vec<u8>,
    /// Payload bytes followed by the 4-byte CRC trailer.
    body: Vec<u8>,
}

/// Serialize a container to `path`.
pub fn write<H: Serialize>(
    path: &Path,
    magic: &[u8; 8],
    header: &H,
    payload: &[f64],
) -> Result<()> {
    let header_bytes = serde_json::to_vec(header).map_err(|e| PondError::Header {
        path: path.to_path_buf(),
        detail: format!("header serialization failed: {e}"),
    })?;
    let header_len = u32::try_from(header_bytes.len()).map_err(|_| PondError::Header {
        path: path.to_path_buf(),
        detail: "header exceeds u32 length".into(),
    })?;

    let mut bytes = Vec::with_capacity(8 + 4 + header_bytes.len() + payload.len() * 8 + 4);
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&header_len.to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    let payload_start = bytes.len();
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&bytes[payload_start..]);
    bytes.extend_from_slice(&crc.to_le_bytes());

    std::fs::write(path, &bytes).map_err(|e| PondError::io(path, e))
}

/// Read a container file, verify its magic, and split off the header.
///
/// The payload is left raw; call [`decode_payload`] once the header has
/// revealed how many values it should hold.
pub fn read_raw(path: &Path, magic: &[u8; 8]) -> Result<Raw> {
    let bytes = std::fs::read(path).map_err(|e| PondError::io(path, e))?;
    if bytes.len() < 8 {
        return Err(PondError::Truncated {
            path: path.to_path_buf(),
            detail: format!("file holds {} bytes, shorter than the magic", bytes.len()),
        });
    }
    if &bytes[..8] != magic {
        return Err(PondError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < 12 {
        return Err(PondError::Truncated {
            path: path.to_path_buf(),
            detail: "file ends inside the header length field".into(),
        });
    }
    let header_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(PondError::Truncated {
            path: path.to_path_buf(),
            detail: format!(
                "header declares {header_len} bytes but only {} remain",
                bytes.len() - 12
            ),
        });
    }
    Ok(Raw {
        header: bytes[12..header_end].to_vec(),
        body: bytes[header_end..].to_vec(),
    })
}

/// Parse a JSON header into a typed struct, mapping failures to
/// [`PondError::Header`].
pub fn parse_header<T: DeserializeOwned>(path: &Path, header: &[u8]) -> Result<T> {
    let text = std::str::from_utf8(header).map_err(|_| PondError::Header {
        path: path.to_path_buf(),
        detail: "header is not valid UTF-8".into(),
    })?;
    serde_json::from_str(text).map_err(|e| PondError::Header {
        path: path.to_path_buf(),
        detail: format!("header JSON rejected: {e}"),
    })
}

/// Validate payload length and checksum, then decode the values.
///
/// `expected` is the value count promised by the header. A short body is
/// reported as truncation, a long one as a header/payload disagreement, and
/// a CRC mismatch as checksum failure — in that order, so a file shorn of
/// whole values is still diagnosed as truncated rather than corrupt.
pub fn decode_payload(path: &Path, raw: &Raw, expected: usize) -> Result<Vec<f64>> {
    let want = expected * 8 + 4;
    if raw.body.len() < want {
        return Err(PondError::Truncated {
            path: path.to_path_buf(),
            detail: format!(
                "header promises {expected} values ({want} bytes with checksum) \
                 but only {} bytes follow it",
                raw.body.len()
            ),
        });
    }
    if raw.body.len() > want {
        return Err(PondError::Header {
            path: path.to_path_buf(),
            detail: format!(
                "{} bytes follow the header but it only accounts for {want}",
                raw.body.len()
            ),
        });
    }
    let (payload, trailer) = raw.body.split_at(expected * 8);
    let stored = u32::from_le_bytes([trailer[0], trailer[1], trailer[2], trailer[3]]);
    if crc32fast::hash(payload) != stored {
        return Err(PondError::Checksum {
            path: path.to_path_buf(),
        });
    }
    let mut values = Vec::with_capacity(expected);
    for chunk in payload.chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Header {
        count: usize,
        tag: String,
    }

    fn roundtrip_file(dir: &tempfile::TempDir, payload: &[f64]) -> std::path::PathBuf {
        let path = dir.path().join("artifact.bin");
        let header = Header {
            count: payload.len(),
            tag: "demo".into(),
        };
        write(&path, DATASET_MAGIC, &header, payload).unwrap();
        path
    }

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let payload = vec![1.5, -0.0, f64::MIN_POSITIVE, 3.9e300];
        let path = roundtrip_file(&dir, &payload);

        let raw = read_raw(&path, DATASET_MAGIC).unwrap();
        let header: Header = parse_header(&path, &raw.header).unwrap();
        assert_eq!(header.count, 4);
        let values = decode_payload(&path, &raw, header.count).unwrap();
        assert_eq!(values.len(), payload.len());
        for (a, b) in values.iter().zip(&payload) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn empty_payload_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = roundtrip_file(&dir, &[]);
        let raw = read_raw(&path, DATASET_MAGIC).unwrap();
        let values = decode_payload(&path, &raw, 0).unwrap();
        assert!(values.is_empty());
    }

    #[test]
    fn wrong_magic_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = roundtrip_file(&dir, &[1.0]);
        let err = read_raw(&path, CHECKPOINT_MAGIC).unwrap_err();
        assert!(matches!(err, PondError::BadMagic { .. }), "{err}");
    }

    #[test]
    fn flipped_magic_byte_is_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = roundtrip_file(&dir, &[1.0]);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[3] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_raw(&path, DATASET_MAGIC).unwrap_err();
        assert!(matches!(err, PondError::BadMagic { .. }), "{err}");
    }

    #[test]
    fn truncated_payload_is_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = roundtrip_file(&dir, &[1.0, 2.0, 3.0]);
        let bytes = std::fs::read(&path).unwrap();
        // Chop a whole value plus part of another: still diagnosed before
        // any checksum comparison.
        std::fs::write(&path, &bytes[..bytes.len() - 11]).unwrap();
        let raw = read_raw(&path, DATASET_MAGIC).unwrap();
        let err = decode_payload(&path, &raw, 3).unwrap_err();
        assert!(matches!(err, PondError::Truncated { .. }), "{err}");
    }

    #[test]
    fn whole_value_truncation_is_still_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = roundtrip_file(&dir, &[1.0, 2.0, 3.0]);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        let raw = read_raw(&path, DATASET_MAGIC).unwrap();
        let err = decode_payload(&path, &raw, 3).unwrap_err();
        assert!(matches!(err, PondError::Truncated { .. }), "{err}");
    }

    #[test]
    fn corrupt_payload_byte_is_checksum_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = roundtrip_file(&dir, &[1.0, 2.0, 3.0]);
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 12] ^= 0x01; // inside the last payload value
        std::fs::write(&path, &bytes).unwrap();
        let raw = read_raw(&path, DATASET_MAGIC).unwrap();
        let err = decode_payload(&path, &raw, 3).unwrap_err();
        assert!(matches!(err, PondError::Checksum { .. }), "{err}");
    }

    #[test]
    fn malformed_header_is_header_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("artifact.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(DATASET_MAGIC);
        bytes.extend_from_slice(&5u32.to_le_bytes());
        bytes.extend_from_slice(b"{oops");
        bytes.extend_from_slice(&crc32fast::hash(b"").to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let raw = read_raw(&path, DATASET_MAGIC).unwrap();
        let err = parse_header::<Header>(&path, &raw.header).unwrap_err();
        assert!(matches!(err, PondError::Header { .. }), "{err}");
    }

    #[test]
    fn empty_file_is_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("artifact.bin");
        std::fs::write(&path, b"").unwrap();
        let err = read_raw(&path, DATASET_MAGIC).unwrap_err();
        assert!(matches!(err, PondError::Truncated { .. }), "{err}");
    }

    #[test]
    fn missing_file_is_io() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nope.bin");
        let err = read_raw(&path, DATASET_MAGIC).unwrap_err();
        assert!(matches!(err, PondError::Io { .. }), "{err}");
    }
}
