//! `SFV1` volume files: a short plain-text header followed by raw
//! little-endian `f64` values in row-major order.
//!
//! ```text
//! SFV1
//! dims 6 64 64
//! channels f0,f1,f2,f3,f4,f5
//! type f64le
//! end
//! <8 * 6 * 64 * 64 bytes>
//! ```
//!
//! `channels -` marks an unnamed volume. When names are present there is
//! one per entry of the first axis.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::NdArray;

pub const MAGIC: &str = "SFV1";
const MAX_RANK: usize = 4;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad magic: expected {MAGIC:?}, found {found:?}")]
    BadMagic { found: String },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("header dims {dims:?} need {expected} payload bytes, found {actual}")]
    DimsMismatch {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: NdArray,
    pub channels: Vec<String>,
}

pub fn encode_volume(data: &NdArray, channels: &[String]) -> Result<Vec<u8>, VolumeError> {
    let dims = data.shape();
    if dims.len() > MAX_RANK {
        return Err(VolumeError::Header(format!("rank {} exceeds {MAX_RANK}", dims.len())));
    }
    if !channels.is_empty() && channels.len() != dims[0] {
        return Err(VolumeError::Header(format!(
            "{} channel names for leading extent {}",
            channels.len(),
            dims[0]
        )));
    }
    if let Some(bad) = channels
        .iter()
        .find(|c| c.is_empty() || c.contains([',', '\n', ' ']) || c.as_str() == "-")
    {
        return Err(VolumeError::Header(format!("invalid channel name {bad:?}")));
    }
    let dims_txt: Vec<String> = dims.iter().map(usize::to_string).collect();
    let names = if channels.is_empty() {
        "-".to_string()
    } else {
        channels.join(",")
    };
    let mut out = format!(
        "{MAGIC}\ndims {}\nchannels {names}\ntype f64le\nend\n",
        dims_txt.join(" ")
    )
    .into_bytes();
    out.reserve(8 * data.numel());
    for v in data.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume, VolumeError> {
    let magic_len = MAGIC.len();
    if bytes.len() < magic_len + 1 || &bytes[..magic_len] != MAGIC.as_bytes() || bytes[magic_len] != b'\n' {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(magic_len)]).into_owned();
        return Err(VolumeError::BadMagic { found });
    }
    let terminator = b"\nend\n";
    let header_end = bytes
        .windows(terminator.len())
        .position(|w| w == terminator)
        .ok_or_else(|| VolumeError::Header("missing `end` line".into()))?
        + terminator.len();
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| VolumeError::Header("header is not UTF-8".into()))?;

    let mut dims: Option<Vec<usize>> = None;
    let mut channels: Option<Vec<String>> = None;
    let mut value_type: Option<&str> = None;
    for line in header.lines().skip(1) {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "dims" => {
                let parsed = rest
                    .split_whitespace()
                    .map(|t| t.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| VolumeError::Header(format!("dims {rest:?}: {e}")))?;
                if parsed.is_empty() || parsed.len() > MAX_RANK || parsed.contains(&0) {
                    return Err(VolumeError::Header(format!("invalid dims {rest:?}")));
                }
                dims = Some(parsed);
            }
            "channels" => {
                channels = Some(if rest == "-" {
                    Vec::new()
                } else {
                    rest.split(',').map(str::to_string).collect()
                });
            }
            "type" => value_type = Some(rest),
            "end" => break,
            other => return Err(VolumeError::Header(format!("unknown key {other:?}"))),
        }
    }
    let dims = dims.ok_or_else(|| VolumeError::Header("missing dims".into()))?;
    let channels = channels.ok_or_else(|| VolumeError::Header("missing channels".into()))?;
    match value_type {
        Some("f64le") => {}
        other => return Err(VolumeError::Header(format!("unsupported type {other:?}"))),
    }
    if !channels.is_empty() && channels.len() != dims[0] {
        return Err(VolumeError::Header(format!(
            "{} channel names for leading extent {}",
            channels.len(),
            dims[0]
        )));
    }

    let payload = &bytes[header_end..];
    let expected = 8 * dims.iter().product::<usize>();
    if payload.len() < expected {
        return Err(VolumeError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(VolumeError::DimsMismatch {
            dims,
            expected,
            actual: payload.len(),
        });
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = NdArray::from_vec(&dims, values).map_err(|e| VolumeError::Header(e.to_string()))?;
    Ok(Volume { data, channels })
}

pub fn write_volume(path: &Path, data: &NdArray, channels: &[String]) -> Result<(), VolumeError> {
    let bytes = encode_volume(data, channels)?;
    fs::write(path, bytes).map_err(|source| VolumeError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_volume(path: &Path) -> Result<Volume, VolumeError> {
    let bytes = fs::read(path).map_err(|source| VolumeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_volume(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> NdArray {
        let n = shape.iter().product::<usize>();
        NdArray::from_vec(shape, (0..n).map(|i| (i as f64).sin() * 1e3).collect()).unwrap()
    }

    #[test]
    fn round_trip_bit_exact() {
        let data = ramp(&[6, 64, 64]);
        let names: Vec<String> = (0..6).map(|i| format!("f{i}")).collect();
        let vol = decode_volume(&encode_volume(&data, &names).unwrap()).unwrap();
        assert_eq!(vol.channels, names);
        assert!(vol
            .data
            .data()
            .iter()
            .zip(data.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn corrupt_magic() {
        let mut bytes = encode_volume(&ramp(&[2, 2]), &[]).unwrap();
        bytes[1] = b'X';
        assert!(matches!(decode_volume(&bytes), Err(VolumeError::BadMagic { .. })));
    }

    #[test]
    fn short_payload_reports_sizes() {
        let mut bytes = encode_volume(&ramp(&[3, 4]), &[]).unwrap();
        bytes.truncate(bytes.len() - 8);
        match decode_volume(&bytes) {
            Err(VolumeError::Truncated { expected, actual }) => {
                assert_eq!((expected, actual), (96, 88));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn long_payload_is_dims_mismatch() {
        let mut bytes = encode_volume(&ramp(&[3, 4]), &[]).unwrap();
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(matches!(decode_volume(&bytes), Err(VolumeError::DimsMismatch { .. })));
    }

    #[test]
    fn rank_above_four_rejected() {
        assert!(encode_volume(&ramp(&[1, 1, 1, 1, 2]), &[]).is_err());
    }
}
