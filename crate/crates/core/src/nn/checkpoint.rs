//! Named-array container used for parameter checkpoints.
//!
//! ```text
//! SFCK1
//! meta epoch 12
//! entry segmentor/enc0.conv1.weight 8 1 3 3
//! entry segmentor/head.bias 2
//! end
//! <little-endian f64 payload, entries concatenated in header order>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::NdArray;

const MAGIC: &str = "SFCK1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<(String, NdArray)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: NdArray) {
        self.entries.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&NdArray> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Every parameter and buffer of `store` under `prefix/`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) {
        for p in store.params() {
            self.insert(format!("{prefix}/{}", p.name), p.value.clone());
        }
        for b in store.buffers() {
            self.insert(format!("{prefix}/{}", b.name), b.value.clone());
        }
    }

    /// Overwrite `store` from entries under `prefix/`; every name must exist
    /// with a matching shape.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let fetch = |name: &str, shape: &[usize]| -> Result<NdArray> {
            let key = format!("{prefix}/{name}");
            let v = self
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {key}")))?;
            if v.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "entry {key} has shape {:?}, expected {shape:?}",
                    v.shape()
                )));
            }
            Ok(v.clone())
        };
        for p in store.params_mut() {
            p.value = fetch(&p.name, p.value.shape())?;
        }
        for b in store.buffers_mut() {
            b.value = fetch(&b.name, b.value.shape())?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let bad = |s: &str| s.is_empty() || s.contains(char::is_whitespace);
        let mut header = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            if bad(k) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("invalid meta entry {k:?}")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, value) in &self.entries {
            if bad(name) {
                return Err(Error::Checkpoint(format!("invalid entry name {name:?}")));
            }
            let dims: Vec<String> = value.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("entry {name} {}\n", dims.join(" ")));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for (_, value) in &self.entries {
            for v in value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let err = |m: String| Error::Checkpoint(m);
        if !bytes.starts_with(format!("{MAGIC}\n").as_bytes()) {
            return Err(err("bad magic".into()));
        }
        let term = b"\nend\n";
        let header_end = bytes
            .windows(term.len())
            .position(|w| w == term)
            .ok_or_else(|| err("missing end line".into()))?
            + term.len();
        let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| err("header not UTF-8".into()))?;
        let mut ckpt = Checkpoint::new();
        let mut shapes = Vec::new();
        for line in header.lines().skip(1) {
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("meta"), Some(k), v) => {
                    ckpt.meta.insert(k.to_string(), v.unwrap_or("").to_string());
                }
                (Some("entry"), Some(name), Some(dims)) => {
                    let dims = dims
                        .split(' ')
                        .map(str::parse::<usize>)
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| err(format!("entry {name}: {e}")))?;
                    shapes.push((name.to_string(), dims));
                }
                (Some("end"), None, None) => break,
                _ => return Err(err(format!("malformed header line {line:?}"))),
            }
        }
        let mut offset = header_end;
        for (name, dims) in shapes {
            let n: usize = dims.iter().product();
            let end = offset + 8 * n;
            if end > bytes.len() {
                return Err(err(format!(
                    "truncated payload: need {end} bytes, have {}",
                    bytes.len()
                )));
            }
            let data = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ckpt.insert(name, NdArray::from_vec(&dims, data)?);
            offset = end;
        }
        if offset != bytes.len() {
            return Err(err(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_unet, xavier_init, Scale, UNetSpec};

    #[test]
    fn store_round_trip_is_bit_exact() {
        let mut a = build_unet(UNetSpec::segmentor(Scale::Desk, 1)).unwrap();
        xavier_init(&mut a, 5);
        let mut ckpt = Checkpoint::new();
        ckpt.meta.insert("epoch".into(), "3".into());
        ckpt.add_store("segmentor", a.params());
        let decoded = Checkpoint::decode(&ckpt.encode().unwrap()).unwrap();
        assert_eq!(decoded, ckpt);
        let mut b = build_unet(UNetSpec::segmentor(Scale::Desk, 1)).unwrap();
        decoded.load_store("segmentor", b.params_mut()).unwrap();
        for (p, q) in a.params().params().iter().zip(b.params().params()) {
            assert!(p.value.data().iter().zip(q.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn shape_mismatch_and_missing_entries_rejected() {
        let a = build_unet(UNetSpec::segmentor(Scale::Desk, 1)).unwrap();
        let mut ckpt = Checkpoint::new();
        ckpt.add_store("segmentor", a.params());
        let mut wrong = build_unet(UNetSpec::segmentor(Scale::Desk, 4)).unwrap();
        assert!(ckpt.load_store("segmentor", wrong.params_mut()).is_err());
        let mut right = a.clone();
        assert!(ckpt.load_store("generator", right.params_mut()).is_err());
    }

    #[test]
    fn truncation_detected() {
        let mut ckpt = Checkpoint::new();
        ckpt.insert("w", NdArray::ones(&[2, 2]));
        let mut bytes = ckpt.encode().unwrap();
        bytes.pop();
        assert!(Checkpoint::decode(&bytes).is_err());
    }
}
