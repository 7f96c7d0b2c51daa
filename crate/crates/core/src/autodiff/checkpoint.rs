//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "DRAGFLOW"
//! version      u32      CHECKPOINT_VERSION
//! manifest_len u32
//! manifest     JSON     {"meta": {...}, "params": [{"name": .., "shape": [..]}, ..]}
//! payload      f64 LE   every parameter in manifest order, row-major
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DRAGFLOW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: BTreeMap<String, serde_json::Value>,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// Parameters plus free-form metadata (architecture, mask mode, schedule, tags).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, serde_json::Value>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let manifest = Manifest {
            meta: self.meta.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamEntry { name: name.to_string(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in self.params.iter() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(fmt)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        r.read_exact(&mut u32buf).map_err(fmt)?;
        let mut json = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        r.read_exact(&mut json).map_err(fmt)?;
        let manifest: Manifest = serde_json::from_slice(&json)?;
        let mut params = ParamStore::new();
        let mut f64buf = [0u8; 8];
        for entry in manifest.params {
            let n: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut f64buf).map_err(fmt)?;
                data.push(f64::from_le_bytes(f64buf));
            }
            params.insert(entry.name, Tensor::new(entry.shape, data)?)?;
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(fmt)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { meta: manifest.meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let mut params = ParamStore::new();
            let n = vals.len();
            params.insert("a.w", Tensor::new(vec![n], vals.clone()).unwrap()).unwrap();
            params.insert("b", Tensor::new(vec![1, n], vals.iter().rev().copied().collect()).unwrap()).unwrap();
            let ck = Checkpoint { meta: BTreeMap::from([("mask".to_string(), "causal".into())]), params };
            let bytes = ck.to_bytes();
            let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
            prop_assert!(back.params.bit_eq(&ck.params));
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back.meta, ck.meta);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let bytes = Checkpoint { meta: BTreeMap::new(), params }.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(&mut bad.as_slice()).is_err());
        assert!(Checkpoint::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
    }
}
