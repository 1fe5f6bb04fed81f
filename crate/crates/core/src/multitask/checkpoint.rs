//! Binary checkpoint container: magic, version, JSON manifest, raw
//! little-endian tensor data in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{DType, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

use super::data::Normalization;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MTAXCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub dtype: DType,
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn capture(store: &ParamStore<T>, epoch: usize, normalization: &Normalization) -> Self {
        let tensors = store.named_tensors();
        let manifest = CheckpointManifest {
            dtype: T::DTYPE,
            epoch,
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            normalization: normalization.clone(),
        };
        Checkpoint { manifest, tensors }
    }

    pub fn restore(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.load_named(&self.tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |d: &str| Error::format(origin, d.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + len)
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: CheckpointManifest = serde_json::from_slice(body)?;
        if manifest.dtype != T::DTYPE {
            return Err(bad(&format!(
                "checkpoint holds {:?}, expected {:?}",
                manifest.dtype,
                T::DTYPE
            )));
        }
        let width = T::DTYPE.byte_width();
        let mut pos = 20 + len;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(pos..pos + n * width)
                .ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
            pos += n * width;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_restore() {
        let mut store = ParamStore::<f32>::new();
        store
            .add(
                "w",
                Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            )
            .unwrap();
        store.add_running_stats("bn", 2).unwrap();
        let ck = Checkpoint::capture(&store, 5, &Normalization::new());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, ck);
        assert!(Checkpoint::<f64>::from_bytes(&bytes, "mem").is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1], "mem").is_err());

        let id = store.find("w").unwrap();
        store.param_mut(id).value.data_mut()[0] = 9.0;
        back.restore(&mut store).unwrap();
        assert_eq!(store.value(id).data()[0], 1.0);
    }
}
