//! Binary checkpoint format.
//!
//! Layout: magic `GMHA1`, u32-LE manifest length, manifest JSON, u32-LE
//! tensor count, then per tensor (sorted by name): u32-LE name length, name
//! bytes, u32-LE rank, u64-LE dims, f64-LE values. Round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, ModelDims};
use crate::error::{Error, Result};
use crate::gradcheck::ParamStore;
use crate::model::ToyLm;
use crate::tensor::Tensor;

const MAGIC: &[u8; 5] = b"GMHA1";
pub const FORMAT_VERSION: u32 = 1;

/// Leading JSON block: everything needed to rebuild the model around the
/// tensor payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub arch: ArchSpec,
    pub dims: ModelDims,
    pub step: u64,
    pub seed: u64,
}

pub fn save(path: &Path, manifest: &Manifest, params: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let manifest_json = serde_json::to_vec(manifest)?;
    w.write_all(&(manifest_json.len() as u32).to_le_bytes())?;
    w.write_all(&manifest_json)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Manifest, ParamStore)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {MAGIC:?}",
            magic
        )));
    }
    let manifest_len = read_u32(&mut r)? as usize;
    let mut manifest_json = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_json)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} not supported (current {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Checkpoint(format!("tensor name not utf-8: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok((manifest, params))
}

/// Rebuild a model from a checkpoint, verifying the payload covers the
/// expected parameter layout.
pub fn load_model(path: &Path) -> Result<(Manifest, ToyLm)> {
    let (manifest, params) = load(path)?;
    let expected = crate::model::param_layout(&manifest.arch, &manifest.dims)?;
    for (name, shape) in &expected {
        let tensor = params.get(name).map_err(|_| {
            Error::Checkpoint(format!("checkpoint missing parameter '{name}'"))
        })?;
        if tensor.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' has shape {:?}, expected {shape:?}",
                tensor.shape()
            )));
        }
    }
    if params.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, layout wants {}",
            params.len(),
            expected.len()
        )));
    }
    let model = ToyLm { arch: manifest.arch.clone(), dims: manifest.dims.clone(), params };
    Ok((manifest, model))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchKind, ArchSpec};

    fn sample_manifest() -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            arch: ArchSpec::new(ArchKind::Mfa),
            dims: ModelDims {
                hidden: 8,
                layers: 1,
                n_heads: 2,
                head_dim: 4,
                latent_c: 4,
                groups_g: 1,
                rope_dim_dr: 0,
                vocab: 257,
                ffn: 16,
            },
            step: 42,
            seed: 7,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gmha");
        let manifest = sample_manifest();
        let mut model = ToyLm::new(manifest.arch.clone(), manifest.dims.clone()).unwrap();
        model.init_weights(7).unwrap();
        save(&path, &manifest, &model.params).unwrap();
        let (loaded_manifest, loaded) = load(&path).unwrap();
        assert_eq!(manifest, loaded_manifest);
        assert_eq!(model.params.len(), loaded.len());
        for (name, tensor) in model.params.iter() {
            let other = loaded.get(name).unwrap();
            assert_eq!(tensor.shape(), other.shape());
            let same_bits = tensor
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same_bits, "{name} not bit-identical");
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.gmha");
        std::fs::write(&path, b"NOPE!xxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn load_model_rejects_missing_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gmha");
        let manifest = sample_manifest();
        let mut model = ToyLm::new(manifest.arch.clone(), manifest.dims.clone()).unwrap();
        model.init_weights(9).unwrap();
        // Drop one tensor from the payload.
        let mut pruned = ParamStore::new();
        for (name, t) in model.params.iter() {
            if name != "final_norm" {
                pruned.insert(name.clone(), t.clone());
            }
        }
        save(&path, &manifest, &pruned).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Checkpoint(_))));
    }
}
