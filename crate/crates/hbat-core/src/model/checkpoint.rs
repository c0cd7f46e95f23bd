//! Checkpoint container: a JSON manifest (unit names, shapes, dtype, byte
//! offsets, config, format version) followed by raw little-endian row-major
//! scalar payloads. Round-trips bit-exactly.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterSet};
use crate::tensor::{Dtype, Scalar, TensorData};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"HBCKPT01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct UnitEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
    /// Number of scalars.
    count: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: Dtype,
    config: ModelConfig,
    units: Vec<UnitEntry>,
}

pub fn save<S: Scalar>(params: &ParameterSet<S>, path: &Path) -> Result<()> {
    let width = S::DTYPE.byte_width();
    let mut units = Vec::with_capacity(params.units().len());
    let mut payload = Vec::with_capacity(params.scalar_count() * width);
    for (name, t) in params.units() {
        units.push(UnitEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
            count: t.numel() as u64,
        });
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: S::DTYPE,
        config: params.config().clone(),
        units,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    file.write_all(&payload)?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<ParameterSet<S>> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    if manifest.dtype != S::DTYPE {
        return Err(Error::Checkpoint(format!(
            "dtype mismatch: file holds {:?}",
            manifest.dtype
        )));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;

    let width = S::DTYPE.byte_width();
    let mut units = IndexMap::new();
    for entry in &manifest.units {
        let start = entry.offset as usize;
        let end = start + entry.count as usize * width;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "unit `{}` extends past payload",
                entry.name
            )));
        }
        let data: Vec<S> = payload[start..end]
            .chunks_exact(width)
            .map(S::read_le)
            .collect();
        units.insert(entry.name.clone(), TensorData::new(entry.shape.clone(), data)?);
    }
    ParameterSet::from_units(manifest.config, units)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_policy;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            vocab_size: 11,
            width: 8,
            n_layers: 1,
            n_heads: 2,
            context: 16,
            mlp_hidden: 16,
        };
        let params = init_policy::<f32>(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hbck");
        save(&params, &path).unwrap();
        let loaded = load::<f32>(&path).unwrap();
        assert_eq!(loaded.config(), params.config());
        assert_eq!(loaded.unit_names(), params.unit_names());
        for (name, t) in params.units() {
            let l = &loaded.units()[name];
            assert_eq!(l.shape(), t.shape());
            for (a, b) in t.data().iter().zip(l.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // saving the loaded set reproduces the file byte for byte
        let path2 = dir.path().join("model2.hbck");
        save(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.hbck");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load::<f32>(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_dtype_mismatch() {
        let cfg = ModelConfig {
            vocab_size: 11,
            width: 8,
            n_layers: 1,
            n_heads: 2,
            context: 16,
            mlp_hidden: 16,
        };
        let params = init_policy::<f64>(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hbck");
        save(&params, &path).unwrap();
        assert!(matches!(load::<f32>(&path), Err(Error::Checkpoint(_))));
    }
}
