//! Single-file parameter archive: a JSON shape manifest followed by raw
//! little-endian `f32` data.
//!
//! ```text
//! magic   8 bytes  b"CTRARCH1"
//! len     u32 LE   manifest length in bytes
//! json    manifest { format_version, arrays: [{ name, shape, offset }] }
//! data    concatenated f32 LE payloads
//! ```

use crate::error::{Error, Result};
use crate::nn::{Float, ParamSet};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"CTRARCH1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the data section.
    offset: usize,
}

/// An in-memory named-array archive.
#[derive(Debug, Default, Clone)]
pub struct Archive {
    arrays: BTreeMap<String, ArrayD<f32>>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, arr: ArrayD<f32>) {
        self.arrays.insert(name.to_string(), arr);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Format(format!("archive is missing array {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(|s| s.as_str())
    }

    /// Captures every parameter of a network (converted to `f32`).
    pub fn from_params<F: Float>(net: &impl ParamSet<F>) -> Self {
        let mut archive = Archive::new();
        net.visit(&mut |name, view| {
            archive.insert(name, view.mapv(|v| v.to_f32().expect("f32 conversion")));
        });
        archive
    }

    /// Writes every stored array back into a network. Errors on missing
    /// arrays or shape mismatches.
    pub fn into_params<F: Float>(&self, net: &mut impl ParamSet<F>) -> Result<()> {
        let mut failure = None;
        net.visit_mut(&mut |name, mut view| {
            if failure.is_some() {
                return;
            }
            match self.arrays.get(name) {
                None => failure = Some(Error::Format(format!("archive is missing {name:?}"))),
                Some(arr) if arr.shape() != view.shape() => {
                    failure = Some(Error::Format(format!(
                        "shape mismatch for {name:?}: archive {:?} vs network {:?}",
                        arr.shape(),
                        view.shape()
                    )))
                }
                Some(arr) => {
                    ndarray::Zip::from(&mut view).and(arr).for_each(|dst, &v| {
                        *dst = crate::nn::c::<F>(v as f64);
                    });
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut offset = 0usize;
        for (name, arr) in &self.arrays {
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: arr.shape().to_vec(),
                offset,
            });
            offset += arr.len();
        }
        let manifest = serde_json::to_vec(&Manifest {
            format_version: FORMAT_VERSION,
            arrays: entries,
        })
        .expect("manifest json");
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&(manifest.len() as u32).to_le_bytes())?;
        f.write_all(&manifest)?;
        for arr in self.arrays.values() {
            let mut buf = Vec::with_capacity(arr.len() * 4);
            for &v in arr.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a parameter archive".into()));
        }
        let mut len4 = [0u8; 4];
        f.read_exact(&mut len4)?;
        let mut manifest_raw = vec![0u8; u32::from_le_bytes(len4) as usize];
        f.read_exact(&mut manifest_raw)?;
        let manifest: Manifest = serde_json::from_slice(&manifest_raw)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                manifest.format_version
            )));
        }
        let mut data = Vec::new();
        f.read_to_end(&mut data)?;
        let mut archive = Archive::new();
        for entry in manifest.arrays {
            let len: usize = entry.shape.iter().product();
            let start = entry.offset * 4;
            let end = start + len * 4;
            if end > data.len() {
                return Err(Error::Format(format!("truncated data for {:?}", entry.name)));
            }
            let vals: Vec<f32> = data[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let arr = ArrayD::from_shape_vec(entry.shape.clone(), vals)
                .map_err(|e| Error::Format(format!("bad shape for {:?}: {e}", entry.name)))?;
            archive.arrays.insert(entry.name, arr);
        }
        Ok(archive)
    }
}

/// Checksum of every parameter's raw bits; order- and name-sensitive.
pub fn param_checksum<F: Float>(net: &impl ParamSet<F>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut mix = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    };
    net.visit(&mut |name, view| {
        for b in name.bytes() {
            mix(b);
        }
        for &v in view.iter() {
            for b in v.to_f64().expect("finite").to_bits().to_le_bytes() {
                mix(b);
            }
        }
    });
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::encoder::{Downsample, Encoder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn roundtrip_preserves_params_bit_exactly() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let enc = Encoder::<f32>::new(&mut rng, Downsample::BlurPool);
        let archive = Archive::from_params(&enc);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.nna");
        archive.save(&path).unwrap();
        let loaded = Archive::load(&path).unwrap();
        let mut enc2 = Encoder::<f32>::new(&mut ChaCha20Rng::seed_from_u64(99), Downsample::BlurPool);
        loaded.into_params(&mut enc2).unwrap();
        assert_eq!(param_checksum(&enc), param_checksum(&enc2));
    }

    #[test]
    fn shape_mismatch_is_detected() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let enc = Encoder::<f32>::new(&mut rng, Downsample::BlurPool);
        let mut archive = Archive::from_params(&enc);
        archive.insert("encoder.conv1.w", ndarray::ArrayD::zeros(vec![1, 2, 3]));
        let mut enc2 = enc.clone();
        assert!(archive.into_params(&mut enc2).is_err());
    }
}
