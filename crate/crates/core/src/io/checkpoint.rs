use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::transformer::{ModelConfig, Params};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

/// Model state plus the configuration and counters needed to resume or
/// evaluate it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stage_index: usize,
    pub global_step: u64,
    pub rng_state: u64,
    pub params: Params,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub element_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stage_index: usize,
    pub global_step: u64,
    pub rng_state: u64,
    pub tensors: Vec<TensorEntry>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    pub fn manifest(&self) -> Manifest {
        let mut offset = 0u64;
        let tensors = self
            .params
            .named(&self.model)
            .into_iter()
            .map(|(name, t)| {
                let entry = TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                    byte_offset: offset,
                    element_count: t.len() as u64,
                };
                offset += 8 * t.len() as u64;
                entry
            })
            .collect();
        Manifest {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            data: self.data.clone(),
            stage_index: self.stage_index,
            global_step: self.global_step,
            rng_state: self.rng_state,
            tensors,
        }
    }

    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * self.params.element_count());
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Write `manifest.json` and `tensors.bin` into `dir`, creating it if
    /// needed. Each file is written to a temporary name and renamed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.audit(&self.model)?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(BLOB_FILE), &self.blob())?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let bpath = dir.join(BLOB_FILE);
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        Self::from_parts(manifest, &blob)
    }

    /// Decode a manifest and blob, checking that the index tiles the blob
    /// and that every tensor matches the model config.
    pub fn from_parts(manifest: Manifest, blob: &[u8]) -> Result<Self> {
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::validation(
                "format_version",
                format!("unsupported version {} (expected {FORMAT_VERSION})", manifest.format_version),
            ));
        }
        manifest.model.validate()?;
        manifest.data.validate()?;
        let integrity = |name: &str, reason: String| Error::Integrity {
            tensor: name.to_string(),
            reason,
        };
        let mut expected_offset = 0u64;
        let mut named = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            if entry.byte_offset != expected_offset {
                return Err(integrity(
                    &entry.name,
                    format!("byte_offset {} but the previous tensor ends at {expected_offset}", entry.byte_offset),
                ));
            }
            let count: u64 = entry.shape.iter().map(|&s| s as u64).product();
            if count != entry.element_count {
                return Err(integrity(
                    &entry.name,
                    format!("element_count {} but shape {:?} holds {count}", entry.element_count, entry.shape),
                ));
            }
            let end = entry.byte_offset + 8 * count;
            if end > blob.len() as u64 {
                return Err(integrity(
                    &entry.name,
                    format!("blob truncated: tensor ends at byte {end}, blob has {}", blob.len()),
                ));
            }
            let data = blob[entry.byte_offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(&entry.shape, data).map_err(|e| integrity(&entry.name, e.to_string()))?;
            named.push((entry.name.clone(), t));
            expected_offset = end;
        }
        if expected_offset != blob.len() as u64 {
            let last = manifest.tensors.last().map_or("<none>", |e| e.name.as_str());
            return Err(integrity(
                last,
                format!("{} trailing bytes after the last tensor", blob.len() as u64 - expected_offset),
            ));
        }
        let params = Params::from_named(&manifest.model, named)?;
        Ok(Checkpoint {
            model: manifest.model,
            data: manifest.data,
            stage_index: manifest.stage_index,
            global_step: manifest.global_step,
            rng_state: manifest.rng_state,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::transformer::FfnMode;

    fn ckpt() -> Checkpoint {
        let model = ModelConfig {
            layers: 2,
            d_model: 4,
            d_ff: 8,
            heads: 2,
            max_len: 8,
            vocab: 6,
            dropout: 0.0,
            ffn: FfnMode::Shared { k: 2 },
            pool_k: 1,
            attn_scale: true,
        };
        let data = DataConfig {
            vocab: 6,
            corpus_size: 4,
            seq_len_full: 8,
            train_len: 8,
            masks_per_seq: 1,
            mask_token_id: 5,
            markov_order: 1,
            seed: 3,
        };
        Checkpoint {
            params: Params::init(&model, &mut Rng::new(1)).unwrap(),
            model,
            data,
            stage_index: 1,
            global_step: 17,
            rng_state: u64::MAX - 3,
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let c = ckpt();
        c.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert!(back.params.bit_eq(&c.params));
        assert_eq!(back, c);
        let blob1 = fs::read(dir.path().join(BLOB_FILE)).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        back.save(dir2.path()).unwrap();
        assert_eq!(blob1, fs::read(dir2.path().join(BLOB_FILE)).unwrap());
        assert_eq!(
            fs::read(dir.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(dir2.path().join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn index_tiles_the_blob() {
        let c = ckpt();
        let m = c.manifest();
        let mut off = 0;
        for e in &m.tensors {
            assert_eq!(e.byte_offset, off);
            off += 8 * e.element_count;
        }
        assert_eq!(off as usize, c.blob().len());
    }

    #[test]
    fn truncated_blob_names_last_tensor() {
        let c = ckpt();
        let mut blob = c.blob();
        blob.truncate(blob.len() - 8);
        match Checkpoint::from_parts(c.manifest(), &blob) {
            Err(Error::Integrity { tensor, .. }) => assert_eq!(tensor, "mlm_head.bias"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn offset_gap_is_detected() {
        let c = ckpt();
        let mut m = c.manifest();
        m.tensors[3].byte_offset += 8;
        let name = m.tensors[3].name.clone();
        match Checkpoint::from_parts(m, &c.blob()) {
            Err(Error::Integrity { tensor, .. }) => assert_eq!(tensor, name),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_detected() {
        let c = ckpt();
        let mut blob = c.blob();
        blob.extend_from_slice(&[0; 8]);
        assert!(matches!(Checkpoint::from_parts(c.manifest(), &blob), Err(Error::Integrity { .. })));
    }

    #[test]
    fn shape_edit_fails_audit() {
        let c = ckpt();
        let mut m = c.manifest();
        // Same element count, different shape: passes tiling, fails the audit.
        let e = m.tensors.iter_mut().find(|e| e.name == "layers.0.attention.w_q").unwrap();
        e.shape = vec![2, 8];
        assert!(matches!(
            Checkpoint::from_parts(m, &c.blob()),
            Err(Error::ShapeAudit { name, .. }) if name == "layers.0.attention.w_q"
        ));
    }

    #[test]
    fn version_is_checked() {
        let c = ckpt();
        let mut m = c.manifest();
        m.format_version = 2;
        assert!(matches!(Checkpoint::from_parts(m, &c.blob()), Err(Error::Validation { .. })));
    }
}
