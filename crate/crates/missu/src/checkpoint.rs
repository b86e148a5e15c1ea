//! Checkpoint archive: a JSON manifest followed by raw f64 tensor blobs.
//!
//! Tensors are grouped three ways (encoder+transformer / msf / decoder) so
//! the inference path can drop the fusion group by name. The manifest lists
//! tensors in deterministic sorted order and round-trips are bit-exact.

use crate::config::{ModelConfig, MsfMode, TrainConfig};
use crate::error::{Error, Result};
use crate::model::GraphMode;
use crate::params::{group_of, ParamSet};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    kind: String, // "param" | "adam_m" | "adam_v"
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub step: u64,
    pub params: ParamSet,
    /// Adam moments; absent on inference-stripped checkpoints.
    pub adam_m: Option<ParamSet>,
    pub adam_v: Option<ParamSet>,
}

impl Checkpoint {
    /// Sorted tensor names as they appear in the manifest.
    pub fn manifest_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.params.keys().cloned().collect();
        names.sort();
        names
    }

    /// Drop the MSF parameter group (and its moments). Only meaningful for
    /// `local`-mode checkpoints whose inference graph never reads them.
    pub fn strip_msf(&mut self) {
        self.params.retain(|n, _| !n.starts_with("msf."));
        for moments in [&mut self.adam_m, &mut self.adam_v].into_iter().flatten() {
            moments.retain(|n, _| !n.starts_with("msf."));
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut sets: Vec<(&ParamSet, &str)> = vec![(&self.params, "param")];
        if let Some(m) = &self.adam_m {
            sets.push((m, "adam_m"));
        }
        if let Some(v) = &self.adam_v {
            sets.push((v, "adam_v"));
        }
        let mut entries = Vec::new();
        let mut blobs: Vec<&Tensor> = Vec::new();
        let mut offset = 0u64;
        for (set, kind) in sets {
            // BTreeMap iteration is already name-sorted.
            for (name, tensor) in set {
                let len = tensor.len() as u64;
                entries.push(TensorEntry {
                    name: name.clone(),
                    group: group_of(name).as_str().to_string(),
                    kind: kind.to_string(),
                    shape: tensor.shape().to_vec(),
                    offset,
                    len,
                });
                blobs.push(tensor);
                offset += len * 8;
            }
        }
        let manifest = Manifest {
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            step: self.step,
            tensors: entries,
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;

        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&manifest_bytes)?;
        for tensor in blobs {
            for v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::BadMagic {
                expected: "MCKP",
                found: magic,
            });
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != VERSION {
            return Err(Error::BadVersion(version));
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let manifest_len = u64::from_le_bytes(buf8);
        let mut manifest_bytes = vec![0u8; manifest_len as usize];
        r.read_exact(&mut manifest_bytes)?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;

        let total: u64 = manifest.tensors.iter().map(|t| t.len * 8).sum();
        let mut blob = Vec::with_capacity(total as usize);
        let got = r.take(total).read_to_end(&mut blob)? as u64;
        if got < total {
            return Err(Error::TruncatedPayload {
                expected: total,
                got,
            });
        }

        let mut params = ParamSet::new();
        let mut adam_m = ParamSet::new();
        let mut adam_v = ParamSet::new();
        for entry in &manifest.tensors {
            let start = entry.offset as usize;
            let end = start + entry.len as usize * 8;
            if end > blob.len() {
                return Err(Error::TruncatedPayload {
                    expected: end as u64,
                    got: blob.len() as u64,
                });
            }
            let data: Vec<f64> = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::from_vec(&entry.shape, data);
            match entry.kind.as_str() {
                "param" => params.insert(entry.name.clone(), tensor),
                "adam_m" => adam_m.insert(entry.name.clone(), tensor),
                "adam_v" => adam_v.insert(entry.name.clone(), tensor),
                other => {
                    return Err(Error::ConfigMismatch(format!(
                        "unknown tensor kind {other}"
                    )))
                }
            };
        }
        Ok(Checkpoint {
            model_config: manifest.model_config,
            train_config: manifest.train_config,
            step: manifest.step,
            params,
            adam_m: if adam_m.is_empty() { None } else { Some(adam_m) },
            adam_v: if adam_v.is_empty() { None } else { Some(adam_v) },
        })
    }

    /// Load and verify against an expected architecture config.
    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
        let ckpt = Checkpoint::load(path)?;
        if &ckpt.model_config != expected {
            return Err(Error::ConfigMismatch(format!(
                "stored config differs from expected (stored {:?})",
                ckpt.model_config
            )));
        }
        Ok(ckpt)
    }

    /// Validate the parameter set for a graph. Inference in `ms_output`
    /// mode requires the fusion group; `local` mode does not.
    pub fn validate_for(&self, mode: GraphMode) -> Result<()> {
        crate::model::validate_params(&self.model_config, &self.params, mode)?;
        if mode == GraphMode::Inference
            && self.model_config.msf_mode == MsfMode::MsOutput
            && !self.params.keys().any(|n| n.starts_with("msf."))
        {
            return Err(Error::MissingParamGroup("msf"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{param_specs, Missu};
    use tempfile::tempdir;

    fn toy_checkpoint() -> Checkpoint {
        let cfg = ModelConfig {
            input_shape: (16, 16, 16),
            embed_dim: 32,
            num_layers: 1,
            num_heads: 2,
            ..ModelConfig::toy()
        };
        let model = Missu::init(cfg.clone(), 3).unwrap();
        let zeros: ParamSet = model
            .params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        Checkpoint {
            model_config: cfg,
            train_config: TrainConfig::toy(),
            step: 17,
            params: model.params,
            adam_m: Some(zeros.clone()),
            adam_v: Some(zeros),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.mckp");
        let ckpt = toy_checkpoint();
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.model_config, ckpt.model_config);
        assert_eq!(back.train_config, ckpt.train_config);
        for (name, t) in &ckpt.params {
            let b = &back.params[name];
            assert_eq!(t.shape(), b.shape());
            for (x, y) in t.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
        assert!(back.adam_m.is_some() && back.adam_v.is_some());
    }

    #[test]
    fn manifest_names_are_sorted() {
        let ckpt = toy_checkpoint();
        let names = ckpt.manifest_names();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        // Every architecture tensor is present.
        assert_eq!(names.len(), param_specs(&ckpt.model_config).len());
    }

    #[test]
    fn config_mismatch_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.mckp");
        let ckpt = toy_checkpoint();
        ckpt.save(&path).unwrap();
        let mut other = ckpt.model_config.clone();
        other.num_classes = 2;
        assert!(matches!(
            Checkpoint::load_for(&path, &other),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn stripped_local_checkpoint_loads_for_inference() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.mckp");
        let mut ckpt = toy_checkpoint();
        ckpt.strip_msf();
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        back.validate_for(GraphMode::Inference).unwrap();
        assert!(back.validate_for(GraphMode::Training).is_err());
        assert!(!back.params.keys().any(|n| n.starts_with("msf.")));
    }

    #[test]
    fn truncated_checkpoint_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.mckp");
        let ckpt = toy_checkpoint();
        ckpt.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::TruncatedPayload { .. })
        ));
    }
}
