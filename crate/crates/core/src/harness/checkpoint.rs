//! Versioned binary checkpoints: a magic header, a JSON manifest (config
//! snapshot, step counter, tensor directory), then raw little-endian f64
//! tensor payloads in manifest order. Save -> load -> save is byte-identical.

use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::harness::config::RunConfig;
use crate::model::Model;

pub const MAGIC: &[u8; 4] = b"MMFS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    step: u64,
    config: RunConfig,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: RunConfig,
    pub tensors: IndexMap<String, Array2<f64>>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &RunConfig, step: u64) -> Checkpoint {
        Checkpoint {
            step,
            config: config.clone(),
            tensors: model.param_tensors(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            version: VERSION,
            step: self.step,
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, v)| TensorInfo {
                    name: name.clone(),
                    rows: v.nrows(),
                    cols: v.ncols(),
                })
                .collect(),
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest_bytes);
        for (_, v) in &self.tensors {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let fail = |msg: &str| CoreError::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(fail("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CoreError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest_end = 16 + manifest_len;
        if bytes.len() < manifest_end {
            return Err(fail("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])?;
        let mut tensors = IndexMap::new();
        let mut offset = manifest_end;
        for info in &manifest.tensors {
            let n = info.rows * info.cols;
            let end = offset + 8 * n;
            if bytes.len() < end {
                return Err(fail("truncated tensor payload"));
            }
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                let s = offset + 8 * i;
                data.push(f64::from_le_bytes(bytes[s..s + 8].try_into().unwrap()));
            }
            let arr = Array2::from_shape_vec((info.rows, info.cols), data)
                .map_err(|e| CoreError::Checkpoint(e.to_string()))?;
            tensors.insert(info.name.clone(), arr);
            offset = end;
        }
        if offset != bytes.len() {
            return Err(fail("trailing bytes after tensor payload"));
        }
        Ok(Checkpoint {
            step: manifest.step,
            config: manifest.config,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the model from the stored config and overwrites every
    /// parameter with the stored tensors. The tensor name sets must match.
    pub fn build_model(&self) -> Result<Model> {
        let vocab_size = self
            .tensors
            .get("embedding.table")
            .map(|t| t.nrows())
            .unwrap_or(crate::corpus::RESERVED_TOKENS);
        let mut model = Model::init(&self.config.model_config(vocab_size), self.config.seed)?;
        let mut missing = Vec::new();
        let mut seen = 0usize;
        model.visit_params_mut(&mut |name, value| match self.tensors.get(name) {
            Some(stored) => {
                if stored.dim() == value.dim() {
                    value.assign(stored);
                    seen += 1;
                } else {
                    missing.push(format!("{name} (shape mismatch)"));
                }
            }
            None => missing.push(name.to_string()),
        });
        if !missing.is_empty() {
            return Err(CoreError::Checkpoint(format!(
                "checkpoint missing tensors: {}",
                missing.join(", ")
            )));
        }
        if seen != self.tensors.len() {
            return Err(CoreError::Checkpoint(format!(
                "checkpoint holds {} tensors, model consumed {seen}",
                self.tensors.len()
            )));
        }
        Ok(model)
    }
}
