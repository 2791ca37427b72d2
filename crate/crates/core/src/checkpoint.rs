//! Checkpoints: a JSON manifest plus one raw little-endian `f32` blob.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, ParamEntry, ParamGroup, ParamKind};
use crate::train::optim::AdamW;

pub const CHECKPOINT_FORMAT: &str = "isoclr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kind: Option<ParamKind>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub group: Option<ParamGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub blob: String,
    pub blob_bytes: u64,
    pub tensors: Vec<TensorRecord>,
    /// Moments are stored as tensors named `adam.m.<param>` / `adam.v.<param>`.
    pub optimizer: Option<OptimizerRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub seed: u64,
    pub step: u64,
    /// Moments aligned with the weight entries of `params`.
    pub optimizer: Option<AdamW<f32>>,
}

/// Blob path paired with a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, &Tensor<f32>, Option<ParamKind>, Option<ParamGroup>)> {
        let mut out: Vec<_> = self
            .params
            .entries()
            .iter()
            .map(|e| (e.name.clone(), &e.tensor, Some(e.kind), Some(e.group)))
            .collect();
        if let Some(opt) = &self.optimizer {
            let weights: Vec<&str> = self
                .params
                .entries()
                .iter()
                .filter(|e| e.kind == ParamKind::Weight)
                .map(|e| e.name.as_str())
                .collect();
            for (name, m) in weights.iter().zip(&opt.m) {
                out.push((format!("adam.m.{name}"), m, None, None));
            }
            for (name, v) in weights.iter().zip(&opt.v) {
                out.push((format!("adam.v.{name}"), v, None, None));
            }
        }
        out
    }

    /// Serializes into a manifest and the blob bytes.
    pub fn encode(&self, blob_name: &str) -> Result<(Manifest, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut records = Vec::new();
        for (name, t, kind, group) in self.tensors() {
            records.push(TensorRecord {
                name,
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
                kind,
                group,
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dtype: "f32".into(),
            config: self.params.config.clone(),
            seed: self.seed,
            step: self.step,
            blob: blob_name.into(),
            blob_bytes: blob.len() as u64,
            tensors: records,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerRecord {
                step: o.step,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            }),
        };
        Ok((manifest, blob))
    }

    pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<Self> {
        if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                manifest.format, manifest.version
            )));
        }
        if manifest.dtype != "f32" {
            return Err(Error::Format(format!("unsupported dtype {}", manifest.dtype)));
        }
        if blob.len() as u64 != manifest.blob_bytes {
            return Err(Error::Format(format!(
                "blob has {} bytes, manifest says {}",
                blob.len(),
                manifest.blob_bytes
            )));
        }
        let read = |r: &TensorRecord| -> Result<Tensor<f32>> {
            let n: usize = r.shape.iter().product();
            let start = r.offset as usize;
            let end = start + 4 * n;
            let bytes = blob
                .get(start..end)
                .ok_or_else(|| Error::Format(format!("tensor {} runs past the blob", r.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::new(&r.shape, data)
        };
        let mut entries = Vec::new();
        let mut moments = std::collections::HashMap::new();
        for r in &manifest.tensors {
            match (r.kind, r.group) {
                (Some(kind), Some(group)) => entries.push(ParamEntry {
                    name: r.name.clone(),
                    tensor: read(r)?,
                    kind,
                    group,
                }),
                _ => {
                    moments.insert(r.name.clone(), read(r)?);
                }
            }
        }
        let params = ModelParams::from_entries(manifest.config.clone(), entries)?;
        validate_shapes(&params)?;
        let optimizer = match &manifest.optimizer {
            None => None,
            Some(o) => {
                let mut m = Vec::new();
                let mut v = Vec::new();
                for e in params.entries().iter().filter(|e| e.kind == ParamKind::Weight) {
                    for (prefix, out) in [("adam.m.", &mut m), ("adam.v.", &mut v)] {
                        let t = moments
                            .remove(&format!("{prefix}{}", e.name))
                            .ok_or_else(|| Error::Format(format!("missing {prefix}{}", e.name)))?;
                        if t.shape() != e.tensor.shape() {
                            return Err(Error::Format(format!("moment shape mismatch for {}", e.name)));
                        }
                        out.push(t);
                    }
                }
                Some(AdamW {
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    step: o.step,
                    m,
                    v,
                })
            }
        };
        Ok(Self {
            params,
            seed: manifest.seed,
            step: manifest.step,
            optimizer,
        })
    }

    /// Writes `<path>` (manifest) and `<path>.bin` next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob_file = blob_path(path);
        let blob_name = blob_file
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Config(format!("bad checkpoint path {}", path.display())))?
            .to_string();
        let (manifest, blob) = self.encode(&blob_name)?;
        fs::write(&blob_file, blob)?;
        let mut f = fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(path)?)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let blob = fs::read(dir.join(&manifest.blob))?;
        Self::decode(&manifest, &blob)
    }
}

/// Checks every tensor against the shape implied by the configuration.
fn validate_shapes(params: &ModelParams<f32>) -> Result<()> {
    let reference = crate::model::init_params::<f32>(&params.config, 0)?;
    for e in reference.entries() {
        // a fine-tuned model carries a head instead of the projector
        if e.name.starts_with("proj.") && !params.has(&e.name) {
            continue;
        }
        let got = params.get(&e.name).map_err(|_| Error::Format(format!("checkpoint lacks {}", e.name)))?;
        if got.shape() != e.tensor.shape() {
            return Err(Error::Format(format!(
                "{}: shape {:?} does not match config {:?}",
                e.name,
                got.shape(),
                e.tensor.shape()
            )));
        }
    }
    for e in params.entries() {
        if !reference.has(&e.name) && !e.name.starts_with("head.") {
            return Err(Error::Format(format!("unexpected tensor {}", e.name)));
        }
    }
    Ok(())
}
