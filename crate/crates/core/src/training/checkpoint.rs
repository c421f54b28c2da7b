//! Checkpoint directory: `manifest.json` plus little-endian `params.bin`.

use std::fs;
use std::path::Path;

use plume_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::features::FeatureStats;
use crate::model::{RunningStats, Unet};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "params.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor<f32>)>,
    pub running: Vec<RunningStats<f32>>,
    pub stats: FeatureStats,
    pub output_scale: Vec<f64>,
    pub step: u64,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    fingerprint: String,
    config: ModelConfig,
    step: u64,
    epoch: usize,
    output_scale: Vec<f64>,
    stats: FeatureStats,
    params: Vec<BlobEntry>,
    running_mean: Vec<BlobEntry>,
    running_var: Vec<BlobEntry>,
    blob_bytes: u64,
}

impl Checkpoint {
    pub fn from_model(model: &Unet<f32>, stats: &FeatureStats, step: u64, epoch: usize) -> Self {
        Self {
            config: model.config.clone(),
            params: model.store.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            running: model.store.running.clone(),
            stats: stats.clone(),
            output_scale: model.output_scale.clone(),
            step,
            epoch,
        }
    }

    /// Rebuilds the model, matching parameters by name and shape.
    pub fn to_model(&self) -> Result<Unet<f32>> {
        let mut model = Unet::<f32>::new(&self.config, 0)?;
        if model.store.params.len() != self.params.len() || model.store.running.len() != self.running.len() {
            return Err(Error::Integrity("checkpoint tensors do not match the architecture".into()));
        }
        for (p, (name, value)) in model.store.params.iter_mut().zip(&self.params) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Integrity(format!(
                    "parameter {name} {:?} does not match {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
        for (r, saved) in model.store.running.iter_mut().zip(&self.running) {
            if r.name != saved.name || r.mean.len() != saved.mean.len() {
                return Err(Error::Integrity(format!("running statistics {} do not match", saved.name)));
            }
            *r = saved.clone();
        }
        model.output_scale = self.output_scale.clone();
        Ok(model)
    }

    /// Fails unless the checkpoint was trained with `config`.
    pub fn verify(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.fingerprint();
        let found = self.config.fingerprint();
        if expected != found {
            return Err(Error::FingerprintMismatch { expected, found });
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob: Vec<u8> = Vec::new();
        let mut push = |name: &str, shape: Vec<usize>, data: &[f32]| {
            let offset = blob.len() as u64;
            blob.extend(data.iter().flat_map(|v| v.to_le_bytes()));
            BlobEntry {
                name: name.to_string(),
                shape,
                dtype: "f32".into(),
                offset,
                nbytes: data.len() as u64 * 4,
            }
        };
        let params = self
            .params
            .iter()
            .map(|(n, t)| push(n, t.shape().to_vec(), t.data()))
            .collect();
        let running_mean = self
            .running
            .iter()
            .map(|r| push(&r.name, vec![r.mean.len()], &r.mean))
            .collect();
        let running_var = self
            .running
            .iter()
            .map(|r| push(&r.name, vec![r.var.len()], &r.var))
            .collect();
        let manifest = Manifest {
            format: "plume-checkpoint/1".into(),
            fingerprint: self.config.fingerprint(),
            config: self.config.clone(),
            step: self.step,
            epoch: self.epoch,
            output_scale: self.output_scale.clone(),
            stats: self.stats.clone(),
            params,
            running_mean,
            running_var,
            blob_bytes: blob.len() as u64,
        };
        let bin = dir.join(BLOB);
        fs::write(&bin, &blob).map_err(|e| Error::io(bin, e))?;
        let man = dir.join(MANIFEST);
        fs::write(&man, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(man, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let man = dir.join(MANIFEST);
        let text = fs::read_to_string(&man).map_err(|e| Error::io(&man, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.config.fingerprint() != m.fingerprint {
            return Err(Error::Integrity(format!(
                "{}: stored fingerprint does not match the stored configuration",
                man.display()
            )));
        }
        let bin = dir.join(BLOB);
        let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if blob.len() as u64 != m.blob_bytes {
            return Err(Error::Integrity(format!(
                "{}: {} bytes, manifest declares {}",
                bin.display(),
                blob.len(),
                m.blob_bytes
            )));
        }
        let read = |e: &BlobEntry| -> Result<Vec<f32>> {
            let n: usize = e.shape.iter().product();
            let end = e.offset.checked_add(e.nbytes);
            if e.dtype != "f32" || e.nbytes != n as u64 * 4 || end.is_none_or(|end| end > blob.len() as u64) {
                return Err(Error::Integrity(format!("blob entry {} is inconsistent", e.name)));
            }
            let bytes = &blob[e.offset as usize..(e.offset + e.nbytes) as usize];
            Ok(bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect())
        };
        let params = m
            .params
            .iter()
            .map(|e| Ok((e.name.clone(), Tensor::from_vec(&e.shape, read(e)?)?)))
            .collect::<Result<_>>()?;
        if m.running_mean.len() != m.running_var.len() {
            return Err(Error::Integrity("running statistics lists differ in length".into()));
        }
        let running = m
            .running_mean
            .iter()
            .zip(&m.running_var)
            .map(|(a, b)| {
                Ok(RunningStats {
                    name: a.name.clone(),
                    mean: read(a)?,
                    var: read(b)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: m.config,
            params,
            running,
            stats: m.stats,
            output_scale: m.output_scale,
            step: m.step,
            epoch: m.epoch,
        })
    }
}
