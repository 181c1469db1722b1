//! Checkpoints: a safetensors file holding parameters and optimizer moments,
//! with the configuration and progress counters in its metadata.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::optim::AdamW;
use super::TrainConfig;
use crate::data::PreprocessConfig;
use crate::error::{Error, Result};
use crate::model::{A4Unet, ModelConfig};

pub const CHECKPOINT_FORMAT: &str = "a4unet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub best_val_dice: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub path: PathBuf,
    pub meta: CheckpointMeta,
    tensors: HashMap<String, Tensor>,
}

fn tensor_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (Dtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        _ => (Dtype::F32, flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
    })
}

fn view_tensor(v: &TensorView<'_>) -> Result<Tensor> {
    let shape = v.shape().to_vec();
    let dev = Device::Cpu;
    Ok(match v.dtype() {
        Dtype::F64 => {
            let vals: Vec<f64> = v.data().chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            Tensor::from_vec(vals, shape, &dev)?
        }
        Dtype::F32 => {
            let vals: Vec<f32> = v.data().chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            Tensor::from_vec(vals, shape, &dev)?
        }
        other => return Err(Error::Data(format!("unsupported tensor type {other:?} in checkpoint"))),
    })
}

/// Atomically writes parameters, optimizer state and metadata to `path`.
pub fn save_checkpoint(path: &Path, model: &A4Unet, opt: Option<&AdamW>, meta: &CheckpointMeta) -> Result<()> {
    let mut named: Vec<(String, Tensor)> = model
        .params()
        .vars()
        .into_iter()
        .map(|(n, v)| (format!("param/{n}"), v.as_tensor().clone()))
        .collect();
    if let Some(opt) = opt {
        for (n, m, v) in opt.state() {
            named.push((format!("adam_m/{n}"), m.clone()));
            named.push((format!("adam_v/{n}"), v.clone()));
        }
    }
    let buffers = named
        .iter()
        .map(|(n, t)| Ok((n.clone(), t.dims().to_vec(), tensor_bytes(t)?)))
        .collect::<Result<Vec<_>>>()?;
    let err = |e: safetensors::SafeTensorError| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let views = buffers
        .iter()
        .map(|(n, shape, (dt, bytes))| Ok((n.clone(), TensorView::new(*dt, shape.clone(), bytes).map_err(err)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut info = HashMap::new();
    info.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    info.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
    info.insert("meta".to_string(), serde_json::to_string(meta)?);
    info.insert("optimizer_step".to_string(), opt.map_or(0, |o| o.steps()).to_string());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    safetensors::serialize_to_file(views, Some(info), &tmp).map_err(err)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Field-level differences between two JSON values, as `path: a != b` lines.
pub fn json_diff(prefix: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                json_diff(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                json_diff(&format!("{prefix}[{i}]"), u, v, out);
            }
        }
        _ if a != b => out.push(format!("{prefix}: checkpoint has {a}, requested {b}")),
        _ => {}
    }
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint file not found"),
            ));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let err = |m: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message: m,
        };
        let st = SafeTensors::deserialize(&bytes).map_err(|e| err(e.to_string()))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| err(e.to_string()))?;
        let info = header.metadata().clone().unwrap_or_default();
        if info.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(err("not an a4unet checkpoint".into()));
        }
        if info.get("version").map(String::as_str) != Some(&CHECKPOINT_VERSION.to_string()) {
            return Err(err(format!("unsupported checkpoint version {:?}", info.get("version"))));
        }
        let meta: CheckpointMeta =
            serde_json::from_str(info.get("meta").ok_or_else(|| err("metadata missing".into()))?)?;
        let tensors = st
            .tensors()
            .into_iter()
            .map(|(n, v)| Ok((n, view_tensor(&v)?)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self {
            path: path.to_path_buf(),
            meta,
            tensors,
        })
    }

    /// Errors with every differing field when `requested` does not match the stored model configuration.
    pub fn check_model_config(&self, requested: &ModelConfig) -> Result<()> {
        let mut diffs = Vec::new();
        json_diff(
            "model",
            &serde_json::to_value(&self.meta.model)?,
            &serde_json::to_value(requested)?,
            &mut diffs,
        );
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch { diffs })
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(&format!("param/{name}"))
    }

    pub fn has_optimizer_state(&self) -> bool {
        self.tensors.keys().any(|k| k.starts_with("adam_m/"))
    }

    /// Copies the stored parameters into `model`; names and shapes must match exactly.
    pub fn load_into(&self, model: &A4Unet) -> Result<()> {
        let store = model.params();
        let stored: Vec<&str> = self
            .tensors
            .keys()
            .filter_map(|k| k.strip_prefix("param/"))
            .collect();
        let mut diffs = Vec::new();
        for name in store.names() {
            if self.param(&name).is_none() {
                diffs.push(format!("parameter {name}: missing from checkpoint"));
            }
        }
        for name in &stored {
            if store.get(name).is_none() {
                diffs.push(format!("parameter {name}: not present in the model"));
            }
        }
        if !diffs.is_empty() {
            return Err(Error::CheckpointMismatch { diffs });
        }
        for (name, var) in store.vars() {
            let t = self.param(&name).expect("checked");
            if t.dims() != var.dims() {
                diffs.push(format!("parameter {name}: checkpoint {:?}, model {:?}", t.dims(), var.dims()));
                continue;
            }
            store.set(&name, t)?;
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch { diffs })
        }
    }

    /// Builds the stored model configuration and loads its parameters.
    pub fn build_model(&self, dtype: DType, device: &Device) -> Result<A4Unet> {
        let model = crate::model::build_model(&self.meta.model, dtype, device)?;
        self.load_into(&model)?;
        Ok(model)
    }

    pub fn restore_optimizer(&self, opt: &mut AdamW) -> Result<()> {
        opt.restore(self.meta.step, |name| {
            Some((
                self.tensors.get(&format!("adam_m/{name}"))?.clone(),
                self.tensors.get(&format!("adam_v/{name}"))?.clone(),
            ))
        })
    }
}
