use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use super::manifest::{LabelPolicy, VolumeRecord};
use super::samples::{PreprocessConfig, SliceSample};
use super::volume::preprocess_volume;
use crate::error::{Error, Result};

/// On-disk store of preprocessed subjects, keyed by a hash of the source
/// file contents and the preprocessing settings.
#[derive(Debug, Clone)]
pub struct SliceCache {
    dir: PathBuf,
}

impl SliceCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(record: &VolumeRecord, cfg: &PreprocessConfig, policy: LabelPolicy) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&(cfg, policy))?);
        let files = record
            .modality_paths
            .iter()
            .map(|(m, p)| (m.as_str(), p))
            .chain(record.label_path.iter().map(|p| ("seg", p)));
        for (name, path) in files {
            h.update(name.as_bytes());
            h.update(fs::read(path).map_err(|e| Error::io(path, e))?);
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn load_or_build(&self, record: &VolumeRecord, cfg: &PreprocessConfig, policy: LabelPolicy) -> Result<Vec<SliceSample>> {
        let path = self.dir.join(format!("{}.safetensors", Self::key(record, cfg, policy)?));
        if path.exists() {
            match read_entry(&path, &record.subject_id) {
                Ok(s) => return Ok(s),
                Err(e) => log::warn!("ignoring unreadable cache entry {}: {e}", path.display()),
            }
        }
        let samples = preprocess_volume(record, cfg, policy)?;
        write_entry(&path, &samples)?;
        Ok(samples)
    }
}

fn write_entry(path: &Path, samples: &[SliceSample]) -> Result<()> {
    let first = samples.first().ok_or_else(|| Error::Data("cannot cache an empty volume".into()))?;
    let (c, h, w) = first.image.dim();
    let d = samples.len();
    let img: Vec<u8> = samples
        .iter()
        .flat_map(|s| s.image.iter().flat_map(|v| v.to_le_bytes()))
        .collect();
    let labelled = samples.iter().all(|s| s.mask.is_some());
    let msk: Vec<u8> = samples
        .iter()
        .filter_map(|s| s.mask.as_ref())
        .flat_map(|m| m.iter().copied())
        .collect();
    let err = |e: safetensors::SafeTensorError| Error::Data(format!("cache write: {e}"));
    let mut tensors = vec![("image".to_string(), TensorView::new(Dtype::F32, vec![d, c, h, w], &img).map_err(err)?)];
    if labelled {
        tensors.push(("mask".to_string(), TensorView::new(Dtype::U8, vec![d, h, w], &msk).map_err(err)?));
    }
    let meta = HashMap::from([
        ("spacing".to_string(), serde_json::to_string(&first.spacing)?),
    ]);
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(tensors, Some(meta), &tmp).map_err(err)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_entry(path: &Path, subject_id: &str) -> Result<Vec<SliceSample>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let err = |e: safetensors::SafeTensorError| Error::Data(format!("cache read: {e}"));
    let st = SafeTensors::deserialize(&bytes).map_err(err)?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(err)?;
    let spacing: (f64, f64) = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get("spacing"))
        .map(|s| serde_json::from_str(s))
        .transpose()?
        .unwrap_or((1.0, 1.0));
    let img = st.tensor("image").map_err(err)?;
    let shape = img.shape();
    let (d, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let values: Vec<f32> = img
        .data()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let image = Array4::from_shape_vec((d, c, h, w), values).map_err(|e| Error::Data(e.to_string()))?;
    let masks = match st.tensor("mask") {
        Ok(m) => Some(Array3::from_shape_vec((d, h, w), m.data().to_vec()).map_err(|e| Error::Data(e.to_string()))?),
        Err(_) => None,
    };
    Ok((0..d)
        .map(|z| SliceSample {
            subject_id: subject_id.to_string(),
            slice_index: z,
            image: image.index_axis(Axis(0), z).to_owned(),
            mask: masks
                .as_ref()
                .map(|m| -> Array2<u8> { m.index_axis(Axis(0), z).to_owned() }),
            spacing,
        })
        .collect())
}
