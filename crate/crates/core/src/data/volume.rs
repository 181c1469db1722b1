use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis, Ix3};
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use super::manifest::{LabelPolicy, VolumeRecord};
use super::samples::{PreprocessConfig, SliceSample};
use crate::error::{Error, Result};

/// A subject's volumes in `[C, D, H, W]` order, with D the axial index.
#[derive(Debug, Clone)]
pub struct LoadedVolume {
    pub image: Array4<f32>,
    pub labels: Option<Array3<u8>>,
    /// Header of the first modality, reused when writing predictions.
    pub header: NiftiHeader,
    pub spacing: (f64, f64),
}

impl LoadedVolume {
    pub fn depth(&self) -> usize {
        self.image.dim().1
    }
}

/// Reads a 3-D NIfTI file as `[D, H, W]` (axial axis first).
pub fn read_nifti_3d(path: &Path) -> Result<(Array3<f32>, NiftiHeader)> {
    let obj = ReaderOptions::new().read_file(path).map_err(|e| Error::nifti(path, e))?;
    let header = obj.header().clone();
    let arr = obj.into_volume().into_ndarray::<f32>().map_err(|e| Error::nifti(path, e))?;
    let arr = match arr.ndim() {
        3 => arr,
        4 if arr.shape()[3] == 1 => arr.index_axis_move(Axis(3), 0),
        2 => arr.insert_axis(Axis(2)),
        n => return Err(Error::nifti(path, format!("expected a 3-D volume, got {n} dimensions"))),
    };
    let arr = arr
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::nifti(path, e))?;
    // [X, Y, Z] -> [Z, X, Y]
    Ok((arr.permuted_axes([2, 0, 1]).as_standard_layout().to_owned(), header))
}

pub fn load_volume(record: &VolumeRecord) -> Result<LoadedVolume> {
    let mut channels = Vec::with_capacity(record.modality_paths.len());
    let mut header = None;
    let mut first: Option<(String, [usize; 3])> = None;
    let mut check = |name: &str, shape: &[usize]| -> Result<()> {
        let s = [shape[0], shape[1], shape[2]];
        match &first {
            None => first = Some((name.to_string(), s)),
            Some((fname, f)) if *f != s => {
                return Err(Error::ShapeMismatch {
                    subject: record.subject_id.clone(),
                    first_name: fname.clone(),
                    first: f.to_vec(),
                    other_name: name.to_string(),
                    other: s.to_vec(),
                })
            }
            _ => {}
        }
        Ok(())
    };
    for (name, path) in &record.modality_paths {
        let (arr, hdr) = read_nifti_3d(path)?;
        check(name, arr.shape())?;
        header.get_or_insert(hdr);
        channels.push(arr);
    }
    let header = header.ok_or_else(|| Error::Data(format!("subject {} has no modalities", record.subject_id)))?;
    let labels = match &record.label_path {
        Some(path) => {
            let (arr, _) = read_nifti_3d(path)?;
            check("seg", arr.shape())?;
            if let Some(v) = arr.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 255.0) {
                return Err(Error::nifti(path, format!("label value {v} is not a small non-negative integer")));
            }
            Some(arr.mapv(|v| v.round() as u8))
        }
        None => None,
    };
    let views: Vec<_> = channels.iter().map(|c| c.view()).collect();
    let image = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let spacing = (header.pixdim[1] as f64, header.pixdim[2] as f64);
    let spacing = if spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.0.is_finite() && spacing.1.is_finite() {
        spacing
    } else {
        (1.0, 1.0)
    };
    Ok(LoadedVolume {
        image,
        labels,
        header,
        spacing,
    })
}

/// Per-modality z-score over nonzero voxels. All-zero modalities are left unchanged;
/// a constant nonzero region is only centred.
pub fn normalize_volume(volume: &mut Array4<f32>) -> Result<()> {
    if volume.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input volume".into()));
    }
    for mut m in volume.outer_iter_mut() {
        let (mut n, mut sum) = (0usize, 0f64);
        for &v in m.iter().filter(|v| **v != 0.0) {
            n += 1;
            sum += v as f64;
        }
        if n == 0 {
            continue;
        }
        let mean = sum / n as f64;
        let var = m
            .iter()
            .filter(|v| **v != 0.0)
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        let scale = if std > 0.0 { 1.0 / std } else { 1.0 };
        m.mapv_inplace(|v| if v != 0.0 { ((v as f64 - mean) * scale) as f32 } else { 0.0 });
    }
    Ok(())
}

pub fn binarize(labels: &Array2<u8>, policy: LabelPolicy) -> Array2<u8> {
    match policy {
        LabelPolicy::WholeTumorBinary => labels.mapv(|v| u8::from(v > 0)),
        LabelPolicy::RawLabels => labels.clone(),
    }
}

/// Centre crop and/or zero-pad the last two axes to `out_h × out_w`.
///
/// Applying it again with the original size inverts it on the retained region.
pub fn center_fit<T: Clone + Default>(a: ArrayView2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = a.dim();
    let mut out = Array2::from_elem((out_h, out_w), T::default());
    let (ch, cw) = (h.min(out_h), w.min(out_w));
    let (sy, sx) = ((h - ch) / 2, (w - cw) / 2);
    let (dy, dx) = ((out_h - ch) / 2, (out_w - cw) / 2);
    out.slice_mut(s![dy..dy + ch, dx..dx + cw])
        .assign(&a.slice(s![sy..sy + ch, sx..sx + cw]));
    out
}

/// One sample per axial index, in order, with no filtering.
pub fn slice_volume(subject_id: &str, volume: &LoadedVolume, policy: LabelPolicy) -> Vec<SliceSample> {
    (0..volume.depth())
        .map(|z| SliceSample {
            subject_id: subject_id.to_string(),
            slice_index: z,
            image: volume.image.index_axis(Axis(1), z).to_owned(),
            mask: volume
                .labels
                .as_ref()
                .map(|l| binarize(&l.index_axis(Axis(0), z).to_owned(), policy)),
            spacing: volume.spacing,
        })
        .collect()
}

/// Load, normalise, slice and fit every slice of a subject to the model input size.
pub fn preprocess_volume(record: &VolumeRecord, cfg: &PreprocessConfig, policy: LabelPolicy) -> Result<Vec<SliceSample>> {
    let mut vol = load_volume(record)?;
    if cfg.normalize {
        normalize_volume(&mut vol.image)?;
    }
    Ok(slice_volume(&record.subject_id, &vol, policy)
        .into_iter()
        .map(|s| s.fit(cfg.size))
        .collect())
}
