use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use nifti::writer::WriterOptions;

use crate::data::{binarize, center_fit, load_volume, make_batch, normalize_volume, LabelPolicy, PreprocessConfig, SliceSample, VolumeRecord};
use crate::error::{Error, Result};
use crate::model::A4Unet;

/// Arg-max label map of every sample, at the samples' resolution.
pub fn predict_labels(model: &A4Unet, samples: &[SliceSample], batch_size: usize) -> Result<Vec<Array2<u8>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SliceSample> = chunk.iter().collect();
        let b = make_batch(&refs, model.dtype(), model.device())?;
        let labels = model.logits(&b.images)?.argmax(1)?.to_dtype(DType::U8)?;
        let (n, h, w) = labels.dims3()?;
        let flat = labels.flatten_all()?.to_vec1::<u8>()?;
        let arr = Array3::from_shape_vec((n, h, w), flat).map_err(|e| Error::Shape(e.to_string()))?;
        out.extend(arr.outer_iter().map(|a| a.to_owned()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PredictOptions {
    pub out_dir: PathBuf,
    pub overlay: bool,
    /// Predict only this axial slice instead of the whole volume.
    pub slice: Option<usize>,
    pub batch_size: usize,
    pub label_policy: LabelPolicy,
}

#[derive(Debug, Clone, Default)]
pub struct PredictOutput {
    pub masks: Vec<PathBuf>,
    pub overlays: Vec<PathBuf>,
    pub volume: Option<PathBuf>,
}

fn mask_png(labels: ArrayView2<u8>) -> GrayImage {
    let (h, w) = labels.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([if labels[[y as usize, x as usize]] != 0 { 255 } else { 0 }]))
}

/// Grey background from `base`, ground truth tinted green, prediction tinted red.
fn overlay_png(base: ArrayView2<f32>, pred: ArrayView2<u8>, gt: Option<ArrayView2<u8>>) -> RgbImage {
    let (h, w) = base.dim();
    let lo = base.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = base.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        let g = ((base[[i, j]] - lo) * scale) as f32;
        let mut px = [g, g, g];
        if gt.is_some_and(|m| m[[i, j]] != 0) {
            px = [0.5 * px[0], 0.5 * px[1] + 127.5, 0.5 * px[2]];
        }
        if pred[[i, j]] != 0 {
            px = [0.5 * px[0] + 127.5, 0.5 * px[1], 0.5 * px[2]];
        }
        Rgb(px.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

fn save_png<P: image::PixelWithColorType>(img: &image::ImageBuffer<P, Vec<P::Subpixel>>, path: &Path) -> Result<()>
where
    P: image::Pixel<Subpixel = u8>,
{
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Segments a subject (or one of its slices) and writes masks, overlays and,
/// for whole volumes, a NIfTI label map with the source geometry.
pub fn predict_subject(model: &A4Unet, record: &VolumeRecord, preprocess: &PreprocessConfig, opts: &PredictOptions) -> Result<PredictOutput> {
    let div = 1usize << model.config().stages();
    if preprocess.size % div != 0 {
        return Err(Error::Config(format!(
            "preprocess.size = {} is not divisible by {div}; choose a preprocessing size that is a multiple of {div}",
            preprocess.size
        )));
    }
    if (preprocess.size, preprocess.size) != model.config().input_size {
        return Err(Error::Config(format!(
            "preprocess.size = {} but the model expects {:?}",
            preprocess.size,
            model.config().input_size
        )));
    }
    let raw = load_volume(record)?;
    let mut image = raw.image.clone();
    if preprocess.normalize {
        normalize_volume(&mut image)?;
    }
    let (_, depth, h, w) = image.dim();
    let indices: Vec<usize> = match opts.slice {
        Some(z) if z >= depth => {
            return Err(Error::Data(format!("slice {z} out of range, volume has {depth} slices")));
        }
        Some(z) => vec![z],
        None => (0..depth).collect(),
    };
    let samples: Vec<SliceSample> = indices
        .iter()
        .map(|&z| {
            SliceSample {
                subject_id: record.subject_id.clone(),
                slice_index: z,
                image: image.index_axis(Axis(1), z).to_owned(),
                mask: None,
                spacing: raw.spacing,
            }
            .fit(preprocess.size)
        })
        .collect();
    let preds: Vec<Array2<u8>> = predict_labels(model, &samples, opts.batch_size)?
        .into_iter()
        .map(|p| center_fit(p.view(), h, w))
        .collect();
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let mut out = PredictOutput::default();
    for (&z, pred) in indices.iter().zip(&preds) {
        let stem = format!("{}_z{z:03}", record.subject_id);
        let mask_path = opts.out_dir.join(format!("{stem}_mask.png"));
        save_png(&mask_png(pred.view()), &mask_path)?;
        out.masks.push(mask_path);
        if opts.overlay {
            let gt = raw
                .labels
                .as_ref()
                .map(|l| binarize(&l.index_axis(Axis(0), z).to_owned(), opts.label_policy));
            let base = raw.image.index_axis(Axis(0), 0);
            let path = opts.out_dir.join(format!("{stem}_overlay.png"));
            save_png(&overlay_png(base.index_axis(Axis(0), z), pred.view(), gt.as_ref().map(|g| g.view())), &path)?;
            out.overlays.push(path);
        }
    }
    if opts.slice.is_none() {
        let views: Vec<_> = preds.iter().map(|p| p.view()).collect();
        // [Z, X, Y] -> [X, Y, Z]
        let vol = ndarray::stack(Axis(0), &views)
            .map_err(|e| Error::Shape(e.to_string()))?
            .permuted_axes([1, 2, 0])
            .as_standard_layout()
            .to_owned();
        let path = opts.out_dir.join(format!("{}_pred.nii.gz", record.subject_id));
        WriterOptions::new(&path)
            .reference_header(&raw.header)
            .write_nifti(&vol)
            .map_err(|e| Error::nifti(&path, e))?;
        out.volume = Some(path);
    }
    Ok(out)
}
