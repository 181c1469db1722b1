use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::volume::center_fit;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Side of the square model input.
    pub size: usize,
    pub normalize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            size: 224,
            normalize: true,
        }
    }
}

/// A 2-D axial slice: `image` is `[C, H, W]`, `mask` is `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub subject_id: String,
    pub slice_index: usize,
    pub image: Array3<f32>,
    pub mask: Option<Array2<u8>>,
    pub spacing: (f64, f64),
}

impl SliceSample {
    pub fn height(&self) -> usize {
        self.image.dim().1
    }

    pub fn width(&self) -> usize {
        self.image.dim().2
    }

    /// Centre crop/pad to `size × size`.
    pub fn fit(self, size: usize) -> Self {
        if self.height() == size && self.width() == size {
            return self;
        }
        let chans: Vec<_> = self
            .image
            .outer_iter()
            .map(|c| center_fit(c, size, size))
            .collect();
        let views: Vec<_> = chans.iter().map(|c| c.view()).collect();
        Self {
            image: ndarray::stack(Axis(0), &views).expect("equal shapes"),
            mask: self.mask.map(|m| center_fit(m.view(), size, size)),
            ..self
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, C, H, W]`
    pub images: Tensor,
    /// `[B, H, W]` class indices, `u32`.
    pub masks: Option<Tensor>,
}

pub fn make_batch(samples: &[&SliceSample], dtype: DType, device: &Device) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (c, h, w) = first.image.dim();
    let mut img = Vec::with_capacity(samples.len() * c * h * w);
    let mut msk = Vec::with_capacity(samples.len() * h * w);
    let labelled = samples.iter().all(|s| s.mask.is_some());
    for s in samples {
        if s.image.dim() != (c, h, w) {
            return Err(Error::Shape(format!(
                "batch mixes slice shapes {:?} and {:?}",
                (c, h, w),
                s.image.dim()
            )));
        }
        img.extend(s.image.iter().copied());
        if let (true, Some(m)) = (labelled, &s.mask) {
            msk.extend(m.iter().map(|&v| v as u32));
        }
    }
    let images = Tensor::from_vec(img, (samples.len(), c, h, w), device)?.to_dtype(dtype)?;
    let masks = if labelled {
        Some(Tensor::from_vec(msk, (samples.len(), h, w), device)?)
    } else {
        None
    };
    Ok(Batch { images, masks })
}
