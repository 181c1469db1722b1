use std::str::FromStr;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax, softmax};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Soft Dice plus cross-entropy, equal weights.
    #[default]
    DiceCe,
    Ce,
    Dice,
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice_ce" => Ok(LossKind::DiceCe),
            "ce" => Ok(LossKind::Ce),
            "dice" => Ok(LossKind::Dice),
            _ => Err(Error::Config(format!("unknown loss {s:?} (dice_ce, ce, dice)"))),
        }
    }
}

/// `[B, H, W]` class indices to a `[B, K, H, W]` one-hot tensor of `dtype`.
pub fn one_hot(target: &Tensor, classes: usize, dtype: DType) -> Result<Tensor> {
    let t = target.to_dtype(DType::U32)?;
    let max = t.max_all()?.to_scalar::<u32>()? as usize;
    if max >= classes {
        return Err(Error::Data(format!("label {max} does not fit a {classes}-class head")));
    }
    let planes = (0..classes)
        .map(|k| t.eq(k as u32)?.to_dtype(dtype))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::stack(&planes, 1)?)
}

/// Mean per-pixel cross-entropy of `logits` `[B, K, H, W]`.
pub fn cross_entropy(logits: &Tensor, onehot: &Tensor) -> Result<Tensor> {
    let lp = log_softmax(logits, 1)?;
    Ok((lp * onehot)?.sum(1)?.mean_all()?.neg()?)
}

/// `1 − mean_k (2·Σ p·y + s) / (Σ p + Σ y + s)` over the foreground classes, pooled over the batch.
pub fn soft_dice(logits: &Tensor, onehot: &Tensor, smooth: f64) -> Result<Tensor> {
    let k = logits.dim(1)?;
    let p = softmax(logits, 1)?.narrow(1, 1, k - 1)?;
    let y = onehot.narrow(1, 1, k - 1)?;
    let sum = |t: &Tensor| -> candle_core::Result<Tensor> { t.transpose(0, 1)?.flatten_from(1)?.sum(D::Minus1) };
    let inter = sum(&(&p * &y)?)?;
    let den = (sum(&p)? + sum(&y)?)?;
    let dice = ((inter * 2.0)? + smooth)?.div(&(den + smooth)?)?;
    Ok(dice.mean_all()?.neg()?.affine(1.0, 1.0)?)
}

pub fn segmentation_loss(logits: &Tensor, target: &Tensor, kind: LossKind) -> Result<Tensor> {
    let k = logits.dim(1)?;
    let onehot = one_hot(target, k, logits.dtype())?;
    Ok(match kind {
        LossKind::Ce => cross_entropy(logits, &onehot)?,
        LossKind::Dice => soft_dice(logits, &onehot, 1.0)?,
        LossKind::DiceCe => (cross_entropy(logits, &onehot)? + soft_dice(logits, &onehot, 1.0)?)?,
    })
}
