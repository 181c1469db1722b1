//! Upsampling path: attention-gated skip fusion followed by the Combined
//! Attention Module (orthogonal channel attention, spatial attention and a
//! 1×1 projection) at every scale.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    resize_bilinear, sigmoid, upsample2x, Conv2d, ConvSpec, Linear, ParamBuilder, ResidualBlock,
};

/// Fixed 2D DCT filters, orthonormalised by Gram-Schmidt.
#[derive(Debug, Clone, PartialEq)]
pub struct DctFilterBank {
    /// `filters[k]` is a flattened `height × width` filter.
    pub filters: Vec<Vec<f64>>,
    pub frequencies: Vec<(usize, usize)>,
    pub height: usize,
    pub width: usize,
}

/// Frequencies of an `h × w` grid in JPEG zigzag order, starting at (0, 0).
pub fn zigzag(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(h * w);
    for s in 0..h + w - 1 {
        let lo = s.saturating_sub(w - 1);
        let hi = s.min(h - 1);
        if s % 2 == 1 {
            out.extend((lo..=hi).map(|u| (u, s - u)));
        } else {
            out.extend((lo..=hi).rev().map(|u| (u, s - u)));
        }
    }
    out
}

/// Unnormalised DCT-II basis function for frequency `(u, v)`.
pub fn dct_basis(u: usize, v: usize, h: usize, w: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    let mut f = Vec::with_capacity(h * w);
    for y in 0..h {
        let cy = (PI * (2 * y + 1) as f64 * u as f64 / (2 * h) as f64).cos();
        for x in 0..w {
            let cx = (PI * (2 * x + 1) as f64 * v as f64 / (2 * w) as f64).cos();
            f.push(cy * cx);
        }
    }
    f
}

/// Modified Gram-Schmidt; fails when a vector's residual norm drops below 1e-8.
pub fn gram_schmidt(vectors: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for (k, mut v) in vectors.into_iter().enumerate() {
        for q in &basis {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return Err(Error::Parameter(format!(
                "Gram-Schmidt: filter {k} is linearly dependent on the previous ones (residual norm {norm:.3e})"
            )));
        }
        v.iter_mut().for_each(|a| *a /= norm);
        basis.push(v);
    }
    Ok(basis)
}

pub fn build_dct_filter_bank(channels: usize, height: usize, width: usize) -> Result<DctFilterBank> {
    if channels > height * width {
        return Err(Error::Parameter(format!(
            "{channels} orthogonal filters do not fit in a {height}x{width} grid (capacity {})",
            height * width
        )));
    }
    let frequencies: Vec<_> = zigzag(height, width).into_iter().take(channels).collect();
    let seeds = frequencies
        .iter()
        .map(|&(u, v)| dct_basis(u, v, height, width))
        .collect();
    DctFilterBank::from_seeds(seeds, frequencies, height, width)
}

impl DctFilterBank {
    pub fn from_seeds(
        seeds: Vec<Vec<f64>>,
        frequencies: Vec<(usize, usize)>,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if let Some(s) = seeds.iter().find(|s| s.len() != height * width) {
            return Err(Error::Shape(format!(
                "seed filter of length {} for a {height}x{width} bank",
                s.len()
            )));
        }
        Ok(Self {
            filters: gram_schmidt(seeds)?,
            frequencies,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn gram(&self) -> Vec<Vec<f64>> {
        self.filters
            .iter()
            .map(|a| {
                self.filters
                    .iter()
                    .map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum())
                    .collect()
            })
            .collect()
    }

    /// `max |G - I|` over the Gram matrix.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, row) in self.gram().iter().enumerate() {
            for (j, &g) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g - target).abs());
            }
        }
        worst
    }

    /// `[channels, H·W]` tensor assigning one filter per channel. With more
    /// channels than filters, consecutive channel groups share a filter.
    pub fn channel_filters(&self, channels: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
        let n = self.len();
        let hw = self.height * self.width;
        let mut data = Vec::with_capacity(channels * hw);
        for c in 0..channels {
            data.extend_from_slice(&self.filters[c * n / channels]);
        }
        Ok(Tensor::from_vec(data, (channels, hw), dev)?.to_dtype(dtype)?)
    }
}

/// Channel attention with DCT-orthogonal pooling: the descriptor of channel
/// `c` is the inner product of `F[c]` with its filter.
#[derive(Debug, Clone)]
pub struct OrthoChannelAttention {
    filters: Tensor,
    fc1: Linear,
    fc2: Linear,
    shape: (usize, usize, usize),
}

impl OrthoChannelAttention {
    pub fn new(channels: usize, height: usize, width: usize, reduction: usize, pb: ParamBuilder) -> Result<Self> {
        let bank = build_dct_filter_bank(channels.min(height * width), height, width)?;
        Self::with_bank(&bank, channels, reduction, pb)
    }

    pub fn with_bank(bank: &DctFilterBank, channels: usize, reduction: usize, pb: ParamBuilder) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(Self {
            filters: bank.channel_filters(channels, pb.dtype(), pb.device())?,
            fc1: Linear::new(channels, hidden, pb.pp("fc1"))?,
            fc2: Linear::new(hidden, channels, pb.pp("fc2"))?,
            shape: (channels, bank.height, bank.width),
        })
    }

    /// `[B, C]` per-channel filter responses.
    pub fn descriptor(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if (c, h, w) != self.shape {
            return Err(Error::Shape(format!(
                "channel attention built for {:?}, got [{c}, {h}, {w}]",
                self.shape
            )));
        }
        Ok(x.reshape((b, c, h * w))?
            .broadcast_mul(&self.filters.unsqueeze(0)?)?
            .sum(2)?)
    }

    /// Channel weights in `(0, 1)`, `[B, C]`.
    pub fn weights(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.descriptor(x)?;
        sigmoid(&self.fc2.forward(&self.fc1.forward(&d)?.relu()?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weights(x)?;
        Ok(x.broadcast_mul(&w.unsqueeze(2)?.unsqueeze(3)?)?)
    }
}

/// Channel-axis max and mean, each `[B, 1, H, W]`.
pub fn channel_pool(x: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((x.max_keepdim(1)?, x.mean_keepdim(1)?))
}

#[derive(Debug, Clone)]
pub struct SpatialAttention {
    conv: Conv2d,
}

impl SpatialAttention {
    pub const KERNEL: usize = 7;

    pub fn new(pb: ParamBuilder) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(2, 1, ConvSpec::same(Self::KERNEL), pb.pp("conv"))?,
        })
    }

    /// Spatial map in `(0, 1)`, `[B, 1, H, W]`.
    pub fn map(&self, x: &Tensor) -> Result<Tensor> {
        let (max, avg) = channel_pool(x)?;
        sigmoid(&self.conv.forward(&Tensor::cat(&[max, avg], 1)?)?)
    }
}

/// Additive attention gate on a skip connection:
/// `α = σ(ψ(relu(W_x x + W_g g + b_g)) + b_ψ)`, output `x ⊙ α`.
#[derive(Debug, Clone)]
pub struct AttentionGate {
    wx: Conv2d,
    wg: Conv2d,
    psi: Conv2d,
    x_channels: usize,
    g_channels: usize,
}

impl AttentionGate {
    pub fn new(x_channels: usize, g_channels: usize, channelwise: bool, pb: ParamBuilder) -> Result<Self> {
        let inter = (x_channels / 2).max(1);
        let out = if channelwise { x_channels } else { 1 };
        Ok(Self {
            wx: Conv2d::new(x_channels, inter, ConvSpec::pointwise().no_bias(), pb.pp("wx"))?,
            wg: Conv2d::new(g_channels, inter, ConvSpec::pointwise(), pb.pp("wg"))?,
            psi: Conv2d::new(inter, out, ConvSpec::pointwise(), pb.pp("psi"))?,
            x_channels,
            g_channels,
        })
    }

    /// Gate coefficients `[B, 1, H, W]` (or `[B, C, H, W]` when channel-wise)
    /// on `x`'s grid; `g` is resampled bilinearly when its grid differs.
    pub fn coefficients(&self, x: &Tensor, g: &Tensor) -> Result<Tensor> {
        let (_, cx, h, w) = x.dims4()?;
        let (_, cg, _, _) = g.dims4()?;
        if cx != self.x_channels || cg != self.g_channels {
            return Err(Error::Config(format!(
                "attention gate built for {}/{} channels, got {cx}/{cg}",
                self.x_channels, self.g_channels
            )));
        }
        let gp = resize_bilinear(&self.wg.forward(g)?, h, w)?;
        let a = (self.wx.forward(x)? + gp)?.relu()?;
        sigmoid(&self.psi.forward(&a)?)
    }

    pub fn forward(&self, x: &Tensor, g: &Tensor) -> Result<Tensor> {
        let alpha = self.coefficients(x, g)?;
        Ok(x.broadcast_mul(&alpha)?)
    }
}

/// Combined Attention Module. With attention disabled only the projection remains.
#[derive(Debug, Clone)]
pub struct CamBlock {
    channel: Option<OrthoChannelAttention>,
    spatial: Option<SpatialAttention>,
    proj: Conv2d,
}

impl CamBlock {
    pub fn new(
        c_in: usize,
        c_out: usize,
        grid: (usize, usize),
        enabled: bool,
        reduction: usize,
        pb: ParamBuilder,
    ) -> Result<Self> {
        let (channel, spatial) = if enabled {
            (
                Some(OrthoChannelAttention::new(c_in, grid.0, grid.1, reduction, pb.pp("channel"))?),
                Some(SpatialAttention::new(pb.pp("spatial"))?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            channel,
            spatial,
            proj: Conv2d::new(c_in, c_out, ConvSpec::pointwise().no_bias(), pb.pp("proj"))?,
        })
    }

    pub fn projection(&self) -> &Conv2d {
        &self.proj
    }

    /// The attended features before the projection.
    pub fn attend(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        if let Some(ca) = &self.channel {
            h = ca.forward(&h)?;
        }
        if let Some(sa) = &self.spatial {
            h = h.broadcast_mul(&sa.map(&h)?)?;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.proj.forward(&self.attend(x)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_classes: usize,
    pub cam_enabled: bool,
    pub ag_enabled: bool,
    /// One gate coefficient per channel instead of one per pixel.
    pub channelwise_gate: bool,
    pub channel_reduction: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            cam_enabled: true,
            ag_enabled: true,
            channelwise_gate: false,
            channel_reduction: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    up: Conv2d,
    gate: Option<AttentionGate>,
    cam: CamBlock,
    block: ResidualBlock,
}

impl DecoderStage {
    /// `x`: coarser decoder features; `skip`: encoder features at twice the resolution.
    pub fn forward(&self, x: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let up = self.up.forward(&upsample2x(x)?)?;
        let skip = match &self.gate {
            Some(g) => g.forward(skip, &up)?,
            None => skip.clone(),
        };
        let h = self.cam.forward(&Tensor::cat(&[skip, up], 1)?)?;
        self.block.forward(&h)
    }

    pub fn gate(&self) -> Option<&AttentionGate> {
        self.gate.as_ref()
    }

    pub fn cam(&self) -> &CamBlock {
        &self.cam
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    stages: Vec<DecoderStage>,
    head: Conv2d,
}

impl Decoder {
    /// `skip_channels` and `skip_grids` list the skips from coarse to fine
    /// (the last one at full resolution); `top_channels` is the bottleneck width.
    pub fn new(
        cfg: &DecoderConfig,
        top_channels: usize,
        skip_channels: &[usize],
        skip_grids: &[(usize, usize)],
        pb: ParamBuilder,
    ) -> Result<Self> {
        if skip_channels.len() != skip_grids.len() || skip_channels.is_empty() {
            return Err(Error::Config(format!(
                "decoder needs matching skip widths and grids, got {} and {}",
                skip_channels.len(),
                skip_grids.len()
            )));
        }
        if cfg.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let mut stages = Vec::with_capacity(skip_channels.len());
        let mut c_prev = top_channels;
        for (i, (&c, &grid)) in skip_channels.iter().zip(skip_grids).enumerate() {
            let st = pb.pp(format!("stage{}", i + 1));
            let gate = if cfg.ag_enabled {
                Some(AttentionGate::new(c, c, cfg.channelwise_gate, st.pp("gate"))?)
            } else {
                None
            };
            stages.push(DecoderStage {
                up: Conv2d::new(c_prev, c, ConvSpec::pointwise(), st.pp("up"))?,
                gate,
                cam: CamBlock::new(2 * c, c, grid, cfg.cam_enabled, cfg.channel_reduction, st.pp("cam"))?,
                block: ResidualBlock::new(c, c, st.pp("block"))?,
            });
            c_prev = c;
        }
        Ok(Self {
            stages,
            head: Conv2d::new(c_prev, cfg.num_classes, ConvSpec::pointwise(), pb.pp("head"))?,
        })
    }

    pub fn stages(&self) -> &[DecoderStage] {
        &self.stages
    }

    /// `skips` ordered coarse to fine. Returns logits at the finest skip's resolution.
    pub fn forward(&self, top: &Tensor, skips: &[&Tensor]) -> Result<Tensor> {
        if skips.len() != self.stages.len() {
            return Err(Error::Config(format!(
                "decoder has {} stages but received {} skip maps",
                self.stages.len(),
                skips.len()
            )));
        }
        let mut h = top.clone();
        for (stage, skip) in self.stages.iter().zip(skips) {
            h = stage.forward(&h, skip)?;
        }
        self.head.forward(&h)
    }
}
