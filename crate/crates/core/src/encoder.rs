//! Downsampling path with Deformable Large Kernel Attention (DLKA).
//!
//! A large `K × K` kernel with dilation `d` is decomposed into a depth-wise
//! `(2d-1) × (2d-1)` convolution followed by a depth-wise `⌈K/d⌉ × ⌈K/d⌉`
//! convolution dilated by `d`. In DLKA the dilated convolution is
//! deformable: a zero-initialised 3×3 convolution predicts its per-pixel
//! sampling offsets.
//!
//! ```text
//! attention = conv1x1(deform_dilated(depthwise(F)))
//! output    = conv1x1(attention ⊙ F) + F
//! ```

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    deform_conv2d, Conv2d, ConvSpec, Init, ParamBuilder, ResidualBlock, SamplingConvConfig,
};

/// Decomposition of a large kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LkGeometry {
    pub kernel: usize,
    pub dilation: usize,
    /// Depth-wise kernel, `(2d-1) × (2d-1)`.
    pub dw_kernel: (usize, usize),
    /// Dilated kernel, `⌈K/d⌉ × ⌈K/d⌉`.
    pub dc_kernel: (usize, usize),
}

pub fn lk_kernel_sizes(kernel: usize, dilation: usize) -> Result<LkGeometry> {
    if dilation < 1 {
        return Err(Error::Parameter(format!("dilation must be >= 1, got {dilation}")));
    }
    if kernel < dilation {
        return Err(Error::Parameter(format!(
            "kernel size {kernel} smaller than dilation {dilation}"
        )));
    }
    let dw = 2 * dilation - 1;
    let dc = kernel.div_ceil(dilation);
    Ok(LkGeometry {
        kernel,
        dilation,
        dw_kernel: (dw, dw),
        dc_kernel: (dc, dc),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LargeKernel {
    pub kernel: usize,
    pub dilation: usize,
}

impl Default for LargeKernel {
    fn default() -> Self {
        Self {
            kernel: 21,
            dilation: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DlkaBlock {
    depthwise: Conv2d,
    offset: Conv2d,
    dc_weight: Tensor,
    dc_bias: Tensor,
    dc_cfg: SamplingConvConfig,
    attn_proj: Conv2d,
    out_proj: Conv2d,
    geometry: LkGeometry,
}

impl DlkaBlock {
    pub fn new(channels: usize, geometry: LkGeometry, pb: ParamBuilder) -> Result<Self> {
        let (dw, _) = geometry.dw_kernel;
        let (dc, _) = geometry.dc_kernel;
        let d = geometry.dilation;
        if d * (dc - 1) % 2 != 0 {
            return Err(Error::Config(format!(
                "dilated kernel {dc} with dilation {d} cannot preserve the spatial size (span {} is even)",
                d * (dc - 1) + 1
            )));
        }
        let depthwise = Conv2d::new(
            channels,
            channels,
            ConvSpec::same(dw).depthwise(channels),
            pb.pp("depthwise"),
        )?;
        let offset = Conv2d::zeros(channels, 2 * dc * dc, ConvSpec::same(3), pb.pp("offset"))?;
        let dpb = pb.pp("deform");
        let fan_in = dc * dc;
        let dc_weight = dpb.get((channels, 1, dc, dc), "weight", Init::KaimingUniform { fan_in })?;
        let dc_bias = dpb.get((channels,), "bias", Init::KaimingUniform { fan_in })?;
        Ok(Self {
            depthwise,
            offset,
            dc_weight,
            dc_bias,
            dc_cfg: SamplingConvConfig::same(dc, d, channels),
            attn_proj: Conv2d::new(channels, channels, ConvSpec::pointwise(), pb.pp("attn_proj"))?,
            out_proj: Conv2d::new(channels, channels, ConvSpec::pointwise(), pb.pp("out_proj"))?,
            geometry,
        })
    }

    pub fn geometry(&self) -> LkGeometry {
        self.geometry
    }

    /// The attention map `conv1x1(deform_dilated(depthwise(F)))`.
    pub fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.depthwise.forward(x)?;
        let offsets = self.offset.forward(&a)?;
        let a = deform_conv2d(&a, &offsets, &self.dc_weight, Some(&self.dc_bias), self.dc_cfg)?;
        self.attn_proj.forward(&a)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let attn = self.attention(x)?;
        let gated = (attn * x)?;
        Ok((self.out_proj.forward(&gated)? + x)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Width of the full-resolution stem, which feeds the last skip connection.
    pub stem_channels: usize,
    pub channels: Vec<usize>,
    /// One large-kernel decomposition per stage.
    pub large_kernels: Vec<LargeKernel>,
    pub dlka_enabled: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            stem_channels: 32,
            channels: vec![64, 128, 256, 512],
            large_kernels: vec![LargeKernel::default(); 4],
            dlka_enabled: true,
        }
    }
}

impl EncoderConfig {
    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        if self.large_kernels.len() != self.channels.len() {
            return Err(Error::Config(format!(
                "encoder has {} stages but {} large-kernel settings",
                self.channels.len(),
                self.large_kernels.len()
            )));
        }
        if self.in_channels == 0 || self.stem_channels == 0 || self.channels.contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        for lk in &self.large_kernels {
            lk_kernel_sizes(lk.kernel, lk.dilation)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderStage {
    down: Conv2d,
    block: ResidualBlock,
    dlka: Option<DlkaBlock>,
}

impl EncoderStage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.block.forward(&self.down.forward(x)?)?;
        match &self.dlka {
            Some(d) => d.forward(&h),
            None => Ok(h),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Full-resolution stem features.
    pub stem: Tensor,
    /// Stage outputs at 1/2, 1/4, ... of the input resolution.
    pub pyramid: Vec<Tensor>,
}

impl EncoderOutput {
    pub fn bottleneck_in(&self) -> &Tensor {
        self.pyramid.last().expect("encoder has at least one stage")
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    stem_conv: Conv2d,
    stem_block: ResidualBlock,
    stages: Vec<EncoderStage>,
    cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, pb: ParamBuilder) -> Result<Self> {
        cfg.validate()?;
        let spb = pb.pp("stem");
        let stem_conv = Conv2d::new(cfg.in_channels, cfg.stem_channels, ConvSpec::same(3), spb.pp("conv"))?;
        let stem_block = ResidualBlock::new(cfg.stem_channels, cfg.stem_channels, spb.pp("block"))?;
        let mut stages = Vec::with_capacity(cfg.stages());
        let mut c_prev = cfg.stem_channels;
        for (i, (&c, lk)) in cfg.channels.iter().zip(&cfg.large_kernels).enumerate() {
            let st = pb.pp(format!("stage{}", i + 1));
            let dlka = if cfg.dlka_enabled {
                let geometry = lk_kernel_sizes(lk.kernel, lk.dilation)?;
                Some(DlkaBlock::new(c, geometry, st.pp("dlka"))?)
            } else {
                None
            };
            stages.push(EncoderStage {
                down: Conv2d::new(c_prev, c, ConvSpec::same(3).stride(2), st.pp("down"))?,
                block: ResidualBlock::new(c, c, st.pp("block"))?,
                dlka,
            });
            c_prev = c;
        }
        Ok(Self {
            stem_conv,
            stem_block,
            stages,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "encoder expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        let div = 1usize << self.cfg.stages();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must have height and width divisible by {div} (2^{} stages)",
                self.cfg.stages()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<EncoderOutput> {
        self.check_input(x)?;
        let stem = self.stem_block.forward(&self.stem_conv.forward(x)?)?;
        let mut pyramid = Vec::with_capacity(self.stages.len());
        let mut h = stem.clone();
        for stage in &self.stages {
            h = stage.forward(&h)?;
            pyramid.push(h.clone());
        }
        Ok(EncoderOutput { stem, pyramid })
    }
}
