use candle_core::{Module, Tensor, D};

use super::deform::{grouped_conv2d, SamplingConvConfig};
use super::params::{Init, ParamBuilder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn same(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
            groups: 1,
            bias: true,
        }
    }

    pub fn pointwise() -> Self {
        Self::same(1)
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn depthwise(mut self, channels: usize) -> Self {
        self.groups = channels;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = dilation * (self.kernel - 1) / 2;
        self
    }
}

/// 2D convolution. Grouped convolutions go through the sampling-conv kernel,
/// dense ones through the tensor library's im2col path.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    spec: ConvSpec,
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, spec: ConvSpec, pb: ParamBuilder) -> Result<Self> {
        Self::with_init(c_in, c_out, spec, None, pb)
    }

    /// Convolution with every weight and bias initialised to zero.
    pub fn zeros(c_in: usize, c_out: usize, spec: ConvSpec, pb: ParamBuilder) -> Result<Self> {
        Self::with_init(c_in, c_out, spec, Some(Init::Zeros), pb)
    }

    fn with_init(
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
        init: Option<Init>,
        pb: ParamBuilder,
    ) -> Result<Self> {
        if c_in % spec.groups != 0 || c_out % spec.groups != 0 {
            return Err(Error::Config(format!(
                "conv {}: channels {c_in}->{c_out} not divisible by groups {}",
                pb.path(""),
                spec.groups
            )));
        }
        if spec.groups > 1 && spec.stride != 1 {
            return Err(Error::Config("grouped convolutions are stride 1 only".into()));
        }
        let fan_in = (c_in / spec.groups) * spec.kernel * spec.kernel;
        let w_init = init.unwrap_or(Init::KaimingUniform { fan_in });
        let weight = pb.get(
            (c_out, c_in / spec.groups, spec.kernel, spec.kernel),
            "weight",
            w_init,
        )?;
        let bias = if spec.bias {
            Some(pb.get((c_out,), "bias", init.unwrap_or(Init::KaimingUniform { fan_in }))?)
        } else {
            None
        };
        Ok(Self { weight, bias, spec })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = &self.spec;
        if s.groups > 1 {
            let cfg = SamplingConvConfig {
                padding: s.padding,
                dilation: s.dilation,
                groups: s.groups,
            };
            return grouped_conv2d(x, &self.weight, self.bias.as_ref(), cfg);
        }
        let y = x.conv2d(&self.weight, s.padding, s.stride, s.dilation, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    inner: candle_nn::Linear,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, pb: ParamBuilder) -> Result<Self> {
        let init = Init::KaimingUniform { fan_in: d_in };
        Self::with_init(d_in, d_out, init, init, pb)
    }

    pub fn with_init(d_in: usize, d_out: usize, w: Init, b: Init, pb: ParamBuilder) -> Result<Self> {
        let weight = pb.get((d_out, d_in), "weight", w)?;
        let bias = pb.get((d_out,), "bias", b)?;
        Ok(Self {
            inner: candle_nn::Linear::new(weight, Some(bias)),
        })
    }

    pub fn weight(&self) -> &Tensor {
        self.inner.weight()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

/// Largest group count in {8, 4, 2, 1} dividing `channels`.
pub fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    inner: candle_nn::GroupNorm,
}

impl GroupNorm {
    pub fn new(channels: usize, pb: ParamBuilder) -> Result<Self> {
        let weight = pb.get((channels,), "weight", Init::Ones)?;
        let bias = pb.get((channels,), "bias", Init::Zeros)?;
        let inner = candle_nn::GroupNorm::new(weight, bias, channels, norm_groups(channels), 1e-5)?;
        Ok(Self { inner })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

/// Layer norm over the last axis, written with differentiable primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, pb: ParamBuilder) -> Result<Self> {
        Ok(Self {
            weight: pb.get((dim,), "weight", Init::Ones)?,
            bias: pb.get((dim,), "bias", Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// Softmax along `dim`, stabilised by the running max.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Pre-activation residual block: `x + conv(gelu(norm(conv(gelu(norm(x))))))`,
/// with a 1×1 projection on the shortcut when the width changes.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(c_in: usize, c_out: usize, pb: ParamBuilder) -> Result<Self> {
        let shortcut = if c_in != c_out {
            Some(Conv2d::new(c_in, c_out, ConvSpec::pointwise(), pb.pp("shortcut"))?)
        } else {
            None
        };
        Ok(Self {
            norm1: GroupNorm::new(c_in, pb.pp("norm1"))?,
            conv1: Conv2d::new(c_in, c_out, ConvSpec::same(3), pb.pp("conv1"))?,
            norm2: GroupNorm::new(c_out, pb.pp("norm2"))?,
            conv2: Conv2d::new(c_out, c_out, ConvSpec::same(3), pb.pp("conv2"))?,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&gelu(&self.norm1.forward(x)?)?)?;
        let h = self.conv2.forward(&gelu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Row-stochastic matrix `[out × in]` of 1D linear interpolation with
/// half-pixel centres (`align_corners = false`) and edge clamping.
pub fn linear_resize_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[i * n_in + i0] += 1.0 - frac;
        m[i * n_in + i1] += frac;
    }
    m
}

/// Bilinear resize of a `[N, C, H, W]` map, expressed as `A_h · X · A_wᵀ`
/// so the tensor library differentiates it.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let aht = Tensor::from_vec(linear_resize_matrix(h, out_h), (out_h, h), x.device())?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    let awt = Tensor::from_vec(linear_resize_matrix(w, out_w), (out_w, w), x.device())?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    let cols = x.contiguous()?.reshape((n * c * h, w))?.matmul(&awt)?;
    let cols = cols.reshape((n * c, h, out_w))?.transpose(1, 2)?.contiguous()?;
    let rows = cols.reshape((n * c * out_w, h))?.matmul(&aht)?;
    Ok(rows
        .reshape((n * c, out_w, out_h))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n, c, out_h, out_w))?)
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    resize_bilinear(x, 2 * h, 2 * w)
}
