//! Swin Spatial Pyramid Pooling bottleneck.
//!
//! `M` parallel branches project the deepest encoder map to `C`-dimensional
//! tokens and run windowed self-attention at one window size each (small
//! windows see local context, a window covering the whole grid is global
//! attention). The branch outputs are concatenated along channels into
//! `z_all: [P, M·C]` and reweighted twice by cross-contextual attention:
//!
//! ```text
//! w_scale  = σ(W2 · relu(W1 · mean_over_tokens(z_all)))      z'  = w_scale  ⊙ z_all
//! w_tokens = σ(W3 · relu(W4 · mean_over_channels(z')))       z'' = w_tokens ⊙ z'
//! ```

use candle_core::{DType, Device, IndexOp, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    gelu, sigmoid, softmax, Conv2d, ConvSpec, Init, LayerNorm, Linear, ParamBuilder,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwinBranchConfig {
    /// Tokens per window side.
    pub window_size: usize,
    pub heads: usize,
    /// Number of (regular, shifted) window block pairs.
    pub depth: usize,
    pub embed_dim: usize,
}

impl SwinBranchConfig {
    pub fn validate(&self, grid: (usize, usize)) -> Result<()> {
        if self.window_size == 0 || grid.0 % self.window_size != 0 || grid.1 % self.window_size != 0 {
            return Err(Error::Shape(format!(
                "window size {} does not divide the {}x{} token grid",
                self.window_size, grid.0, grid.1
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsppConfig {
    pub branches: Vec<SwinBranchConfig>,
    /// Reduction ratio of the scale-level MLP (`W1`, `W2`).
    pub scale_reduction: usize,
    /// Reduction ratio of the token-level MLP (`W4`, `W3`).
    pub token_reduction: usize,
    pub mlp_ratio: usize,
}

impl Default for SsppConfig {
    fn default() -> Self {
        let branch = |window_size| SwinBranchConfig {
            window_size,
            heads: 4,
            depth: 1,
            embed_dim: 96,
        };
        Self {
            branches: vec![branch(1), branch(2), branch(7), branch(14)],
            scale_reduction: 4,
            token_reduction: 4,
            mlp_ratio: 4,
        }
    }
}

impl SsppConfig {
    pub fn embed_dim(&self) -> Result<usize> {
        let first = self
            .branches
            .first()
            .ok_or_else(|| Error::Config("SSPP needs at least one branch".into()))?
            .embed_dim;
        if let Some(b) = self.branches.iter().find(|b| b.embed_dim != first) {
            return Err(Error::Config(format!(
                "SSPP branches must share the embedding dim: {first} vs {}",
                b.embed_dim
            )));
        }
        Ok(first)
    }

    pub fn validate(&self, grid: (usize, usize)) -> Result<()> {
        self.embed_dim()?;
        if self.scale_reduction == 0 || self.token_reduction == 0 {
            return Err(Error::Config("reduction ratios must be positive".into()));
        }
        self.branches.iter().try_for_each(|b| b.validate(grid))
    }
}

/// Split `[B, H, W, C]` into `[B·nW, w·w, C]` windows (row-major over windows).
fn partition(x: &Tensor, w: usize) -> Result<Tensor> {
    let (b, h, wd, c) = x.dims4()?;
    let x = x.reshape((b, h / w, w, wd / w, w, c))?;
    let x = x.permute((0, 1, 3, 2, 4, 5))?.contiguous()?;
    Ok(x.reshape((b * (h / w) * (wd / w), w * w, c))?)
}

fn unpartition(x: &Tensor, w: usize, b: usize, h: usize, wd: usize) -> Result<Tensor> {
    let c = x.dim(D::Minus1)?;
    let x = x.reshape((b, h / w, wd / w, w, w, c))?;
    let x = x.permute((0, 1, 3, 2, 4, 5))?.contiguous()?;
    Ok(x.reshape((b, h, wd, c))?)
}

/// Additive mask `[nW, N, N]` separating regions that became adjacent only
/// through the cyclic shift.
fn shift_mask(h: usize, wd: usize, w: usize, shift: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let region = |i: usize, n: usize| -> usize {
        if i < n - w {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let nwh = h / w;
    let nww = wd / w;
    let n = w * w;
    let mut mask = vec![0f64; nwh * nww * n * n];
    for wy in 0..nwh {
        for wx in 0..nww {
            let ids: Vec<usize> = (0..n)
                .map(|k| {
                    let (y, x) = (wy * w + k / w, wx * w + k % w);
                    region(y, h) * 3 + region(x, wd)
                })
                .collect();
            let base = (wy * nww + wx) * n * n;
            for i in 0..n {
                for j in 0..n {
                    if ids[i] != ids[j] {
                        mask[base + i * n + j] = -100.0;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(mask, (nwh * nww, n, n), dev)?.to_dtype(dtype)?)
}

/// Multi-head self-attention restricted to non-overlapping windows, with a
/// learned relative position bias.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    rel_bias: Tensor,
    rel_index: Tensor,
    window: usize,
    heads: usize,
    dim: usize,
}

impl WindowAttention {
    pub fn new(dim: usize, window: usize, heads: usize, pb: ParamBuilder) -> Result<Self> {
        let span = 2 * window - 1;
        let rel_bias = pb.get((span * span, heads), "rel_bias", Init::Zeros)?;
        let n = window * window;
        let mut index = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let dy = (i / window) as isize - (j / window) as isize + window as isize - 1;
                let dx = (i % window) as isize - (j % window) as isize + window as isize - 1;
                index.push((dy as usize * span + dx as usize) as u32);
            }
        }
        Ok(Self {
            qkv: Linear::new(dim, 3 * dim, pb.pp("qkv"))?,
            proj: Linear::new(dim, dim, pb.pp("proj"))?,
            rel_bias,
            rel_index: Tensor::from_vec(index, n * n, pb.device())?,
            window,
            heads,
            dim,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Attend over `[B, H, W, C]`, cyclically shifted by half a window when
    /// `shifted` (and the grid is larger than a window). Returns the output
    /// and the attention probabilities `[B·nW, heads, N, N]`.
    pub fn forward_with_probs(&self, x: &Tensor, shifted: bool) -> Result<(Tensor, Tensor)> {
        let (b, h, wd, c) = x.dims4()?;
        if c != self.dim {
            return Err(Error::Shape(format!("window attention expects {} channels, got {c}", self.dim)));
        }
        let w = self.window;
        if h % w != 0 || wd % w != 0 {
            return Err(Error::Shape(format!("window size {w} does not divide the {h}x{wd} token grid")));
        }
        let shift = if shifted && h > w && wd > w { w / 2 } else { 0 };
        let x = if shift > 0 {
            x.roll(-(shift as i32), 1)?.roll(-(shift as i32), 2)?
        } else {
            x.clone()
        };
        let windows = partition(&x, w)?;
        let (bw, n, _) = windows.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(&windows)?
            .reshape((bw, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.i(0)?.contiguous()? * (1.0 / (hd as f64).sqrt()))?;
        let k = qkv.i(1)?.contiguous()?;
        let v = qkv.i(2)?.contiguous()?;
        let mut logits = q.matmul(&k.t()?.contiguous()?)?;
        let bias = self
            .rel_bias
            .index_select(&self.rel_index, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?
            .unsqueeze(0)?;
        logits = logits.broadcast_add(&bias)?;
        if shift > 0 {
            let nw = (h / w) * (wd / w);
            let mask = shift_mask(h, wd, w, shift, logits.dtype(), logits.device())?;
            logits = logits
                .reshape((b, nw, self.heads, n, n))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((bw, self.heads, n, n))?;
        }
        let probs = softmax(&logits, 3)?;
        let out = probs.matmul(&v)?.transpose(1, 2)?.reshape((bw, n, c))?;
        let out = self.proj.forward(&out)?;
        let mut out = unpartition(&out, w, b, h, wd)?;
        if shift > 0 {
            out = out.roll(shift as i32, 1)?.roll(shift as i32, 2)?;
        }
        Ok((out, probs))
    }

    pub fn forward(&self, x: &Tensor, shifted: bool) -> Result<Tensor> {
        Ok(self.forward_with_probs(x, shifted)?.0)
    }

    /// Token-matrix form: `[B, P, C]` tokens laid out row-major on `grid`.
    pub fn forward_tokens(&self, z: &Tensor, grid: (usize, usize), shifted: bool) -> Result<Tensor> {
        let (b, p, c) = z.dims3()?;
        if p != grid.0 * grid.1 {
            return Err(Error::Shape(format!("{p} tokens do not fill a {}x{} grid", grid.0, grid.1)));
        }
        let out = self.forward(&z.reshape((b, grid.0, grid.1, c))?, shifted)?;
        Ok(out.reshape((b, p, c))?)
    }
}

#[derive(Debug, Clone)]
struct SwinBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    shifted: bool,
}

impl SwinBlock {
    fn new(cfg: &SwinBranchConfig, mlp_ratio: usize, shifted: bool, pb: ParamBuilder) -> Result<Self> {
        let c = cfg.embed_dim;
        Ok(Self {
            norm1: LayerNorm::new(c, pb.pp("norm1"))?,
            attn: WindowAttention::new(c, cfg.window_size, cfg.heads, pb.pp("attn"))?,
            norm2: LayerNorm::new(c, pb.pp("norm2"))?,
            fc1: Linear::new(c, mlp_ratio * c, pb.pp("fc1"))?,
            fc2: Linear::new(mlp_ratio * c, c, pb.pp("fc2"))?,
            shifted,
        })
    }

    /// `x: [B, H, W, C]`
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, self.shifted)?)?;
        let m = self.fc2.forward(&gelu(&self.fc1.forward(&self.norm2.forward(&x)?)?)?)?;
        Ok((x + m)?)
    }
}

#[derive(Debug, Clone)]
pub struct SwinBranch {
    proj_in: Conv2d,
    blocks: Vec<SwinBlock>,
    norm_out: LayerNorm,
    cfg: SwinBranchConfig,
}

impl SwinBranch {
    pub fn new(in_channels: usize, cfg: &SwinBranchConfig, mlp_ratio: usize, pb: ParamBuilder) -> Result<Self> {
        let mut blocks = Vec::with_capacity(2 * cfg.depth);
        for i in 0..2 * cfg.depth {
            blocks.push(SwinBlock::new(cfg, mlp_ratio, i % 2 == 1, pb.pp(format!("block{i}")))?);
        }
        Ok(Self {
            proj_in: Conv2d::new(in_channels, cfg.embed_dim, ConvSpec::pointwise(), pb.pp("proj_in"))?,
            blocks,
            norm_out: LayerNorm::new(cfg.embed_dim, pb.pp("norm_out"))?,
            cfg: *cfg,
        })
    }

    pub fn config(&self) -> &SwinBranchConfig {
        &self.cfg
    }

    /// `[B, C_in, H, W]` feature map to `[B, P, C]` tokens.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let mut t = self.proj_in.forward(x)?.permute((0, 2, 3, 1))?.contiguous()?;
        for blk in &self.blocks {
            t = blk.forward(&t)?;
        }
        let t = self.norm_out.forward(&t)?;
        Ok(t.reshape((b, h * w, self.cfg.embed_dim))?)
    }
}

/// Two-level reweighting of the concatenated multi-scale tokens.
#[derive(Debug, Clone)]
pub struct CrossContextAttention {
    w1: Linear,
    w2: Linear,
    w4: Linear,
    w3: Linear,
}

impl CrossContextAttention {
    pub fn new(channels: usize, tokens: usize, cfg: &SsppConfig, pb: ParamBuilder) -> Result<Self> {
        let ch = (channels / cfg.scale_reduction).max(1);
        let th = (tokens / cfg.token_reduction).max(1);
        Ok(Self {
            w1: Linear::new(channels, ch, pb.pp("scale_fc1"))?,
            w2: Linear::new(ch, channels, pb.pp("scale_fc2"))?,
            w4: Linear::new(tokens, th, pb.pp("token_fc1"))?,
            w3: Linear::new(th, tokens, pb.pp("token_fc2"))?,
        })
    }

    /// Returns `(z_all', w_scale)` with `w_scale: [B, M·C]`.
    pub fn scale_attention(&self, z_all: &Tensor) -> Result<(Tensor, Tensor)> {
        let gap = z_all.mean(1)?;
        let w = sigmoid(&self.w2.forward(&self.w1.forward(&gap)?.relu()?)?)?;
        let z = z_all.broadcast_mul(&w.unsqueeze(1)?)?;
        Ok((z, w))
    }

    /// Returns `(z_all'', w_tokens)` with `w_tokens: [B, P]`.
    pub fn token_attention(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let gap = z.mean(2)?;
        let w = sigmoid(&self.w3.forward(&self.w4.forward(&gap)?.relu()?)?)?;
        let out = z.broadcast_mul(&w.unsqueeze(2)?)?;
        Ok((out, w))
    }

    pub fn forward(&self, z_all: &Tensor) -> Result<Tensor> {
        let (z, _) = self.scale_attention(z_all)?;
        Ok(self.token_attention(&z)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct SsppOutput {
    /// Concatenated branch tokens `[B, P, M·C]`.
    pub z_all: Tensor,
    pub w_scale: Tensor,
    pub w_tokens: Tensor,
    /// Reweighted tokens folded back to `[B, M·C, H, W]` and projected to the
    /// decoder's top width.
    pub fused: Tensor,
}

#[derive(Debug, Clone)]
pub struct Sspp {
    branches: Vec<SwinBranch>,
    cross: CrossContextAttention,
    fuse: Conv2d,
    grid: (usize, usize),
    total_dim: usize,
}

impl Sspp {
    pub fn new(
        cfg: &SsppConfig,
        in_channels: usize,
        out_channels: usize,
        grid: (usize, usize),
        pb: ParamBuilder,
    ) -> Result<Self> {
        cfg.validate(grid)?;
        let c = cfg.embed_dim()?;
        let total_dim = c * cfg.branches.len();
        let branches = cfg
            .branches
            .iter()
            .enumerate()
            .map(|(i, b)| SwinBranch::new(in_channels, b, cfg.mlp_ratio, pb.pp(format!("branch{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            branches,
            cross: CrossContextAttention::new(total_dim, grid.0 * grid.1, cfg, pb.pp("cross"))?,
            fuse: Conv2d::new(total_dim, out_channels, ConvSpec::pointwise(), pb.pp("fuse"))?,
            grid,
            total_dim,
        })
    }

    pub fn branches(&self) -> &[SwinBranch] {
        &self.branches
    }

    pub fn cross(&self) -> &CrossContextAttention {
        &self.cross
    }

    /// `z_all = [z_1 ‖ … ‖ z_M]`, branch order as configured.
    pub fn tokens(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if (h, w) != self.grid {
            return Err(Error::Shape(format!(
                "bottleneck built for a {}x{} grid, got {h}x{w}",
                self.grid.0, self.grid.1
            )));
        }
        let zs = self
            .branches
            .iter()
            .map(|b| b.forward(x))
            .collect::<Result<Vec<_>>>()?;
        if zs.len() == 1 {
            return Ok(zs.into_iter().next().expect("one branch"));
        }
        Ok(Tensor::cat(&zs, 2)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<SsppOutput> {
        let (b, _, h, w) = x.dims4()?;
        let z_all = self.tokens(x)?;
        let (z1, w_scale) = self.cross.scale_attention(&z_all)?;
        let (z2, w_tokens) = self.cross.token_attention(&z1)?;
        let map = z2.transpose(1, 2)?.contiguous()?.reshape((b, self.total_dim, h, w))?;
        Ok(SsppOutput {
            z_all,
            w_scale,
            w_tokens,
            fused: self.fuse.forward(&map)?,
        })
    }
}
