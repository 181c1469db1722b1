//! Sampling convolutions: grouped dense convolution and deformable
//! convolution with bilinear offset sampling, both stride 1, each with a
//! hand-written backward pass.
//!
//! Offsets follow the usual layout `[batch, 2 * kh * kw, out_h, out_w]`,
//! channel `2t` holding the row displacement and `2t + 1` the column
//! displacement of kernel tap `t` (row-major over the kernel). A single
//! offset field is shared by all input channels.

use candle_core::{
    backend::BackendStorage, CpuStorage, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor,
    WithDType,
};
use num_traits::Float;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingConvConfig {
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for SamplingConvConfig {
    fn default() -> Self {
        Self {
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl SamplingConvConfig {
    /// Padding that keeps the spatial size for a `k × k` kernel.
    pub fn same(kernel: usize, dilation: usize, groups: usize) -> Self {
        Self {
            padding: dilation * (kernel - 1) / 2,
            dilation,
            groups,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    pad: usize,
    dil: usize,
    groups: usize,
}

impl Geometry {
    fn taps(&self) -> usize {
        self.kh * self.kw
    }
    fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }
    fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }
    fn plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn from_shapes(input: &[usize], weight: &[usize], cfg: SamplingConvConfig) -> Result<Self> {
        let (&[batch, c_in, h, w], &[c_out, cpg, kh, kw]) = (input, weight) else {
            return Err(Error::Shape(format!(
                "sampling conv expects rank-4 input and weight, got {input:?} and {weight:?}"
            )));
        };
        if cfg.groups == 0 || cfg.dilation == 0 {
            return Err(Error::Config("groups and dilation must be positive".into()));
        }
        if c_in % cfg.groups != 0 || c_out % cfg.groups != 0 || c_in / cfg.groups != cpg {
            return Err(Error::Shape(format!(
                "channel mismatch: input {c_in} channels, weight {weight:?}, groups {}",
                cfg.groups
            )));
        }
        let span_h = cfg.dilation * (kh - 1) + 1;
        let span_w = cfg.dilation * (kw - 1) + 1;
        if h + 2 * cfg.padding < span_h || w + 2 * cfg.padding < span_w {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} (dilation {}) larger than padded input {h}x{w}",
                cfg.dilation
            )));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            out_h: h + 2 * cfg.padding - span_h + 1,
            out_w: w + 2 * cfg.padding - span_w + 1,
            pad: cfg.padding,
            dil: cfg.dilation,
            groups: cfg.groups,
        })
    }

    /// Base (undeformed) sampling position of tap `t` for output pixel `(y, x)`.
    #[inline]
    fn base(&self, t: usize, y: usize, x: usize) -> (isize, isize) {
        let (i, j) = (t / self.kw, t % self.kw);
        (
            y as isize - self.pad as isize + (i * self.dil) as isize,
            x as isize - self.pad as isize + (j * self.dil) as isize,
        )
    }
}

/// Bilinear sample point: top-left corner and fractional parts.
#[derive(Clone, Copy)]
struct Sample<T> {
    y0: isize,
    x0: isize,
    ly: T,
    lx: T,
}

impl<T: Float> Sample<T> {
    fn at(py: T, px: T) -> Self {
        let fy = py.floor();
        let fx = px.floor();
        Self {
            y0: fy.to_isize().unwrap_or(isize::MIN / 2),
            x0: fx.to_isize().unwrap_or(isize::MIN / 2),
            ly: py - fy,
            lx: px - fx,
        }
    }

    /// Corner reads `(v00, v01, v10, v11)`, zero outside the plane.
    #[inline]
    fn corners(&self, plane: &[T], h: usize, w: usize) -> [T; 4] {
        let read = |y: isize, x: isize| {
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                plane[y as usize * w + x as usize]
            } else {
                T::zero()
            }
        };
        [
            read(self.y0, self.x0),
            read(self.y0, self.x0 + 1),
            read(self.y0 + 1, self.x0),
            read(self.y0 + 1, self.x0 + 1),
        ]
    }

    #[inline]
    fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.ly) * (one - self.lx),
            (one - self.ly) * self.lx,
            self.ly * (one - self.lx),
            self.ly * self.lx,
        ]
    }
}

fn sample_points<T: Float>(g: &Geometry, offsets: &[T], b: usize) -> Vec<Sample<T>> {
    let taps = g.taps();
    let plane = g.plane();
    let base_off = b * 2 * taps * plane;
    let mut out = Vec::with_capacity(taps * plane);
    for t in 0..taps {
        let oy = &offsets[base_off + 2 * t * plane..base_off + (2 * t + 1) * plane];
        let ox = &offsets[base_off + (2 * t + 1) * plane..base_off + (2 * t + 2) * plane];
        for y in 0..g.out_h {
            for x in 0..g.out_w {
                let (by, bx) = g.base(t, y, x);
                let p = y * g.out_w + x;
                out.push(Sample::at(
                    T::from(by).unwrap() + oy[p],
                    T::from(bx).unwrap() + ox[p],
                ));
            }
        }
    }
    out
}

/// Fill `cols[t * plane + p]` with the value tap `t` reads for output pixel `p`.
fn gather_columns<T: Float>(
    g: &Geometry,
    plane_in: &[T],
    samples: Option<&[Sample<T>]>,
    cols: &mut [T],
) {
    let plane = g.plane();
    match samples {
        Some(samples) => {
            for (col, s) in cols.iter_mut().zip(samples) {
                let v = s.corners(plane_in, g.h, g.w);
                let wt = s.weights();
                *col = wt[0] * v[0] + wt[1] * v[1] + wt[2] * v[2] + wt[3] * v[3];
            }
        }
        None => {
            for t in 0..g.taps() {
                for y in 0..g.out_h {
                    for x in 0..g.out_w {
                        let (sy, sx) = g.base(t, y, x);
                        cols[t * plane + y * g.out_w + x] = if sy >= 0
                            && sx >= 0
                            && (sy as usize) < g.h
                            && (sx as usize) < g.w
                        {
                            plane_in[sy as usize * g.w + sx as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn forward_impl<T: Float>(g: &Geometry, input: &[T], offsets: Option<&[T]>, weight: &[T]) -> Vec<T> {
    let plane = g.plane();
    let taps = g.taps();
    let hw = g.h * g.w;
    let (cpg, opg) = (g.in_per_group(), g.out_per_group());
    let mut out = vec![T::zero(); g.batch * g.c_out * plane];
    let mut cols = vec![T::zero(); taps * plane];
    for b in 0..g.batch {
        let samples = offsets.map(|o| sample_points(g, o, b));
        for c in 0..g.c_in {
            let grp = c / cpg;
            let ci = c % cpg;
            let plane_in = &input[(b * g.c_in + c) * hw..(b * g.c_in + c + 1) * hw];
            gather_columns(g, plane_in, samples.as_deref(), &mut cols);
            for o in grp * opg..(grp + 1) * opg {
                let dst = &mut out[(b * g.c_out + o) * plane..(b * g.c_out + o + 1) * plane];
                let wrow = &weight[(o * cpg + ci) * taps..(o * cpg + ci + 1) * taps];
                for (t, &wv) in wrow.iter().enumerate() {
                    if wv == T::zero() {
                        continue;
                    }
                    for (d, &s) in dst.iter_mut().zip(&cols[t * plane..(t + 1) * plane]) {
                        *d = *d + wv * s;
                    }
                }
            }
        }
    }
    out
}

struct Grads<T> {
    input: Vec<T>,
    offsets: Option<Vec<T>>,
    weight: Vec<T>,
}

fn backward_impl<T: Float>(
    g: &Geometry,
    input: &[T],
    offsets: Option<&[T]>,
    weight: &[T],
    grad_out: &[T],
) -> Grads<T> {
    let plane = g.plane();
    let taps = g.taps();
    let hw = g.h * g.w;
    let (cpg, opg) = (g.in_per_group(), g.out_per_group());
    let mut d_input = vec![T::zero(); input.len()];
    let mut d_weight = vec![T::zero(); weight.len()];
    let mut d_offsets = offsets.map(|o| vec![T::zero(); o.len()]);
    let mut cols = vec![T::zero(); taps * plane];
    let mut d_cols = vec![T::zero(); taps * plane];
    for b in 0..g.batch {
        let samples = offsets.map(|o| sample_points(g, o, b));
        for c in 0..g.c_in {
            let grp = c / cpg;
            let ci = c % cpg;
            let plane_in = &input[(b * g.c_in + c) * hw..(b * g.c_in + c + 1) * hw];
            gather_columns(g, plane_in, samples.as_deref(), &mut cols);
            d_cols.iter_mut().for_each(|v| *v = T::zero());
            for o in grp * opg..(grp + 1) * opg {
                let go = &grad_out[(b * g.c_out + o) * plane..(b * g.c_out + o + 1) * plane];
                let widx = (o * cpg + ci) * taps;
                for t in 0..taps {
                    let col = &cols[t * plane..(t + 1) * plane];
                    let mut acc = T::zero();
                    for (&gv, &cv) in go.iter().zip(col) {
                        acc = acc + gv * cv;
                    }
                    d_weight[widx + t] = d_weight[widx + t] + acc;
                    let wv = weight[widx + t];
                    for (d, &gv) in d_cols[t * plane..(t + 1) * plane].iter_mut().zip(go) {
                        *d = *d + wv * gv;
                    }
                }
            }
            let d_plane = &mut d_input[(b * g.c_in + c) * hw..(b * g.c_in + c + 1) * hw];
            match samples.as_deref() {
                Some(samples) => {
                    let d_off = d_offsets.as_mut().expect("offsets present");
                    let off_base = b * 2 * taps * plane;
                    for (k, s) in samples.iter().enumerate() {
                        let dc = d_cols[k];
                        if dc == T::zero() {
                            continue;
                        }
                        let wt = s.weights();
                        let corners = [
                            (s.y0, s.x0),
                            (s.y0, s.x0 + 1),
                            (s.y0 + 1, s.x0),
                            (s.y0 + 1, s.x0 + 1),
                        ];
                        for (&(y, x), &wv) in corners.iter().zip(&wt) {
                            if y >= 0 && x >= 0 && (y as usize) < g.h && (x as usize) < g.w {
                                let idx = y as usize * g.w + x as usize;
                                d_plane[idx] = d_plane[idx] + dc * wv;
                            }
                        }
                        let v = s.corners(plane_in, g.h, g.w);
                        let one = T::one();
                        let dy = (one - s.lx) * (v[2] - v[0]) + s.lx * (v[3] - v[1]);
                        let dx = (one - s.ly) * (v[1] - v[0]) + s.ly * (v[3] - v[2]);
                        let (t, p) = (k / plane, k % plane);
                        let iy = off_base + 2 * t * plane + p;
                        let ix = off_base + (2 * t + 1) * plane + p;
                        d_off[iy] = d_off[iy] + dc * dy;
                        d_off[ix] = d_off[ix] + dc * dx;
                    }
                }
                None => {
                    for t in 0..taps {
                        for y in 0..g.out_h {
                            for x in 0..g.out_w {
                                let (sy, sx) = g.base(t, y, x);
                                if sy >= 0 && sx >= 0 && (sy as usize) < g.h && (sx as usize) < g.w {
                                    let idx = sy as usize * g.w + sx as usize;
                                    d_plane[idx] =
                                        d_plane[idx] + d_cols[t * plane + y * g.out_w + x];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Grads {
        input: d_input,
        offsets: d_offsets,
        weight: d_weight,
    }
}

fn contiguous_slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = T::cpu_storage_as_slice(s)?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("sampling conv requires contiguous inputs"),
    }
}

fn to_vec<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

struct DenseOp {
    geom: Geometry,
}

struct DeformOp {
    geom: Geometry,
}

macro_rules! dispatch_float {
    ($dtype:expr, $t:ident => $body:expr) => {
        match $dtype {
            DType::F32 => {
                type $t = f32;
                $body
            }
            DType::F64 => {
                type $t = f64;
                $body
            }
            other => candle_core::bail!("sampling conv does not support {other:?}"),
        }
    };
}

impl CustomOp2 for DenseOp {
    fn name(&self) -> &'static str {
        "grouped-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.geom;
        let shape = Shape::from((g.batch, g.c_out, g.out_h, g.out_w));
        dispatch_float!(s1.dtype(), T => {
            let x = contiguous_slice::<T>(s1, l1)?;
            let w = contiguous_slice::<T>(s2, l2)?;
            Ok((T::to_cpu_storage_owned(forward_impl(g, x, None, w)), shape))
        })
    }

    fn bwd(
        &self,
        input: &Tensor,
        weight: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = &self.geom;
        dispatch_float!(input.dtype(), T => {
            let grads = backward_impl::<T>(
                g,
                &to_vec(input)?,
                None,
                &to_vec(weight)?,
                &to_vec(grad)?,
            );
            Ok((
                Some(Tensor::from_vec(grads.input, input.shape(), input.device())?),
                Some(Tensor::from_vec(grads.weight, weight.shape(), weight.device())?),
            ))
        })
    }
}

impl CustomOp3 for DeformOp {
    fn name(&self) -> &'static str {
        "deform-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.geom;
        let shape = Shape::from((g.batch, g.c_out, g.out_h, g.out_w));
        dispatch_float!(s1.dtype(), T => {
            let x = contiguous_slice::<T>(s1, l1)?;
            let off = contiguous_slice::<T>(s2, l2)?;
            let w = contiguous_slice::<T>(s3, l3)?;
            Ok((T::to_cpu_storage_owned(forward_impl(g, x, Some(off), w)), shape))
        })
    }

    fn bwd(
        &self,
        input: &Tensor,
        offsets: &Tensor,
        weight: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let g = &self.geom;
        dispatch_float!(input.dtype(), T => {
            let off = to_vec::<T>(offsets)?;
            let grads = backward_impl::<T>(
                g,
                &to_vec(input)?,
                Some(&off),
                &to_vec(weight)?,
                &to_vec(grad)?,
            );
            Ok((
                Some(Tensor::from_vec(grads.input, input.shape(), input.device())?),
                grads
                    .offsets
                    .map(|o| Tensor::from_vec(o, offsets.shape(), offsets.device()))
                    .transpose()?,
                Some(Tensor::from_vec(grads.weight, weight.shape(), weight.device())?),
            ))
        })
    }
}

fn add_bias(out: Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    match bias {
        Some(b) => {
            let c = b.dim(0)?;
            Ok(out.broadcast_add(&b.reshape((1, c, 1, 1))?)?)
        }
        None => Ok(out),
    }
}

/// Grouped stride-1 convolution with dilation. With `groups == channels`
/// this is a depth-wise convolution; it avoids splitting the input into one
/// tensor per group.
pub fn grouped_conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    cfg: SamplingConvConfig,
) -> Result<Tensor> {
    let geom = Geometry::from_shapes(input.dims(), weight.dims(), cfg)?;
    let out = input
        .contiguous()?
        .apply_op2(&weight.contiguous()?, DenseOp { geom })?;
    add_bias(out, bias)
}

/// Deformable convolution: every kernel tap reads the input at its regular
/// grid position displaced by the per-pixel offset, through bilinear
/// interpolation with zeros outside the image.
pub fn deform_conv2d(
    input: &Tensor,
    offsets: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    cfg: SamplingConvConfig,
) -> Result<Tensor> {
    let geom = Geometry::from_shapes(input.dims(), weight.dims(), cfg)?;
    let expected = [geom.batch, 2 * geom.taps(), geom.out_h, geom.out_w];
    if offsets.dims() != expected {
        return Err(Error::Shape(format!(
            "offset field {:?} does not match {} kernel taps over a {}x{} output (expected {expected:?})",
            offsets.dims(),
            geom.taps(),
            geom.out_h,
            geom.out_w
        )));
    }
    if offsets.dtype() != input.dtype() || weight.dtype() != input.dtype() {
        return Err(Error::Config("deformable conv operands must share a dtype".into()));
    }
    let out = input.contiguous()?.apply_op3(
        &offsets.contiguous()?,
        &weight.contiguous()?,
        DeformOp { geom },
    )?;
    add_bias(out, bias)
}
