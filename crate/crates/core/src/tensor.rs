//! Dense channel-first volumes and the numeric kernels the networks are built from.
//!
//! Layout is `C x D x H x W`, row-major, `W` fastest. All kernels are pure
//! functions; reductions (means, variances, softmax sums) accumulate in `f64`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_eq, mismatch, Error, Result};

/// Spatial extent `[D, H, W]`.
pub type Dims3 = [usize; 3];

const AXIS_NAMES: [&str; 3] = ["depth", "height", "width"];

#[inline]
pub(crate) fn sq(x: f64) -> f64 {
    x * x
}

pub(crate) fn voxels(dims: Dims3) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    channels: usize,
    dims: Dims3,
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn zeros(channels: usize, dims: Dims3) -> Self {
        Self::full(channels, dims, 0.0)
    }

    pub fn full(channels: usize, dims: Dims3, value: f32) -> Self {
        Self {
            channels,
            dims,
            data: vec![value; channels * voxels(dims)],
        }
    }

    pub fn from_vec(channels: usize, dims: Dims3, data: Vec<f32>) -> Result<Self> {
        ensure_eq("data length", channels * voxels(dims), data.len())?;
        Ok(Self {
            channels,
            dims,
            data,
        })
    }

    /// Builds a tensor by evaluating `f(c, d, h, w)` at every element.
    pub fn from_fn(channels: usize, dims: Dims3, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(channels * voxels(dims));
        for c in 0..channels {
            for d in 0..dims[0] {
                for h in 0..dims[1] {
                    for w in 0..dims[2] {
                        data.push(f(c, d, h, w));
                    }
                }
            }
        }
        Self {
            channels,
            dims,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn depth(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    /// Number of voxels per channel.
    pub fn voxels(&self) -> usize {
        voxels(self.dims)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn index(&self, c: usize, d: usize, h: usize, w: usize) -> usize {
        ((c * self.dims[0] + d) * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn get(&self, c: usize, d: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(c, d, h, w)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, d: usize, h: usize, w: usize, value: f32) {
        let i = self.index(c, d, h, w);
        self.data[i] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise sum of two equally shaped tensors.
    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        self.ensure_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f32) -> Tensor4 {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// Stacks channels of `parts` in order. All parts must share spatial dims.
    pub fn concat_channels(parts: &[&Tensor4]) -> Result<Tensor4> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let dims = first.dims;
        let mut channels = 0;
        let mut data = Vec::new();
        for t in parts {
            for (axis, (&e, &a)) in dims.iter().zip(&t.dims).enumerate() {
                ensure_eq(AXIS_NAMES[axis], e, a)?;
            }
            channels += t.channels;
            data.extend_from_slice(&t.data);
        }
        Tensor4::from_vec(channels, dims, data)
    }

    /// Copies channels `start..end` into a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Tensor4 {
        let n = self.voxels();
        Tensor4 {
            channels: end - start,
            dims: self.dims,
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    pub fn ensure_same_shape(&self, other: &Tensor4) -> Result<()> {
        ensure_eq("channels", self.channels, other.channels)?;
        for axis in 0..3 {
            ensure_eq(AXIS_NAMES[axis], self.dims[axis], other.dims[axis])?;
        }
        Ok(())
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f32> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

/// Shape of a 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Dims3,
    pub stride: Dims3,
    pub padding: Dims3,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Stride-1 convolution with "same" padding for an odd cubic kernel.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [kernel; 3],
            stride: [1; 3],
            padding: [kernel / 2; 3],
            has_bias: true,
        }
    }

    /// 3x3x3 stride-2 convolution halving every spatial axis.
    pub fn down(in_channels: usize, out_channels: usize) -> Self {
        Self {
            stride: [2; 3],
            ..Self::same(in_channels, out_channels, 3)
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::same(in_channels, out_channels, 1)
    }

    pub fn without_bias(self) -> Self {
        Self {
            has_bias: false,
            ..self
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + if self.has_bias { self.out_channels } else { 0 }
    }

    /// `floor((n + 2p - k) / s) + 1` per axis.
    pub fn output_dims(&self, input: Dims3) -> Result<Dims3> {
        let mut out = [0; 3];
        for axis in 0..3 {
            let padded = input[axis] + 2 * self.padding[axis];
            if padded < self.kernel[axis] {
                return Err(Error::Invalid(format!(
                    "{} extent {} (padded {}) smaller than kernel {}",
                    AXIS_NAMES[axis], input[axis], padded, self.kernel[axis]
                )));
            }
            out[axis] = (padded - self.kernel[axis]) / self.stride[axis] + 1;
        }
        Ok(out)
    }

    /// Multiply-accumulate count for one application over `input` dims.
    pub fn macs(&self, input: Dims3) -> Result<u64> {
        let out = self.output_dims(input)?;
        Ok(voxels(out) as u64 * self.weight_len() as u64)
    }

    fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            if self.kernel[axis] == 0 {
                return Err(Error::InvalidConfig(format!("zero kernel on {}", AXIS_NAMES[axis])));
            }
            if !(1..=2).contains(&self.stride[axis]) {
                return Err(Error::InvalidConfig(format!(
                    "stride {} on {} not in {{1, 2}}",
                    self.stride[axis], AXIS_NAMES[axis]
                )));
            }
        }
        Ok(())
    }
}

/// Direct 3D cross-correlation.
///
/// `weights` is `[Cout, Cin, kd, kh, kw]` flattened. Each output element
/// accumulates in a fixed order (input channel outermost, then kd, kh, kw) and
/// the bias is added last, so results are bit-reproducible.
pub fn conv3d(input: &Tensor4, weights: &[f32], bias: Option<&[f32]>, spec: &ConvSpec) -> Result<Tensor4> {
    spec.validate()?;
    ensure_eq("input channels", spec.in_channels, input.channels)?;
    ensure_eq("conv weights", spec.weight_len(), weights.len())?;
    match (spec.has_bias, bias) {
        (true, Some(b)) => ensure_eq("conv bias", spec.out_channels, b.len())?,
        (true, None) => return Err(mismatch("conv bias", spec.out_channels, 0)),
        (false, Some(b)) => return Err(mismatch("conv bias", 0, b.len())),
        (false, None) => {}
    }

    let [id, ih, iw] = input.dims;
    let out_dims = spec.output_dims(input.dims)?;
    let [od, oh, ow] = out_dims;
    let [kd, kh, kw] = spec.kernel;
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.padding;
    let cin = spec.in_channels;

    // Valid output-w range for each kw tap: iw_idx = o*sw + k - pw in [0, iw).
    let w_ranges: Vec<(usize, usize)> = (0..kw)
        .map(|k| {
            let lo = if pw > k { (pw - k).div_ceil(sw) } else { 0 };
            let hi = if iw + pw > k { ((iw - 1 + pw - k) / sw + 1).min(ow) } else { 0 };
            (lo, hi.max(lo))
        })
        .collect();

    let mut out = Tensor4::zeros(spec.out_channels, out_dims);
    let mut acc = vec![0.0f32; ow];
    let in_plane = ih * iw;
    let in_vol = id * in_plane;
    let kvol = kd * kh * kw;

    for co in 0..spec.out_channels {
        let wco = &weights[co * cin * kvol..(co + 1) * cin * kvol];
        let b = bias.map_or(0.0, |b| b[co]);
        for z in 0..od {
            for y in 0..oh {
                acc.iter_mut().for_each(|v| *v = 0.0);
                for ci in 0..cin {
                    let src = &input.data[ci * in_vol..(ci + 1) * in_vol];
                    let wci = &wco[ci * kvol..(ci + 1) * kvol];
                    for a in 0..kd {
                        let zi = (z * sd + a) as isize - pd as isize;
                        if zi < 0 || zi >= id as isize {
                            continue;
                        }
                        for c in 0..kh {
                            let yi = (y * sh + c) as isize - ph as isize;
                            if yi < 0 || yi >= ih as isize {
                                continue;
                            }
                            let row = &src[zi as usize * in_plane + yi as usize * iw..][..iw];
                            let taps = &wci[(a * kh + c) * kw..][..kw];
                            for (k, &wt) in taps.iter().enumerate() {
                                let (lo, hi) = w_ranges[k];
                                if lo >= hi {
                                    continue;
                                }
                                let start = lo * sw + k - pw;
                                if sw == 1 {
                                    let src_row = &row[start..start + (hi - lo)];
                                    for (o, &x) in acc[lo..hi].iter_mut().zip(src_row) {
                                        *o += wt * x;
                                    }
                                } else {
                                    for (j, o) in acc[lo..hi].iter_mut().enumerate() {
                                        *o += wt * row[start + j * sw];
                                    }
                                }
                            }
                        }
                    }
                }
                let dst = &mut out.data[((co * od + z) * oh + y) * ow..][..ow];
                for (d, &v) in dst.iter_mut().zip(&acc) {
                    *d = v + b;
                }
            }
        }
    }
    Ok(out)
}

/// Per-axis sampling table for align-corners linear interpolation.
fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    (0..dst)
        .map(|x| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = x as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let i0 = (libm::floor(pos) as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (pos - i0 as f64) as f32)
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    if t == 0.0 {
        a
    } else {
        a * (1.0 - t) + b * t
    }
}

/// Per-channel trilinear resampling with align-corners coordinates.
pub fn trilinear_resize(input: &Tensor4, target: Dims3) -> Result<Tensor4> {
    if target.contains(&0) {
        return Err(Error::Invalid(format!("resize target {:?} has a zero extent", target)));
    }
    if target == input.dims {
        return Ok(input.clone());
    }
    let [sd, sh, sw] = input.dims;
    let td = linear_taps(sd, target[0]);
    let th = linear_taps(sh, target[1]);
    let tw = linear_taps(sw, target[2]);
    let mut out = Tensor4::zeros(input.channels, target);
    let mut idx = 0;
    for c in 0..input.channels {
        let src = input.channel(c);
        let at = |d: usize, h: usize, w: usize| src[(d * sh + h) * sw + w];
        for &(d0, d1, fd) in &td {
            for &(h0, h1, fh) in &th {
                for &(w0, w1, fw) in &tw {
                    let c00 = lerp(at(d0, h0, w0), at(d0, h0, w1), fw);
                    let c01 = lerp(at(d0, h1, w0), at(d0, h1, w1), fw);
                    let c10 = lerp(at(d1, h0, w0), at(d1, h0, w1), fw);
                    let c11 = lerp(at(d1, h1, w0), at(d1, h1, w1), fw);
                    let c0 = lerp(c00, c01, fh);
                    let c1 = lerp(c10, c11, fh);
                    out.data[idx] = lerp(c0, c1, fd);
                    idx += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Mean and biased variance of a slice, accumulated in `f64`.
pub(crate) fn mean_var(values: &[f32]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var)
}

/// `gain * (x - mean) / sqrt(var + eps) + shift` per channel over its voxels.
pub fn instance_norm(input: &Tensor4, gain: &[f32], shift: &[f32], eps: f32) -> Result<Tensor4> {
    ensure_eq("norm gain", input.channels, gain.len())?;
    ensure_eq("norm shift", input.channels, shift.len())?;
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("instance norm eps must be positive, got {eps}")));
    }
    let mut out = input.clone();
    for c in 0..input.channels {
        let (mean, var) = mean_var(input.channel(c));
        let inv = 1.0 / libm::sqrt(var + eps as f64);
        let g = gain[c] as f64;
        let s = shift[c] as f64;
        for v in out.channel_mut(c) {
            *v = (g * (*v as f64 - mean) * inv + s) as f32;
        }
    }
    Ok(out)
}

/// Tensor axis used by axis-wise operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Channel,
    Depth,
    Height,
    Width,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f32),
    Sigmoid,
    Softmax(Axis),
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-x))
}

pub fn activation(input: &Tensor4, kind: Activation) -> Tensor4 {
    let mut out = input.clone();
    activation_in_place(&mut out, kind);
    out
}

pub fn activation_in_place(t: &mut Tensor4, kind: Activation) {
    match kind {
        Activation::LeakyRelu(alpha) => t.data.iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= alpha
            }
        }),
        Activation::Sigmoid => t.data.iter_mut().for_each(|v| *v = sigmoid(*v)),
        Activation::Softmax(axis) => softmax_in_place(t, axis),
    }
}

fn softmax_in_place(t: &mut Tensor4, axis: Axis) {
    let [d, h, w] = t.dims;
    let shape = [t.channels, d, h, w];
    let ax = match axis {
        Axis::Channel => 0,
        Axis::Depth => 1,
        Axis::Height => 2,
        Axis::Width => 3,
    };
    let len = shape[ax];
    let stride: usize = shape[ax + 1..].iter().product();
    let outer: usize = shape[..ax].iter().product();
    let mut buf = vec![0.0f64; len];
    for o in 0..outer {
        for inner in 0..stride {
            let base = o * len * stride + inner;
            let max = (0..len)
                .map(|i| t.data[base + i * stride])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = libm::exp((t.data[base + i * stride] - max) as f64);
                sum += *b;
            }
            for (i, b) in buf.iter().enumerate() {
                t.data[base + i * stride] = (b / sum) as f32;
            }
        }
    }
}

/// Subset of spatial axes to reverse.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlipAxes {
    pub depth: bool,
    pub height: bool,
    pub width: bool,
}

impl FlipAxes {
    pub const NONE: FlipAxes = FlipAxes::new(false, false, false);

    pub const fn new(depth: bool, height: bool, width: bool) -> Self {
        Self { depth, height, width }
    }

    pub fn is_identity(&self) -> bool {
        !(self.depth || self.height || self.width)
    }
}

/// Reverses the selected spatial axes of every channel.
pub fn flip(input: &Tensor4, axes: FlipAxes) -> Tensor4 {
    if axes.is_identity() {
        return input.clone();
    }
    let [d, h, w] = input.dims;
    let mut out = Tensor4::zeros(input.channels, input.dims);
    for c in 0..input.channels {
        for z in 0..d {
            let sz = if axes.depth { d - 1 - z } else { z };
            for y in 0..h {
                let sy = if axes.height { h - 1 - y } else { y };
                let src = &input.data[input.index(c, sz, sy, 0)..][..w];
                let dst_start = out.index(c, z, y, 0);
                let dst = &mut out.data[dst_start..dst_start + w];
                if axes.width {
                    for (o, &v) in dst.iter_mut().zip(src.iter().rev()) {
                        *o = v;
                    }
                } else {
                    dst.copy_from_slice(src);
                }
            }
        }
    }
    out
}

/// Offset of the source origin within the target (positive) or of the target
/// within the source (negative) for center alignment; the odd voxel of any
/// excess or deficit lands on the high side.
pub(crate) fn center_offset(src: usize, dst: usize) -> isize {
    if dst >= src {
        ((dst - src) / 2) as isize
    } else {
        -(((src - dst) / 2) as isize)
    }
}

/// Center-aligned crop/pad of a channel-stacked volume.
pub(crate) fn center_resize<T: Copy>(src: &[T], channels: usize, dims: Dims3, target: Dims3, fill: T) -> Vec<T> {
    let off = [
        center_offset(dims[0], target[0]),
        center_offset(dims[1], target[1]),
        center_offset(dims[2], target[2]),
    ];
    let mut out = vec![fill; channels * voxels(target)];
    // Destination w-range that maps inside the source.
    let w_lo = off[2].max(0) as usize;
    let w_hi = ((dims[2] as isize + off[2]).min(target[2] as isize)).max(0) as usize;
    if w_lo >= w_hi {
        return out;
    }
    for c in 0..channels {
        for z in 0..target[0] {
            let sz = z as isize - off[0];
            if sz < 0 || sz >= dims[0] as isize {
                continue;
            }
            for y in 0..target[1] {
                let sy = y as isize - off[1];
                if sy < 0 || sy >= dims[1] as isize {
                    continue;
                }
                let s_row = ((c * dims[0] + sz as usize) * dims[1] + sy as usize) * dims[2];
                let d_row = ((c * target[0] + z) * target[1] + y) * target[2];
                let sw0 = (w_lo as isize - off[2]) as usize;
                out[d_row + w_lo..d_row + w_hi].copy_from_slice(&src[s_row + sw0..s_row + sw0 + (w_hi - w_lo)]);
            }
        }
    }
    out
}

/// Center-aligned crop and/or pad to `target`, filling new voxels with `fill`.
pub fn pad_or_crop(input: &Tensor4, target: Dims3, fill: f32) -> Tensor4 {
    if target == input.dims {
        return input.clone();
    }
    Tensor4 {
        channels: input.channels,
        dims: target,
        data: center_resize(&input.data, input.channels, input.dims, target, fill),
    }
}
