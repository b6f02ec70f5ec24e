//! Expectation-maximization attention.
//!
//! Features are projected by a 1x1x1 convolution, explained by `K` unit-norm
//! bases through alternating E steps (soft assignment of every voxel to the
//! bases) and M steps (bases re-estimated as attention-weighted means), then
//! reconstructed as `A * mu^T`, projected back and added to the input.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure_eq, Error, Result};
use crate::layers::{join, Conv, ParamKind, ParamSource};
use crate::tensor::{sq, ConvSpec, Dims3, Tensor4};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        ensure_eq("matrix length", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    /// Euclidean norm of column `c`, accumulated in `f64`.
    pub fn column_norm(&self, c: usize) -> f64 {
        libm::sqrt((0..self.rows).map(|r| sq(self.get(r, c) as f64)).sum::<f64>())
    }

    /// Flattens a channel-first tensor into `voxels x channels`.
    pub fn from_channels_last(t: &Tensor4) -> Self {
        let (c, n) = (t.channels(), t.voxels());
        let mut m = Matrix::zeros(n, c);
        for ch in 0..c {
            for (v, &x) in t.channel(ch).iter().enumerate() {
                m.data[v * c + ch] = x;
            }
        }
        m
    }

    /// Inverse of [`Matrix::from_channels_last`].
    pub fn to_tensor(&self, dims: Dims3) -> Result<Tensor4> {
        ensure_eq("matrix rows", dims.iter().product(), self.rows)?;
        let mut t = Tensor4::zeros(self.cols, dims);
        for ch in 0..self.cols {
            for (v, x) in t.channel_mut(ch).iter_mut().enumerate() {
                *x = self.data[v * self.cols + ch];
            }
        }
        Ok(t)
    }
}

/// Row-stochastic `N x K` responsibilities of voxels to bases.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap(pub Matrix);

impl AttentionMap {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// E step: `A[n, k] = softmax_k(X[n, :] . mu[:, k])`.
pub fn e_step(x: &Matrix, mu: &Matrix) -> Result<AttentionMap> {
    ensure_eq("feature channels vs base rows", mu.rows, x.cols)?;
    let k = mu.cols;
    let mut a = Matrix::zeros(x.rows, k);
    let mut logits = vec![0.0f32; k];
    let mut exps = vec![0.0f64; k];
    for n in 0..x.rows {
        logits.iter_mut().for_each(|l| *l = 0.0);
        for (c, &xv) in x.row(n).iter().enumerate() {
            for (l, &m) in logits.iter_mut().zip(mu.row(c)) {
                *l += xv * m;
            }
        }
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        let out = &mut a.data[n * k..(n + 1) * k];
        for (e, &l) in exps.iter_mut().zip(&logits) {
            *e = libm::exp((l - max) as f64);
            sum += *e;
        }
        for (o, e) in out.iter_mut().zip(&exps) {
            *o = (e / sum) as f32;
        }
    }
    Ok(AttentionMap(a))
}

/// M step: attention-weighted means of the feature rows, rescaled to unit
/// length. Columns with no attention mass or zero norm keep `previous`.
pub fn m_step(x: &Matrix, a: &AttentionMap, previous: &Matrix) -> Result<Matrix> {
    let a = &a.0;
    ensure_eq("attention rows", x.rows, a.rows)?;
    ensure_eq("previous base rows", x.cols, previous.rows)?;
    ensure_eq("previous base cols", a.cols, previous.cols)?;
    let (c, k) = (x.cols, a.cols);
    let mut num = vec![0.0f64; c * k];
    let mut mass = vec![0.0f64; k];
    for n in 0..x.rows {
        let arow = a.row(n);
        for (m, &av) in mass.iter_mut().zip(arow) {
            *m += av as f64;
        }
        for (ch, &xv) in x.row(n).iter().enumerate() {
            let xv = xv as f64;
            for (acc, &av) in num[ch * k..(ch + 1) * k].iter_mut().zip(arow) {
                *acc += av as f64 * xv;
            }
        }
    }
    let mut mu = previous.clone();
    for col in 0..k {
        if !(mass[col] > 0.0) {
            continue;
        }
        let norm = libm::sqrt((0..c).map(|ch| sq(num[ch * k + col] / mass[col])).sum::<f64>());
        if !(norm > 0.0) || !norm.is_finite() {
            continue;
        }
        for ch in 0..c {
            mu.data[ch * k + col] = (num[ch * k + col] / mass[col] / norm) as f32;
        }
    }
    Ok(mu)
}

/// `A * mu^T`, giving `N x C'`.
pub fn reconstruct(a: &AttentionMap, mu: &Matrix) -> Result<Matrix> {
    let a = &a.0;
    ensure_eq("attention cols vs base cols", mu.cols, a.cols)?;
    let (c, k) = (mu.rows, mu.cols);
    let mut out = Matrix::zeros(a.rows, c);
    for n in 0..a.rows {
        let arow = a.row(n);
        for ch in 0..c {
            let mrow = mu.row(ch);
            let mut s = 0.0f32;
            for kk in 0..k {
                s += arow[kk] * mrow[kk];
            }
            out.data[n * c + ch] = s;
        }
    }
    Ok(out)
}

/// Normalizes every column to unit length; zero columns are rejected.
pub fn normalize_columns(m: &mut Matrix) -> Result<()> {
    for col in 0..m.cols {
        let norm = m.column_norm(col);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Invalid(format!("base column {col} has zero or non-finite norm")));
        }
        for r in 0..m.rows {
            let i = r * m.cols + col;
            m.data[i] = (m.data[i] as f64 / norm) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmaParams {
    pub conv_in: Conv,
    pub conv_out: Conv,
    /// Initial bases `[C', K]`, unit-norm columns.
    pub bases: Matrix,
    pub iterations: usize,
}

impl EmaParams {
    pub fn new(conv_in: Conv, conv_out: Conv, mut bases: Matrix, iterations: usize) -> Result<Self> {
        if iterations == 0 || bases.cols == 0 {
            return Err(Error::InvalidConfig("EMA needs K >= 1 bases and T >= 1 iterations".into()));
        }
        ensure_eq("EMA base rows", conv_in.spec.out_channels, bases.rows)?;
        ensure_eq("EMA conv_out input", conv_in.spec.out_channels, conv_out.spec.in_channels)?;
        ensure_eq("EMA conv_out output", conv_in.spec.in_channels, conv_out.spec.out_channels)?;
        normalize_columns(&mut bases)?;
        Ok(Self {
            conv_in,
            conv_out,
            bases,
            iterations,
        })
    }

    /// Pulls `conv_in`, `conv_out` and `bases` for a `channels -> inner` module.
    pub fn build(
        src: &mut dyn ParamSource,
        prefix: &str,
        channels: usize,
        inner: usize,
        bases: usize,
        iterations: usize,
    ) -> Result<Self> {
        if iterations == 0 || bases == 0 {
            return Err(Error::InvalidConfig("EMA needs K >= 1 bases and T >= 1 iterations".into()));
        }
        let conv_in = Conv::build(src, &join(prefix, "conv_in"), ConvSpec::pointwise(channels, inner))?;
        let conv_out = Conv::build(src, &join(prefix, "conv_out"), ConvSpec::pointwise(inner, channels))?;
        let init = src.take(&join(prefix, "bases"), &[inner, bases], ParamKind::Bases)?;
        if init.is_empty() {
            // Shape-only build: skip validation of the missing values.
            return Ok(Self {
                conv_in,
                conv_out,
                bases: Matrix {
                    rows: inner,
                    cols: bases,
                    data: Vec::new(),
                },
                iterations,
            });
        }
        Self::new(conv_in, conv_out, Matrix::from_vec(inner, bases, init)?, iterations)
    }

    pub fn channels(&self) -> usize {
        self.conv_in.spec.in_channels
    }

    pub fn inner(&self) -> usize {
        self.conv_in.spec.out_channels
    }

    pub fn base_count(&self) -> usize {
        self.bases.cols
    }

    /// MACs for one forward over `dims`: the two projections, `T` rounds of
    /// E and M products, and the reconstruction.
    pub fn macs(&self, dims: Dims3) -> Result<u64> {
        let n = dims.iter().product::<usize>() as u64;
        let em = n * self.inner() as u64 * self.base_count() as u64;
        Ok(self.conv_in.macs(dims)? + self.conv_out.macs(dims)? + em * (2 * self.iterations as u64 + 1))
    }
}

/// Result of the EM loop, kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaTrace {
    pub attention: AttentionMap,
    pub bases: Matrix,
    pub reconstruction: Tensor4,
}

/// Runs the projection and EM loop, returning the reconstructed `C' x D x H x W` map.
pub fn ema_reconstruct(x: &Tensor4, params: &EmaParams) -> Result<EmaTrace> {
    ensure_eq("EMA input channels", params.channels(), x.channels())?;
    let projected = params.conv_in.forward(x)?;
    let feats = Matrix::from_channels_last(&projected);
    let mut mu = params.bases.clone();
    let mut attention = e_step(&feats, &mu)?;
    mu = m_step(&feats, &attention, &mu)?;
    for _ in 1..params.iterations {
        attention = e_step(&feats, &mu)?;
        mu = m_step(&feats, &attention, &mu)?;
    }
    let reconstruction = reconstruct(&attention, &mu)?.to_tensor(x.dims())?;
    Ok(EmaTrace {
        attention,
        bases: mu,
        reconstruction,
    })
}

/// `x + conv_out(A * mu^T)`; output shape equals input shape.
pub fn ema_forward(x: &Tensor4, params: &EmaParams) -> Result<Tensor4> {
    let trace = ema_reconstruct(x, params)?;
    let mut out = params.conv_out.forward(&trace.reconstruction)?;
    // A zero delta reproduces x exactly.
    for (o, &xi) in out.data_mut().iter_mut().zip(x.data()) {
        *o += xi;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormal(c: usize, k: usize) -> Matrix {
        let mut m = Matrix::zeros(c, k);
        for j in 0..k {
            m.set(j % c, j, 1.0);
        }
        m
    }

    #[test]
    fn single_base_gives_all_ones() {
        let x = Matrix::from_vec(3, 2, vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.0]).unwrap();
        let mu = Matrix::from_vec(2, 1, vec![0.6, 0.8]).unwrap();
        let a = e_step(&x, &mu).unwrap();
        assert!(a.0.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn scaled_base_direction_concentrates_mass() {
        let mu = orthonormal(4, 4);
        let mut x = Matrix::zeros(1, 4);
        x.set(0, 2, 10.0);
        let a = e_step(&x, &mu).unwrap();
        assert!(a.0.get(0, 2) > 0.9);
    }

    #[test]
    fn zero_features_give_uniform_rows() {
        let a = e_step(&Matrix::zeros(5, 3), &orthonormal(3, 4)).unwrap();
        assert!(a.0.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn m_step_single_base_is_normalized_mean() {
        // Rows (1,0), (3,4): mean (2,2) -> (1/sqrt2, 1/sqrt2).
        let x = Matrix::from_vec(2, 2, vec![1.0, 0.0, 3.0, 4.0]).unwrap();
        let a = AttentionMap(Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap());
        let mu = m_step(&x, &a, &Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap()).unwrap();
        let s = core::f32::consts::FRAC_1_SQRT_2;
        assert!((mu.get(0, 0) - s).abs() < 1e-7 && (mu.get(1, 0) - s).abs() < 1e-7);
    }

    #[test]
    fn m_step_keeps_unassigned_columns() {
        let x = Matrix::from_vec(2, 2, vec![1.0, 0.0, 3.0, 4.0]).unwrap();
        let a = AttentionMap(Matrix::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let prev = orthonormal(2, 2);
        let mu = m_step(&x, &a, &prev).unwrap();
        let s = core::f32::consts::FRAC_1_SQRT_2;
        assert!((mu.get(0, 0) - s).abs() < 1e-7);
        assert_eq!((mu.get(0, 1), mu.get(1, 1)), (0.0, 1.0));
    }

    #[test]
    fn identical_unit_rows_are_a_fixed_point() {
        let x = Matrix::from_vec(3, 2, vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8]).unwrap();
        let mu0 = orthonormal(2, 3);
        let a = e_step(&x, &mu0).unwrap();
        let mu = m_step(&x, &a, &mu0).unwrap();
        for k in 0..3 {
            assert!((mu.get(0, k) - 0.6).abs() < 1e-6 && (mu.get(1, k) - 0.8).abs() < 1e-6);
        }
    }

    #[test]
    fn one_hot_identity_reconstructs_bases() {
        let n = 4;
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            a.set(i, i, 1.0);
        }
        let mu = Matrix::from_vec(2, n, vec![0.6, 1.0, 0.0, -0.8, 0.8, 0.0, 1.0, 0.6]).unwrap();
        let rec = reconstruct(&AttentionMap(a), &mu).unwrap();
        for i in 0..n {
            assert_eq!(rec.row(i), &[mu.get(0, i), mu.get(1, i)]);
        }
    }

    #[test]
    fn matrix_tensor_roundtrip() {
        let t = Tensor4::from_fn(3, [2, 3, 4], |c, d, h, w| (c * 100 + d * 10 + h * 4 + w) as f32);
        let m = Matrix::from_channels_last(&t);
        assert_eq!(m.get(5, 2), t.get(2, 0, 1, 1));
        assert_eq!(m.to_tensor([2, 3, 4]).unwrap(), t);
    }

    #[test]
    fn params_reject_bad_shapes() {
        let mut src = crate::layers::ConstantSource { weight: 0.1, bias: 0.0 };
        assert!(EmaParams::build(&mut src, "ema", 8, 4, 0, 3).is_err());
        assert!(EmaParams::build(&mut src, "ema", 8, 4, 4, 0).is_err());
        let p = EmaParams::build(&mut src, "ema", 8, 4, 4, 3).unwrap();
        assert!(ema_forward(&Tensor4::zeros(7, [2, 2, 2]), &p).is_err());
    }
}
