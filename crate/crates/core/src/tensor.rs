//! Dense numerical kernels over channel-last feature grids.
//!
//! Everything here is generic over [`Real`] so the same code path runs in
//! `f32` for the pipeline and in `f64` when a finite-difference oracle needs
//! the extra precision.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type of every tensor in the crate.
pub trait Real:
    Float + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// A `rows × cols × channels` grid, channel-last, with a per-cell coverage mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    rows: usize,
    cols: usize,
    channels: usize,
    data: Vec<T>,
    coverage: Vec<bool>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        Self::filled(rows, cols, channels, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, channels: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            channels,
            data: vec![value; rows * cols * channels],
            coverage: vec![true; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols * channels {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols}x{channels} map",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            channels,
            data,
            coverage: vec![true; rows * cols],
        })
    }

    /// Builds a map by evaluating `f(row, col, channel)` for every element.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(rows * cols * channels);
        for r in 0..rows {
            for c in 0..cols {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            rows,
            cols,
            channels,
            data,
            coverage: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.channels)
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> T {
        self.data[(r * self.cols + c) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: T) {
        self.data[(r * self.cols + c) * self.channels + ch] = v;
    }

    #[inline]
    pub fn cell(&self, r: usize, c: usize) -> &[T] {
        let at = (r * self.cols + c) * self.channels;
        &self.data[at..at + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, r: usize, c: usize) -> &mut [T] {
        let at = (r * self.cols + c) * self.channels;
        &mut self.data[at..at + self.channels]
    }

    pub fn coverage(&self) -> &[bool] {
        &self.coverage
    }

    pub fn coverage_mut(&mut self) -> &mut [bool] {
        &mut self.coverage
    }

    #[inline]
    pub fn is_covered(&self, r: usize, c: usize) -> bool {
        self.coverage[r * self.cols + c]
    }

    pub fn set_coverage_all(&mut self, covered: bool) {
        self.coverage.iter_mut().for_each(|m| *m = covered);
    }

    pub fn covered_count(&self) -> usize {
        self.coverage.iter().filter(|&&m| m).count()
    }

    pub fn with_coverage(mut self, coverage: Vec<bool>) -> Result<Self> {
        if coverage.len() != self.cell_count() {
            return Err(Error::shape("coverage mask length differs from cell count"));
        }
        self.coverage = coverage;
        Ok(self)
    }

    pub fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
            coverage: self.coverage.clone(),
        }
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            rows: self.rows,
            cols: self.cols,
            channels: self.channels,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            coverage: self.coverage.clone(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the `rows × cols` window starting at `(r0, c0)`.
    pub fn crop(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Self> {
        if r0 + rows > self.rows || c0 + cols > self.cols {
            return Err(Error::shape(format!(
                "crop {rows}x{cols}@({r0},{c0}) outside {}x{}",
                self.rows, self.cols
            )));
        }
        let mut out = Self::zeros(rows, cols, self.channels);
        for r in 0..rows {
            for c in 0..cols {
                out.cell_mut(r, c).copy_from_slice(self.cell(r0 + r, c0 + c));
                out.coverage[r * cols + c] = self.is_covered(r0 + r, c0 + c);
            }
        }
        Ok(out)
    }
}

/// Convolution weights `[out_ch, in_ch, k, k]` plus one bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T = f32> {
    out_ch: usize,
    in_ch: usize,
    size: usize,
    weights: Vec<T>,
    bias: Vec<T>,
}

impl<T: Real> ConvKernel<T> {
    pub fn zeros(out_ch: usize, in_ch: usize, size: usize) -> Result<Self> {
        Self::from_parts(
            out_ch,
            in_ch,
            size,
            vec![T::zero(); out_ch * in_ch * size * size],
            vec![T::zero(); out_ch],
        )
    }

    pub fn from_parts(
        out_ch: usize,
        in_ch: usize,
        size: usize,
        weights: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::config(format!("kernel size {size} must be odd")));
        }
        if weights.len() != out_ch * in_ch * size * size || bias.len() != out_ch {
            return Err(Error::shape(format!(
                "kernel [{out_ch},{in_ch},{size},{size}] given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            out_ch,
            in_ch,
            size,
            weights,
            bias,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    #[inline]
    pub fn index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_ch + i) * self.size + ky) * self.size + kx
    }

    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> T {
        self.weights[self.index(o, i, ky, kx)]
    }

    pub fn cast<U: Real>(&self) -> ConvKernel<U> {
        ConvKernel {
            out_ch: self.out_ch,
            in_ch: self.in_ch,
            size: self.size,
            weights: self.weights.iter().map(|v| U::of(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    // [ky][kx][i][o] so the innermost loop runs over contiguous output channels.
    fn packed(&self) -> Vec<T> {
        let (k, ic, oc) = (self.size, self.in_ch, self.out_ch);
        let mut packed = vec![T::zero(); self.weights.len()];
        for o in 0..oc {
            for i in 0..ic {
                for ky in 0..k {
                    for kx in 0..k {
                        packed[((ky * k + kx) * ic + i) * oc + o] = self.weight(o, i, ky, kx);
                    }
                }
            }
        }
        packed
    }
}

#[inline]
fn offset(pos: usize, tap: usize, pad: usize, len: usize) -> Option<usize> {
    let p = pos + tap;
    if p < pad || p - pad >= len {
        None
    } else {
        Some(p - pad)
    }
}

/// Same-size 2-D cross-correlation with zero padding `(k - 1) / 2`, plus bias.
///
/// The output inherits the input's coverage mask.
pub fn conv2d<T: Real>(input: &FeatureMap<T>, kernel: &ConvKernel<T>) -> Result<FeatureMap<T>> {
    if input.channels != kernel.in_ch {
        return Err(Error::shape(format!(
            "conv2d: input has {} channels, kernel expects {}",
            input.channels, kernel.in_ch
        )));
    }
    let (rows, cols, ic) = input.shape();
    let (oc, k) = (kernel.out_ch, kernel.size);
    let pad = k / 2;
    let packed = kernel.packed();
    let mut out = FeatureMap::zeros(rows, cols, oc);
    out.coverage.copy_from_slice(&input.coverage);
    for r in 0..rows {
        for c in 0..cols {
            let base = (r * cols + c) * oc;
            let acc = &mut out.data[base..base + oc];
            acc.copy_from_slice(&kernel.bias);
            for ky in 0..k {
                let Some(rr) = offset(r, ky, pad, rows) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(cc) = offset(c, kx, pad, cols) else {
                        continue;
                    };
                    let src = input.cell(rr, cc);
                    let taps = &packed[(ky * k + kx) * ic * oc..][..ic * oc];
                    for (&v, w) in src.iter().zip(taps.chunks_exact(oc)) {
                        for (a, &wv) in acc.iter_mut().zip(w) {
                            *a += v * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a [`conv2d`] call with respect to its weights, bias and input.
#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    /// Same `[out_ch, in_ch, k, k]` layout as [`ConvKernel::weights`].
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub input: FeatureMap<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &FeatureMap<T>,
    kernel: &ConvKernel<T>,
    grad_out: &FeatureMap<T>,
) -> Result<ConvGrads<T>> {
    if input.channels != kernel.in_ch {
        return Err(Error::shape("conv2d_backward: input/kernel channel mismatch"));
    }
    if grad_out.shape() != (input.rows, input.cols, kernel.out_ch) {
        return Err(Error::shape(format!(
            "conv2d_backward: upstream {:?}, expected {:?}",
            grad_out.shape(),
            (input.rows, input.cols, kernel.out_ch)
        )));
    }
    let (rows, cols, ic) = input.shape();
    let (oc, k) = (kernel.out_ch, kernel.size);
    let pad = k / 2;
    let packed = kernel.packed();
    let mut dw_packed = vec![T::zero(); packed.len()];
    let mut bias = vec![T::zero(); oc];
    let mut d_in = FeatureMap::zeros(rows, cols, ic);
    d_in.coverage.copy_from_slice(&input.coverage);

    for r in 0..rows {
        for c in 0..cols {
            let g = grad_out.cell(r, c);
            for (b, &gv) in bias.iter_mut().zip(g) {
                *b += gv;
            }
            for ky in 0..k {
                let Some(rr) = offset(r, ky, pad, rows) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(cc) = offset(c, kx, pad, cols) else {
                        continue;
                    };
                    let tap = (ky * k + kx) * ic * oc;
                    let src_at = (rr * cols + cc) * ic;
                    for i in 0..ic {
                        let v = input.data[src_at + i];
                        let w = &packed[tap + i * oc..tap + (i + 1) * oc];
                        let dw = &mut dw_packed[tap + i * oc..tap + (i + 1) * oc];
                        let mut back = T::zero();
                        for o in 0..oc {
                            dw[o] += g[o] * v;
                            back += g[o] * w[o];
                        }
                        d_in.data[src_at + i] += back;
                    }
                }
            }
        }
    }

    let mut weights = vec![T::zero(); packed.len()];
    for o in 0..oc {
        for i in 0..ic {
            for ky in 0..k {
                for kx in 0..k {
                    weights[kernel.index(o, i, ky, kx)] = dw_packed[((ky * k + kx) * ic + i) * oc + o];
                }
            }
        }
    }
    Ok(ConvGrads {
        weights,
        bias,
        input: d_in,
    })
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Copies columns `[start, start + width)`.
    pub fn columns(&self, start: usize, width: usize) -> Self {
        let mut out = Self::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul: {}x{} · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for r in 0..a.rows {
        let acc = &mut out.data[r * b.cols..(r + 1) * b.cols];
        for (k, &av) in a.row(r).iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in acc.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Numerically stable row softmax of `scale · m`.
pub fn softmax_rows<T: Real>(m: &Matrix<T>, scale: T) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..m.rows {
        let row = out.row_mut(r);
        let max = row
            .iter()
            .fold(T::neg_infinity(), |acc, &v| acc.max(v * scale));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v * scale - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.map(sigmoid_scalar)
}

pub fn tanh<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.map(T::tanh)
}

fn zip_with<T: Real>(
    a: &FeatureMap<T>,
    b: &FeatureMap<T>,
    what: &str,
    f: impl Fn(T, T) -> T,
) -> Result<FeatureMap<T>> {
    a.ensure_same_shape(b, what)?;
    Ok(FeatureMap {
        rows: a.rows,
        cols: a.cols,
        channels: a.channels,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        coverage: a
            .coverage
            .iter()
            .zip(&b.coverage)
            .map(|(&x, &y)| x && y)
            .collect(),
    })
}

pub fn hadamard<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    zip_with(a, b, "hadamard", |x, y| x * y)
}

pub fn add<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    zip_with(a, b, "add", |x, y| x + y)
}

/// Stacks channels `[a, b]` per cell; spatial dims must agree.
pub fn concat_channels<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(Error::shape(format!(
            "concat_channels: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let channels = a.channels + b.channels;
    let mut data = Vec::with_capacity(a.cell_count() * channels);
    for cell in 0..a.cell_count() {
        data.extend_from_slice(&a.data[cell * a.channels..(cell + 1) * a.channels]);
        data.extend_from_slice(&b.data[cell * b.channels..(cell + 1) * b.channels]);
    }
    Ok(FeatureMap {
        rows: a.rows,
        cols: a.cols,
        channels,
        data,
        coverage: a
            .coverage
            .iter()
            .zip(&b.coverage)
            .map(|(&x, &y)| x && y)
            .collect(),
    })
}

/// Splits channels at `at`, the inverse of [`concat_channels`].
pub fn split_channels<T: Real>(x: &FeatureMap<T>, at: usize) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    if at > x.channels {
        return Err(Error::shape("split_channels: split point beyond channel count"));
    }
    let (ca, cb) = (at, x.channels - at);
    let mut a = FeatureMap::zeros(x.rows, x.cols, ca);
    let mut b = FeatureMap::zeros(x.rows, x.cols, cb);
    for cell in 0..x.cell_count() {
        let src = &x.data[cell * x.channels..(cell + 1) * x.channels];
        a.data[cell * ca..(cell + 1) * ca].copy_from_slice(&src[..ca]);
        b.data[cell * cb..(cell + 1) * cb].copy_from_slice(&src[ca..]);
    }
    a.coverage.copy_from_slice(&x.coverage);
    b.coverage.copy_from_slice(&x.coverage);
    Ok((a, b))
}
