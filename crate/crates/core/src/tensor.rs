//! Dense 4-D tensors in batch/channel/height/width layout.
//!
//! Storage is row-major with the batch index outermost, so element
//! `(n, c, h, w)` lives at `((n * C + c) * H + h) * W + w`. Every
//! `(n, c)` pair owns one contiguous `H * W` plane, which is what the
//! per-channel reductions walk.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one `(n, c)` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements reduced per channel, `m = n * h * w`.
    pub const fn per_channel(&self) -> usize {
        self.n * self.h * self.w
    }

    #[inline]
    pub const fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

impl From<(usize, usize, usize, usize)> for Shape {
    fn from((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Shape::new(n, c, h, w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::shape(
                format!("{} elements for shape {shape}", shape.numel()),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every index.
    pub fn from_fn(
        shape: impl Into<Shape>,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.c
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.offset(n, c, h, w)]
    }

    #[inline]
    pub fn get_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut T {
        let i = self.shape.offset(n, c, h, w);
        &mut self.data[i]
    }

    /// Same values at another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Iterates `(channel, plane)` over every contiguous `H * W` plane.
    pub fn planes(&self) -> impl Iterator<Item = (usize, &[T])> {
        let c = self.shape.c;
        self.data
            .chunks_exact(self.shape.plane().max(1))
            .enumerate()
            .map(move |(i, p)| (i % c, p))
    }

    pub fn planes_mut(&mut self) -> impl Iterator<Item = (usize, &mut [T])> {
        let c = self.shape.c;
        let plane = self.shape.plane().max(1);
        self.data
            .chunks_exact_mut(plane)
            .enumerate()
            .map(move |(i, p)| (i % c, p))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn ensure_same_shape(&self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(self.shape, other.shape));
        }
        Ok(())
    }

    fn ensure_channel_vec(&self, v: &[T]) -> Result<()> {
        if v.len() != self.shape.c {
            return Err(Error::shape(
                format!("per-channel vector of length {}", self.shape.c),
                format!("length {}", v.len()),
            ));
        }
        Ok(())
    }

    /// Per-channel mean over the `m = n * h * w` values of each channel,
    /// accumulated in double precision.
    pub fn channel_mean(&self) -> Result<Vec<T>> {
        Ok(self.channel_mean_f64()?.into_iter().map(T::of).collect())
    }

    pub(crate) fn channel_mean_f64(&self) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(Error::EmptyInput("channel_mean on a zero-sized tensor"));
        }
        let mut sums = vec![0.0f64; self.shape.c];
        for (c, plane) in self.planes() {
            sums[c] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = self.shape.per_channel() as f64;
        Ok(sums.into_iter().map(|s| s / m).collect())
    }

    /// Biased (divisor `m`) per-channel variance around a given mean, two-pass.
    pub fn channel_var(&self, mean: &[T]) -> Result<Vec<T>> {
        let mean: Vec<f64> = mean.iter().map(|v| v.as_f64()).collect();
        Ok(self
            .channel_var_f64(&mean)?
            .into_iter()
            .map(T::of)
            .collect())
    }

    pub(crate) fn channel_var_f64(&self, mean: &[f64]) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(Error::EmptyInput("channel_var on a zero-sized tensor"));
        }
        if mean.len() != self.shape.c {
            return Err(Error::shape(
                format!("mean of length {}", self.shape.c),
                format!("length {}", mean.len()),
            ));
        }
        let mut sums = vec![0.0f64; self.shape.c];
        for (c, plane) in self.planes() {
            let mu = mean[c];
            sums[c] += plane
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        let m = self.shape.per_channel() as f64;
        Ok(sums.into_iter().map(|s| s / m).collect())
    }

    /// Per-channel plain sum in double precision.
    pub fn channel_sum(&self) -> Vec<f64> {
        let mut sums = vec![0.0f64; self.shape.c];
        for (c, plane) in self.planes() {
            sums[c] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        sums
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_in_place(&mut self, f: impl Fn(T) -> T) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.ensure_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn zip_map_in_place(&mut self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<()> {
        self.ensure_same_shape(other)?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a = f(*a, b));
        Ok(())
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map(|v| v * s)
    }

    /// `self + alpha * x`.
    pub fn axpy(&self, alpha: T, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(x, |a, b| a + alpha * b)
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.zip_map_in_place(other, |a, b| a + b)
    }

    pub fn sub_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.zip_map_in_place(other, |a, b| a - b)
    }

    pub fn mul_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.zip_map_in_place(other, |a, b| a * b)
    }

    pub fn scale_in_place(&mut self, s: T) {
        self.map_in_place(|v| v * s);
    }

    /// `self += alpha * x`.
    pub fn axpy_in_place(&mut self, alpha: T, x: &Tensor<T>) -> Result<()> {
        self.zip_map_in_place(x, |a, b| a + alpha * b)
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        self.map(|v| v + s)
    }

    /// Adds `v[c]` to every element of channel `c`.
    pub fn add_channel(&self, v: &[T]) -> Result<Tensor<T>> {
        let mut out = self.clone();
        out.add_channel_in_place(v)?;
        Ok(out)
    }

    pub fn add_channel_in_place(&mut self, v: &[T]) -> Result<()> {
        self.ensure_channel_vec(v)?;
        for (c, plane) in self.planes_mut() {
            plane.iter_mut().for_each(|x| *x += v[c]);
        }
        Ok(())
    }

    /// Multiplies every element of channel `c` by `v[c]`.
    pub fn mul_channel(&self, v: &[T]) -> Result<Tensor<T>> {
        let mut out = self.clone();
        out.mul_channel_in_place(v)?;
        Ok(out)
    }

    pub fn mul_channel_in_place(&mut self, v: &[T]) -> Result<()> {
        self.ensure_channel_vec(v)?;
        for (c, plane) in self.planes_mut() {
            plane.iter_mut().for_each(|x| *x *= v[c]);
        }
        Ok(())
    }

    /// `x <- scale[c] * x + shift[c]` over each channel.
    pub fn channel_affine_in_place(&mut self, scale: &[T], shift: &[T]) -> Result<()> {
        self.ensure_channel_vec(scale)?;
        self.ensure_channel_vec(shift)?;
        for (c, plane) in self.planes_mut() {
            let (s, t) = (scale[c], shift[c]);
            plane.iter_mut().for_each(|x| *x = s * *x + t);
        }
        Ok(())
    }

    /// Splits along the batch axis into consecutive pieces of the given sizes.
    pub fn split_batch(&self, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
        if sizes.iter().sum::<usize>() != self.shape.n {
            return Err(Error::shape(
                format!("batch sizes summing to {}", self.shape.n),
                format!("{sizes:?}"),
            ));
        }
        let per_sample = self.shape.c * self.shape.plane();
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &n in sizes {
            let shape = Shape { n, ..self.shape };
            let data = self.data[start * per_sample..(start + n) * per_sample].to_vec();
            out.push(Tensor { shape, data });
            start += n;
        }
        Ok(out)
    }

    /// Copies samples `[start, start + len)` of the batch.
    pub fn batch_slice(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        if start + len > self.shape.n {
            return Err(Error::shape(
                format!("batch range within {}", self.shape.n),
                format!("{start}..{}", start + len),
            ));
        }
        let per_sample = self.shape.c * self.shape.plane();
        Ok(Tensor {
            shape: Shape {
                n: len,
                ..self.shape
            },
            data: self.data[start * per_sample..(start + len) * per_sample].to_vec(),
        })
    }
}
