//! Direct 2-D cross-correlation with zero padding.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `(out_channels, in_channels, kh, kw)`, row-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub dweights: Vec<T>,
    pub dbias: Vec<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(
        weights: Vec<T>,
        bias: Vec<T>,
        (out_channels, in_channels): (usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        if kernel.0 == 0 || kernel.1 == 0 {
            return Err(Error::InvalidParameter("kernel dims must be >= 1".into()));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidParameter("stride must be >= 1".into()));
        }
        let expected = out_channels * in_channels * kernel.0 * kernel.1;
        if weights.len() != expected {
            return Err(Error::shape(
                format!("{expected} weights"),
                format!("{} weights", weights.len()),
            ));
        }
        if bias.len() != out_channels {
            return Err(Error::shape(
                format!("{out_channels} biases"),
                format!("{} biases", bias.len()),
            ));
        }
        Ok(ConvParams {
            weights,
            bias,
            out_channels,
            in_channels,
            kernel,
            stride,
            padding,
        })
    }

    /// Zero weights and bias; stride 1 and "same" padding for odd kernels.
    pub fn zeros(out_channels: usize, in_channels: usize, k: usize) -> Self {
        ConvParams {
            weights: vec![T::zero(); out_channels * in_channels * k * k],
            bias: vec![T::zero(); out_channels],
            out_channels,
            in_channels,
            kernel: (k, k),
            stride: (1, 1),
            padding: (k / 2, k / 2),
        }
    }

    #[inline]
    pub fn widx(&self, o: usize, i: usize, r: usize, s: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel.0 + r) * self.kernel.1 + s
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels {
            return Err(Error::shape(
                format!("{} input channels", self.in_channels),
                format!("{} channels", input.c),
            ));
        }
        let span = |len: usize, pad: usize, k: usize, stride: usize| -> Option<usize> {
            let padded = len + 2 * pad;
            (padded >= k).then(|| (padded - k) / stride + 1)
        };
        match (
            span(input.h, self.padding.0, self.kernel.0, self.stride.0),
            span(input.w, self.padding.1, self.kernel.1, self.stride.1),
        ) {
            (Some(h), Some(w)) if h >= 1 && w >= 1 => {
                Ok(Shape::new(input.n, self.out_channels, h, w))
            }
            _ => Err(Error::InvalidParameter(format!(
                "convolution output would be empty for input {input}"
            ))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            weights: self.weights.iter().map(|v| U::of(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::of(v.as_f64())).collect(),
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    /// Visits every valid `(oy, ox, iy, ix)` tap pairing for kernel offset `(r, s)`.
    #[inline]
    fn for_each_tap(
        &self,
        r: usize,
        s: usize,
        in_shape: Shape,
        out_shape: Shape,
        mut f: impl FnMut(usize, usize),
    ) {
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        for oy in 0..out_shape.h {
            let iy = (oy * sh + r) as isize - ph as isize;
            if iy < 0 || iy >= in_shape.h as isize {
                continue;
            }
            let iy = iy as usize;
            for ox in 0..out_shape.w {
                let ix = (ox * sw + s) as isize - pw as isize;
                if ix < 0 || ix >= in_shape.w as isize {
                    continue;
                }
                f(oy * out_shape.w + ox, iy * in_shape.w + ix as usize);
            }
        }
    }

    pub fn forward(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let in_shape = z.shape();
        let out_shape = self.output_shape(in_shape)?;
        let mut out = Tensor::zeros(out_shape);
        let in_plane = in_shape.plane();
        let out_plane = out_shape.plane();
        let zd = z.data();
        let od = out.data_mut();
        for n in 0..in_shape.n {
            for o in 0..self.out_channels {
                let ob = (n * self.out_channels + o) * out_plane;
                let dst = &mut od[ob..ob + out_plane];
                dst.iter_mut().for_each(|v| *v = self.bias[o]);
                for i in 0..self.in_channels {
                    let ib = (n * self.in_channels + i) * in_plane;
                    let src = &zd[ib..ib + in_plane];
                    for r in 0..self.kernel.0 {
                        for s in 0..self.kernel.1 {
                            let w = self.weights[self.widx(o, i, r, s)];
                            self.for_each_tap(r, s, in_shape, out_shape, |oi, ii| {
                                dst[oi] += w * src[ii]
                            });
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Exact gradients of [`ConvParams::forward`] given its input `z`.
    pub fn backward(&self, z: &Tensor<T>, dout: &Tensor<T>) -> Result<(Tensor<T>, ConvGrads<T>)> {
        let in_shape = z.shape();
        let out_shape = self.output_shape(in_shape)?;
        if dout.shape() != out_shape {
            return Err(Error::shape(out_shape, dout.shape()));
        }
        let mut dz = Tensor::zeros(in_shape);
        let mut dweights = vec![T::zero(); self.weights.len()];
        let mut dbias = vec![0.0f64; self.out_channels];
        let in_plane = in_shape.plane();
        let out_plane = out_shape.plane();
        let zd = z.data();
        let gd = dout.data();
        let dzd = dz.data_mut();
        for n in 0..in_shape.n {
            for o in 0..self.out_channels {
                let ob = (n * self.out_channels + o) * out_plane;
                let g = &gd[ob..ob + out_plane];
                dbias[o] += g.iter().map(|v| v.as_f64()).sum::<f64>();
                for i in 0..self.in_channels {
                    let ib = (n * self.in_channels + i) * in_plane;
                    let src = &zd[ib..ib + in_plane];
                    let dsrc = &mut dzd[ib..ib + in_plane];
                    for r in 0..self.kernel.0 {
                        for s in 0..self.kernel.1 {
                            let wi = self.widx(o, i, r, s);
                            let w = self.weights[wi];
                            let mut acc = T::zero();
                            self.for_each_tap(r, s, in_shape, out_shape, |oi, ii| {
                                acc += g[oi] * src[ii];
                                dsrc[ii] += w * g[oi];
                            });
                            dweights[wi] += acc;
                        }
                    }
                }
            }
        }
        Ok((
            dz,
            ConvGrads {
                dweights,
                dbias: dbias.into_iter().map(T::of).collect(),
            },
        ))
    }
}

impl<T: Scalar> ConvGrads<T> {
    pub fn zeros_like(p: &ConvParams<T>) -> Self {
        ConvGrads {
            dweights: vec![T::zero(); p.weights.len()],
            dbias: vec![T::zero(); p.bias.len()],
        }
    }
}
