//! Random tensors and parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::batchnorm::{ChannelParams, DEFAULT_EPS};
use crate::conv::ConvParams;
use crate::scalar::Scalar;
use crate::strategies::{BlockParams, BlockPlan, LayerParams, LayerSpec};
use crate::tensor::{Shape, Tensor};

pub fn uniform_tensor<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: impl Into<Shape>,
    lo: f64,
    hi: f64,
) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| T::of(rng.random_range(lo..hi)))
}

pub fn normal_tensor<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: impl Into<Shape>,
    mean: f64,
    std: f64,
) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(mean + std * z)
    })
}

/// Values with magnitude uniform in `[lo, hi)` and a random sign.
pub fn signed_uniform<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    len: usize,
    lo: f64,
    hi: f64,
) -> Vec<T> {
    (0..len)
        .map(|_| {
            let mag = rng.random_range(lo..hi);
            T::of(if rng.random_bool(0.5) { mag } else { -mag })
        })
        .collect()
}

/// gamma with |gamma| in [0.1, 2] and either sign, beta uniform in [-1, 1].
pub fn random_channel_params<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    channels: usize,
) -> ChannelParams<T> {
    ChannelParams {
        gamma: signed_uniform(rng, channels, 0.1, 2.0),
        beta: (0..channels)
            .map(|_| T::of(rng.random_range(-1.0..1.0)))
            .collect(),
        eps: T::of(DEFAULT_EPS),
    }
}

/// He-normal weights (`std = sqrt(2 / fan_in)`) scaled by `gain`, bias uniform in `[-bias, bias]`.
pub fn he_conv<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    template: &ConvParams<T>,
    gain: f64,
    bias: f64,
) -> ConvParams<T> {
    let fan_in = (template.in_channels * template.kernel.0 * template.kernel.1).max(1) as f64;
    let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("finite std");
    let mut p = template.clone();
    p.weights
        .iter_mut()
        .for_each(|w| *w = T::of(normal.sample(rng)));
    p.bias.iter_mut().for_each(|b| {
        *b = T::of(if bias > 0.0 {
            rng.random_range(-bias..bias)
        } else {
            0.0
        })
    });
    p
}

pub fn random_layer_params<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    spec: &LayerSpec,
) -> LayerParams<T> {
    let zeros = LayerParams::<T>::zeros_for(spec);
    LayerParams {
        bn: random_channel_params(rng, spec.channels),
        conv: zeros.conv.as_ref().map(|c| he_conv(rng, c, 1.0, 0.1)),
    }
}

pub fn random_block_params<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    plan: &BlockPlan,
) -> BlockParams<T> {
    BlockParams {
        layers: plan
            .layers
            .iter()
            .map(|l| random_layer_params(rng, l))
            .collect(),
    }
}
