//! Batch normalization: forward whitening, the affine map `pi(xhat) = gamma * xhat + beta`
//! and its inverse, three algebraically equivalent backward formulations,
//! running statistics, shard merging and inference-time folding.
//!
//! The three backward routes differ only in which buffer they read:
//!
//! * [`backward_standard`] reads the BN input `x` plus `mu` and `var`, and
//!   recomputes `xhat` before doing anything else.
//! * [`backward_star`] reads `xhat` and `var` only; it never touches `mu`.
//! * [`backward_dagger`] reads the BN output `y` and `var`, folding the
//!   inversion of `pi` into per-channel constants.

use serde::{Deserialize, Serialize};

use crate::conv::ConvParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
/// Smallest |gamma| accepted wherever `pi` must be inverted.
pub const GAMMA_GUARD: f64 = 1e-8;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Full-tensor sweeps made by each backward route. The strategy executor
/// charges these to its pass counter.
pub const STANDARD_BACKWARD_PASSES: usize = 3;
pub const STAR_BACKWARD_PASSES: usize = 2;
pub const DAGGER_BACKWARD_PASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> ChannelParams<T> {
    pub fn new(gamma: Vec<T>, beta: Vec<T>, eps: T) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::shape(
                format!("beta of length {}", gamma.len()),
                format!("length {}", beta.len()),
            ));
        }
        if eps.is_nan() || eps <= T::zero() {
            return Err(Error::InvalidParameter(format!(
                "eps must be > 0, got {eps}"
            )));
        }
        Ok(ChannelParams { gamma, beta, eps })
    }

    /// `gamma = 1`, `beta = 0`, default `eps`.
    pub fn identity(channels: usize) -> Self {
        ChannelParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            eps: T::of(DEFAULT_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn ensure_invertible(&self) -> Result<()> {
        for (channel, g) in self.gamma.iter().enumerate() {
            let value = g.as_f64();
            if value.is_nan() || value.abs() < GAMMA_GUARD {
                return Err(Error::GammaSingular {
                    channel,
                    value,
                    guard: GAMMA_GUARD,
                });
            }
        }
        Ok(())
    }

    fn ensure_channels(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::shape(
                format!("{} channels", self.channels()),
                format!("tensor {}", x.shape()),
            ));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ChannelParams<U> {
        ChannelParams {
            gamma: self.gamma.iter().map(|v| U::of(v.as_f64())).collect(),
            beta: self.beta.iter().map(|v| U::of(v.as_f64())).collect(),
            eps: U::of(self.eps.as_f64()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinibatchStats<T> {
    pub mu: Vec<T>,
    /// Biased variance (divisor `m`).
    pub var: Vec<T>,
    /// Elements per channel.
    pub m: usize,
}

impl<T: Scalar> MinibatchStats<T> {
    pub fn of(x: &Tensor<T>) -> Result<Self> {
        let mu64 = x.channel_mean_f64()?;
        let mu: Vec<T> = mu64.iter().map(|&v| T::of(v)).collect();
        let var = x.channel_var_f64(&mu.iter().map(|v| v.as_f64()).collect::<Vec<_>>())?;
        Ok(MinibatchStats {
            mu,
            var: var.into_iter().map(T::of).collect(),
            m: x.shape().per_channel(),
        })
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }
}

/// `1 / sqrt(var + eps)` per channel, in double precision.
fn inv_std<T: Scalar>(var: &[T], eps: T) -> Vec<f64> {
    let eps = eps.as_f64();
    var.iter()
        .map(|v| 1.0 / (v.as_f64() + eps).sqrt())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats<T> {
    pub mu: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
}

impl<T: Scalar> RunningStats<T> {
    /// Zero mean, unit variance.
    pub fn new(channels: usize, momentum: T) -> Result<Self> {
        if !(momentum > T::zero() && momentum <= T::one()) {
            return Err(Error::InvalidParameter(format!(
                "running-stats momentum must lie in (0, 1], got {momentum}"
            )));
        }
        Ok(RunningStats {
            mu: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum,
        })
    }

    /// `run <- (1 - momentum) * run + momentum * batch`, for mean and variance.
    pub fn update(&self, batch: &MinibatchStats<T>) -> Result<Self> {
        if batch.channels() != self.mu.len() {
            return Err(Error::shape(
                format!("{} channels", self.mu.len()),
                format!("{} channels", batch.channels()),
            ));
        }
        let k = self.momentum;
        let blend = |run: &[T], b: &[T]| -> Vec<T> {
            run.iter()
                .zip(b)
                .map(|(&r, &v)| (T::one() - k) * r + k * v)
                .collect()
        };
        Ok(RunningStats {
            mu: blend(&self.mu, &batch.mu),
            var: blend(&self.var, &batch.var),
            momentum: k,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGradients<T> {
    pub dx: Tensor<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BnForward<T> {
    pub y: Tensor<T>,
    pub xhat: Tensor<T>,
    pub stats: MinibatchStats<T>,
}

/// Training-mode forward. Returns `y`, `xhat` and the batch statistics.
pub fn forward<T: Scalar>(x: &Tensor<T>, p: &ChannelParams<T>) -> Result<BnForward<T>> {
    p.ensure_channels(x)?;
    let stats = MinibatchStats::of(x)?;
    let mut xhat = x.clone();
    whiten_in_place(&mut xhat, &stats, p.eps)?;
    let y = affine(&xhat, p)?;
    Ok(BnForward { y, xhat, stats })
}

/// Overwrites `x` with `y = pi(xhat)` and returns the batch statistics.
/// Bitwise identical to the `y` of [`forward`].
pub fn forward_in_place<T: Scalar>(
    x: &mut Tensor<T>,
    p: &ChannelParams<T>,
) -> Result<MinibatchStats<T>> {
    p.ensure_channels(x)?;
    let stats = MinibatchStats::of(x)?;
    whiten_in_place(x, &stats, p.eps)?;
    affine_in_place(x, p)?;
    Ok(stats)
}

/// `x <- (x - mu) / sqrt(var + eps)`.
pub fn whiten_in_place<T: Scalar>(
    x: &mut Tensor<T>,
    stats: &MinibatchStats<T>,
    eps: T,
) -> Result<()> {
    if stats.channels() != x.channels() {
        return Err(Error::shape(
            format!("{} channels", stats.channels()),
            format!("tensor {}", x.shape()),
        ));
    }
    let inv = inv_std(&stats.var, eps);
    for (c, plane) in x.planes_mut() {
        let mu = stats.mu[c].as_f64();
        let s = inv[c];
        plane
            .iter_mut()
            .for_each(|v| *v = T::of((v.as_f64() - mu) * s));
    }
    Ok(())
}

/// `pi(xhat) = gamma * xhat + beta`.
pub fn affine<T: Scalar>(xhat: &Tensor<T>, p: &ChannelParams<T>) -> Result<Tensor<T>> {
    let mut y = xhat.clone();
    affine_in_place(&mut y, p)?;
    Ok(y)
}

pub fn affine_in_place<T: Scalar>(xhat: &mut Tensor<T>, p: &ChannelParams<T>) -> Result<()> {
    xhat.channel_affine_in_place(&p.gamma, &p.beta)
}

/// `xhat = (y - beta) / gamma`. Fails if any |gamma| is below [`GAMMA_GUARD`].
pub fn pi_inverse<T: Scalar>(y: &Tensor<T>, p: &ChannelParams<T>) -> Result<Tensor<T>> {
    let mut xhat = y.clone();
    pi_inverse_in_place(&mut xhat, p)?;
    Ok(xhat)
}

pub fn pi_inverse_in_place<T: Scalar>(y: &mut Tensor<T>, p: &ChannelParams<T>) -> Result<()> {
    p.ensure_channels(y)?;
    p.ensure_invertible()?;
    for (c, plane) in y.planes_mut() {
        let (g, b) = (p.gamma[c], p.beta[c]);
        plane.iter_mut().for_each(|v| *v = (*v - b) / g);
    }
    Ok(())
}

/// Scale and shift that map `x` straight to `y` given known statistics:
/// `scale = gamma / sqrt(var + eps)`, `shift = beta - mu * scale`.
pub fn fused_scale_shift<T: Scalar>(
    stats: &MinibatchStats<T>,
    p: &ChannelParams<T>,
) -> (Vec<T>, Vec<T>) {
    let inv = inv_std(&stats.var, p.eps);
    (0..p.channels())
        .map(|c| {
            let s = p.gamma[c].as_f64() * inv[c];
            (
                T::of(s),
                T::of(p.beta[c].as_f64() - stats.mu[c].as_f64() * s),
            )
        })
        .unzip()
}

fn check_backward_shapes<T: Scalar>(
    buf: &Tensor<T>,
    dy: &Tensor<T>,
    var: &[T],
    p: &ChannelParams<T>,
) -> Result<()> {
    if buf.shape() != dy.shape() {
        return Err(Error::shape(buf.shape(), dy.shape()));
    }
    p.ensure_channels(buf)?;
    if var.len() != p.channels() {
        return Err(Error::shape(
            format!("variance of length {}", p.channels()),
            format!("length {}", var.len()),
        ));
    }
    if buf.is_empty() {
        return Err(Error::EmptyInput(
            "batch-norm backward on a zero-sized tensor",
        ));
    }
    Ok(())
}

/// Per-channel `(sum dy, sum dy * v)` in one sweep.
fn grad_sums<T: Scalar>(v: &Tensor<T>, dy: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let c = v.channels();
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_v = vec![0.0f64; c];
    for ((ch, vp), (_, gp)) in v.planes().zip(dy.planes()) {
        for (&a, &g) in vp.iter().zip(gp) {
            let g = g.as_f64();
            sum_dy[ch] += g;
            sum_dy_v[ch] += g * a.as_f64();
        }
    }
    (sum_dy, sum_dy_v)
}

/// Backward through BN as a function of the whitened activation `xhat`.
///
/// `dgamma = sum dy * xhat`, `dbeta = sum dy`, and
/// `dx = (dy - dgamma * xhat / m - dbeta / m) * gamma / sqrt(var + eps)`.
pub fn backward_star<T: Scalar>(
    xhat: &Tensor<T>,
    dy: &Tensor<T>,
    var: &[T],
    p: &ChannelParams<T>,
) -> Result<BnGradients<T>> {
    check_backward_shapes(xhat, dy, var, p)?;
    let m = xhat.shape().per_channel() as f64;
    let (dbeta, dgamma) = grad_sums(xhat, dy);
    let inv = inv_std(var, p.eps);
    let mut dx = dy.clone();
    for ((c, gp), (_, xp)) in dx.planes_mut().zip(xhat.planes()) {
        let a = p.gamma[c].as_f64() * inv[c];
        let (kg, kb) = (dgamma[c] / m, dbeta[c] / m);
        for (g, &xh) in gp.iter_mut().zip(xp) {
            *g = T::of((g.as_f64() - kg * xh.as_f64() - kb) * a);
        }
    }
    Ok(BnGradients {
        dx,
        dgamma: dgamma.into_iter().map(T::of).collect(),
        dbeta: dbeta.into_iter().map(T::of).collect(),
    })
}

/// Backward through BN as a function of its output `y`, without inverting `pi`.
///
/// `dgamma = (sum dy * y - beta * dbeta) / gamma`, and
/// `dx = (dy - dgamma * y / (gamma m) - (dbeta - beta dgamma / gamma) / m) * gamma / sqrt(var + eps)`.
pub fn backward_dagger<T: Scalar>(
    y: &Tensor<T>,
    dy: &Tensor<T>,
    var: &[T],
    p: &ChannelParams<T>,
) -> Result<BnGradients<T>> {
    check_backward_shapes(y, dy, var, p)?;
    p.ensure_invertible()?;
    let m = y.shape().per_channel() as f64;
    let (dbeta, sum_dy_y) = grad_sums(y, dy);
    let inv = inv_std(var, p.eps);
    let dgamma: Vec<f64> = (0..p.channels())
        .map(|c| (sum_dy_y[c] - p.beta[c].as_f64() * dbeta[c]) / p.gamma[c].as_f64())
        .collect();
    let mut dx = dy.clone();
    for ((c, gp), (_, yp)) in dx.planes_mut().zip(y.planes()) {
        let (g, b) = (p.gamma[c].as_f64(), p.beta[c].as_f64());
        let a = g * inv[c];
        let ky = dgamma[c] / (g * m);
        let k0 = (dbeta[c] - b / g * dgamma[c]) / m;
        for (d, &yv) in gp.iter_mut().zip(yp) {
            *d = T::of((d.as_f64() - ky * yv.as_f64() - k0) * a);
        }
    }
    Ok(BnGradients {
        dx,
        dgamma: dgamma.into_iter().map(T::of).collect(),
        dbeta: dbeta.into_iter().map(T::of).collect(),
    })
}

/// Backward from the BN input `x`: recomputes `xhat` from `x`, `mu` and
/// `var`, then applies the `xhat` formulas.
pub fn backward_standard<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    stats: &MinibatchStats<T>,
    p: &ChannelParams<T>,
) -> Result<BnGradients<T>> {
    check_backward_shapes(x, dy, &stats.var, p)?;
    let mut xhat = x.clone();
    whiten_in_place(&mut xhat, stats, p.eps)?;
    backward_star(&xhat, dy, &stats.var, p)
}

/// Inference-mode forward using running statistics.
pub fn inference_forward<T: Scalar>(
    x: &Tensor<T>,
    running: &RunningStats<T>,
    p: &ChannelParams<T>,
) -> Result<Tensor<T>> {
    p.ensure_channels(x)?;
    if running.mu.len() != p.channels() {
        return Err(Error::shape(
            format!("{} running channels", p.channels()),
            format!("{}", running.mu.len()),
        ));
    }
    let inv = inv_std(&running.var, p.eps);
    let mut y = x.clone();
    for (c, plane) in y.planes_mut() {
        let (mu, s) = (running.mu[c].as_f64(), inv[c]);
        let (g, b) = (p.gamma[c], p.beta[c]);
        plane
            .iter_mut()
            .for_each(|v| *v = g * T::of((v.as_f64() - mu) * s) + b);
    }
    Ok(y)
}

/// Merges per-shard statistics into those of the concatenated batch.
///
/// Uses the centered form `var = sum m_k (var_k + (mu_k - mu)^2) / m`, which
/// equals the raw-moment form `sum m_k (var_k + mu_k^2) / m - mu^2` exactly
/// in real arithmetic.
pub fn sync_stats<T: Scalar>(shards: &[MinibatchStats<T>]) -> Result<MinibatchStats<T>> {
    let first = shards
        .first()
        .ok_or(Error::EmptyInput("sync_stats with no shards"))?;
    let c = first.channels();
    if let Some(bad) = shards
        .iter()
        .find(|s| s.channels() != c || s.var.len() != c)
    {
        return Err(Error::shape(
            format!("{c} channels"),
            format!("{} channels", bad.channels()),
        ));
    }
    if shards.len() == 1 {
        return Ok(first.clone());
    }
    let m: usize = shards.iter().map(|s| s.m).sum();
    let mf = m as f64;
    let mut mu = vec![0.0f64; c];
    for s in shards {
        for k in 0..c {
            mu[k] += s.m as f64 * s.mu[k].as_f64();
        }
    }
    mu.iter_mut().for_each(|v| *v /= mf);
    let mut var = vec![0.0f64; c];
    for s in shards {
        for k in 0..c {
            let d = s.mu[k].as_f64() - mu[k];
            var[k] += s.m as f64 * (s.var[k].as_f64() + d * d);
        }
    }
    Ok(MinibatchStats {
        mu: mu.into_iter().map(T::of).collect(),
        var: var.into_iter().map(|v| T::of(v / mf)).collect(),
        m,
    })
}

/// Absorbs an inference-mode BN into the convolution that precedes it.
pub fn fold_into_conv<T: Scalar>(
    conv: &ConvParams<T>,
    running: &RunningStats<T>,
    p: &ChannelParams<T>,
) -> Result<ConvParams<T>> {
    let k = conv.out_channels;
    if p.channels() != k || running.mu.len() != k || running.var.len() != k {
        return Err(Error::shape(
            format!("{k} output channels"),
            format!(
                "bn with {} channels and running stats with {}",
                p.channels(),
                running.mu.len()
            ),
        ));
    }
    let inv = inv_std(&running.var, p.eps);
    let per_out = conv.weights.len() / k.max(1);
    let mut folded = conv.clone();
    for o in 0..k {
        let s = p.gamma[o].as_f64() * inv[o];
        for w in &mut folded.weights[o * per_out..(o + 1) * per_out] {
            *w = T::of(w.as_f64() * s);
        }
        folded.bias[o] =
            T::of(s * (conv.bias[o].as_f64() - running.mu[o].as_f64()) + p.beta[o].as_f64());
    }
    Ok(folded)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_channel(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec((v.len(), 1, 1, 1), v.to_vec()).unwrap()
    }

    fn params(gamma: f64, beta: f64, eps: f64) -> ChannelParams<f64> {
        ChannelParams::new(vec![gamma], vec![beta], eps).unwrap()
    }

    #[test]
    fn eps_must_be_positive() {
        assert!(ChannelParams::new(vec![1.0], vec![0.0], 0.0).is_err());
        assert!(ChannelParams::new(vec![1.0], vec![0.0, 1.0], 1e-5).is_err());
    }

    #[test]
    fn forward_matches_hand_evaluation() {
        // eps = 0 is outside the type invariant, so build the params directly.
        let p = ChannelParams {
            gamma: vec![1.0],
            beta: vec![0.0],
            eps: 0.0,
        };
        let out = forward(&one_channel(&[1.0, 2.0, 3.0, 4.0]), &p).unwrap();
        // oracle: mu = 2.5, var = 1.25
        let expected: Vec<f64> = [1.0f64, 2.0, 3.0, 4.0]
            .iter()
            .map(|x| (x - 2.5) / 1.25f64.sqrt())
            .collect();
        for (got, want) in out.y.data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in out.y.data().iter().zip([-1.3416, -0.4472, 0.4472, 1.3416]) {
            assert!((got - want).abs() < 1e-4);
        }
        assert_eq!(out.xhat, out.y);
        assert_eq!(out.stats.mu, vec![2.5]);
        assert_eq!(out.stats.var, vec![1.25]);
        assert_eq!(out.stats.m, 4);

        let p2 = ChannelParams {
            gamma: vec![2.0],
            beta: vec![1.0],
            eps: 0.0,
        };
        let out2 = forward(&one_channel(&[1.0, 2.0, 3.0, 4.0]), &p2).unwrap();
        for (got, want) in out2.y.data().iter().zip([-1.6833, 0.1056, 1.8944, 3.6833]) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn forward_constant_input() {
        let p = params(3.0, 0.75, 1e-5);
        let out = forward(&one_channel(&[4.0; 6]), &p).unwrap();
        assert!(out.xhat.data().iter().all(|&v| v == 0.0));
        assert!(out.y.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn in_place_forward_is_bitwise_identical() {
        let x = Tensor::from_fn((3, 2, 2, 3), |n, c, h, w| {
            ((n * 13 + c * 7 + h * 5 + w * 3) % 17) as f64 / 3.0
        });
        let p = ChannelParams::new(vec![1.7, -0.4], vec![0.2, 1.1], 1e-5).unwrap();
        let reference = forward(&x, &p).unwrap();
        let mut y = x.clone();
        let stats = forward_in_place(&mut y, &p).unwrap();
        assert_eq!(y, reference.y);
        assert_eq!(stats, reference.stats);
    }

    #[test]
    fn pi_inverse_basics() {
        let p = params(2.0, 1.0, 1e-5);
        assert_eq!(pi_inverse(&one_channel(&[3.0]), &p).unwrap().data(), &[1.0]);
        let y = one_channel(&[-2.0, 0.5, 7.0]);
        assert_eq!(pi_inverse(&y, &params(1.0, 0.0, 1e-5)).unwrap(), y);
    }

    #[test]
    fn pi_inverse_names_singular_channel() {
        let p = ChannelParams::new(vec![1.0, 1e-9], vec![0.0, 0.0], 1e-5).unwrap();
        let y = Tensor::<f64>::zeros((1, 2, 1, 1));
        match pi_inverse(&y, &p) {
            Err(Error::GammaSingular { channel, .. }) => assert_eq!(channel, 1),
            other => panic!("expected gamma-singular error, got {other:?}"),
        }
        let dy = y.clone();
        assert!(matches!(
            backward_dagger(&y, &dy, &[1.0, 1.0], &p),
            Err(Error::GammaSingular { .. })
        ));
    }

    #[test]
    fn star_all_ones_upstream_cancels() {
        let x = one_channel(&[0.3, -1.2, 2.5, 0.9, -0.4]);
        let p = params(1.5, 0.2, 1e-5);
        let f = forward(&x, &p).unwrap();
        let ones = Tensor::full(x.shape(), 1.0);
        let g = backward_star(&f.xhat, &ones, &f.stats.var, &p).unwrap();
        assert_eq!(g.dbeta, vec![5.0]);
        assert!(g.dgamma[0].abs() < 1e-14);
        assert!(g.dx.max_abs() < 1e-14);

        let gd = backward_dagger(&f.y, &ones, &f.stats.var, &p).unwrap();
        assert!(gd.dx.max_abs() < 1e-13);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = one_channel(&[0.3, -1.2, 2.5, 0.9]);
        let p = params(-0.7, 0.2, 1e-5);
        let f = forward(&x, &p).unwrap();
        let zero = Tensor::zeros(x.shape());
        for g in [
            backward_star(&f.xhat, &zero, &f.stats.var, &p).unwrap(),
            backward_dagger(&f.y, &zero, &f.stats.var, &p).unwrap(),
            backward_standard(&x, &zero, &f.stats, &p).unwrap(),
        ] {
            assert!(g
                .dx
                .data()
                .iter()
                .chain(&g.dgamma)
                .chain(&g.dbeta)
                .all(|&v| v == 0.0));
        }
    }

    #[test]
    fn dagger_equals_star_for_identity_affine() {
        let x = Tensor::from_fn((3, 2, 2, 2), |n, c, h, w| {
            ((n * 5 + c * 3 + h * 7 + w) % 9) as f64 - 4.0
        });
        let dy = Tensor::from_fn(x.shape(), |n, c, h, w| {
            ((n + 2 * c + 3 * h + 5 * w) % 7) as f64 / 7.0 - 0.3
        });
        let p = ChannelParams::<f64>::identity(2);
        let f = forward(&x, &p).unwrap();
        let a = backward_star(&f.xhat, &dy, &f.stats.var, &p).unwrap();
        let b = backward_dagger(&f.y, &dy, &f.stats.var, &p).unwrap();
        let scale = a.dx.max_abs().max(1.0);
        for (u, v) in a.dx.data().iter().zip(b.dx.data()) {
            assert!((u - v).abs() <= 4.0 * f64::EPSILON * scale);
        }
        for (u, v) in a.dgamma.iter().zip(&b.dgamma) {
            assert!((u - v).abs() <= 4.0 * f64::EPSILON * u.abs().max(1.0));
        }
        assert_eq!(a.dbeta, b.dbeta);
    }

    #[test]
    fn standard_equals_star_on_true_xhat() {
        let x = Tensor::from_fn((2, 3, 2, 2), |n, c, h, w| {
            ((n * 11 + c * 3 + h * 7 + w * 2) % 13) as f64 * 0.3
        });
        let dy = Tensor::from_fn(x.shape(), |n, c, h, w| {
            ((n + c + h * 3 + w * 5) % 4) as f64 - 1.5
        });
        let p = ChannelParams::new(vec![0.5, -1.5, 2.0], vec![0.1, 0.0, -3.0], 1e-5).unwrap();
        let f = forward(&x, &p).unwrap();
        let a = backward_standard(&x, &dy, &f.stats, &p).unwrap();
        let b = backward_star(&f.xhat, &dy, &f.stats.var, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backward_shape_errors() {
        let p = params(1.0, 0.0, 1e-5);
        let x = one_channel(&[1.0, 2.0]);
        assert!(backward_star(&x, &one_channel(&[1.0]), &[1.0], &p).is_err());
        assert!(backward_star(&x, &x, &[1.0, 2.0], &p).is_err());
    }

    #[test]
    fn running_update() {
        let r = RunningStats::<f64>::new(1, 0.1).unwrap();
        let batch = MinibatchStats {
            mu: vec![10.0],
            var: vec![3.0],
            m: 4,
        };
        let next = r.update(&batch).unwrap();
        assert!((next.mu[0] - 1.0).abs() < 1e-15);
        assert!((next.var[0] - (0.9 + 0.3)).abs() < 1e-15);

        let full = RunningStats::new(1, 1.0).unwrap().update(&batch).unwrap();
        assert_eq!(
            (full.mu.clone(), full.var.clone()),
            (batch.mu.clone(), batch.var.clone())
        );

        assert!(RunningStats::<f64>::new(1, 0.0).is_err());
        assert!(RunningStats::<f64>::new(1, 1.5).is_err());
        assert!(r
            .update(&MinibatchStats {
                mu: vec![0.0; 2],
                var: vec![0.0; 2],
                m: 1
            })
            .is_err());
    }

    #[test]
    fn sync_stats_examples() {
        let a = MinibatchStats::of(&one_channel(&[1.0, 2.0])).unwrap();
        let b = MinibatchStats::of(&one_channel(&[3.0, 4.0])).unwrap();
        assert_eq!(sync_stats(std::slice::from_ref(&a)).unwrap(), a);

        let twice = sync_stats(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(twice.mu, a.mu);
        assert_eq!(twice.var, a.var);
        assert_eq!(twice.m, 4);

        let merged = sync_stats(&[a, b]).unwrap();
        let whole = MinibatchStats::of(&one_channel(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(merged, whole);
        assert_eq!(merged.mu, vec![2.5]);
        assert_eq!(merged.var, vec![1.25]);

        assert!(matches!(sync_stats::<f64>(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn fold_identity_and_shift() {
        let eps = 1e-5;
        let conv =
            ConvParams::new(vec![0.5, -1.0], vec![0.25], (1, 2), (1, 1), (1, 1), (0, 0)).unwrap();
        let running = RunningStats {
            mu: vec![0.0],
            var: vec![1.0 - eps],
            momentum: 0.1,
        };
        let folded = fold_into_conv(&conv, &running, &params(1.0, 0.0, eps)).unwrap();
        assert_eq!(folded, conv);

        let shifted = fold_into_conv(&conv, &running, &params(1.0, 5.0, eps)).unwrap();
        assert_eq!(shifted.weights, conv.weights);
        assert_eq!(shifted.bias, vec![5.25]);

        let wrong = ChannelParams::<f64>::identity(2);
        assert!(fold_into_conv(&conv, &running, &wrong).is_err());
    }
}
