//! Forward and backward through one BN + Act (+ Conv) unit under each
//! memory strategy.
//!
//! What each strategy keeps for the backward pass:
//!
//! | strategy                | large buffers | small buffers |
//! |-------------------------|---------------|---------------|
//! | Standard                | `x`, `z`      | `mu`, `var`   |
//! | Checkpointing           | `x`           | `mu`, `var`   |
//! | CheckpointingProposed   | `xhat`        | `var`         |
//! | InPlaceAbnI / II        | `z`           | `var`         |
//!
//! Every strategy also tallies the two per-channel gradient accumulators.

use serde::Serialize;

use super::ledger::{BufferClass, BufferLedger};
use super::plan::{LayerSpec, Strategy};
use crate::batchnorm::{
    self, BnGradients, ChannelParams, MinibatchStats, DAGGER_BACKWARD_PASSES,
    STANDARD_BACKWARD_PASSES, STAR_BACKWARD_PASSES,
};
use crate::conv::{ConvGrads, ConvParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub bn: ChannelParams<T>,
    pub conv: Option<ConvParams<T>>,
}

impl<T: Scalar> LayerParams<T> {
    /// Identity BN and an all-zero convolution shaped after `spec`.
    pub fn zeros_for(spec: &LayerSpec) -> Self {
        LayerParams {
            bn: ChannelParams::identity(spec.channels),
            conv: spec.conv.map(|c| {
                let mut p = ConvParams::zeros(c.out_channels, spec.channels, c.kernel);
                p.stride = (c.stride, c.stride);
                p.padding = (c.padding, c.padding);
                p
            }),
        }
    }

    pub fn check_against(&self, spec: &LayerSpec) -> Result<()> {
        if self.bn.channels() != spec.channels {
            return Err(Error::shape(
                format!("{} bn channels", spec.channels),
                format!("{}", self.bn.channels()),
            ));
        }
        match (&self.conv, &spec.conv) {
            (None, None) => Ok(()),
            (Some(p), Some(c))
                if p.in_channels == spec.channels
                    && p.out_channels == c.out_channels
                    && p.kernel == (c.kernel, c.kernel)
                    && p.stride == (c.stride, c.stride)
                    && p.padding == (c.padding, c.padding) =>
            {
                Ok(())
            }
            _ => Err(Error::InvalidPlan(
                "layer parameters do not match the layer spec".into(),
            )),
        }
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        LayerParams {
            bn: self.bn.cast(),
            conv: self.conv.as_ref().map(|c| c.cast()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
    pub conv: Option<ConvGrads<T>>,
}

/// Work done by strategy executions, for the compute-ordering checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ExecCounters {
    /// Full-tensor elementwise sweeps in the BN/Act part of backward passes.
    pub backward_passes: usize,
    /// `backward_passes` weighted by tensor size.
    pub backward_elements: u64,
    /// Activation-sized buffers allocated in forward and dropped before it
    /// returns (neither returned nor saved).
    pub forward_scratch: usize,
}

impl ExecCounters {
    fn backward(&mut self, passes: usize, numel: usize) {
        self.backward_passes += passes;
        self.backward_elements += (passes * numel) as u64;
    }
}

/// Minibatch statistics a unit computed in its forward pass, for running
/// averages. Kept in double precision whatever the unit's scalar type.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStatsRecord {
    pub layer: usize,
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

/// Ledger plus counters collected while running units.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub ledger: BufferLedger,
    pub counters: ExecCounters,
    pub batch_stats: Vec<BatchStatsRecord>,
    next_layer: usize,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    fn record_stats<T: Scalar>(&mut self, layer: usize, stats: &MinibatchStats<T>) {
        self.batch_stats.push(BatchStatsRecord {
            layer,
            mu: stats.mu.iter().map(|v| v.as_f64()).collect(),
            var: stats.var.iter().map(|v| v.as_f64()).collect(),
        });
    }

    fn next_layer_id(&mut self) -> usize {
        let id = self.next_layer;
        self.next_layer += 1;
        id
    }
}

#[derive(Debug, Clone)]
enum Saved<T> {
    Standard {
        x: Tensor<T>,
        z: Tensor<T>,
        stats: MinibatchStats<T>,
    },
    Checkpointing {
        x: Tensor<T>,
        stats: MinibatchStats<T>,
    },
    CheckpointingProposed {
        xhat: Tensor<T>,
        var: Vec<T>,
    },
    InPlace {
        z: Tensor<T>,
        var: Vec<T>,
    },
}

/// State a unit keeps between its forward and backward pass. Opaque: only
/// the unit that produced it can consume it.
#[derive(Debug, Clone)]
pub struct UnitSaved<T> {
    strategy: Strategy,
    inner: Saved<T>,
}

impl<T> UnitSaved<T> {
    pub fn strategy(&self) -> Strategy {
        self.strategy
    }
}

fn apply_conv<T: Scalar>(params: &LayerParams<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    match &params.conv {
        Some(c) => c.forward(z),
        None => Ok(z.clone()),
    }
}

/// Runs one unit forward, recording retained buffers into `trace`.
/// Takes `x` by value: strategies that do not keep it overwrite it in place.
pub fn unit_forward<T: Scalar>(
    spec: &LayerSpec,
    strategy: Strategy,
    params: &LayerParams<T>,
    x: Tensor<T>,
    trace: &mut Trace,
) -> Result<(Tensor<T>, UnitSaved<T>)> {
    params.check_against(spec)?;
    if strategy.requires_invertible_activation() {
        spec.activation.ensure_invertible()?;
    }
    let layer = trace.next_layer_id();
    let numel = x.numel();
    let c = spec.channels;
    let elem = std::mem::size_of::<T>();
    let act = spec.activation;

    let (out, inner) = match strategy {
        Strategy::Standard | Strategy::Checkpointing => {
            let mut z = x.clone();
            let stats = batchnorm::forward_in_place(&mut z, &params.bn)?;
            trace.record_stats(layer, &stats);
            act.forward_in_place(&mut z);
            let out = apply_conv(params, &z)?;
            trace
                .ledger
                .record(layer, "x", numel, elem, BufferClass::Large);
            if strategy == Strategy::Standard {
                trace
                    .ledger
                    .record(layer, "z", numel, elem, BufferClass::Large);
            } else {
                trace.counters.forward_scratch += 1;
            }
            trace
                .ledger
                .record(layer, "mu", c, elem, BufferClass::Small);
            trace
                .ledger
                .record(layer, "var", c, elem, BufferClass::Small);
            let inner = if strategy == Strategy::Standard {
                Saved::Standard { x, z, stats }
            } else {
                Saved::Checkpointing { x, stats }
            };
            (out, inner)
        }
        Strategy::CheckpointingProposed => {
            let mut xhat = x;
            let stats = MinibatchStats::of(&xhat)?;
            trace.record_stats(layer, &stats);
            batchnorm::whiten_in_place(&mut xhat, &stats, params.bn.eps)?;
            let mut z = batchnorm::affine(&xhat, &params.bn)?;
            act.forward_in_place(&mut z);
            let out = apply_conv(params, &z)?;
            trace.counters.forward_scratch += 1;
            trace
                .ledger
                .record(layer, "xhat", numel, elem, BufferClass::Large);
            trace
                .ledger
                .record(layer, "var", c, elem, BufferClass::Small);
            (
                out,
                Saved::CheckpointingProposed {
                    xhat,
                    var: stats.var,
                },
            )
        }
        Strategy::InPlaceAbnI | Strategy::InPlaceAbnII => {
            let mut z = x;
            let stats = batchnorm::forward_in_place(&mut z, &params.bn)?;
            trace.record_stats(layer, &stats);
            act.forward_in_place(&mut z);
            let out = apply_conv(params, &z)?;
            trace
                .ledger
                .record(layer, "z", numel, elem, BufferClass::Large);
            trace
                .ledger
                .record(layer, "var", c, elem, BufferClass::Small);
            (out, Saved::InPlace { z, var: stats.var })
        }
    };
    trace
        .ledger
        .record(layer, "grad_accumulators", 2 * c, elem, BufferClass::Small);
    Ok((out, UnitSaved { strategy, inner }))
}

fn conv_backward<T: Scalar>(
    params: &LayerParams<T>,
    z: &Tensor<T>,
    dout: Tensor<T>,
) -> Result<(Tensor<T>, Option<ConvGrads<T>>)> {
    match &params.conv {
        Some(c) => {
            let (dz, g) = c.backward(z, &dout)?;
            Ok((dz, Some(g)))
        }
        None => {
            if dout.shape() != z.shape() {
                return Err(Error::shape(z.shape(), dout.shape()));
            }
            Ok((dout, None))
        }
    }
}

/// Runs one unit backward from the gradient of its output.
pub fn unit_backward<T: Scalar>(
    spec: &LayerSpec,
    strategy: Strategy,
    params: &LayerParams<T>,
    saved: UnitSaved<T>,
    dout: Tensor<T>,
    trace: &mut Trace,
) -> Result<(Tensor<T>, LayerGrads<T>)> {
    if saved.strategy != strategy {
        return Err(Error::StrategyMismatch {
            saved: saved.strategy.name(),
            requested: strategy.name(),
        });
    }
    params.check_against(spec)?;
    let act = spec.activation;
    let counters = &mut trace.counters;
    let (bn_grads, conv_grads): (BnGradients<T>, _) = match saved.inner {
        Saved::Standard { x, z, stats } => {
            let n = x.numel();
            let (mut dy, conv) = conv_backward(params, &z, dout)?;
            act.backward_from_output_in_place(&z, &mut dy)?;
            counters.backward(1, n);
            let g = batchnorm::backward_standard(&x, &dy, &stats, &params.bn)?;
            counters.backward(STANDARD_BACKWARD_PASSES, n);
            (g, conv)
        }
        Saved::Checkpointing { x, stats } => {
            let n = x.numel();
            // recompute z forward from x with a single fused scale-and-shift
            let (scale, shift) = batchnorm::fused_scale_shift(&stats, &params.bn);
            let mut z = x.clone();
            z.channel_affine_in_place(&scale, &shift)?;
            act.forward_in_place(&mut z);
            counters.backward(2, n);
            let (mut dy, conv) = conv_backward(params, &z, dout)?;
            act.backward_from_output_in_place(&z, &mut dy)?;
            counters.backward(1, n);
            let g = batchnorm::backward_standard(&x, &dy, &stats, &params.bn)?;
            counters.backward(STANDARD_BACKWARD_PASSES, n);
            (g, conv)
        }
        Saved::CheckpointingProposed { xhat, var } => {
            let n = xhat.numel();
            let mut z = batchnorm::affine(&xhat, &params.bn)?;
            act.forward_in_place(&mut z);
            counters.backward(2, n);
            let (mut dy, conv) = conv_backward(params, &z, dout)?;
            act.backward_from_output_in_place(&z, &mut dy)?;
            counters.backward(1, n);
            let g = batchnorm::backward_star(&xhat, &dy, &var, &params.bn)?;
            counters.backward(STAR_BACKWARD_PASSES, n);
            (g, conv)
        }
        Saved::InPlace { z, var } => {
            let n = z.numel();
            let (mut dy, conv) = conv_backward(params, &z, dout)?;
            act.backward_from_output_in_place(&z, &mut dy)?;
            counters.backward(1, n);
            // z is no longer needed: recover y, and for variant I also xhat, in its buffer
            let mut y = z;
            act.inverse_in_place(&mut y)?;
            counters.backward(1, n);
            let g = if strategy == Strategy::InPlaceAbnI {
                batchnorm::pi_inverse_in_place(&mut y, &params.bn)?;
                counters.backward(1, n);
                let g = batchnorm::backward_star(&y, &dy, &var, &params.bn)?;
                counters.backward(STAR_BACKWARD_PASSES, n);
                g
            } else {
                let g = batchnorm::backward_dagger(&y, &dy, &var, &params.bn)?;
                counters.backward(DAGGER_BACKWARD_PASSES, n);
                g
            };
            (g, conv)
        }
    };
    Ok((
        bn_grads.dx,
        LayerGrads {
            dgamma: bn_grads.dgamma,
            dbeta: bn_grads.dbeta,
            conv: conv_grads,
        },
    ))
}
