use super::plan::BlockPlan;
use super::unit::{unit_backward, unit_forward, LayerGrads, LayerParams, Trace, UnitSaved};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> BlockParams<T> {
    pub fn zeros_for(plan: &BlockPlan) -> Self {
        BlockParams {
            layers: plan.layers.iter().map(LayerParams::zeros_for).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> BlockParams<U> {
        BlockParams {
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockSaved<T> {
    plan_strategy: super::plan::Strategy,
    units: Vec<UnitSaved<T>>,
}

fn check_params<T: Scalar>(plan: &BlockPlan, params: &BlockParams<T>) -> Result<()> {
    plan.validate()?;
    if plan.layers.len() != params.layers.len() {
        return Err(Error::InvalidPlan(format!(
            "plan has {} layers, parameters cover {}",
            plan.layers.len(),
            params.layers.len()
        )));
    }
    Ok(())
}

/// Forward through every unit of the block, adding the identity skip when
/// the plan is residual.
pub fn block_forward<T: Scalar>(
    plan: &BlockPlan,
    params: &BlockParams<T>,
    x: Tensor<T>,
    trace: &mut Trace,
) -> Result<(Tensor<T>, BlockSaved<T>)> {
    check_params(plan, params)?;
    let skip = plan.residual.then(|| x.clone());
    let mut h = x;
    let mut units = Vec::with_capacity(plan.layers.len());
    for (spec, p) in plan.layers.iter().zip(&params.layers) {
        let (out, saved) = unit_forward(spec, plan.strategy, p, h, trace)?;
        units.push(saved);
        h = out;
    }
    if let Some(skip) = skip {
        if skip.shape() != h.shape() {
            return Err(Error::shape(skip.shape(), h.shape()));
        }
        h.add_assign(&skip)?;
    }
    Ok((
        h,
        BlockSaved {
            plan_strategy: plan.strategy,
            units,
        },
    ))
}

pub fn block_backward<T: Scalar>(
    plan: &BlockPlan,
    params: &BlockParams<T>,
    saved: BlockSaved<T>,
    dout: Tensor<T>,
    trace: &mut Trace,
) -> Result<(Tensor<T>, Vec<LayerGrads<T>>)> {
    check_params(plan, params)?;
    if saved.plan_strategy != plan.strategy {
        return Err(Error::StrategyMismatch {
            saved: saved.plan_strategy.name(),
            requested: plan.strategy.name(),
        });
    }
    if saved.units.len() != plan.layers.len() {
        return Err(Error::InvalidPlan(
            "saved state does not match the plan depth".into(),
        ));
    }
    let skip_grad = plan.residual.then(|| dout.clone());
    let mut g = dout;
    let mut grads = Vec::with_capacity(plan.layers.len());
    for ((spec, p), s) in plan
        .layers
        .iter()
        .zip(&params.layers)
        .zip(saved.units)
        .rev()
    {
        let (dx, lg) = unit_backward(spec, plan.strategy, p, s, g, trace)?;
        grads.push(lg);
        g = dx;
    }
    grads.reverse();
    if let Some(skip) = skip_grad {
        g.add_assign(&skip)?;
    }
    Ok((g, grads))
}

/// A chain of blocks, each applied to the previous output.
pub fn residual_stack_forward<T: Scalar>(
    plans: &[BlockPlan],
    params: &[BlockParams<T>],
    x: Tensor<T>,
    trace: &mut Trace,
) -> Result<(Tensor<T>, Vec<BlockSaved<T>>)> {
    if plans.len() != params.len() {
        return Err(Error::InvalidPlan(
            "one parameter set per block is required".into(),
        ));
    }
    let mut h = x;
    let mut saved = Vec::with_capacity(plans.len());
    for (plan, p) in plans.iter().zip(params) {
        let (out, s) = block_forward(plan, p, h, trace)?;
        saved.push(s);
        h = out;
    }
    Ok((h, saved))
}

/// Per-block, per-layer gradients of a residual stack.
pub type StackGrads<T> = Vec<Vec<LayerGrads<T>>>;

pub fn residual_stack_backward<T: Scalar>(
    plans: &[BlockPlan],
    params: &[BlockParams<T>],
    saved: Vec<BlockSaved<T>>,
    dout: Tensor<T>,
    trace: &mut Trace,
) -> Result<(Tensor<T>, StackGrads<T>)> {
    if plans.len() != params.len() || plans.len() != saved.len() {
        return Err(Error::InvalidPlan(
            "one parameter set and saved state per block is required".into(),
        ));
    }
    let mut g = dout;
    let mut grads = Vec::with_capacity(plans.len());
    for ((plan, p), s) in plans.iter().zip(params).zip(saved).rev() {
        let (dx, lg) = block_backward(plan, p, s, g, trace)?;
        grads.push(lg);
        g = dx;
    }
    grads.reverse();
    Ok((g, grads))
}
