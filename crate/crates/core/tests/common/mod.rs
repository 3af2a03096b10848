#![allow(dead_code)]

use inplace_abn::init;
use inplace_abn::strategies::{
    block_backward, block_forward, BlockParams, BlockPlan, LayerGrads, Trace,
};
use inplace_abn::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub struct Run<T> {
    pub out: Tensor<T>,
    pub dx: Tensor<T>,
    pub grads: Vec<LayerGrads<T>>,
    pub trace: Trace,
}

pub fn run_block<T: Scalar>(
    plan: &BlockPlan,
    params: &BlockParams<T>,
    x: &Tensor<T>,
    dout: &Tensor<T>,
) -> Run<T> {
    let mut trace = Trace::new();
    let (out, saved) = block_forward(plan, params, x.clone(), &mut trace).unwrap();
    let (dx, grads) = block_backward(plan, params, saved, dout.clone(), &mut trace).unwrap();
    Run {
        out,
        dx,
        grads,
        trace,
    }
}

/// Every gradient of a block run as named flat vectors.
pub fn flat_grads<T: Scalar>(run: &Run<T>) -> Vec<(String, Vec<T>)> {
    let mut out = vec![("dx".to_string(), run.dx.data().to_vec())];
    for (i, g) in run.grads.iter().enumerate() {
        out.push((format!("dgamma{i}"), g.dgamma.clone()));
        out.push((format!("dbeta{i}"), g.dbeta.clone()));
        if let Some(c) = &g.conv {
            out.push((format!("dweights{i}"), c.dweights.clone()));
            out.push((format!("dbias{i}"), c.dbias.clone()));
        }
    }
    out
}

/// Largest norm-wise relative difference over matching named components.
///
/// A conv bias that feeds a batch norm has an analytically zero gradient, so
/// each component's denominator is floored at `1e-6` of the largest norm
/// across all components rather than compared against pure rounding noise.
pub fn max_rel<T: Scalar>(a: &[(String, Vec<T>)], b: &[(String, Vec<T>)]) -> f64 {
    assert_eq!(a.len(), b.len());
    let global = a
        .iter()
        .chain(b)
        .flat_map(|(_, v)| v.iter().map(|x| x.as_f64().abs()))
        .fold(0.0, f64::max);
    a.iter()
        .zip(b)
        .map(|((na, va), (nb, vb))| {
            assert_eq!(na, nb);
            let r = inplace_abn::gradcheck::compare(va, vb, 1.0).unwrap();
            let local = va
                .iter()
                .chain(vb)
                .map(|x| x.as_f64().abs())
                .fold(0.0, f64::max);
            r.max_abs / local.max(1e-6 * global).max(1e-300)
        })
        .fold(0.0, f64::max)
}

pub fn random<T: Scalar>(seed: u64, shape: (usize, usize, usize, usize)) -> Tensor<T> {
    init::uniform_tensor(&mut rng(seed), shape, -1.0, 1.0)
}
