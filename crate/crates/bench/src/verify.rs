//! Property suite behind `iabn verify` and the acceptance tests.
//!
//! Each property returns one [`PropertyResult`] carrying the worst error seen
//! and the tolerance it was held to.

use inplace_abn::batchnorm::{self, MinibatchStats, RunningStats};
use inplace_abn::gradcheck::{compare, compare_components, fd_gradient_slice, CheckReport};
use inplace_abn::strategies::{
    block_backward, block_forward, BlockParams, BlockPlan, LayerGrads, Strategy, Trace,
};
use inplace_abn::{init, ActivationFn, ChannelParams, ConvParams, DType, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bench::{counters_for_plan, BenchShape};
use crate::error::Result;

/// Slopes exercised by the activation round trip.
pub const ROUND_TRIP_SLOPES: [f64; 3] = [0.01, 0.1, 0.5];
/// Round-trip tolerance in units of machine epsilon.
pub const ROUND_TRIP_EPS: f64 = 4.0;
/// BN outputs closer than this to the activation kink are resampled before
/// finite differencing.
pub const KINK_MARGIN: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Strategy gradients against Standard.
    pub equivalence: f64,
    /// The three BN backward forms against each other.
    pub bn_equivalence: f64,
    /// Analytic gradients against a double-precision central-difference oracle.
    pub finite_difference: f64,
    pub sync: f64,
    pub fold: f64,
}

impl Tolerances {
    pub fn for_dtype(dtype: DType) -> Self {
        match dtype {
            DType::Double => Tolerances {
                equivalence: 1e-9,
                bn_equivalence: 1e-10,
                finite_difference: 1e-5,
                sync: 1e-12,
                fold: 1e-12,
            },
            DType::Single => Tolerances {
                equivalence: 1e-3,
                bn_equivalence: 1e-4,
                finite_difference: 1e-3,
                sync: 1e-5,
                fold: 1e-5,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Random BN+Act+Conv instances for the equivalence checks.
    pub instances: usize,
    pub fd_instances: usize,
    pub sync_tensors: usize,
    /// Scales the backward-from-output gradients in the BN equivalence check
    /// by `1 + x` (fault injection).
    pub perturb_dagger: f64,
    /// Shapes for the pass-ordering check.
    pub shapes: Vec<BenchShape>,
}

impl VerifyConfig {
    pub fn new(seed: u64, shapes: Vec<BenchShape>) -> Self {
        VerifyConfig {
            seed,
            instances: 100,
            fd_instances: 20,
            sync_tensors: 50,
            perturb_dagger: 0.0,
            shapes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub property: String,
    pub dtype: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl PropertyResult {
    fn new(
        property: &str,
        dtype: DType,
        instances: usize,
        max_error: f64,
        tolerance: f64,
        detail: String,
    ) -> Self {
        PropertyResult {
            property: property.to_string(),
            dtype: dtype.name().to_string(),
            instances,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
            detail,
        }
    }

    fn pass_fail(property: &str, dtype: DType, instances: usize, ok: bool, detail: String) -> Self {
        PropertyResult {
            property: property.to_string(),
            dtype: dtype.name().to_string(),
            instances,
            max_error: if ok { 0.0 } else { 1.0 },
            tolerance: 0.0,
            passed: ok,
            detail,
        }
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn worst(acc: &mut (f64, String), report: &CheckReport, label: impl FnOnce() -> String) {
    if report.max_rel > acc.0 || report.max_rel.is_nan() {
        acc.0 = report.max_rel;
        acc.1 = format!(
            "{} ({})",
            label(),
            report.worst_component.as_deref().unwrap_or("-")
        );
    }
}

/// A random BN+Act+Conv unit no larger than (4, 8, 8, 8).
struct UnitInstance<T> {
    plan: BlockPlan,
    params: BlockParams<T>,
    x: Tensor<T>,
    dout: Tensor<T>,
}

fn random_unit<T: Scalar>(
    r: &mut ChaCha8Rng,
    max: (usize, usize, usize, usize),
    kernels: &[usize],
) -> UnitInstance<T> {
    let n = r.random_range(2..=max.0);
    let c = r.random_range(1..=max.1);
    let h = r.random_range(1..=max.2);
    let w = r.random_range(1..=max.3);
    let out = r.random_range(1..=max.1);
    let k = kernels[r.random_range(0..kernels.len())];
    let plan = BlockPlan::unit(c, out, k, ActivationFn::default(), Strategy::Standard);
    let params = init::random_block_params(r, &plan);
    let x = init::uniform_tensor(r, (n, c, h, w), -2.0, 2.0);
    let dout = init::uniform_tensor(r, (n, out, h, w), -1.0, 1.0);
    UnitInstance {
        plan,
        params,
        x,
        dout,
    }
}

type NamedGrads<T> = Vec<(&'static str, Vec<T>)>;

fn named_grads<T: Scalar>(dx: &Tensor<T>, g: &LayerGrads<T>) -> NamedGrads<T> {
    let mut v = vec![
        ("dx", dx.data().to_vec()),
        ("dgamma", g.dgamma.clone()),
        ("dbeta", g.dbeta.clone()),
    ];
    if let Some(c) = &g.conv {
        v.push(("dweights", c.dweights.clone()));
        v.push(("dbias", c.dbias.clone()));
    }
    v
}

fn run_unit<T: Scalar>(inst: &UnitInstance<T>, s: Strategy) -> Result<(Tensor<T>, NamedGrads<T>)> {
    let plan = inst.plan.with_strategy(s);
    let mut trace = Trace::new();
    let (out, saved) = block_forward(&plan, &inst.params, inst.x.clone(), &mut trace)?;
    let (dx, grads) = block_backward(&plan, &inst.params, saved, inst.dout.clone(), &mut trace)?;
    Ok((out, named_grads(&dx, &grads[0])))
}

/// Every strategy's gradients against Standard on random BN+Act+Conv units.
pub fn gradient_equivalence<T: Scalar>(cfg: &VerifyConfig) -> Result<PropertyResult> {
    let tol = Tolerances::for_dtype(T::DTYPE).equivalence;
    let mut r = rng(cfg.seed, 1);
    let mut acc = (0.0, String::new());
    for i in 0..cfg.instances {
        let inst = random_unit::<T>(&mut r, (4, 8, 8, 8), &[1, 3]);
        let (_, reference) = run_unit(&inst, Strategy::Standard)?;
        for s in Strategy::ALL.into_iter().skip(1) {
            let (_, grads) = run_unit(&inst, s)?;
            let parts: Vec<(&str, &[T], &[T])> = grads
                .iter()
                .zip(&reference)
                .map(|((name, a), (_, b))| (*name, &a[..], &b[..]))
                .collect();
            let rep = compare_components(&parts, tol)?;
            worst(&mut acc, &rep, || {
                format!("instance {i}, {s}, shape {}", inst.x.shape())
            });
        }
    }
    Ok(PropertyResult::new(
        "gradient_equivalence",
        T::DTYPE,
        cfg.instances,
        acc.0,
        tol,
        acc.1,
    ))
}

/// Backward from `x`, from `xhat` and from `y` agree on random BN layers.
pub fn bn_backward_equivalence<T: Scalar>(cfg: &VerifyConfig) -> Result<PropertyResult> {
    let tol = Tolerances::for_dtype(T::DTYPE).bn_equivalence;
    let mut r = rng(cfg.seed, 2);
    let mut acc = (0.0, String::new());
    let k = T::of(1.0 + cfg.perturb_dagger);
    for i in 0..cfg.instances {
        let shape = (
            r.random_range(2..=4),
            r.random_range(1..=8),
            r.random_range(1..=8),
            r.random_range(1..=8),
        );
        let x = init::uniform_tensor::<T, _>(&mut r, shape, -3.0, 3.0);
        let dy = init::uniform_tensor::<T, _>(&mut r, shape, -1.0, 1.0);
        let p = init::random_channel_params::<T, _>(&mut r, shape.1);
        let f = batchnorm::forward(&x, &p)?;
        let standard = batchnorm::backward_standard(&x, &dy, &f.stats, &p)?;
        let star = batchnorm::backward_star(&f.xhat, &dy, &f.stats.var, &p)?;
        let mut dagger = batchnorm::backward_dagger(&f.y, &dy, &f.stats.var, &p)?;
        if cfg.perturb_dagger != 0.0 {
            dagger.dx.scale_in_place(k);
            dagger.dgamma.iter_mut().for_each(|v| *v *= k);
            dagger.dbeta.iter_mut().for_each(|v| *v *= k);
        }
        for (name, other) in [("from xhat", &star), ("from y", &dagger)] {
            let rep = inplace_abn::gradcheck::check_equivalence(&standard, other, tol)?;
            worst(&mut acc, &rep, || format!("instance {i}, {name}"));
        }
    }
    Ok(PropertyResult::new(
        "bn_backward_equivalence",
        T::DTYPE,
        cfg.instances,
        acc.0,
        tol,
        acc.1,
    ))
}

fn weighted_sum(out: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Loss `sum w * unit(x)` in double precision with everything recomputed.
fn unit_loss(
    plan: &BlockPlan,
    params: &BlockParams<f64>,
    x: &Tensor<f64>,
    w: &Tensor<f64>,
) -> inplace_abn::Result<f64> {
    let (out, _) = block_forward(plan, params, x.clone(), &mut Trace::new())?;
    Ok(weighted_sum(&out, w))
}

/// Analytic gradients of every strategy against central differences of a
/// scalar loss through BN -> LeakyReLU -> Conv.
pub fn finite_difference<T: Scalar>(cfg: &VerifyConfig) -> Result<PropertyResult> {
    let tol = Tolerances::for_dtype(T::DTYPE).finite_difference;
    let mut r = rng(cfg.seed, 3);
    let mut acc = (0.0, String::new());
    let mut done = 0;
    while done < cfg.fd_instances {
        let inst = random_unit::<T>(&mut r, (3, 3, 4, 4), &[1, 3]);
        let plan = inst.plan.clone();
        let p64 = inst.params.cast::<f64>();
        let x64 = inst.x.cast::<f64>();
        let w64 = inst.dout.cast::<f64>();
        let y = batchnorm::forward(&x64, &p64.layers[0].bn)?.y;
        if y.data().iter().any(|v| v.abs() < KINK_MARGIN) {
            continue;
        }
        let mut oracle: Vec<(&'static str, Vec<f64>)> = Vec::new();
        oracle.push((
            "dx",
            fd_gradient_slice(
                |v: &[f64]| {
                    unit_loss(
                        &plan,
                        &p64,
                        &Tensor::from_vec(x64.shape(), v.to_vec())?,
                        &w64,
                    )
                },
                x64.data(),
                FD_STEP,
            )?,
        ));
        let perturb = |name: &'static str,
                       get: fn(&BlockParams<f64>) -> &Vec<f64>,
                       set: fn(&mut BlockParams<f64>, &[f64])| {
            fd_gradient_slice(
                |v: &[f64]| {
                    let mut p = p64.clone();
                    set(&mut p, v);
                    unit_loss(&plan, &p, &x64, &w64)
                },
                get(&p64),
                FD_STEP,
            )
            .map(|g| (name, g))
        };
        oracle.push(perturb(
            "dgamma",
            |p| &p.layers[0].bn.gamma,
            |p, v| p.layers[0].bn.gamma = v.to_vec(),
        )?);
        oracle.push(perturb(
            "dbeta",
            |p| &p.layers[0].bn.beta,
            |p, v| p.layers[0].bn.beta = v.to_vec(),
        )?);
        oracle.push(perturb(
            "dweights",
            |p| &p.layers[0].conv.as_ref().expect("unit has a conv").weights,
            |p, v| p.layers[0].conv.as_mut().expect("unit has a conv").weights = v.to_vec(),
        )?);
        oracle.push(perturb(
            "dbias",
            |p| &p.layers[0].conv.as_ref().expect("unit has a conv").bias,
            |p, v| p.layers[0].conv.as_mut().expect("unit has a conv").bias = v.to_vec(),
        )?);

        for s in Strategy::ALL {
            let (_, grads) = run_unit(&inst, s)?;
            let analytic: Vec<Vec<f64>> = grads
                .iter()
                .map(|(_, g)| g.iter().map(|v| v.as_f64()).collect())
                .collect();
            let parts: Vec<(&str, &[f64], &[f64])> = oracle
                .iter()
                .zip(&analytic)
                .map(|((name, fd), an)| (*name, &fd[..], &an[..]))
                .collect();
            let rep = compare_components(&parts, tol)?;
            worst(&mut acc, &rep, || {
                format!("instance {done}, {s}, shape {}", inst.x.shape())
            });
        }
        done += 1;
    }
    Ok(PropertyResult::new(
        "finite_difference",
        T::DTYPE,
        done,
        acc.0,
        tol,
        acc.1,
    ))
}

/// `phi^-1(phi(x)) = x` for every slope in [`ROUND_TRIP_SLOPES`], error in units of eps * |x|.
pub fn activation_round_trip<T: Scalar>(cfg: &VerifyConfig) -> Result<PropertyResult> {
    let mut r = rng(cfg.seed, 4);
    let eps = T::epsilon().as_f64();
    let mut acc = (0.0, String::new());
    let trials = 20;
    for &slope in &ROUND_TRIP_SLOPES {
        let act = ActivationFn::leaky_relu(slope)?;
        for _ in 0..trials {
            let x = init::uniform_tensor::<T, _>(&mut r, (2, 3, 4, 4), -10.0, 10.0);
            let back = act.inverse(&act.forward(&x))?;
            for (a, b) in back.data().iter().zip(x.data()) {
                let (a, b) = (a.as_f64(), b.as_f64());
                let e = if b == 0.0 {
                    (a - b).abs() / eps
                } else {
                    (a - b).abs() / (eps * b.abs())
                };
                if e > acc.0 {
                    acc = (e, format!("slope {slope}, x = {b}"));
                }
            }
        }
    }
    Ok(PropertyResult::new(
        "activation_round_trip",
        T::DTYPE,
        trials * ROUND_TRIP_SLOPES.len(),
        acc.0,
        ROUND_TRIP_EPS,
        acc.1,
    ))
}

/// `pi^-1(pi(xhat)) = xhat` for |gamma| >= 0.1, error in units of
/// eps * (|xhat| + |beta / gamma|).
pub fn affine_round_trip<T: Scalar>(cfg: &VerifyConfig) -> Result<PropertyResult> {
    let mut r = rng(cfg.seed, 5);
    let eps = T::epsilon().as_f64();
    let mut acc = (0.0, String::new());
    let trials = 50;
    for _ in 0..trials {
        let c = r.random_range(1..=8);
        let x = init::uniform_tensor::<T, _>(&mut r, (2, c, 3, 3), -5.0, 5.0);
        let p: ChannelParams<T> = init::random_channel_params(&mut r, c);
        let back = batchnorm::pi_inverse(&batchnorm::affine(&x, &p)?, &p)?;
        for ((ch, bp), (_, xp)) in back.planes().zip(x.planes()) {
            let shift = (p.beta[ch].as_f64() / p.gamma[ch].as_f64()).abs();
            for (a, b) in bp.iter().zip(xp) {
                let (a, b) = (a.as_f64(), b.as_f64());
                let scale = eps * (b.abs() + shift);
                let e = if scale == 0.0 {
                    0.0
                } else {
                    (a - b).abs() / scale
                };
                if e > acc.0 {
                    acc = (e, format!("gamma {}, beta {}", p.gamma[ch], p.beta[ch]));
                }
            }
        }
    }
    Ok(PropertyResult::new(
        "affine_round_trip",
        T::DTYPE,
        trials,
        acc.0,
        ROUND_TRIP_EPS,
        acc.1,
    ))
}

/// Large-buffer counts of one BN+Act+Conv unit (2 vs 1) and of the
/// three-unit residual bottleneck (6 vs 3).
pub fn ledger_counts<T: Scalar>(cfg: &VerifyConfig) -> Result<PropertyResult> {
    let act = ActivationFn::default();
    let cases = [
        (
            "unit",
            BlockPlan::unit(8, 8, 3, act, Strategy::Standard),
            (2, 8, 6, 6),
            2,
            1,
        ),
        (
            "bottleneck",
            BlockPlan::bottleneck(16, 8, act, Strategy::Standard),
            (2, 16, 6, 6),
            6,
            3,
        ),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, plan, input, standard, other) in cases {
        let mut counts = Vec::new();
        for s in Strategy::ALL {
            let run = counters_for_plan::<T>(&plan.with_strategy(s), input.into(), cfg.seed)?;
            counts.push(run.trace.ledger.saved_large_buffers);
        }
        let expected: Vec<usize> = Strategy::ALL
            .iter()
            .map(|&s| {
                if s == Strategy::Standard {
                    standard
                } else {
                    other
                }
            })
            .collect();
        ok &= counts == expected;
        detail.push(format!("{name} {counts:?}"));
    }
    Ok(PropertyResult::pass_fail(
        "ledger_counts",
        T::DTYPE,
        2,
        ok,
        detail.join("; "),
    ))
}

/// Per-strategy backward pass counts for one shape.
pub fn pass_counts<T: Scalar>(shape: &BenchShape, seed: u64) -> Result<Vec<(Strategy, usize)>> {
    Strategy::ALL
        .into_iter()
        .map(|s| {
            Ok((
                s,
                counters_for_plan::<T>(&shape.plan(s), shape.input(), seed)?
                    .trace
                    .counters
                    .backward_passes,
            ))
        })
        .collect()
}

/// `II < I <= CheckpointingProposed < Checkpointing` in backward passes.
pub fn ordering_holds(counts: &[(Strategy, usize)]) -> bool {
    let get = |s| counts.iter().find(|(t, _)| *t == s).map(|(_, c)| *c);
    match (
        get(Strategy::InPlaceAbnII),
        get(Strategy::InPlaceAbnI),
        get(Strategy::CheckpointingProposed),
        get(Strategy::Checkpointing),
    ) {
        (Some(ii), Some(i), Some(cp), Some(c)) => ii < i && i <= cp && cp < c,
        _ => false,
    }
}

pub fn pass_ordering<T: Scalar>(cfg: &VerifyConfig) -> Result<PropertyResult> {
    let mut ok = true;
    let mut detail = Vec::new();
    for shape in &cfg.shapes {
        let counts = pass_counts::<T>(shape, cfg.seed)?;
        ok &= ordering_holds(&counts);
        let listed: Vec<String> = counts.iter().map(|(s, c)| format!("{s}={c}")).collect();
        detail.push(format!("{}: {}", shape.name, listed.join(" ")));
    }
    Ok(PropertyResult::pass_fail(
        "pass_ordering",
        T::DTYPE,
        cfg.shapes.len(),
        ok,
        detail.join("; "),
    ))
}

/// Random batch sizes summing to `n` over `k` shards, each at least 1.
fn random_split(r: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut sizes = vec![1; k];
    for _ in 0..n - k {
        sizes[r.random_range(0..k)] += 1;
    }
    sizes
}

/// Merged shard statistics against whole-batch statistics, k in {2, 4}.
pub fn sync_stats<T: Scalar>(cfg: &VerifyConfig) -> Result<PropertyResult> {
    let tol = Tolerances::for_dtype(T::DTYPE).sync;
    let mut r = rng(cfg.seed, 6);
    let mut acc = (0.0, String::new());
    for i in 0..cfg.sync_tensors {
        let n = 4 * r.random_range(1..=3);
        let c = r.random_range(1..=6);
        let offset = r.random_range(-5.0..5.0);
        let spread = r.random_range(0.1..3.0);
        let x = init::normal_tensor::<T, _>(&mut r, (n, c, 3, 3), offset, spread);
        let whole = MinibatchStats::of(&x)?;
        for k in [2, 4] {
            let sizes = if i % 2 == 0 {
                vec![n / k; k]
            } else {
                random_split(&mut r, n, k)
            };
            let shards = x
                .split_batch(&sizes)?
                .iter()
                .map(MinibatchStats::of)
                .collect::<inplace_abn::Result<Vec<_>>>()?;
            let merged = batchnorm::sync_stats(&shards)?;
            let rep = compare_components(
                &[
                    ("mu", &merged.mu, &whole.mu),
                    ("var", &merged.var, &whole.var),
                ],
                tol,
            )?;
            worst(&mut acc, &rep, || {
                format!("tensor {i}, k={k}, sizes {sizes:?}")
            });
        }
    }
    Ok(PropertyResult::new(
        "sync_stats",
        T::DTYPE,
        cfg.sync_tensors,
        acc.0,
        tol,
        acc.1,
    ))
}

/// Conv followed by inference-mode BN against the folded conv, 1x1 and 3x3.
pub fn fold<T: Scalar>(cfg: &VerifyConfig) -> Result<PropertyResult> {
    let tol = Tolerances::for_dtype(T::DTYPE).fold;
    let mut r = rng(cfg.seed, 7);
    let mut acc = (0.0, String::new());
    let per_kernel = 10;
    for k in [1, 3] {
        for i in 0..per_kernel {
            let (cin, cout) = (r.random_range(1..=6), r.random_range(1..=6));
            let conv = init::he_conv(&mut r, &ConvParams::<T>::zeros(cout, cin, k), 1.0, 0.5);
            let p: ChannelParams<T> = init::random_channel_params(&mut r, cout);
            let mut running = RunningStats::new(cout, T::one())?;
            running.mu = (0..cout)
                .map(|_| T::of(r.random_range(-1.0..1.0)))
                .collect();
            running.var = (0..cout).map(|_| T::of(r.random_range(0.1..3.0))).collect();
            let x = init::uniform_tensor::<T, _>(&mut r, (2, cin, 5, 5), -1.0, 1.0);
            let reference = batchnorm::inference_forward(&conv.forward(&x)?, &running, &p)?;
            let folded = batchnorm::fold_into_conv(&conv, &running, &p)?.forward(&x)?;
            let rep = compare(folded.data(), reference.data(), tol)?;
            worst(&mut acc, &rep, || format!("{k}x{k} case {i}"));
        }
    }
    Ok(PropertyResult::new(
        "fold",
        T::DTYPE,
        2 * per_kernel,
        acc.0,
        tol,
        acc.1,
    ))
}

/// Runs every property at precision `T`.
pub fn run_suite<T: Scalar>(cfg: &VerifyConfig) -> Result<Vec<PropertyResult>> {
    Ok(vec![
        gradient_equivalence::<T>(cfg)?,
        bn_backward_equivalence::<T>(cfg)?,
        finite_difference::<T>(cfg)?,
        activation_round_trip::<T>(cfg)?,
        affine_round_trip::<T>(cfg)?,
        ledger_counts::<T>(cfg)?,
        pass_ordering::<T>(cfg)?,
        sync_stats::<T>(cfg)?,
        fold::<T>(cfg)?,
    ])
}

pub fn cmd_verify(cfg: &VerifyConfig, dtype: DType) -> Result<Vec<PropertyResult>> {
    match dtype {
        DType::Double => run_suite::<f64>(cfg),
        DType::Single => run_suite::<f32>(cfg),
    }
}
