//! Wall-clock timing of forward and backward passes through one
//! BN+Act+Conv unit per strategy, plus the instrumented pass counters.
//!
//! The `conv1..conv4-mini` set doubles the channels (32 to 256) and halves
//! the spatial size (32x32 to 4x4) from one stage to the next, so every shape
//! costs about the same.

use std::time::Instant;

use inplace_abn::strategies::{block_backward, block_forward, BlockPlan, Strategy, Trace};
use inplace_abn::{init, ActivationFn, DType, Scalar, Shape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CliError, Result};

pub const DEFAULT_REPS: usize = 200;
pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_SHAPES: &str = "conv1..conv4-mini";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchShape {
    pub name: String,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
}

impl BenchShape {
    fn new(name: &str, n: usize, c: usize, hw: usize, kernel: usize) -> Self {
        BenchShape {
            name: name.to_string(),
            n,
            c,
            h: hw,
            w: hw,
            kernel,
        }
    }

    pub fn input(&self) -> Shape {
        Shape::new(self.n, self.c, self.h, self.w)
    }

    pub fn plan(&self, strategy: Strategy) -> BlockPlan {
        BlockPlan::unit(
            self.c,
            self.c,
            self.kernel,
            ActivationFn::default(),
            strategy,
        )
    }
}

fn mini(stage: usize) -> BenchShape {
    let c = 32 << (stage - 1);
    let hw = 32 >> (stage - 1);
    BenchShape::new(&format!("conv{stage}-mini"), 4, c, hw, 3)
}

/// Resolves a named shape set.
/// Resolves a comma-separated list of shape set names.
pub fn shape_set(names: &str) -> Result<Vec<BenchShape>> {
    let mut out = Vec::new();
    for name in names.split(',') {
        out.extend(named_set(name.trim())?);
    }
    Ok(out)
}

fn named_set(name: &str) -> Result<Vec<BenchShape>> {
    match name {
        "conv1..conv4-mini" | "mini" => Ok((1..=4).map(mini).collect()),
        "conv1-mini" => Ok(vec![mini(1)]),
        "conv2-mini" => Ok(vec![mini(2)]),
        "conv3-mini" => Ok(vec![mini(3)]),
        "conv4-mini" => Ok(vec![mini(4)]),
        "tiny" => Ok(vec![BenchShape::new("tiny-a", 2, 4, 6, 3), BenchShape::new("tiny-b", 2, 8, 4, 1)]),
        other => Err(CliError::Usage(format!(
            "unknown shape set `{other}` (expected conv1..conv4-mini, mini, conv1-mini..conv4-mini or tiny)"
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub shapes: Vec<BenchShape>,
    pub strategies: Vec<Strategy>,
    pub reps: usize,
    pub warmup: usize,
    pub dtype: DType,
    pub seed: u64,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(CliError::Usage("--reps must be at least 1".into()));
        }
        if self.shapes.is_empty() || self.strategies.is_empty() {
            return Err(CliError::Usage("nothing to benchmark".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub shape: String,
    pub strategy: String,
    pub phase: String,
    pub mean_us: f64,
    pub std_us: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterRow {
    pub shape: String,
    pub strategy: String,
    pub backward_passes: usize,
    pub backward_elements: u64,
    pub forward_scratch: usize,
    pub saved_large_buffers: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BenchReport {
    pub timings: Vec<TimingRow>,
    pub counters: Vec<CounterRow>,
}

impl BenchReport {
    /// Mean total time of `strategy` over that of Standard on `shape`.
    pub fn overhead(&self, shape: &str, strategy: Strategy) -> Option<f64> {
        let total = |s: Strategy| {
            self.timings
                .iter()
                .find(|r| r.shape == shape && r.strategy == s.name() && r.phase == "total")
                .map(|r| r.mean_us)
        };
        Some(total(strategy)? / total(Strategy::Standard)?)
    }
}

/// Population mean and standard deviation.
pub fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn micros(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e6
}

/// Trace of one forward and backward pass.
#[derive(Debug, Clone)]
pub struct PlanRun {
    pub trace: Trace,
}

/// One forward and backward pass of `plan` on random data.
pub fn counters_for_plan<T: Scalar>(plan: &BlockPlan, input: Shape, seed: u64) -> Result<PlanRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init::random_block_params::<T, _>(&mut rng, plan);
    let x = init::uniform_tensor::<T, _>(&mut rng, input, -1.0, 1.0);
    let dout = init::uniform_tensor::<T, _>(&mut rng, plan.output_shape(input)?, -1.0, 1.0);
    let mut trace = Trace::new();
    let (_, saved) = block_forward(plan, &params, x, &mut trace)?;
    block_backward(plan, &params, saved, dout, &mut trace)?;
    Ok(PlanRun { trace })
}

fn bench_one<T: Scalar>(
    shape: &BenchShape,
    strategy: Strategy,
    cfg: &BenchConfig,
    report: &mut BenchReport,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let plan = shape.plan(strategy);
    let params = init::random_block_params::<T, _>(&mut rng, &plan);
    let x = init::uniform_tensor::<T, _>(&mut rng, shape.input(), -1.0, 1.0);
    let dout = init::uniform_tensor::<T, _>(&mut rng, plan.output_shape(x.shape())?, -1.0, 1.0);

    let (mut fwd, mut bwd) = (Vec::with_capacity(cfg.reps), Vec::with_capacity(cfg.reps));
    let mut first: Option<Trace> = None;
    for rep in 0..cfg.warmup + cfg.reps {
        let (input, g) = (x.clone(), dout.clone());
        let mut trace = Trace::new();
        let t0 = Instant::now();
        let (out, saved) = block_forward(&plan, &params, input, &mut trace)?;
        let tf = micros(t0);
        let t1 = Instant::now();
        let (dx, grads) = block_backward(&plan, &params, saved, g, &mut trace)?;
        let tb = micros(t1);
        std::hint::black_box((out, dx, grads));
        if rep >= cfg.warmup {
            fwd.push(tf);
            bwd.push(tb);
            first.get_or_insert(trace);
        }
    }
    let total: Vec<f64> = fwd.iter().zip(&bwd).map(|(a, b)| a + b).collect();
    for (phase, samples) in [("forward", &fwd), ("backward", &bwd), ("total", &total)] {
        let (mean_us, std_us) = mean_std(samples);
        report.timings.push(TimingRow {
            shape: shape.name.clone(),
            strategy: strategy.name().to_string(),
            phase: phase.to_string(),
            mean_us,
            std_us,
            reps: cfg.reps,
        });
    }
    let trace = first.expect("reps >= 1");
    report.counters.push(CounterRow {
        shape: shape.name.clone(),
        strategy: strategy.name().to_string(),
        backward_passes: trace.counters.backward_passes,
        backward_elements: trace.counters.backward_elements,
        forward_scratch: trace.counters.forward_scratch,
        saved_large_buffers: trace.ledger.saved_large_buffers,
    });
    Ok(())
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let mut report = BenchReport::default();
    for shape in &cfg.shapes {
        for &s in &cfg.strategies {
            match cfg.dtype {
                DType::Double => bench_one::<f64>(shape, s, cfg, &mut report)?,
                DType::Single => bench_one::<f32>(shape, s, cfg, &mut report)?,
            }
        }
    }
    Ok(report)
}
