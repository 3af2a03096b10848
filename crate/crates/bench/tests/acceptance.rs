//! Acceptance criteria 1-8. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use iabn_bench::bench::{shape_set, DEFAULT_SHAPES};
use iabn_bench::ledger::{cmd_ledger, default_plan};
use iabn_bench::train::{cmd_train, TrainConfig};
use iabn_bench::verify::{self, VerifyConfig, ROUND_TRIP_EPS};
use inplace_abn::strategies::{PlanFile, Strategy};
use inplace_abn::DType;

const SEED: u64 = 2024;

const EQUIVALENCE_TOL: f64 = 1e-9;
const EQUIVALENCE_INSTANCES: usize = 100;
const EQUIVALENCE_BUDGET: Duration = Duration::from_secs(10);
const FD_TOL: f64 = 1e-5;
const FD_INSTANCES: usize = 20;
const FD_BUDGET: Duration = Duration::from_secs(30);
const SYNC_TOL: f64 = 1e-12;
const SYNC_TENSORS: usize = 50;
const FOLD_TOL: f64 = 1e-12;
const TRAIN_TOL: f64 = 1e-6;
const TRAIN_EPOCHS: usize = 5;
const TRAIN_ACCURACY: f64 = 0.95;
const TRAIN_BUDGET: Duration = Duration::from_secs(60);

struct Outcome {
    passed: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Outcome);

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn config() -> VerifyConfig {
    let mut cfg = VerifyConfig::new(SEED, shape_set(DEFAULT_SHAPES).expect("default shape set"));
    cfg.instances = EQUIVALENCE_INSTANCES;
    cfg.fd_instances = FD_INSTANCES;
    cfg.sync_tensors = SYNC_TENSORS;
    cfg
}

fn gradient_equivalence() -> Outcome {
    let t = Instant::now();
    let r = verify::gradient_equivalence::<f64>(&config()).expect("suite runs");
    let elapsed = t.elapsed();
    outcome(
        r.max_error <= EQUIVALENCE_TOL && r.instances >= 100 && elapsed < EQUIVALENCE_BUDGET,
        format!(
            "max rel {:.2e} <= {EQUIVALENCE_TOL:.0e} over {} instances, {:.2?} < {EQUIVALENCE_BUDGET:?}; worst {}",
            r.max_error, r.instances, elapsed, r.detail
        ),
    )
}

fn finite_difference() -> Outcome {
    let t = Instant::now();
    let r = verify::finite_difference::<f64>(&config()).expect("suite runs");
    let elapsed = t.elapsed();
    outcome(
        r.max_error <= FD_TOL && r.instances >= 20 && elapsed < FD_BUDGET,
        format!(
            "max rel {:.2e} <= {FD_TOL:.0e} over {} instances x 5 strategies, {:.2?} < {FD_BUDGET:?}",
            r.max_error, r.instances, elapsed
        ),
    )
}

fn ledger_counts() -> Outcome {
    let unit = PlanFile::parse("input 4 16 8 8\n16 16 3 0.01 standard\n").expect("valid plan");
    let unit_rows = cmd_ledger(&unit, &Strategy::ALL, DType::Double, SEED)
        .expect("ledger")
        .rows();
    let block_rows = cmd_ledger(&default_plan(), &Strategy::ALL, DType::Double, SEED)
        .expect("ledger")
        .rows();
    let counts = |rows: &[iabn_bench::ledger::LedgerRow]| {
        rows.iter()
            .map(|r| r.saved_large_buffers)
            .collect::<Vec<_>>()
    };
    let (u, b) = (counts(&unit_rows), counts(&block_rows));
    let savings_ok = block_rows[1..].iter().all(|r| r.buffer_saving_pct == 50.0);
    outcome(
        u == [2, 1, 1, 1, 1] && b == [6, 3, 3, 3, 3] && savings_ok,
        format!("unit {u:?}, residual block {b:?}, large-buffer saving 50%: {savings_ok}"),
    )
}

fn pass_ordering() -> Outcome {
    let mut shapes = shape_set(DEFAULT_SHAPES).expect("default shape set");
    shapes.extend(shape_set("tiny").expect("tiny set"));
    let mut ok = true;
    let mut seen = Vec::new();
    for s in &shapes {
        let counts = verify::pass_counts::<f64>(s, SEED).expect("counters");
        ok &= verify::ordering_holds(&counts);
        let c: Vec<usize> = counts.iter().map(|(_, c)| *c).collect();
        seen.push(format!("{} {c:?}", s.name));
    }
    outcome(
        ok,
        format!(
            "II < I <= CP < C on {} shapes: {}",
            shapes.len(),
            seen.join(", ")
        ),
    )
}

fn round_trips() -> Outcome {
    let cfg = config();
    let mut worst = 0.0f64;
    let mut ok = true;
    for r in [
        verify::activation_round_trip::<f64>(&cfg),
        verify::affine_round_trip::<f64>(&cfg),
        verify::activation_round_trip::<f32>(&cfg),
        verify::affine_round_trip::<f32>(&cfg),
    ] {
        let r = r.expect("suite runs");
        ok &= r.passed;
        worst = worst.max(r.max_error);
    }
    outcome(
        ok,
        format!("worst {worst:.2} eps <= {ROUND_TRIP_EPS} eps for slopes {:?}, |gamma| >= 0.1, f64 and f32", verify::ROUND_TRIP_SLOPES),
    )
}

fn sync_stats() -> Outcome {
    let r = verify::sync_stats::<f64>(&config()).expect("suite runs");
    outcome(
        r.max_error <= SYNC_TOL && r.instances >= 50,
        format!(
            "max rel {:.2e} <= {SYNC_TOL:.0e} over {} tensors, k in {{2, 4}}",
            r.max_error, r.instances
        ),
    )
}

fn fold() -> Outcome {
    let r = verify::fold::<f64>(&config()).expect("suite runs");
    outcome(
        r.max_error <= FOLD_TOL,
        format!(
            "max rel {:.2e} <= {FOLD_TOL:.0e} over {} 1x1 and 3x3 cases",
            r.max_error, r.instances
        ),
    )
}

fn training_transparency() -> Outcome {
    let t = Instant::now();
    let runs: Vec<_> = [
        Strategy::Standard,
        Strategy::InPlaceAbnI,
        Strategy::InPlaceAbnII,
    ]
    .into_iter()
    .map(|strategy| {
        let cfg = TrainConfig {
            epochs: TRAIN_EPOCHS,
            strategy,
            seed: SEED,
            ..TrainConfig::default()
        };
        cmd_train(&cfg, DType::Double).expect("training runs")
    })
    .collect();
    let elapsed = t.elapsed();
    let reference = &runs[0].step_losses;
    let mut max_rel = 0.0f64;
    for r in &runs[1..] {
        assert_eq!(r.step_losses.len(), reference.len());
        for (a, b) in r.step_losses.iter().zip(reference) {
            max_rel = max_rel.max((a - b).abs() / b.abs().max(f64::MIN_POSITIVE));
        }
    }
    let accuracy = runs
        .iter()
        .map(|r| r.final_test_accuracy())
        .fold(1.0, f64::min);
    outcome(
        max_rel <= TRAIN_TOL && accuracy >= TRAIN_ACCURACY && elapsed < TRAIN_BUDGET,
        format!(
            "per-step loss max rel {max_rel:.2e} <= {TRAIN_TOL:.0e} over {} steps, min test accuracy {:.3} >= {TRAIN_ACCURACY}, {:.2?} < {TRAIN_BUDGET:?}",
            reference.len(),
            accuracy,
            elapsed
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("gradient equivalence", gradient_equivalence),
        ("finite-difference soundness", finite_difference),
        ("memory ledger counts", ledger_counts),
        ("backward pass ordering", pass_ordering),
        ("inversion round trips", round_trips),
        ("sync statistics", sync_stats),
        ("conv+BN folding", fold),
        ("training transparency", training_transparency),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += usize::from(!o.passed);
        println!(
            "criterion {} {:<28} {}  {}",
            i + 1,
            name,
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
