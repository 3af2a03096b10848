//! Retained-buffer report for a block plan under each strategy.

use inplace_abn::strategies::{ledger_report, BlockPlan, LedgerReport, PlanFile, Strategy};
use inplace_abn::{ActivationFn, DType, Scalar, Shape};
use serde::Serialize;

use crate::bench::{counters_for_plan, PlanRun};
use crate::error::{CliError, Result};

/// Pre-activation bottleneck: 1x1, 3x3 and 1x1 BN+Act+Conv units around an
/// identity skip.
pub fn default_plan() -> PlanFile {
    PlanFile {
        plan: BlockPlan::bottleneck(64, 32, ActivationFn::default(), Strategy::Standard),
        input: Some(Shape::new(4, 64, 16, 16)),
    }
}

pub fn load_plan(path: &std::path::Path) -> Result<PlanFile> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    PlanFile::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerRow {
    pub strategy: String,
    pub saved_large_buffers: usize,
    pub baseline_large_buffers: usize,
    pub buffer_saving_pct: f64,
    pub large_bytes: usize,
    pub small_bytes: usize,
    pub total_bytes: usize,
    pub byte_saving_pct: f64,
    pub backward_passes: usize,
    pub forward_scratch: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct LedgerEntryReport {
    pub report: LedgerReport,
    pub backward_passes: usize,
    pub forward_scratch: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct LedgerOutput {
    pub input: [usize; 4],
    pub dtype: String,
    pub strategies: Vec<LedgerEntryReport>,
}

impl LedgerOutput {
    pub fn rows(&self) -> Vec<LedgerRow> {
        self.strategies
            .iter()
            .map(|e| LedgerRow {
                strategy: e.report.strategy.name().to_string(),
                saved_large_buffers: e.report.saved_large_buffers,
                baseline_large_buffers: e.report.baseline_large_buffers,
                buffer_saving_pct: e.report.buffer_saving_pct,
                large_bytes: e.report.large_bytes,
                small_bytes: e.report.small_bytes,
                total_bytes: e.report.total_bytes,
                byte_saving_pct: e.report.byte_saving_pct,
                backward_passes: e.backward_passes,
                forward_scratch: e.forward_scratch,
            })
            .collect()
    }
}

fn run<T: Scalar>(
    plan: &BlockPlan,
    input: Shape,
    strategy: Strategy,
    seed: u64,
) -> Result<PlanRun> {
    counters_for_plan::<T>(&plan.with_strategy(strategy), input, seed)
}

/// Runs `plan` once per strategy and compares every ledger against Standard.
pub fn cmd_ledger(
    file: &PlanFile,
    strategies: &[Strategy],
    dtype: DType,
    seed: u64,
) -> Result<LedgerOutput> {
    let input = file
        .input
        .unwrap_or_else(|| Shape::new(4, file.plan.in_channels(), 16, 16));
    let go = |s| match dtype {
        DType::Double => run::<f64>(&file.plan, input, s, seed),
        DType::Single => run::<f32>(&file.plan, input, s, seed),
    };
    let baseline = go(Strategy::Standard)?;
    let mut out = Vec::with_capacity(strategies.len());
    for &s in strategies {
        let r = if s == Strategy::Standard {
            baseline.clone()
        } else {
            go(s)?
        };
        out.push(LedgerEntryReport {
            report: ledger_report(s, &r.trace.ledger, &baseline.trace.ledger),
            backward_passes: r.trace.counters.backward_passes,
            forward_scratch: r.trace.counters.forward_scratch,
        });
    }
    Ok(LedgerOutput {
        input: [input.n, input.c, input.h, input.w],
        dtype: dtype.name().to_string(),
        strategies: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bottleneck_six_versus_three() {
        let out = cmd_ledger(&default_plan(), &Strategy::ALL, DType::Double, 0).unwrap();
        let counts: Vec<usize> = out.rows().iter().map(|r| r.saved_large_buffers).collect();
        assert_eq!(counts, vec![6, 3, 3, 3, 3]);
        assert!(out.rows()[1..].iter().all(|r| r.buffer_saving_pct == 50.0));
    }

    #[test]
    fn single_layer_two_versus_one() {
        let file = PlanFile::parse("input 2 4 4 4\n4 - 1 0.01 standard\n").unwrap();
        let out = cmd_ledger(
            &file,
            &[Strategy::Standard, Strategy::InPlaceAbnII],
            DType::Single,
            0,
        )
        .unwrap();
        let rows = out.rows();
        assert_eq!(
            (rows[0].saved_large_buffers, rows[1].saved_large_buffers),
            (2, 1)
        );
        assert_eq!(out.dtype, "single");
    }

    #[test]
    fn checkpointing_variants_differ_only_in_recompute() {
        let out = cmd_ledger(
            &default_plan(),
            &[Strategy::Checkpointing, Strategy::CheckpointingProposed],
            DType::Double,
            0,
        )
        .unwrap();
        let rows = out.rows();
        assert_eq!(rows[0].saved_large_buffers, rows[1].saved_large_buffers);
        assert!(rows[0].backward_passes > rows[1].backward_passes);
    }
}
