//! The BN+Act(+Conv) building block under five memory strategies.
//!
//! All strategies compute the same outputs and gradients. They differ in
//! what they keep between forward and backward ([`BufferLedger`]) and in how
//! much elementwise work the backward pass repeats ([`ExecCounters`]).

mod block;
mod ledger;
mod plan;
mod unit;

pub use block::{
    block_backward, block_forward, residual_stack_backward, residual_stack_forward, BlockParams,
    BlockSaved, StackGrads,
};
pub use ledger::{
    ledger_report, BufferClass, BufferLedger, LayerSummary, LedgerEntry, LedgerReport,
};
pub use plan::{BlockPlan, ConvSpec, LayerSpec, PlanFile, Strategy};
pub use unit::{
    unit_backward, unit_forward, BatchStatsRecord, ExecCounters, LayerGrads, LayerParams, Trace,
    UnitSaved,
};
