//! Harness around the `inplace_abn` kernels: the verification suite, the
//! per-strategy timing benchmark, the retained-buffer ledger report and a
//! small end-to-end training run. The `iabn` binary exposes each as a
//! subcommand.

pub mod bench;
pub mod data;
pub mod error;
pub mod ledger;
pub mod output;
pub mod train;
pub mod verify;

pub use error::{CliError, Result};

use inplace_abn::Strategy;

/// Parses `all` or a single strategy name.
pub fn parse_strategies(s: &str) -> Result<Vec<Strategy>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Strategy::ALL.to_vec());
    }
    s.parse::<Strategy>()
        .map(|s| vec![s])
        .map_err(|e| CliError::Usage(e.to_string()))
}
