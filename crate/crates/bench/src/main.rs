use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iabn_bench::bench::{self, BenchConfig};
use iabn_bench::output::{csv_string, emit, json_string, Format};
use iabn_bench::train::{DataSource, TrainConfig};
use iabn_bench::verify::VerifyConfig;
use iabn_bench::{ledger, parse_strategies, train, verify, CliError, Result};
use inplace_abn::DType;

#[derive(Debug, Parser)]
#[command(
    name = "iabn",
    version,
    about = "Verify, benchmark and train in-place activated batch norm"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Scalar precision: single or double.
    #[arg(long, global = true, default_value = "double")]
    dtype: DType,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output format: csv or json.
    #[arg(long, global = true, default_value = "csv")]
    format: Format,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the gradient, round-trip, ledger, ordering, sync and fold properties.
    Verify {
        /// Random BN+Act+Conv instances per equivalence property.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Scale backward-from-output BN gradients by 1 + X to force a failure.
        #[arg(long, default_value_t = 0.0, value_name = "X")]
        perturb_dagger: f64,
        /// Shape set for the pass-ordering property.
        #[arg(long, default_value = bench::DEFAULT_SHAPES)]
        shapes: String,
    },
    /// Time forward and backward passes per strategy and shape.
    Bench {
        #[arg(long, default_value = "all")]
        strategy: String,
        #[arg(long, default_value = bench::DEFAULT_SHAPES)]
        shapes: String,
        #[arg(long, default_value_t = bench::DEFAULT_REPS)]
        reps: usize,
        #[arg(long, default_value_t = bench::DEFAULT_WARMUP)]
        warmup: usize,
    },
    /// Train the residual toy classifier and report per-epoch metrics.
    Train {
        #[arg(long, default_value = "inplace_abn_i")]
        strategy: String,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 1e-4)]
        weight_decay: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Binary dataset file; synthetic two-Gaussian data when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Report retained buffers per strategy against Standard.
    Ledger {
        #[arg(long, default_value = "all")]
        strategy: String,
        /// Plan file; the three-unit residual bottleneck when omitted.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
}

fn render<S: serde::Serialize>(rows: &[S], format: Format) -> Result<String> {
    match format {
        Format::Csv => csv_string(rows),
        Format::Json => json_string(rows),
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let out = c.out.as_deref();
    match cli.command {
        Command::Verify {
            instances,
            perturb_dagger,
            shapes,
        } => {
            let mut cfg = VerifyConfig::new(c.seed, bench::shape_set(&shapes)?);
            cfg.instances = instances.max(1);
            cfg.perturb_dagger = perturb_dagger;
            let results = verify::cmd_verify(&cfg, c.dtype)?;
            emit(&render(&results, c.format)?, out)?;
            let failed: Vec<&str> = results
                .iter()
                .filter(|r| !r.passed)
                .map(|r| r.property.as_str())
                .collect();
            for r in &results {
                eprintln!(
                    "{} {:<24} max_error={:.3e} tolerance={:.1e}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.property,
                    r.max_error,
                    r.tolerance
                );
            }
            if !failed.is_empty() {
                return Err(CliError::Verification(failed.join(", ")));
            }
        }
        Command::Bench {
            strategy,
            shapes,
            reps,
            warmup,
        } => {
            let cfg = BenchConfig {
                shapes: bench::shape_set(&shapes)?,
                strategies: parse_strategies(&strategy)?,
                reps,
                warmup,
                dtype: c.dtype,
                seed: c.seed,
            };
            let report = bench::run_bench(&cfg)?;
            let text = match c.format {
                Format::Csv => csv_string(&report.timings)?,
                Format::Json => json_string(&report)?,
            };
            emit(&text, out)?;
            for row in &report.counters {
                let ratio = report
                    .overhead(
                        &row.shape,
                        row.strategy
                            .parse()
                            .map_err(|e: inplace_abn::Error| CliError::Usage(e.to_string()))?,
                    )
                    .map_or("-".to_string(), |r| format!("{r:.3}"));
                eprintln!(
                    "{:<12} {:<24} backward_passes={} saved_large_buffers={} time_vs_standard={}",
                    row.shape, row.strategy, row.backward_passes, row.saved_large_buffers, ratio
                );
            }
        }
        Command::Train {
            strategy,
            epochs,
            lr,
            momentum,
            weight_decay,
            batch_size,
            data,
        } => {
            let strategies = parse_strategies(&strategy)?;
            if strategies.len() != 1 {
                return Err(CliError::Usage("train takes a single strategy".into()));
            }
            let cfg = TrainConfig {
                data: data.map_or(TrainConfig::default().data, DataSource::File),
                epochs,
                lr,
                momentum,
                weight_decay,
                batch_size,
                strategy: strategies[0],
                seed: c.seed,
            };
            let result = train::cmd_train(&cfg, c.dtype)?;
            let text = match c.format {
                Format::Csv => csv_string(&result.epochs)?,
                Format::Json => json_string(&result)?,
            };
            emit(&text, out)?;
        }
        Command::Ledger { strategy, plan } => {
            let file = match plan {
                Some(p) => ledger::load_plan(&p)?,
                None => ledger::default_plan(),
            };
            let report = ledger::cmd_ledger(&file, &parse_strategies(&strategy)?, c.dtype, c.seed)?;
            let text = match c.format {
                Format::Csv => csv_string(&report.rows())?,
                Format::Json => json_string(&report)?,
            };
            emit(&text, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
