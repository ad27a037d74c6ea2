//! Console-facing verification and bench commands.

use mlopt::error::DataError;
use mlopt::experiments::{build_stackelberg, timing_bench, StackelbergSpec, REFERENCE_RATIOS};
use mlopt::optim::SolverConfig;
use mlopt::verify::{run_suite, Suite};
use mlopt::{Error, Result};

use crate::args::{BenchArgs, VerifyArgs};
use crate::env_seed;
use crate::runcmd::market_init;

pub fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    let suite: Suite = args.suite.parse().map_err(Error::Config)?;
    let rows = run_suite(suite)?;
    let mut failed = 0usize;
    for row in &rows {
        let tag = if row.pass {
            "PASS"
        } else {
            failed += 1;
            "FAIL"
        };
        println!("[{tag}] {}: {}", row.name, row.detail);
    }
    println!("suite '{suite}': {} checks, {failed} failed", rows.len());
    Ok(if failed == 0 { 0 } else { 3 })
}

pub fn cmd_bench(args: &BenchArgs) -> Result<i32> {
    if args.dim == 0 {
        return Err(Error::Config("dim must be >= 1".into()));
    }
    let problem = build_stackelberg(&StackelbergSpec { dim: args.dim })?;
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let init = market_init(&problem, seed);
    let base = SolverConfig::default();
    let rows = timing_bench(&problem, &init, &base, args.repeats)?;

    println!("{:>6} {:>14} {:>10} {:>10}", "method", "mean_micros", "ratio", "reference");
    for row in &rows {
        let reference =
            row.reference_ratio.map(|r| format!("{r:.1}")).unwrap_or_else(|| "-".into());
        println!(
            "{:>6} {:>14.1} {:>10.3} {:>10}",
            row.method.to_string(),
            row.mean_micros,
            row.ratio,
            reference
        );
    }
    // Reference-only rows for estimators this crate does not implement.
    for (name, reference) in REFERENCE_RATIOS {
        if !rows.iter().any(|r| r.method.to_string() == name) {
            println!("{name:>6} {:>14} {:>10} {reference:>10.1}", "-", "-");
        }
    }

    if let Some(out) = &args.out {
        let mut w = csv::Writer::from_path(out).map_err(|e| {
            Error::Data(DataError::Io {
                path: out.display().to_string(),
                source: std::io::Error::other(e),
            })
        })?;
        w.write_record(["method", "mean_micros", "ratio", "reference_ratio"])
            .and_then(|()| {
                for row in &rows {
                    w.write_record([
                        row.method.to_string(),
                        row.mean_micros.to_string(),
                        row.ratio.to_string(),
                        row.reference_ratio.map(|r| r.to_string()).unwrap_or_default(),
                    ])?;
                }
                Ok(())
            })
            .map_err(|e| {
                Error::Data(DataError::Io {
                    path: out.display().to_string(),
                    source: std::io::Error::other(e),
                })
            })?;
        w.flush().map_err(|e| {
            Error::Data(DataError::Io { path: out.display().to_string(), source: e })
        })?;
        println!("wrote {}", out.display());
    }
    Ok(0)
}
