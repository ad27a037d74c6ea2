//! Command-line driver for the multilevel optimization crate: experiment
//! runs that emit trace CSVs with manifest sidecars, built-in verification
//! suites, and a per-step cost bench. Exit codes: 0 success, 2 configuration
//! error, 3 numeric failure, 4 data error (clap uses 2 for usage errors).

use clap::Parser;
use mlopt::Error;

pub mod args;
pub mod plan;
pub mod report;
pub mod runcmd;

pub fn run_cli() -> i32 {
    let cli = args::Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            exit_code(&err)
        }
    }
}

pub fn dispatch(cli: args::Cli) -> mlopt::Result<i32> {
    match cli.command {
        args::Command::Stackelberg(a) => runcmd::cmd_stackelberg(&a),
        args::Command::Hyperopt(a) => runcmd::cmd_hyperopt(&a),
        args::Command::Verify(a) => report::cmd_verify(&a),
        args::Command::Bench(a) => report::cmd_bench(&a),
    }
}

/// Process exit code for an error, looking through step wrappers: bad
/// configuration is 2, broken input data 4, any numeric failure 3.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::AtStep { source, .. } => exit_code(source),
        Error::Config(_) => 2,
        Error::Data(_) => 4,
        _ => 3,
    }
}

/// `MLOPT_SEED` fallback used when neither flags nor a config file pin seeds.
pub fn env_seed() -> mlopt::Result<Option<u64>> {
    match std::env::var("MLOPT_SEED") {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("MLOPT_SEED must be a nonnegative integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}
