//! Command-line surface. Every experiment knob is optional here; resolution
//! against config files and defaults happens in [`crate::plan`].

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "mlopt", version, about = "Multilevel optimization experiment driver")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Three-level market game driven by a chosen hypergradient estimator.
    Stackelberg(StackelbergArgs),
    /// Regularization search against a data-poisoning adversary on the wine
    /// quality table.
    Hyperopt(HyperoptArgs),
    /// Built-in verification suites; exits 3 when any check fails.
    Verify(VerifyArgs),
    /// Measure per-step estimator cost next to published reference ratios.
    Bench(BenchArgs),
}

#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// TOML config file; command-line flags override file values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output CSV file (single run) or directory (run matrices). Defaults to
    /// the `runs` directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Hypergradient estimators, comma separated: id, fd, vgd.
    #[arg(long, value_delimiter = ',')]
    pub method: Vec<String>,
    /// Seeds, comma separated; falls back to MLOPT_SEED, then 0.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Outer optimization steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Worker threads for independent (method, seed) runs.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Initial top-level learning rate.
    #[arg(long)]
    pub lr_outer: Option<f64>,
    /// Per-step decay factor of the top-level learning rate.
    #[arg(long)]
    pub lr_outer_decay: Option<f64>,
    /// Lower-level gradient step size.
    #[arg(long)]
    pub lr_inner: Option<f64>,
    /// Inner update rounds per level, outermost first, e.g. 30,3.
    #[arg(long, value_delimiter = ',')]
    pub schedule: Vec<usize>,
    /// Linear solver for implicit systems: direct or cg.
    #[arg(long)]
    pub solve: Option<String>,
    /// Iteration cap for the cg solver.
    #[arg(long)]
    pub cg_iters: Option<usize>,
}

#[derive(Args, Debug)]
pub struct StackelbergArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Coordinates per player.
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Args, Debug)]
pub struct HyperoptArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory holding winequality-red.csv.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Residual tolerance for the f1_inference column.
    #[arg(long)]
    pub inference_tol: Option<f64>,
    /// Inner-round budget for each inference pass.
    #[arg(long)]
    pub inference_max_rounds: Option<usize>,
    /// Base step size for inference passes (default: the training lr-inner;
    /// stiff levels are capped below it automatically).
    #[arg(long)]
    pub inference_lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// quadratic, stackelberg, theorem4, or all.
    #[arg(long, default_value = "all")]
    pub suite: String,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Coordinates per player in the timed market game.
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    /// Timed steps per estimator (after two untimed warm-ups).
    #[arg(long, default_value_t = 7)]
    pub repeats: usize,
    /// Seed for the initial stack; falls back to MLOPT_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optional CSV for the measured rows.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
