//! Layered run configuration: built-in defaults, then an optional TOML file,
//! then command-line flags, most specific last. The resolved plan is a run
//! matrix over (method, seed) pairs sharing one solver configuration.

use std::path::{Path, PathBuf};

use mlopt::linsolve::SolveMode;
use mlopt::optim::{GradientMethod, SolverConfig};
use mlopt::{Error, Result};
use serde::Deserialize;

use crate::args::CommonArgs;
use crate::env_seed;

/// On-disk schema. Every field is optional so files state only what they
/// pin; unknown keys are rejected to catch typos.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dim: Option<usize>,
    pub steps: Option<usize>,
    pub methods: Option<Vec<String>>,
    pub seeds: Option<Vec<u64>>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub inference_tol: Option<f64>,
    pub inference_max_rounds: Option<usize>,
    pub inference_lr: Option<f64>,
    /// Missing solver fields take the built-in defaults.
    pub solver: Option<SolverConfig>,
}

pub fn load_file(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Fully resolved matrix for the experiment commands. `solver.method` and
/// `solver.seed` are placeholders overwritten per run.
#[derive(Clone, Debug)]
pub struct RunPlan {
    pub methods: Vec<GradientMethod>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub out: Option<PathBuf>,
    pub solver: SolverConfig,
}

pub fn resolve_common(args: &CommonArgs) -> Result<(RunPlan, Option<FileConfig>)> {
    let file = args.config.as_deref().map(load_file).transpose()?;
    let fc = file.as_ref();

    let mut solver = fc.and_then(|f| f.solver.clone()).unwrap_or_default();
    if let Some(steps) = fc.and_then(|f| f.steps) {
        solver.outer_steps = steps;
    }
    if let Some(steps) = args.steps {
        solver.outer_steps = steps;
    }
    if let Some(lr) = args.lr_outer {
        solver.lr_outer0 = lr;
    }
    if let Some(d) = args.lr_outer_decay {
        solver.lr_outer_decay = d;
    }
    if let Some(lr) = args.lr_inner {
        solver.lr_inner = lr;
    }
    if !args.schedule.is_empty() {
        solver.inner_schedule = args.schedule.clone();
    }
    if let Some(s) = &args.solve {
        solver.solve = match s.as_str() {
            "direct" => SolveMode::direct(),
            "cg" => SolveMode::cg(solver.solve.cg_iters),
            other => {
                return Err(Error::Config(format!(
                    "unknown solver '{other}' (expected direct or cg)"
                )))
            }
        };
    }
    if let Some(k) = args.cg_iters {
        solver.solve.cg_iters = k;
    }

    let methods = if !args.method.is_empty() {
        parse_methods(&args.method)?
    } else if let Some(names) = fc.and_then(|f| f.methods.as_ref()) {
        parse_methods(names)?
    } else {
        vec![GradientMethod::Id]
    };

    let seeds = if !args.seed.is_empty() {
        args.seed.clone()
    } else if let Some(s) = fc.and_then(|f| f.seeds.clone()) {
        s
    } else if let Some(s) = env_seed()? {
        vec![s]
    } else {
        vec![0]
    };
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(Error::Config(format!("duplicate seeds in {seeds:?}")));
    }

    let jobs = args.jobs.or_else(|| fc.and_then(|f| f.jobs)).unwrap_or(1);
    if jobs == 0 {
        return Err(Error::Config("jobs must be >= 1".into()));
    }
    let out = args.out.clone().or_else(|| fc.and_then(|f| f.out.clone()));

    Ok((RunPlan { methods, seeds, jobs, out, solver }, file))
}

fn parse_methods(names: &[String]) -> Result<Vec<GradientMethod>> {
    let mut methods = Vec::with_capacity(names.len());
    for name in names {
        let m: GradientMethod = name.parse().map_err(Error::Config)?;
        if methods.contains(&m) {
            return Err(Error::Config(format!("method '{m}' listed twice")));
        }
        methods.push(m);
    }
    if methods.is_empty() {
        return Err(Error::Config("at least one method is required".into()));
    }
    Ok(methods)
}
