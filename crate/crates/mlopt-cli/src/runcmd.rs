//! Experiment execution: resolve the run matrix, drive each (method, seed)
//! pair, and write one trace CSV plus one TOML manifest sidecar per run.
//! Traces are byte-identical across repeats except for the wall_micros
//! column; manifests additionally carry wall-clock timestamps.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use mlopt::error::DataError;
use mlopt::experiments::{
    build_hyperopt, build_stackelberg, inference_run_from, load_wine, split, Dataset,
    HyperoptSpec, InferenceConfig, StackelbergSpec, WineVariant,
};
use mlopt::model::{MultilevelProblem, PointStack};
use mlopt::optim::{run, run_observed, GradientMethod, SolverConfig, TraceRecord};
use mlopt::{Error, Result};
use ndarray::Array1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::args::{HyperoptArgs, StackelbergArgs};
use crate::plan::{resolve_common, RunPlan};

pub const TRACE_HEADER: [&str; 6] =
    ["step", "f1", "grad_norm_sq", "cum_avg_grad_sq", "mse", "wall_micros"];

pub const DEFAULT_VALID_ROWS: usize = 100;
pub const DEFAULT_TRAIN_ROWS: usize = 40;
pub const DEFAULT_INFERENCE_TOL: f64 = 1e-6;
pub const DEFAULT_INFERENCE_MAX_ROUNDS: usize = 200_000;

/// Everything a finished run reports back to the console.
#[derive(Debug)]
pub struct RunOutcome {
    pub method: GradientMethod,
    pub seed: u64,
    pub csv_path: PathBuf,
    pub rows: usize,
    pub final_f1: Option<f64>,
    pub final_mse: Option<f64>,
}

/// Sidecar recording exactly how a trace was produced; `toml` round-trips it
/// losslessly so reruns can be reconstructed from the manifest alone.
#[derive(Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub method: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference_lr: Option<f64>,
    pub trace_path: String,
    pub rows: usize,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub solver: SolverConfig,
}

/// Per-run payload handed back by the command-specific closures.
pub struct RunData {
    pub trace: Vec<TraceRecord>,
    /// Converged top objective per step where an inference pass ran (first
    /// and final steps); `Some` even when sparse so the column is emitted.
    pub inference: Option<Vec<Option<f64>>>,
}

/// Extra manifest fields shared by every run of one command invocation.
#[derive(Clone, Default)]
pub struct ManifestExtra {
    pub dim: Option<usize>,
    pub data_dir: Option<String>,
    pub inference_tol: Option<f64>,
    pub inference_lr: Option<f64>,
}

pub fn cmd_stackelberg(args: &StackelbergArgs) -> Result<i32> {
    let (plan, file) = resolve_common(&args.common)?;
    let dim = args.dim.or_else(|| file.as_ref().and_then(|f| f.dim)).unwrap_or(1);
    if dim == 0 {
        return Err(Error::Config("dim must be >= 1".into()));
    }
    let spec = StackelbergSpec { dim };
    let problem = build_stackelberg(&spec)?;
    let reference = mlopt::experiments::stackelberg::reference_optimum(dim);

    let extra = ManifestExtra { dim: Some(dim), ..ManifestExtra::default() };
    let outcomes = execute_matrix(&plan, "stackelberg", &extra, |method, seed| {
        let mut cfg = plan.solver.clone();
        cfg.method = method;
        cfg.seed = seed;
        let init = market_init(&problem, seed);
        let trace = run(&problem, Some(&reference), &init, &cfg)?;
        Ok(RunData { trace, inference: None })
    })?;
    print_outcomes("stackelberg", &outcomes);
    Ok(0)
}

pub fn cmd_hyperopt(args: &HyperoptArgs) -> Result<i32> {
    let (plan, file) = resolve_common(&args.common)?;
    if plan.methods.contains(&GradientMethod::Vgd) {
        return Err(Error::Config(
            "method 'vgd' cannot drive this search: the validation loss does not depend on \
             the regularization strength directly, so the partial gradient is identically \
             zero and the iterate never moves; use id or fd"
                .into(),
        ));
    }
    let data_dir = args
        .data_dir
        .clone()
        .or_else(|| file.as_ref().and_then(|f| f.data_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("data"));
    let inference_tol = args
        .inference_tol
        .or_else(|| file.as_ref().and_then(|f| f.inference_tol))
        .unwrap_or(DEFAULT_INFERENCE_TOL);
    let inference_max_rounds = args
        .inference_max_rounds
        .or_else(|| file.as_ref().and_then(|f| f.inference_max_rounds))
        .unwrap_or(DEFAULT_INFERENCE_MAX_ROUNDS);
    let inference_lr = args
        .inference_lr
        .or_else(|| file.as_ref().and_then(|f| f.inference_lr))
        .unwrap_or(plan.solver.lr_inner);
    if !(inference_lr > 0.0 && inference_lr.is_finite()) {
        return Err(Error::Config(format!(
            "inference lr must be positive and finite, got {inference_lr}"
        )));
    }

    let dataset = load_wine(&data_dir, WineVariant::Red)?;
    let extra = ManifestExtra {
        data_dir: Some(data_dir.display().to_string()),
        inference_tol: Some(inference_tol),
        inference_lr: Some(inference_lr),
        ..ManifestExtra::default()
    };
    let outcomes = execute_matrix(&plan, "hyperopt", &extra, |method, seed| {
        let mut cfg = plan.solver.clone();
        cfg.method = method;
        cfg.seed = seed;
        run_hyperopt_once(&dataset, &cfg, inference_tol, inference_max_rounds, inference_lr)
    })?;
    print_outcomes("hyperopt", &outcomes);
    Ok(0)
}

/// One full hyperopt run: seed-dependent split, all-zero initial stack, and
/// a converged-objective measurement after the first and final outer updates
/// (an inference pass costs thousands of solve rounds, so it brackets the
/// trajectory instead of following it).
pub fn run_hyperopt_once(
    dataset: &Dataset,
    cfg: &SolverConfig,
    inference_tol: f64,
    inference_max_rounds: usize,
    inference_lr: f64,
) -> Result<RunData> {
    let split = split(dataset, DEFAULT_VALID_ROWS, DEFAULT_TRAIN_ROWS, cfg.seed)?;
    let problem = build_hyperopt(&split, &HyperoptSpec::default())?;
    let init = problem.zero_point();
    let mut inner = cfg.clone();
    inner.lr_inner = inference_lr;
    let inf_cfg = InferenceConfig {
        tol: inference_tol,
        max_rounds: inference_max_rounds,
        inner,
    };
    let mut inference = Vec::with_capacity(cfg.outer_steps);
    let trace = run_observed(&problem, None, &init, cfg, |step, stack| {
        let bracket = step == 0 || step + 1 == cfg.outer_steps;
        let value = if bracket {
            Some(inference_run_from(&problem, stack, &inf_cfg)?.f1)
        } else {
            None
        };
        inference.push(value);
        Ok(())
    })?;
    Ok(RunData { trace, inference: Some(inference) })
}

/// Zero top level; every lower level uniform on [0, 0.5), drawn in level
/// order from a seed-keyed generator.
pub fn market_init(problem: &MultilevelProblem, seed: u64) -> PointStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = problem.dims().to_vec();
    let mut values = vec![Array1::zeros(dims[0])];
    for &d in &dims[1..] {
        values.push(Array1::from_shape_fn(d, |_| rng.random_range(0.0..0.5)));
    }
    PointStack::new(values)
}

/// Run every (method, seed) pair, `plan.jobs` at a time, writing the trace
/// and manifest as each run finishes. Outcomes come back in matrix order and
/// the first failure (in that order) is reported.
pub fn execute_matrix<F>(
    plan: &RunPlan,
    command: &str,
    extra: &ManifestExtra,
    run_one: F,
) -> Result<Vec<RunOutcome>>
where
    F: Fn(GradientMethod, u64) -> Result<RunData> + Sync,
{
    let combos: Vec<(GradientMethod, u64)> = plan
        .methods
        .iter()
        .flat_map(|m| plan.seeds.iter().map(move |s| (*m, *s)))
        .collect();
    let paths = combo_paths(plan, command, &combos)?;

    let execute_one = |idx: usize| -> Result<RunOutcome> {
        let (method, seed) = combos[idx];
        let started = unix_ms();
        let data = run_one(method, seed)?;
        let finished = unix_ms();
        write_trace(&paths[idx], &data)?;
        let mut solver = plan.solver.clone();
        solver.method = method;
        solver.seed = seed;
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            method: method.to_string(),
            seed,
            dim: extra.dim,
            data_dir: extra.data_dir.clone(),
            inference_tol: extra.inference_tol,
            inference_lr: extra.inference_lr,
            trace_path: paths[idx].display().to_string(),
            rows: data.trace.len(),
            started_unix_ms: started,
            finished_unix_ms: finished,
            solver,
        };
        write_manifest(&manifest_path(&paths[idx]), &manifest)?;
        Ok(RunOutcome {
            method,
            seed,
            csv_path: paths[idx].clone(),
            rows: data.trace.len(),
            final_f1: data.trace.last().map(|r| r.f1),
            final_mse: data.trace.last().and_then(|r| r.mse),
        })
    };

    let jobs = plan.jobs.min(combos.len().max(1));
    if jobs <= 1 {
        return (0..combos.len()).map(execute_one).collect();
    }

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunOutcome>>>> =
        Mutex::new((0..combos.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= combos.len() {
                    break;
                }
                let outcome = execute_one(idx);
                slots.lock().unwrap()[idx] = Some(outcome);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("worker pool covered every combo"))
        .collect()
}

/// Output naming: a `.csv` `--out` is honored verbatim for a single run;
/// otherwise `--out` (default `runs`) is a directory holding
/// `<command>_<method>_seed<seed>.csv`.
fn combo_paths(
    plan: &RunPlan,
    command: &str,
    combos: &[(GradientMethod, u64)],
) -> Result<Vec<PathBuf>> {
    let single_file = plan
        .out
        .as_ref()
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .cloned();
    if let Some(path) = single_file {
        if combos.len() > 1 {
            return Err(Error::Config(format!(
                "{} runs requested but --out {} names a single file; pass a directory",
                combos.len(),
                path.display()
            )));
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        return Ok(vec![path]);
    }
    let dir = plan.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    create_dir(&dir)?;
    Ok(combos
        .iter()
        .map(|(m, s)| dir.join(format!("{command}_{m}_seed{s}.csv")))
        .collect())
}

pub fn manifest_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("manifest.toml")
}

fn write_trace(path: &Path, data: &RunData) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    let mut header: Vec<&str> = TRACE_HEADER.to_vec();
    if data.inference.is_some() {
        header.push("f1_inference");
    }
    w.write_record(&header).map_err(|e| io_error(path, e))?;
    for (i, r) in data.trace.iter().enumerate() {
        let mut record = vec![
            r.step.to_string(),
            r.f1.to_string(),
            r.grad_norm_sq.to_string(),
            r.cum_avg_grad_sq.to_string(),
            r.mse.map(|v| v.to_string()).unwrap_or_default(),
            r.wall_micros.to_string(),
        ];
        if let Some(inf) = &data.inference {
            record.push(inf[i].map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&record).map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| Error::Data(DataError::Io {
        path: path.display().to_string(),
        source: e,
    }))?;
    Ok(())
}

fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = toml::to_string_pretty(manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::Data(DataError::Io {
        path: path.display().to_string(),
        source: e,
    }))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(DataError::Io {
        path: path.display().to_string(),
        source: e,
    }))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Data(DataError::Io {
        path: dir.display().to_string(),
        source: e,
    }))
}

fn io_error(path: &Path, e: csv::Error) -> Error {
    Error::Data(DataError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    })
}

fn unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn print_outcomes(command: &str, outcomes: &[RunOutcome]) {
    for o in outcomes {
        let f1 = o.final_f1.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
        let mse = o.final_mse.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "-".into());
        println!(
            "{command} method={} seed={} -> {} ({} rows, final f1 {f1}, final mse {mse})",
            o.method,
            o.seed,
            o.csv_path.display(),
            o.rows
        );
    }
}
