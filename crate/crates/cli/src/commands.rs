use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use msll_core::data_gen::{batch_generate, fmt_f64, simulate_truth, Dataset, TruthTrajectory, TRUTH_STEP};
use msll_core::ll_integrator::integrate_segment;
use msll_core::optimizer::{estimate, EstimationReport};
use msll_core::shooting::{AugmentedParams, ShootingConfig, ShootingProblem};
use msll_core::OdeModel;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::report::RunReport;
use crate::summary::Summary;

pub fn truth<'a>(cfg: &ExperimentConfig, model: &'a dyn OdeModel) -> Result<TruthTrajectory<'a>> {
    simulate_truth(model, &cfg.x0_true(), &cfg.p_true(), cfg.t0, cfg.t_end, TRUTH_STEP).context("reference trajectory")
}

pub fn dataset_name(stem: &str, batch: usize, realization: usize) -> String {
    format!("{stem}_b{}_r{}.csv", batch + 1, realization + 1)
}

/// Writes every dataset of the (scaled) batch protocol into `out_dir`.
pub fn simulate(cfg: &ExperimentConfig, stem: &str, out_dir: &Path, scale: Option<f64>) -> Result<Vec<PathBuf>> {
    let model = cfg.model();
    let truth = truth(cfg, model.as_ref())?;
    let sets = batch_generate(&truth, cfg.sigma, cfg.n, &cfg.protocol(scale))?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut paths = Vec::new();
    for (b, batch) in sets.iter().enumerate() {
        for (r, ds) in batch.iter().enumerate() {
            let path = out_dir.join(dataset_name(stem, b, r));
            ds.write_file(&path).with_context(|| format!("writing {}", path.display()))?;
            paths.push(path);
        }
    }
    Ok(paths)
}

pub struct Fit<'a> {
    pub problem: ShootingProblem<'a>,
    pub q0: AugmentedParams,
    pub report: EstimationReport,
}

/// Sets up the shooting problem for `ds` as the config prescribes and runs
/// the estimator from `p0`.
pub fn fit<'a>(cfg: &ExperimentConfig, model: &'a dyn OdeModel, ds: &'a Dataset) -> Result<Fit<'a>> {
    ensure!(
        ds.obs_dim() == model.obs_dim(),
        "dataset has {} observed components, model '{}' expects {}",
        ds.obs_dim(),
        model.name(),
        model.obs_dim()
    );
    let mut shooting = ShootingConfig::from_observation_times(&ds.times, cfg.t0, cfg.t_end, cfg.m)?;
    if cfg.fixed_x0 {
        shooting = shooting.with_fixed_x0(cfg.x0_true());
    }
    let problem = ShootingProblem::new(model, &ds.times, &ds.observations, shooting, cfg.integrator_options())?;
    let q0 = problem.initial_values(cfg.p0());
    let report = estimate(&problem, q0.clone(), cfg.sigma0, &cfg.optimizer_options())?;
    Ok(Fit { problem, q0, report })
}

fn failed_run(cfg: &ExperimentConfig, ds: &Dataset, err: &anyhow::Error) -> RunReport {
    RunReport {
        model: cfg.model().name().to_string(),
        dataset_seed: ds.meta.seed,
        m: cfg.m,
        termination: "error".into(),
        detail: format!("{err:#}").replace(['\n', '\r'], " "),
        converged: false,
        iterations: 0,
        sigma: f64::NAN,
        p: cfg.p0.clone(),
        x0: vec![f64::NAN; cfg.x0_true.len()],
        history: Vec::new(),
    }
}

/// One estimation turned into a report; setup errors become a failed run.
pub fn run_one(cfg: &ExperimentConfig, ds: &Dataset) -> RunReport {
    let model = cfg.model();
    match fit(cfg, model.as_ref(), ds) {
        Ok(f) => RunReport::from_estimation(model.name(), ds.meta.seed, cfg.m, &f.report),
        Err(e) => failed_run(cfg, ds, &e),
    }
}

/// `<report>.traj.csv` next to the report.
pub fn trajectory_path(report_path: &Path) -> PathBuf {
    let stem = report_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    report_path.with_file_name(format!("{stem}.traj.csv"))
}

/// Plot data: truth, observations (in the columns of the observed states),
/// and the piecewise trajectories at the initial guess and the estimate.
pub fn trajectory_csv(cfg: &ExperimentConfig, fit: &Fit, ds: &Dataset) -> Result<String> {
    let model = fit.problem.model;
    let d = model.state_dim();
    let mut out = String::from("series,segment,t");
    for j in 1..=d {
        let _ = write!(out, ",x_{j}");
    }
    out.push('\n');
    let row = |out: &mut String, series: &str, seg: usize, t: f64, x: &[Option<f64>]| {
        let _ = write!(out, "{series},{seg},{}", fmt_f64(t));
        for v in x {
            out.push(',');
            if let Some(v) = v {
                out.push_str(&fmt_f64(*v));
            }
        }
        out.push('\n');
    };

    let samples = 2000;
    let truth = truth(cfg, model)?;
    for k in 0..=samples {
        let t = cfg.t0 + (cfg.t_end - cfg.t0) * k as f64 / samples as f64;
        let x = truth.state_at(t)?;
        row(&mut out, "truth", 0, t, &x.iter().map(|v| Some(*v)).collect::<Vec<_>>());
    }

    let observed = model.observed_states().unwrap_or_else(|| (0..model.obs_dim().min(d)).collect());
    for (t, z) in ds.times.iter().zip(&ds.observations) {
        let mut x = vec![None; d];
        for (j, &state) in observed.iter().enumerate() {
            x[state] = Some(z[j]);
        }
        row(&mut out, "observations", 0, *t, &x);
    }

    let nodes = &fit.problem.config.node_times;
    let per_segment = (samples / (nodes.len() - 1)).max(20);
    for (series, q) in [("initial", &fit.q0), ("final", &fit.report.q)] {
        for k in 0..nodes.len() - 1 {
            let (a, b) = (nodes[k], nodes[k + 1]);
            let req: Vec<f64> = (1..per_segment).map(|i| a + (b - a) * i as f64 / per_segment as f64).collect();
            // segments that cannot be integrated (e.g. at a poor guess) are left out
            let Ok(sol) = integrate_segment(model, &q.s[k], &q.p, a, b, &req, &fit.problem.integrator) else {
                continue;
            };
            row(&mut out, series, k, a, &q.s[k].iter().map(|v| Some(*v)).collect::<Vec<_>>());
            for (&t, &i) in req.iter().zip(&sol.grid.required) {
                row(&mut out, series, k, t, &sol.states[i].iter().map(|v| Some(*v)).collect::<Vec<_>>());
            }
            row(&mut out, series, k, b, &sol.end_state().iter().map(|v| Some(*v)).collect::<Vec<_>>());
        }
    }
    Ok(out)
}

/// Runs one estimation, writes the report and the trajectory file.
pub fn estimate_file(cfg: &ExperimentConfig, dataset: &Path, report_path: &Path) -> Result<RunReport> {
    let ds = Dataset::read_file(dataset).with_context(|| format!("reading {}", dataset.display()))?;
    let model = cfg.model();
    let fit = fit(cfg, model.as_ref(), &ds)?;
    let report = RunReport::from_estimation(model.name(), ds.meta.seed, cfg.m, &fit.report);
    if let Some(dir) = report_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(report_path, report.to_text()).with_context(|| format!("writing {}", report_path.display()))?;
    let traj = trajectory_path(report_path);
    std::fs::write(&traj, trajectory_csv(cfg, &fit, &ds)?).with_context(|| format!("writing {}", traj.display()))?;
    Ok(report)
}

pub fn run_report_name(batch: usize, realization: usize) -> String {
    format!("b{}_r{}.report", batch + 1, realization + 1)
}

/// Estimations for the whole protocol, as `[batch][realization]`.
pub fn run_protocol(cfg: &ExperimentConfig, jobs: usize, scale: Option<f64>) -> Result<Vec<Vec<RunReport>>> {
    let model = cfg.model();
    let truth = truth(cfg, model.as_ref())?;
    let sets = batch_generate(&truth, cfg.sigma, cfg.n, &cfg.protocol(scale))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    Ok(pool.install(|| sets.par_iter().map(|batch| batch.par_iter().map(|ds| run_one(cfg, ds)).collect()).collect()))
}

/// Runs the protocol and writes `runs/b<j>_r<i>.report` and `summary.csv`.
pub fn benchmark(cfg: &ExperimentConfig, out_dir: &Path, jobs: usize, scale: Option<f64>) -> Result<Summary> {
    let reports = run_protocol(cfg, jobs, scale)?;
    let runs = out_dir.join("runs");
    std::fs::create_dir_all(&runs).with_context(|| format!("creating {}", runs.display()))?;
    for (b, batch) in reports.iter().enumerate() {
        for (r, rep) in batch.iter().enumerate() {
            let path = runs.join(run_report_name(b, r));
            std::fs::write(&path, rep.to_text()).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    let summary = Summary::from_reports(&reports)?;
    let path = out_dir.join("summary.csv");
    std::fs::write(&path, summary.to_text()).with_context(|| format!("writing {}", path.display()))?;
    Ok(summary)
}

/// Re-reads `runs/*.report` from a benchmark directory and aggregates them.
pub fn summarize_dir(out_dir: &Path) -> Result<Summary> {
    let runs = out_dir.join("runs");
    let mut grid: Vec<Vec<Option<RunReport>>> = Vec::new();
    for entry in std::fs::read_dir(&runs).with_context(|| format!("reading {}", runs.display()))? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some((b, r)) = name
            .strip_suffix(".report")
            .and_then(|s| s.strip_prefix('b'))
            .and_then(|s| s.split_once("_r"))
            .and_then(|(b, r)| Some((b.parse::<usize>().ok()?.checked_sub(1)?, r.parse::<usize>().ok()?.checked_sub(1)?)))
        else {
            continue;
        };
        let text = std::fs::read_to_string(&path)?;
        let rep = RunReport::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        if grid.len() <= b {
            grid.resize(b + 1, Vec::new());
        }
        if grid[b].len() <= r {
            grid[b].resize(r + 1, None);
        }
        grid[b][r] = Some(rep);
    }
    let reports = grid
        .into_iter()
        .enumerate()
        .map(|(b, batch)| {
            batch
                .into_iter()
                .enumerate()
                .map(|(r, rep)| rep.with_context(|| format!("missing {}", run_report_name(b, r))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Summary::from_reports(&reports)
}
