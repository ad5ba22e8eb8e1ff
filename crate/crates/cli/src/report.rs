//! Per-run report files: `# msll-report v1`, `key=value` lines, then one
//! comma-separated row per accepted iteration.

use std::fmt::Write as _;

use msll_core::data_gen::fmt_f64;
use msll_core::optimizer::{EstimationReport, IterationRecord};
use thiserror::Error;

const HEADER: &str = "# msll-report v1";
const TABLE_HEADER: &str = "# iter,alpha,w,level,level_trial,step_norm,sigma,trials";

#[derive(Debug, Error)]
#[error("report line {line}: {msg}")]
pub struct ReportError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRow {
    pub iter: usize,
    pub alpha: f64,
    pub w: f64,
    pub level: f64,
    pub level_trial: f64,
    pub step_norm: f64,
    pub sigma: f64,
    pub trials: usize,
}

impl From<&IterationRecord> for IterationRow {
    fn from(r: &IterationRecord) -> Self {
        IterationRow {
            iter: r.iter,
            alpha: r.alpha,
            w: r.w,
            level: r.level,
            level_trial: r.level_trial,
            step_norm: r.step_norm,
            sigma: r.sigma,
            trials: r.trials,
        }
    }
}

impl IterationRow {
    pub fn descends(&self) -> bool {
        self.level_trial <= self.level
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub model: String,
    pub dataset_seed: u64,
    pub m: usize,
    pub termination: String,
    pub detail: String,
    pub converged: bool,
    pub iterations: usize,
    pub sigma: f64,
    pub p: Vec<f64>,
    pub x0: Vec<f64>,
    pub history: Vec<IterationRow>,
}

impl RunReport {
    pub fn from_estimation(model: &str, dataset_seed: u64, m: usize, est: &EstimationReport) -> Self {
        RunReport {
            model: model.to_string(),
            dataset_seed,
            m,
            termination: est.termination.label().to_string(),
            detail: est.termination.detail().unwrap_or("").replace(['\n', '\r'], " "),
            converged: est.converged(),
            iterations: est.iteration_count(),
            sigma: est.sigma,
            p: est.q.p.iter().copied().collect(),
            x0: est.q.s[0].iter().copied().collect(),
            history: est.iterations.iter().map(IterationRow::from).collect(),
        }
    }

    pub fn descent_violations(&self) -> usize {
        self.history.iter().filter(|r| !r.descends()).count()
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER}");
        let _ = writeln!(out, "model={}", self.model);
        let _ = writeln!(out, "dataset_seed={}", self.dataset_seed);
        let _ = writeln!(out, "m={}", self.m);
        let _ = writeln!(out, "termination={}", self.termination);
        let _ = writeln!(out, "detail={}", self.detail);
        let _ = writeln!(out, "converged={}", self.converged);
        let _ = writeln!(out, "iterations={}", self.iterations);
        let _ = writeln!(out, "sigma={}", fmt_f64(self.sigma));
        let _ = writeln!(out, "p={}", list(&self.p));
        let _ = writeln!(out, "x0={}", list(&self.x0));
        let _ = writeln!(out, "{TABLE_HEADER}");
        for r in &self.history {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.iter,
                fmt_f64(r.alpha),
                fmt_f64(r.w),
                fmt_f64(r.level),
                fmt_f64(r.level_trial),
                fmt_f64(r.step_norm),
                fmt_f64(r.sigma),
                r.trials
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<RunReport, ReportError> {
        let err = |line: usize, msg: String| ReportError { line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim_end() == HEADER => {}
            _ => return Err(err(1, "missing report header".into())),
        }

        let mut fields = std::collections::HashMap::new();
        let mut table_line = None;
        for (no, line) in lines.by_ref() {
            if line.trim_end() == TABLE_HEADER {
                table_line = Some(no);
                break;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err(no, format!("expected key=value, got '{line}'")))?;
            fields.insert(k.to_string(), (no, v.to_string()));
        }
        let table_line = table_line.ok_or_else(|| err(0, "missing iteration table".into()))?;

        let get = |k: &str| fields.get(k).ok_or_else(|| err(table_line, format!("missing key '{k}'")));
        fn num<T: std::str::FromStr>(k: &str, (no, v): &(usize, String)) -> Result<T, ReportError> {
            v.parse().map_err(|_| ReportError { line: *no, msg: format!("bad value for {k}: '{v}'") })
        }
        let list = |k: &str| -> Result<Vec<f64>, ReportError> {
            let (no, v) = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|s| s.parse().map_err(|_| err(*no, format!("bad value in {k}: '{s}'")))).collect()
        };

        let mut history = Vec::new();
        for (no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(err(no, format!("expected 8 fields, got {}", f.len())));
            }
            let bad = |_| err(no, "bad number in iteration row".into());
            history.push(IterationRow {
                iter: f[0].parse().map_err(|_| err(no, "bad iteration index".into()))?,
                alpha: f[1].parse().map_err(bad)?,
                w: f[2].parse().map_err(bad)?,
                level: f[3].parse().map_err(bad)?,
                level_trial: f[4].parse().map_err(bad)?,
                step_norm: f[5].parse().map_err(bad)?,
                sigma: f[6].parse().map_err(bad)?,
                trials: f[7].parse().map_err(|_| err(no, "bad trial count".into()))?,
            });
        }

        Ok(RunReport {
            model: get("model")?.1.clone(),
            dataset_seed: num("dataset_seed", get("dataset_seed")?)?,
            m: num("m", get("m")?)?,
            termination: get("termination")?.1.clone(),
            detail: get("detail")?.1.clone(),
            converged: num("converged", get("converged")?)?,
            iterations: num("iterations", get("iterations")?)?,
            sigma: num("sigma", get("sigma")?)?,
            p: list("p")?,
            x0: list("x0")?,
            history,
        })
    }
}
