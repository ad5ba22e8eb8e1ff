//! Benchmark aggregation: means within each batch over converged runs,
//! then mean and sample standard deviation across batches.

use std::fmt::Write as _;

use anyhow::{bail, ensure, Result};
use msll_core::data_gen::fmt_f64;

use crate::report::RunReport;

const HEADER: &str = "# msll-summary v1";

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub model: String,
    pub m: usize,
    pub batches: usize,
    pub realizations: usize,
    pub runs: usize,
    pub converged: usize,
    pub rows: Vec<SummaryRow>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    match xs.len() {
        0 => (f64::NAN, f64::NAN),
        1 => (xs[0], 0.0),
        n => {
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            (mean, var.sqrt())
        }
    }
}

impl Summary {
    /// `reports[b][r]` holds realization `r` of batch `b`.
    pub fn from_reports(reports: &[Vec<RunReport>]) -> Result<Summary> {
        let Some(first) = reports.first().and_then(|b| b.first()) else {
            bail!("no runs to summarize");
        };
        let realizations = reports[0].len();
        ensure!(reports.iter().all(|b| b.len() == realizations), "batches have different realization counts");
        let (np, d) = (first.p.len(), first.x0.len());
        ensure!(
            reports.iter().flatten().all(|r| r.model == first.model && r.m == first.m && r.p.len() == np && r.x0.len() == d),
            "runs come from different experiments"
        );

        // quantity extractors, in row order
        let mut names: Vec<String> = (1..=np).map(|i| format!("p_{i}")).collect();
        names.extend((1..=d).map(|i| format!("x0_{i}")));
        names.push("sigma".into());
        names.push("iterations".into());
        let values = |r: &RunReport| -> Vec<f64> {
            let mut v = r.p.clone();
            v.extend_from_slice(&r.x0);
            v.push(r.sigma);
            v.push(r.iterations as f64);
            v
        };

        let mut batch_means: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        let mut batch_conv = Vec::with_capacity(reports.len());
        for batch in reports {
            let conv: Vec<&RunReport> = batch.iter().filter(|r| r.converged).collect();
            batch_conv.push(100.0 * conv.len() as f64 / batch.len() as f64);
            if conv.is_empty() {
                continue;
            }
            let mut sums = vec![0.0; names.len()];
            for r in &conv {
                for (s, v) in sums.iter_mut().zip(values(r)) {
                    *s += v;
                }
            }
            for (bm, s) in batch_means.iter_mut().zip(sums) {
                bm.push(s / conv.len() as f64);
            }
        }

        let mut rows: Vec<SummaryRow> = names
            .into_iter()
            .zip(&batch_means)
            .map(|(name, xs)| {
                let (mean, sd) = mean_sd(xs);
                SummaryRow { name, mean, sd }
            })
            .collect();
        let (mean, sd) = mean_sd(&batch_conv);
        rows.push(SummaryRow { name: "conv_percent".into(), mean, sd });

        Ok(Summary {
            model: first.model.clone(),
            m: first.m,
            batches: reports.len(),
            realizations,
            runs: reports.len() * realizations,
            converged: reports.iter().flatten().filter(|r| r.converged).count(),
            rows,
        })
    }

    pub fn row(&self, name: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn conv_percent(&self) -> f64 {
        100.0 * self.converged as f64 / self.runs as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER}");
        let _ = writeln!(
            out,
            "# model={} m={} batches={} realizations={} runs={} converged={}",
            self.model, self.m, self.batches, self.realizations, self.runs, self.converged
        );
        let _ = writeln!(out, "quantity,mean,sd");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.name, fmt_f64(r.mean), fmt_f64(r.sd));
        }
        out
    }
}
