//! Sweeps over sample size and task count for every configured method.

use std::time::Instant;

use mmdag::benchgen::{evaluate, generate_benchmark};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::io::{fmt_f64, write_csv, Meta};
use crate::methods::{fit_method, Method, TaskData};

/// One fit of one method on one generated benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub seed: u64,
    pub samples: usize,
    pub tasks: usize,
    pub nodes: usize,
    pub f1: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub fdr: f64,
    pub converged: bool,
    /// `ok`, or the failure message.
    pub status: String,
    pub wall_seconds: Option<f64>,
}

impl ResultRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Mean and sample standard deviation per `(method, N, L)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub samples: usize,
    pub tasks: usize,
    pub nodes: usize,
    pub count: usize,
    pub failures: usize,
    pub converged: usize,
    pub f1: (f64, f64),
    pub tpr: (f64, f64),
    pub fpr: (f64, f64),
    pub fdr: (f64, f64),
}

/// Runs all methods on one generated benchmark.
pub fn run_unit(cfg: &ExperimentConfig, samples: usize, tasks: usize, seed: u64, timing: bool) -> Result<Vec<ResultRow>> {
    let gen = cfg.benchmark.generator(seed, Some(samples), Some(tasks));
    let (truth, data) = generate_benchmark(&gen)?;
    let task_data: Vec<TaskData> = data
        .into_iter()
        .map(|d| TaskData {
            task_id: d.task_id,
            nodes: d.nodes,
        })
        .collect();
    let mut hp_cfg = cfg.clone();
    hp_cfg.hyperparams.seed = seed;
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        let start = Instant::now();
        let outcome = fit_method(&task_data, &hp_cfg, method);
        let wall = timing.then(|| start.elapsed().as_secs_f64());
        let mut row = ResultRow {
            method,
            seed,
            samples,
            tasks,
            nodes: gen.nodes,
            f1: f64::NAN,
            tpr: f64::NAN,
            fpr: f64::NAN,
            fdr: f64::NAN,
            converged: false,
            status: "ok".to_string(),
            wall_seconds: wall,
        };
        match outcome {
            Ok(result) => {
                let graphs: Vec<_> = result.tasks.iter().map(|t| t.adjacency.clone()).collect();
                let m = evaluate(&graphs, &truth)?.micro;
                row.f1 = m.f1;
                row.tpr = m.tpr;
                row.fpr = m.fpr;
                row.fdr = m.fdr;
                row.converged = result.converged;
            }
            Err(e) => row.status = e.to_string(),
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Every `(N, L, seed)` unit on a pool of `jobs` workers; rows come back in
/// grid order regardless of scheduling.
pub fn run_bench(cfg: &ExperimentConfig, jobs: usize, timing: bool) -> Result<Vec<ResultRow>> {
    let mut units = Vec::new();
    for &n in &cfg.sweep.samples {
        for &l in &cfg.sweep.tasks {
            for &seed in &cfg.benchmark.seeds {
                units.push((n, l, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::validation(format!("cannot start {jobs} workers: {e}")))?;
    let results: Vec<Result<Vec<ResultRow>>> = pool.install(|| {
        units
            .par_iter()
            .map(|&(n, l, seed)| run_unit(cfg, n, l, seed, timing))
            .collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates rows per cell, in method-then-grid order.
pub fn summarize(cfg: &ExperimentConfig, rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for &method in &cfg.methods {
        for &n in &cfg.sweep.samples {
            for &l in &cfg.sweep.tasks {
                let cell: Vec<&ResultRow> = rows
                    .iter()
                    .filter(|r| r.method == method && r.samples == n && r.tasks == l)
                    .collect();
                let ok: Vec<&&ResultRow> = cell.iter().filter(|r| r.ok()).collect();
                let col = |f: fn(&ResultRow) -> f64| mean_std(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
                out.push(SummaryRow {
                    method,
                    samples: n,
                    tasks: l,
                    nodes: cfg.benchmark.nodes,
                    count: ok.len(),
                    failures: cell.len() - ok.len(),
                    converged: ok.iter().filter(|r| r.converged).count(),
                    f1: col(|r| r.f1),
                    tpr: col(|r| r.tpr),
                    fpr: col(|r| r.fpr),
                    fdr: col(|r| r.fdr),
                });
            }
        }
    }
    out
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

pub fn write_rows(path: &std::path::Path, meta: &Meta, rows: &[ResultRow]) -> Result<()> {
    let header = strings(&[
        "method", "seed", "N", "L", "P", "F1", "TPR", "FPR", "FDR", "converged", "status", "wall_seconds",
    ]);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.name().to_string(),
                r.seed.to_string(),
                r.samples.to_string(),
                r.tasks.to_string(),
                r.nodes.to_string(),
                fmt_f64(r.f1),
                fmt_f64(r.tpr),
                fmt_f64(r.fpr),
                fmt_f64(r.fdr),
                r.converged.to_string(),
                r.status.clone(),
                r.wall_seconds.map(fmt_f64).unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(path, meta, Some(&header), &body)
}

pub fn write_summary(path: &std::path::Path, meta: &Meta, rows: &[SummaryRow]) -> Result<()> {
    let header = strings(&[
        "method", "N", "L", "P", "count", "failures", "converged", "f1_mean", "f1_std", "tpr_mean", "tpr_std",
        "fpr_mean", "fpr_std", "fdr_mean", "fdr_std",
    ]);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![
                r.method.name().to_string(),
                r.samples.to_string(),
                r.tasks.to_string(),
                r.nodes.to_string(),
                r.count.to_string(),
                r.failures.to_string(),
                r.converged.to_string(),
            ];
            for (m, s) in [r.f1, r.tpr, r.fpr, r.fdr] {
                v.push(fmt_f64(m));
                v.push(fmt_f64(s));
            }
            v
        })
        .collect();
    write_csv(path, meta, Some(&header), &body)
}
