use std::time::Instant;

use mmdag::benchgen::{edge_counts, generate_benchmark, Metrics};
use mmdag::causal_diff::{causal_difference, dcd, edge_difference, OverlapMap};
use mmdag::learner::{fit as fit_problem, Coupling};
use serde::{Deserialize, Serialize};

use crate::bench::{run_bench, summarize, write_rows, write_summary};
use crate::config::{ExperimentConfig, FORMAT_VERSION};
use crate::error::{CliError, Result};
use crate::io::{
    create_dir, fmt_f64, read_dataset, read_fit, write_csv, write_dataset, write_json, write_trace, FitSummary,
    FitTaskEntry, GraphFile, Meta, TruthFile,
};
use crate::methods::{build_problem, Method, TaskData};
use crate::{BenchArgs, CdArgs, CdMode, ConfigArgs, EvalArgs, FitArgs, SynthArgs};

/// File, then `MMDAG_SEED`, then command-line flags; validated.
pub fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env_seed()?;

    let b = &args.benchmark;
    let bs = &mut cfg.benchmark;
    macro_rules! set {
        ($src:expr, $dst:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(b.nodes, bs.nodes);
    set!(b.tasks, bs.tasks);
    set!(b.samples, bs.samples);
    set!(b.basis_size, bs.basis_size);
    set!(b.er_edge_prob, bs.er_edge_prob);
    set!(b.noise_std, bs.noise_std);
    set!(b.grid_len, bs.grid_len);
    if let Some(seed) = b.seed {
        cfg.set_seed(seed);
    }

    let h = &args.hyperparams;
    let hp = &mut cfg.hyperparams;
    set!(h.lambda, hp.lambda);
    set!(h.rho, hp.rho);
    set!(h.c, hp.c);
    set!(h.learning_rate, hp.learning_rate);
    set!(h.alpha_max, hp.alpha_max);
    set!(h.adam_beta1, hp.adam_beta1);
    set!(h.adam_beta2, hp.adam_beta2);
    set!(h.adam_eps, hp.adam_eps);
    set!(h.alpha0, hp.alpha0);
    set!(h.rate_r, hp.rate_r);
    set!(h.h_min, hp.h_min);
    set!(h.max_outer, hp.max_outer);
    set!(h.max_inner, hp.max_inner);
    set!(h.inner_tol, hp.inner_tol);
    set!(h.check_every, hp.check_every);
    set!(h.omega, hp.omega);
    set!(h.coupling.map(Coupling::from), hp.coupling);
    set!(h.deterministic, hp.deterministic);
    set!(h.per_task_dual, hp.per_task_dual);
    set!(h.standardize, hp.standardize);

    cfg.validate()?;
    Ok(cfg)
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let seed = cfg.first_seed();
    let (truth, data) = generate_benchmark(&cfg.benchmark.generator(seed, None, None))?;
    let meta = Meta {
        config_hash: cfg.hash(),
        seed,
    };
    let tasks: Vec<TaskData> = data
        .into_iter()
        .map(|d| TaskData {
            task_id: d.task_id,
            nodes: d.nodes,
        })
        .collect();
    write_dataset(&args.out, &tasks, &meta)?;
    write_json(&args.out.join("truth.json"), &TruthFile::from_truth(&truth, &meta))?;
    write_json(&args.out.join("config.json"), &cfg)
}

fn method_label(coupling: Coupling, mvdag: bool) -> &'static str {
    match (coupling, mvdag) {
        (Coupling::Dcd, false) => Method::MmDag.name(),
        (Coupling::Dcd, true) => Method::MvDag.name(),
        (Coupling::None, false) => Method::Separate.name(),
        (Coupling::None, true) => "separate-interval-averaged",
        (Coupling::MatrixDiff, false) => Method::MatrixDifference.name(),
        (Coupling::MatrixDiff, true) => "matrix-difference-interval-averaged",
    }
}

pub fn fit(args: &FitArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    let mut averaged = args.mvdag;
    if let Some(m) = args.method {
        cfg.hyperparams.coupling = m.coupling();
        averaged |= m.interval_averaged();
    }
    let (index, tasks) = read_dataset(&args.data)?;
    let meta = Meta {
        config_hash: cfg.hash(),
        seed: index.meta.seed,
    };
    let problem = build_problem(&tasks, &cfg, averaged)?;
    let s = cfg.similarity.build(tasks.len())?;

    let start = Instant::now();
    let result = match fit_problem(&problem, &s, &cfg.hyperparams) {
        Ok(r) => r,
        Err(mmdag::Error::Divergence { outer, inner, trace }) => {
            create_dir(&args.out)?;
            let path = args.out.join("trace.csv");
            write_trace(&path, &meta, &trace)?;
            return Err(CliError::Divergence { outer, inner, trace: path });
        }
        Err(e) => return Err(e.into()),
    };
    let wall = args.timing.then(|| start.elapsed().as_secs_f64());

    let summary = FitSummary {
        format_version: FORMAT_VERSION,
        meta,
        method: method_label(cfg.hyperparams.coupling, averaged).to_string(),
        samples: problem.tasks().first().map_or(0, |t| t.spec().sample_count()),
        converged: result.converged,
        outer_iterations: result.outer_iterations,
        alpha: result.alpha,
        beta: result.beta.clone(),
        clamp_count: result.clamp_count,
        h_monotone_fraction: result.h_monotone_fraction(),
        wall_seconds: wall,
        tasks: result
            .tasks
            .iter()
            .zip(problem.tasks())
            .map(|(t, p)| FitTaskEntry {
                task_id: t.task_id,
                nodes: t.nodes.iter().map(|n| n.0).collect(),
                block_offsets: p.spec().block_offsets().to_vec(),
                removed_edges: t.removed_edges.iter().map(|(a, b)| (a.0, b.0)).collect(),
            })
            .collect(),
    };
    crate::io::write_fit(&args.out, &result, &summary)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let truth = TruthFile::load(&args.truth)?;
    let truth_graphs = truth
        .tasks
        .iter()
        .map(|t| t.graph.graph())
        .collect::<Result<Vec<_>>>()?;
    let header: Vec<String> = [
        "method", "seed", "N", "L", "P", "task", "tp", "fp", "fn", "tn", "f1", "tpr", "fpr", "fdr", "converged",
        "wall_seconds",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut rows = Vec::new();
    for dir in &args.results {
        let (summary, graphs) = read_fit(dir)?;
        if graphs.len() != truth_graphs.len() {
            return Err(CliError::validation(format!(
                "{}: {} fitted tasks, truth has {}",
                dir.display(),
                graphs.len(),
                truth_graphs.len()
            )));
        }
        let row = |task: String, m: Metrics| {
            vec![
                summary.method.clone(),
                summary.meta.seed.to_string(),
                summary.samples.to_string(),
                graphs.len().to_string(),
                truth.benchmark.nodes.to_string(),
                task,
                m.counts.tp.to_string(),
                m.counts.fp.to_string(),
                m.counts.fn_.to_string(),
                m.counts.tn.to_string(),
                fmt_f64(m.f1),
                fmt_f64(m.tpr),
                fmt_f64(m.fpr),
                fmt_f64(m.fdr),
                summary.converged.to_string(),
                summary.wall_seconds.map(fmt_f64).unwrap_or_default(),
            ]
        };
        let mut pooled = mmdag::benchgen::EdgeCounts::default();
        for ((g, t), entry) in graphs.iter().zip(&truth_graphs).zip(&summary.tasks) {
            let counts = edge_counts(g, t)?;
            pooled = pooled + counts;
            rows.push(row(entry.task_id.to_string(), Metrics::from_counts(counts)));
        }
        rows.push(row("micro".to_string(), Metrics::from_counts(pooled)));
    }
    write_csv(&args.out, &truth.meta, Some(&header), &rows)
}

/// Output of the `cd` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdRecord {
    pub format_version: u32,
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    pub value: f64,
    pub edge_difference: usize,
}

pub fn cd_value(u: &GraphFile, v: &GraphFile, mode: CdMode, c: f64) -> Result<CdRecord> {
    let gu = u.graph()?;
    let gv = v.graph()?;
    let (mode_name, c, value) = match mode {
        CdMode::Exact => ("exact", None, causal_difference(&gu, &gv)?),
        CdMode::Differentiable => {
            let overlap = OverlapMap::new(gu.nodes(), gv.nodes());
            ("differentiable", Some(c), dcd(&u.weights()?, &v.weights()?, &overlap, c)?)
        }
    };
    Ok(CdRecord {
        format_version: FORMAT_VERSION,
        mode: mode_name.to_string(),
        c,
        value,
        edge_difference: edge_difference(&gu, &gv),
    })
}

pub fn cd(args: &CdArgs) -> Result<()> {
    let record = cd_value(&GraphFile::load(&args.u)?, &GraphFile::load(&args.v)?, args.mode, args.c)?;
    println!("{}", fmt_f64(record.value));
    if let Some(out) = &args.out {
        write_json(out, &record)?;
    }
    Ok(())
}

pub fn bench(args: &BenchArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(m) = &args.methods {
        cfg.methods = m.clone();
    }
    if let Some(n) = &args.sweep_samples {
        cfg.sweep.samples = n.clone();
    }
    if let Some(l) = &args.sweep_tasks {
        cfg.sweep.tasks = l.clone();
    }
    if let Some(s) = &args.seeds {
        cfg.benchmark.seeds = s.clone();
    }
    cfg.validate()?;
    let meta = Meta {
        config_hash: cfg.hash(),
        seed: cfg.first_seed(),
    };
    let rows = run_bench(&cfg, args.jobs, args.timing)?;
    create_dir(&args.out)?;
    write_rows(&args.out.join("rows.csv"), &meta, &rows)?;
    write_summary(&args.out.join("summary.csv"), &meta, &summarize(&cfg, &rows))?;
    write_json(&args.out.join("config.json"), &cfg)
}
