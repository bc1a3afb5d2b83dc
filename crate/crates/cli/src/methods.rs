//! The compared methods and the shared fitting pipeline.

use mmdag::funcdata::interval_average;
use mmdag::learner::{fit, Coupling, FitResult, Problem};
use mmdag::sem::{assemble_embedding, NodeData, RawNode};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Causal-difference coupling on multi-modal embeddings.
    MmDag,
    /// Independent tasks.
    Separate,
    /// Squared weight differences as the coupling.
    MatrixDifference,
    /// Curves replaced by interval averages, causal-difference coupling.
    MvDag,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::MmDag, Method::Separate, Method::MatrixDifference, Method::MvDag];

    pub fn name(self) -> &'static str {
        match self {
            Method::MmDag => "mm-dag",
            Method::Separate => "separate",
            Method::MatrixDifference => "matrix-difference",
            Method::MvDag => "mv-dag",
        }
    }

    pub fn coupling(self) -> Coupling {
        match self {
            Method::MmDag | Method::MvDag => Coupling::Dcd,
            Method::Separate => Coupling::None,
            Method::MatrixDifference => Coupling::MatrixDiff,
        }
    }

    pub fn interval_averaged(self) -> bool {
        self == Method::MvDag
    }
}

/// One task's raw observations.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task_id: usize,
    pub nodes: Vec<RawNode>,
}

/// Replaces every curve by its `bins` interval means, giving a vector node.
pub fn interval_average_nodes(nodes: &[RawNode], bins: usize) -> Result<Vec<RawNode>> {
    nodes
        .iter()
        .map(|raw| {
            let data = match &raw.data {
                NodeData::Function(f) => {
                    let n = f.sample_count();
                    let mut m = DMatrix::zeros(n, bins);
                    for r in 0..n {
                        let avg = interval_average(&f.sample(r), bins)?;
                        for (b, v) in avg.into_iter().enumerate() {
                            m[(r, b)] = v;
                        }
                    }
                    NodeData::Vector(m)
                }
                other => other.clone(),
            };
            Ok(RawNode {
                global_id: raw.global_id,
                data,
            })
        })
        .collect::<std::result::Result<Vec<_>, mmdag::Error>>()
        .map_err(CliError::from)
}

/// Builds the joint problem from raw data.
pub fn build_problem(tasks: &[TaskData], cfg: &ExperimentConfig, interval_averaged: bool) -> Result<Problem> {
    let emb_cfg = cfg.embedding.config();
    let embedded = tasks
        .iter()
        .map(|t| {
            let nodes = if interval_averaged {
                interval_average_nodes(&t.nodes, cfg.embedding.mvdag_bins)?
            } else {
                t.nodes.clone()
            };
            Ok(assemble_embedding(t.task_id, &nodes, &emb_cfg)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Problem::from_embedded(&embedded, cfg.hyperparams.standardize)?)
}

/// Fits with the configured hyperparameters, coupling and preprocessing.
pub fn fit_configured(tasks: &[TaskData], cfg: &ExperimentConfig, interval_averaged: bool) -> std::result::Result<FitResult, FitError> {
    let problem = build_problem(tasks, cfg, interval_averaged).map_err(FitError::Setup)?;
    let s = cfg.similarity.build(tasks.len()).map_err(FitError::Setup)?;
    fit(&problem, &s, &cfg.hyperparams).map_err(FitError::Fit)
}

/// Fits one method: its coupling and preprocessing override the config.
pub fn fit_method(tasks: &[TaskData], cfg: &ExperimentConfig, method: Method) -> std::result::Result<FitResult, FitError> {
    let mut cfg = cfg.clone();
    cfg.hyperparams.coupling = method.coupling();
    fit_configured(tasks, &cfg, method.interval_averaged())
}

#[derive(Debug)]
pub enum FitError {
    Setup(CliError),
    Fit(mmdag::Error),
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Setup(e) => e,
            FitError::Fit(e) => e.into(),
        }
    }
}

impl std::fmt::Display for FitError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FitError::Setup(e) => e.fmt(f),
            FitError::Fit(e) => e.fmt(f),
        }
    }
}
