//! On-disk formats: datasets, ground truth, fit results and graph files.
//!
//! Every CSV starts with `#` comment lines carrying the format version,
//! the config hash and the seed. Numbers are written in Rust's shortest
//! round-trip form, so reading a file back reproduces the exact values.

use std::fs;
use std::path::{Path, PathBuf};

use mmdag::benchgen::{BenchmarkConfig, GroundTruth};
use mmdag::causal_diff::{DirectedGraph, NodeId};
use mmdag::funcdata::FunctionalSampleSet;
use mmdag::learner::{FitResult, TraceRow};
use mmdag::sem::{NodeData, RawNode};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::FORMAT_VERSION;
use crate::error::{CliError, Result};
use crate::methods::TaskData;

/// Provenance written into every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub config_hash: String,
    pub seed: u64,
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(s: &str, path: &Path) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| CliError::validation(format!("{}: '{s}' is not a number", path.display())))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

/// Writes a CSV with the metadata comment block.
pub fn write_csv(path: &Path, meta: &Meta, header: Option<&[String]>, rows: &[Vec<String>]) -> Result<()> {
    let mut out = format!(
        "# format_version={FORMAT_VERSION}\n# config_hash={}\n# seed={}\n",
        meta.config_hash, meta.seed
    );
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::io(path, std::io::Error::other(e));
    if let Some(h) = header {
        w.write_record(h).map_err(csv_err)?;
    }
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::io(path, std::io::Error::other(e.to_string())))?;
    out.push_str(std::str::from_utf8(&bytes).expect("csv output is utf-8"));
    write_text(path, &out)
}

/// All non-comment records as strings.
pub fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());
    r.records()
        .map(|rec| {
            rec.map(|rec| rec.iter().map(str::to_string).collect())
                .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Numeric rows with consistent width.
fn numeric_rows(path: &Path, rows: &[Vec<String>]) -> Result<Vec<Vec<f64>>> {
    let width = rows.first().map(Vec::len).unwrap_or(0);
    rows.iter()
        .map(|r| {
            if r.len() != width {
                return Err(CliError::validation(format!("{}: ragged rows", path.display())));
            }
            r.iter().map(|s| parse_f64(s, path)).collect()
        })
        .collect()
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map(Vec::len).unwrap_or(0);
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<String>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| fmt_f64(m[(i, j)])).collect())
        .collect()
}

pub fn write_matrix_csv(path: &Path, meta: &Meta, header: Option<&[String]>, m: &DMatrix<f64>) -> Result<()> {
    write_csv(path, meta, header, &matrix_rows(m))
}

/// Square matrix whose header row names the global node ids.
pub fn read_labeled_matrix(path: &Path) -> Result<(Vec<NodeId>, DMatrix<f64>)> {
    let rows = read_csv(path)?;
    let (header, body) = rows
        .split_first()
        .ok_or_else(|| CliError::validation(format!("{}: empty file", path.display())))?;
    let ids = header
        .iter()
        .map(|s| {
            s.trim()
                .parse()
                .map(NodeId)
                .map_err(|_| CliError::validation(format!("{}: bad node id '{s}'", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = to_matrix(&numeric_rows(path, body)?);
    if m.nrows() != ids.len() || m.ncols() != ids.len() {
        return Err(CliError::validation(format!(
            "{}: expected a {n}x{n} matrix",
            path.display(),
            n = ids.len()
        )));
    }
    Ok((ids, m))
}

fn id_header(ids: &[NodeId]) -> Vec<String> {
    ids.iter().map(|id| id.0.to_string()).collect()
}

// ---------------------------------------------------------------- datasets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format_version: u32,
    pub meta: Meta,
    pub tasks: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityTag {
    Scalar,
    Vector,
    Function,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub global_id: usize,
    pub modality: ModalityTag,
    /// Columns for vectors, grid length for curves, 1 for scalars.
    pub dims: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    pub format_version: u32,
    pub task_id: usize,
    pub sample_count: usize,
    pub nodes: Vec<NodeEntry>,
}

pub fn task_dir_name(task_id: usize) -> String {
    format!("task_{task_id}")
}

pub fn write_dataset(dir: &Path, tasks: &[TaskData], meta: &Meta) -> Result<()> {
    create_dir(dir)?;
    let mut names = Vec::new();
    for task in tasks {
        let name = task_dir_name(task.task_id);
        let tdir = dir.join(&name);
        create_dir(&tdir)?;
        let sample_count = task.nodes.first().map(|n| n.data.sample_count()).unwrap_or(0);
        let mut entries = Vec::new();
        for node in &task.nodes {
            let file = format!("node_{}.csv", node.global_id.0);
            let path = tdir.join(&file);
            let (modality, dims) = match &node.data {
                NodeData::Scalar(v) => {
                    let rows: Vec<Vec<String>> = v.iter().map(|x| vec![fmt_f64(*x)]).collect();
                    write_csv(&path, meta, None, &rows)?;
                    (ModalityTag::Scalar, 1)
                }
                NodeData::Vector(m) => {
                    write_matrix_csv(&path, meta, None, m)?;
                    (ModalityTag::Vector, m.ncols())
                }
                NodeData::Function(f) => {
                    let mut rows = vec![f.grid().iter().map(|g| fmt_f64(*g)).collect::<Vec<_>>()];
                    rows.extend(matrix_rows(f.values()));
                    write_csv(&path, meta, None, &rows)?;
                    (ModalityTag::Function, f.grid_len())
                }
            };
            entries.push(NodeEntry {
                global_id: node.global_id.0,
                modality,
                dims,
                file,
            });
        }
        write_json(
            &tdir.join("spec.json"),
            &TaskFile {
                format_version: FORMAT_VERSION,
                task_id: task.task_id,
                sample_count,
                nodes: entries,
            },
        )?;
        names.push(name);
    }
    write_json(
        &dir.join("dataset.json"),
        &DatasetIndex {
            format_version: FORMAT_VERSION,
            meta: meta.clone(),
            tasks: names,
        },
    )
}

fn check_version(found: u32, path: &Path) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(CliError::validation(format!(
            "{}: format_version {found} is not supported (expected {FORMAT_VERSION})",
            path.display()
        )));
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<TaskData>)> {
    let index_path = dir.join("dataset.json");
    let index: DatasetIndex = read_json(&index_path)?;
    check_version(index.format_version, &index_path)?;
    let mut tasks = Vec::new();
    for name in &index.tasks {
        let tdir = dir.join(name);
        let spec_path = tdir.join("spec.json");
        let spec: TaskFile = read_json(&spec_path)?;
        check_version(spec.format_version, &spec_path)?;
        let mut nodes = Vec::new();
        for entry in &spec.nodes {
            let path = tdir.join(&entry.file);
            let rows = numeric_rows(&path, &read_csv(&path)?)?;
            let id = NodeId(entry.global_id);
            let data = match entry.modality {
                ModalityTag::Scalar => {
                    if rows.iter().any(|r| r.len() != 1) {
                        return Err(CliError::validation(format!("{}: scalar node needs one column", path.display())));
                    }
                    NodeData::Scalar(rows.iter().map(|r| r[0]).collect())
                }
                ModalityTag::Vector => NodeData::Vector(to_matrix(&rows)),
                ModalityTag::Function => {
                    let (grid, values) = rows
                        .split_first()
                        .ok_or_else(|| CliError::validation(format!("{}: missing grid row", path.display())))?;
                    NodeData::Function(FunctionalSampleSet::new(grid.clone(), to_matrix(values), id)?)
                }
            };
            if data.sample_count() != spec.sample_count {
                return Err(CliError::validation(format!(
                    "{}: {} samples, spec says {}",
                    path.display(),
                    data.sample_count(),
                    spec.sample_count
                )));
            }
            nodes.push(RawNode { global_id: id, data });
        }
        tasks.push(TaskData {
            task_id: spec.task_id,
            nodes,
        });
    }
    Ok((index, tasks))
}

// ------------------------------------------------------------ graph files

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    pub format_version: u32,
    pub nodes: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    /// Parallel to `edges`; absent for binary graphs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl GraphFile {
    pub fn from_graph(g: &DirectedGraph) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            nodes: g.nodes().iter().map(|n| n.0).collect(),
            edges: g.edge_ids().into_iter().map(|(a, b)| (a.0, b.0)).collect(),
            weights: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let g: GraphFile = read_json(path)?;
        check_version(g.format_version, path)?;
        if let Some(w) = &g.weights {
            if w.len() != g.edges.len() {
                return Err(CliError::validation(format!("{}: weights and edges differ in length", path.display())));
            }
        }
        Ok(g)
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|&i| NodeId(i)).collect()
    }

    pub fn graph(&self) -> Result<DirectedGraph> {
        let edges: Vec<(NodeId, NodeId)> = self.edges.iter().map(|&(a, b)| (NodeId(a), NodeId(b))).collect();
        Ok(DirectedGraph::new(self.node_ids(), &edges)?)
    }

    /// Dense weights in node order; binary graphs get weight 1 per edge.
    pub fn weights(&self) -> Result<DMatrix<f64>> {
        let g = self.graph()?;
        let mut w = DMatrix::zeros(g.len(), g.len());
        for (k, &(a, b)) in self.edges.iter().enumerate() {
            let i = g.index_of(NodeId(a)).expect("validated");
            let j = g.index_of(NodeId(b)).expect("validated");
            w[(i, j)] = self.weights.as_ref().map_or(1.0, |ws| ws[k]);
        }
        Ok(w)
    }
}

// ------------------------------------------------------------ ground truth

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTask {
    pub task_id: usize,
    pub graph: GraphFile,
    /// Dense true `W` in `graph.nodes` order.
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub format_version: u32,
    pub meta: Meta,
    pub benchmark: BenchmarkConfig,
    pub full_graph: GraphFile,
    pub tasks: Vec<TruthTask>,
}

impl TruthFile {
    pub fn from_truth(truth: &GroundTruth, meta: &Meta) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            meta: meta.clone(),
            benchmark: truth.config.clone(),
            full_graph: GraphFile::from_graph(&truth.full_graph),
            tasks: truth
                .tasks
                .iter()
                .map(|t| {
                    let w = t.w.matrix();
                    TruthTask {
                        task_id: t.spec.task_id,
                        graph: GraphFile::from_graph(&t.graph()),
                        weights: (0..w.nrows()).map(|i| w.row(i).iter().copied().collect()).collect(),
                    }
                })
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: TruthFile = read_json(path)?;
        check_version(t.format_version, path)?;
        Ok(t)
    }
}

// ------------------------------------------------------------ fit results

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTaskEntry {
    pub task_id: usize,
    pub nodes: Vec<usize>,
    pub block_offsets: Vec<usize>,
    pub removed_edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub format_version: u32,
    pub meta: Meta,
    pub method: String,
    pub samples: usize,
    pub converged: bool,
    pub outer_iterations: usize,
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub clamp_count: usize,
    pub h_monotone_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
    pub tasks: Vec<FitTaskEntry>,
}

pub fn adjacency_file(dir: &Path, task_id: usize) -> PathBuf {
    dir.join(format!("adjacency_task{task_id}.csv"))
}

pub fn write_trace(path: &Path, meta: &Meta, trace: &[TraceRow]) -> Result<()> {
    let header: Vec<String> = ["outer", "inner", "objective", "h_sum", "beta", "alpha"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = trace
        .iter()
        .map(|r| {
            vec![
                r.outer.to_string(),
                r.inner.to_string(),
                fmt_f64(r.objective),
                fmt_f64(r.h_sum),
                fmt_f64(r.beta),
                fmt_f64(r.alpha),
            ]
        })
        .collect();
    write_csv(path, meta, Some(&header), &rows)
}

/// Writes `C`, `W`, adjacency, trace and the summary.
pub fn write_fit(dir: &Path, result: &FitResult, summary: &FitSummary) -> Result<()> {
    create_dir(dir)?;
    let meta = &summary.meta;
    for task in &result.tasks {
        let ids = id_header(&task.nodes);
        write_matrix_csv(&dir.join(format!("C_task{}.csv", task.task_id)), meta, None, task.c.matrix())?;
        write_matrix_csv(&dir.join(format!("W_task{}.csv", task.task_id)), meta, Some(&ids), task.w.matrix())?;
        write_matrix_csv(&adjacency_file(dir, task.task_id), meta, Some(&ids), &task.adjacency.adjacency())?;
    }
    write_trace(&dir.join("trace.csv"), meta, &result.trace)?;
    write_json(&dir.join("fit.json"), summary)
}

pub fn read_fit(dir: &Path) -> Result<(FitSummary, Vec<DirectedGraph>)> {
    let path = dir.join("fit.json");
    let summary: FitSummary = read_json(&path)?;
    check_version(summary.format_version, &path)?;
    let graphs = summary
        .tasks
        .iter()
        .map(|t| {
            let (ids, m) = read_labeled_matrix(&adjacency_file(dir, t.task_id))?;
            Ok(DirectedGraph::from_weights(ids, &m, 0.5)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((summary, graphs))
}
