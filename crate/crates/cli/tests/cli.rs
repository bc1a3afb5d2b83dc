use std::path::Path;
use std::process::{Command, Output};

use mmdag::benchgen::generate_benchmark;
use mmdag_cli::commands::cd_value;
use mmdag_cli::config::ExperimentConfig;
use mmdag_cli::io::{read_dataset, read_fit, read_labeled_matrix, GraphFile};
use mmdag_cli::methods::{fit_method, Method, TaskData};
use mmdag_cli::CdMode;
use proptest::prelude::*;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mmdag"));
    c.env_remove("MMDAG_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn graph_json(dir: &Path, name: &str, nodes: &[usize], edges: &[(usize, usize)]) -> std::path::PathBuf {
    let g = GraphFile {
        format_version: 1,
        nodes: nodes.to_vec(),
        edges: edges.to_vec(),
        weights: None,
    };
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string(&g).unwrap()).unwrap();
    path
}

#[test]
fn default_config_round_trips_through_the_binary() {
    let out = run(&["default-config"]);
    assert!(out.status.success());
    let cfg = ExperimentConfig::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn exit_codes_match_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(run(&["synth", "--out", p(&data), "--tasks", "2", "--samples", "20"]).status.success());

    let bad = run(&["fit", "--data", p(&data), "--out", p(&dir.path().join("f")), "--lambda=-1"]);
    assert_eq!(bad.status.code(), Some(2));
    let unknown = dir.path().join("unknown.json");
    std::fs::write(&unknown, r#"{"no_such_field": 1}"#).unwrap();
    let bad = run(&["synth", "--config", p(&unknown), "--out", p(&dir.path().join("s"))]);
    assert_eq!(bad.status.code(), Some(2));

    let missing = run(&["fit", "--data", p(&dir.path().join("nothing")), "--out", p(&dir.path().join("f"))]);
    assert_eq!(missing.status.code(), Some(4));

    let out = dir.path().join("div");
    let div = run(&[
        "fit", "--data", p(&data), "--out", p(&out), "--tasks", "2", "--learning-rate", "1e12", "--max-outer", "2",
    ]);
    assert_eq!(div.status.code(), Some(3));
    assert!(out.join("trace.csv").exists());
}

#[test]
fn env_seed_replaces_configured_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&["synth", "--out", p(&a), "--tasks", "2", "--seed", "7"]).status.success());
    let out = bin()
        .args(["synth", "--out", p(&b), "--tasks", "2"])
        .env("MMDAG_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success());
    let (ia, ta) = read_dataset(&a).unwrap();
    let (ib, tb) = read_dataset(&b).unwrap();
    assert_eq!(ia, ib);
    assert_eq!(ta, tb);
}

#[test]
fn composed_commands_equal_in_process_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let fit_dir = dir.path().join("fit");
    let flags = ["--tasks", "3", "--samples", "30", "--seed", "3"];
    let mut synth = vec!["synth", "--out", p(&data)];
    synth.extend(flags);
    assert!(run(&synth).status.success());
    let mut fit = vec!["fit", "--data", p(&data), "--out", p(&fit_dir), "--method", "mm-dag"];
    fit.extend(flags);
    assert!(run(&fit).status.success());

    let mut cfg = ExperimentConfig::default();
    cfg.benchmark.tasks = 3;
    cfg.benchmark.samples = 30;
    cfg.set_seed(3);
    let (_, generated) = generate_benchmark(&cfg.benchmark.generator(3, None, None)).unwrap();
    let tasks: Vec<TaskData> = generated
        .into_iter()
        .map(|d| TaskData {
            task_id: d.task_id,
            nodes: d.nodes,
        })
        .collect();
    let (_, read_back) = read_dataset(&data).unwrap();
    assert_eq!(read_back, tasks);

    let expected = fit_method(&tasks, &cfg, Method::MmDag).unwrap();
    let (summary, graphs) = read_fit(&fit_dir).unwrap();
    assert_eq!(summary.outer_iterations, expected.outer_iterations);
    for (k, t) in expected.tasks.iter().enumerate() {
        let (ids, w) = read_labeled_matrix(&fit_dir.join(format!("W_task{}.csv", t.task_id))).unwrap();
        assert_eq!(ids, t.nodes);
        assert_eq!(&w, t.w.matrix());
        assert_eq!(graphs[k], t.adjacency);
    }

    let metrics = dir.path().join("m.csv");
    let out = run(&["eval", "--results", p(&fit_dir), "--truth", p(&data.join("truth.json")), "--out", p(&metrics)]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 3 + 1);
}

#[test]
fn cd_command_on_reference_graphs() {
    let dir = tempfile::tempdir().unwrap();
    let a = graph_json(dir.path(), "a.json", &[1, 2, 3, 4], &[(1, 2), (2, 3), (3, 4)]);
    let b = graph_json(dir.path(), "b.json", &[1, 2, 4], &[(1, 2), (1, 4), (2, 4)]);
    let c = graph_json(dir.path(), "c.json", &[1, 2, 3, 4], &[(1, 3), (2, 3), (3, 4)]);
    let value = |u: &Path, v: &Path, extra: &[&str]| {
        let mut args = vec!["cd", p(u), p(v)];
        args.extend(extra);
        let out = run(&args);
        assert!(out.status.success());
        String::from_utf8(out.stdout).unwrap().trim().parse::<f64>().unwrap()
    };
    assert_eq!(value(&a, &a, &[]), 0.0);
    assert_eq!(value(&a, &b, &[]), 0.0);
    assert_eq!(value(&a, &c, &[]), 0.5);
    let smooth = value(&a, &c, &["--mode", "differentiable", "--c", "50"]);
    assert!((smooth - 0.5).abs() <= 1e-5, "{smooth}");

    let rec = dir.path().join("r.json");
    assert!(run(&["cd", p(&a), p(&b), "--out", p(&rec)]).status.success());
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&rec).unwrap()).unwrap();
    assert_eq!(json["edge_difference"], 2);
    assert_eq!(json["mode"], "exact");
}

#[test]
fn cd_rejects_cyclic_graph_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = graph_json(dir.path(), "a.json", &[1, 2], &[(1, 2), (2, 1)]);
    let out = run(&["cd", p(&a), p(&a)]);
    assert_eq!(out.status.code(), Some(2));
}

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        2usize..20,
        1usize..8,
        1usize..100,
        0.05f64..0.9,
        0.0f64..1.0,
        0.0f64..1.0,
        1.0f64..60.0,
        proptest::collection::vec(0u64..1000, 1..5),
        any::<bool>(),
    )
        .prop_map(|(nodes, tasks, samples, er, lambda, rho, c, seeds, per_task)| {
            let mut cfg = ExperimentConfig::default();
            cfg.benchmark.nodes = nodes;
            cfg.benchmark.tasks = tasks;
            cfg.benchmark.samples = samples;
            cfg.benchmark.er_edge_prob = er;
            cfg.benchmark.seeds = seeds;
            cfg.hyperparams.lambda = lambda;
            cfg.hyperparams.rho = rho;
            cfg.hyperparams.c = c;
            cfg.hyperparams.per_task_dual = per_task;
            cfg
        })
}

fn relabel(g: &GraphFile, map: &[usize]) -> GraphFile {
    GraphFile {
        format_version: g.format_version,
        nodes: g.nodes.iter().map(|&n| map[n]).collect(),
        edges: g.edges.iter().map(|&(a, b)| (map[a], map[b])).collect(),
        weights: g.weights.clone(),
    }
}

fn arb_dag(pool: usize) -> impl Strategy<Value = GraphFile> {
    (
        proptest::sample::subsequence((0..pool).collect::<Vec<_>>(), 2..=pool),
        proptest::collection::vec(any::<bool>(), pool * pool),
    )
        .prop_map(|(nodes, bits)| {
            let mut edges = Vec::new();
            for i in 0..nodes.len() {
                for j in i + 1..nodes.len() {
                    if bits[i * nodes.len() + j] {
                        edges.push((nodes[i], nodes[j]));
                    }
                }
            }
            GraphFile {
                format_version: 1,
                nodes,
                edges,
                weights: None,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_json_round_trips(cfg in arb_config()) {
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn cd_is_invariant_to_node_relabeling(
        u in arb_dag(6),
        v in arb_dag(6),
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let map: Vec<usize> = perm.iter().map(|&k| 100 + 7 * k).collect();
        for mode in [CdMode::Exact, CdMode::Differentiable] {
            let before = cd_value(&u, &v, mode, 20.0).unwrap();
            let after = cd_value(&relabel(&u, &map), &relabel(&v, &map), mode, 20.0).unwrap();
            prop_assert!((before.value - after.value).abs() <= 1e-12);
            prop_assert_eq!(before.edge_difference, after.edge_difference);
        }
    }
}
