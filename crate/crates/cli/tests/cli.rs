use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use surface_glm::simulate::SimulationScenario;
use surface_glm_cli::commands::{load_results, read_benchmark};
use surface_glm_cli::results::{FileKind, GroupResultsFile, Manifest};
use surface_glm_cli::{run, Command as Cmd, Method, RunConfig, Status};

fn scenario(n: usize, k: usize, subjects: usize) -> SimulationScenario {
    SimulationScenario {
        subjects,
        subject_shift_mm: if subjects > 1 { 5.0 } else { 0.0 },
        ..SimulationScenario::single_subject(n, k)
    }
}

fn simulate(dir: &Path, sc: SimulationScenario, seed: u64) -> PathBuf {
    let out = dir.join("sim");
    let cfg = RunConfig {
        output: out.clone(),
        seed,
        scenario: sc,
        ..RunConfig::default()
    };
    assert_eq!(run(Cmd::Simulate, &cfg).unwrap(), Status::Success);
    out
}

fn fit(sim: &Path, m: usize, method: Method, out: &Path) -> Status {
    let mut cfg = RunConfig::load(&sim.join(format!("sub-{m:03}_fit.json"))).unwrap();
    cfg.method = method;
    cfg.output = out.to_path_buf();
    cfg.draws = 200;
    run(Cmd::Fit, &cfg).unwrap()
}

fn group(subjects: Vec<PathBuf>, method: Method, out: &Path, seed: u64) -> GroupResultsFile {
    let cfg = RunConfig {
        output: out.to_path_buf(),
        subjects,
        method,
        seed,
        draws: 200,
        ..RunConfig::default()
    };
    assert_eq!(run(Cmd::Group, &cfg).unwrap(), Status::Success);
    let g: GroupResultsFile =
        serde_json::from_str(&fs::read_to_string(out.join("group.json")).unwrap()).unwrap();
    g.validate().unwrap();
    g
}

#[test]
fn simulate_writes_manifest_counts() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), scenario(2000, 2, 1), 1);
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(sim.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.count(FileKind::Mesh), 1);
    assert_eq!(manifest.count(FileKind::Scan), 1);
    assert_eq!(manifest.count(FileKind::Truth), 1);
    assert_eq!(manifest.count(FileKind::PopulationTruth), 0);
    for f in &manifest.files {
        assert!(sim.join(&f.path).is_file(), "{}", f.path.display());
    }
}

#[test]
fn simulate_is_byte_identical_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(&dir.path().join("a"), scenario(600, 2, 2), 9);
    let b = simulate(&dir.path().join("b"), scenario(600, 2, 2), 9);
    let c = simulate(&dir.path().join("c"), scenario(600, 2, 2), 10);
    let bold = "sub-001_run-0.bold";
    for name in [
        "mesh.txt",
        "stimuli.txt",
        bold,
        "sub-001_truth.matrix",
        "manifest.json",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    assert_ne!(
        fs::read(a.join(bold)).unwrap(),
        fs::read(c.join(bold)).unwrap()
    );
}

#[test]
fn noiseless_fit_converges_with_history() {
    let dir = tempfile::tempdir().unwrap();
    let sc = SimulationScenario {
        noise_var: 0.0,
        ..scenario(600, 2, 1)
    };
    let sim = simulate(dir.path(), sc, 3);
    let out = dir.path().join("fit");
    assert_eq!(fit(&sim, 0, Method::Em, &out), Status::Success);
    let res = load_results(&out.join("results.json")).unwrap();
    let em = res.em.as_ref().unwrap();
    assert!(res.converged && em.converged);
    assert!(!em.history.is_empty());
}

#[test]
fn em_and_classical_results_validate() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), scenario(800, 2, 1), 4);
    for method in [Method::Em, Method::Classical] {
        let out = dir.path().join(method.to_string());
        assert_eq!(fit(&sim, 0, method, &out), Status::Success);
        let res = load_results(&out.join("results.json")).unwrap();
        res.validate().unwrap();
        assert_eq!(res.method, method);
        assert_eq!(res.em.is_some(), method == Method::Em);
        assert_eq!(res.activations.len(), 2 * 3);
        assert!(out.join("beta.matrix").is_file() && out.join("masks.matrix").is_file());
    }
}

#[test]
fn single_subject_group_reproduces_subject_masks() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), scenario(600, 2, 1), 5);
    let out = dir.path().join("fit");
    fit(&sim, 0, Method::Em, &out);
    let res = load_results(&out.join("results.json")).unwrap();
    let g = group(
        vec![out.join("results.json")],
        Method::Em,
        &dir.path().join("g"),
        res.seed,
    );
    assert_eq!(g.lambda, vec![1.0]);
    assert_eq!(g.activations, res.activations);
}

#[test]
fn ten_subject_group_has_three_masks_per_task_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), scenario(400, 2, 10), 6);
    let mut em = Vec::new();
    let mut classical = Vec::new();
    for m in 0..10 {
        let out = dir.path().join(format!("em{m}"));
        fit(&sim, m, Method::Em, &out);
        em.push(out.join("results.json"));
        let out = dir.path().join(format!("cl{m}"));
        fit(&sim, m, Method::Classical, &out);
        classical.push(out.join("results.json"));
    }
    let g = group(em.clone(), Method::Em, &dir.path().join("g1"), 2);
    for t in &g.task_names {
        assert_eq!(g.activations.iter().filter(|a| &a.task == t).count(), 3);
    }
    let again = group(em, Method::Em, &dir.path().join("g2"), 2);
    assert_eq!(g.activations, again.activations);
    assert_eq!(g.tasks, again.tasks);
    let c = group(classical, Method::Classical, &dir.path().join("g3"), 2);
    assert!(c.theta_g.is_none());
    assert_eq!(c.activations.len(), 2 * 3);
}

#[test]
fn benchmark_table_has_one_row_per_cell_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let scenarios = vec![
        SimulationScenario {
            name: "a".into(),
            ..scenario(300, 1, 1)
        },
        SimulationScenario {
            name: "b".into(),
            ..scenario(400, 2, 1)
        },
    ];
    let cfg = RunConfig {
        output: dir.path().to_path_buf(),
        scenarios,
        replicates: 2,
        draws: 200,
        ..RunConfig::default()
    };
    run(Cmd::Benchmark, &cfg).unwrap();
    let rows = read_benchmark(&dir.path().join("benchmark.csv")).unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.status == "ok" && r.rmse.is_finite()));
    let mut w = csv::Writer::from_path(dir.path().join("copy.csv")).unwrap();
    for r in &rows {
        w.serialize(r).unwrap();
    }
    w.flush().unwrap();
    assert_eq!(read_benchmark(&dir.path().join("copy.csv")).unwrap(), rows);
}

fn bin(args: &[&str]) -> Option<i32> {
    Command::new(env!("CARGO_BIN_EXE_surface-glm"))
        .args(args)
        .output()
        .unwrap()
        .status
        .code()
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    assert_eq!(bin(&["simulate", "--epsilon", "0", "-o", out]), Some(2));
    assert_eq!(bin(&["simulate", "--alpha", "1.5", "-o", out]), Some(2));
    assert_eq!(bin(&["fit", "-o", out]), Some(2));
    assert_eq!(
        bin(&["group", "-o", out, "/nonexistent/results.json"]),
        Some(4)
    );
    assert_eq!(
        bin(&[
            "fit",
            "--mesh",
            "/nonexistent/mesh.txt",
            "--scan",
            "/x.bold",
            "--stimuli",
            "/s.txt",
            "-o",
            out
        ]),
        Some(4)
    );
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"unknown_key": 1}"#).unwrap();
    assert_eq!(
        bin(&["simulate", "--config", cfg.to_str().unwrap()]),
        Some(2)
    );
}

#[test]
fn fit_reports_nonconvergence_with_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), scenario(600, 2, 1), 8);
    let cfg = sim.join("sub-000_fit.json");
    let out = dir.path().join("fit");
    let code = bin(&[
        "fit",
        "--config",
        cfg.to_str().unwrap(),
        "--max-iter",
        "1",
        "--epsilon",
        "1e-12",
        "--draws",
        "200",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, Some(3));
    let res = load_results(&out.join("results.json")).unwrap();
    assert!(!res.converged);
}
