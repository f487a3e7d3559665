//! The four subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use nalgebra::DMatrix;
use surface_glm::em::{ClassicalFit, PosteriorSystem};
use surface_glm::group::{
    classical_group, classical_group_activation, combine_theta, equal_weights, group_inference,
    Contrast, GroupModel,
};
use surface_glm::inference::{dice_masks, rmse};
use surface_glm::io;
use surface_glm::simulate::{simulate_population, SimulationScenario};
use surface_glm::{seed, Projector};

use crate::config::{DataFiles, InvalidConfig, Method, RunConfig};
use crate::pipeline::{
    analyze, draw_seed, operator, prepare, to_vertices, ActivationRecord, Analysis, Outcome,
    Prepared, SubjectData,
};
use crate::results::{
    BenchmarkRow, ClassicalRecord, EmRecord, FileKind, FitTiming, GroupResultsFile, GroupTask,
    Manifest, ManifestEntry, ResultsFile, FIT_FORMAT, GROUP_FORMAT, MANIFEST_FORMAT,
};

/// How a command finished when it did not fail outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    NotConverged,
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Per-vertex values with NaN at vertices outside `kept`.
fn vertex_matrix(fields: &[Vec<f64>], kept: &[usize], n_mesh: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_element(n_mesh, fields.len(), f64::NAN);
    for (k, f) in fields.iter().enumerate() {
        for (&v, &x) in kept.iter().zip(f) {
            m[(v, k)] = x;
        }
    }
    m
}

/// One 0/1 column per activation, preceded by comment lines naming them.
fn save_masks(path: &Path, acts: &[ActivationRecord], n_mesh: usize) -> anyhow::Result<()> {
    let mut m = DMatrix::zeros(n_mesh, acts.len());
    let mut text = String::new();
    for (j, a) in acts.iter().enumerate() {
        text.push_str(&format!(
            "# column {j}: task {} gamma {} level {}\n",
            a.task, a.gamma, a.level
        ));
        for &v in &a.active {
            m[(v, j)] = 1.0;
        }
    }
    let mut buf = text.into_bytes();
    io::write_matrix(&mut buf, &m)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    io::save_json(path, value).with_context(|| format!("writing {}", path.display()))
}

/// Writes mesh, stimuli, design, scans and truth fields plus a manifest and
/// a ready-to-run `fit` config per subject.
pub fn simulate(cfg: &RunConfig) -> anyhow::Result<Status> {
    let mut sc = cfg.scenario.clone();
    sc.seed = cfg.seed;
    sc.validate()?;
    let pop = simulate_population(&sc)?;
    let out = &cfg.output;
    create_dir(out)?;
    let mut files = Vec::new();
    let mut add = |kind, name: String, subject, run| {
        files.push(ManifestEntry {
            kind,
            path: PathBuf::from(&name),
            subject,
            run,
        });
        out.join(name)
    };
    pop.mesh
        .mesh
        .save(add(FileKind::Mesh, "mesh.txt".into(), None, None))?;
    io::save_stimuli(
        add(FileKind::Stimuli, "stimuli.txt".into(), None, None),
        &pop.stimuli,
    )?;
    io::save_matrix(
        add(FileKind::Design, "design.matrix".into(), None, None),
        &pop.design,
    )?;
    if sc.subjects > 1 {
        let fields: Vec<Vec<f64>> = pop
            .population_fields
            .iter()
            .map(|f| f.values.clone())
            .collect();
        io::save_matrix(
            add(
                FileKind::PopulationTruth,
                "population_truth.matrix".into(),
                None,
                None,
            ),
            &io::columns_to_matrix(&fields)?,
        )?;
    }
    for (m, sub) in pop.subjects.iter().enumerate() {
        let mut scans = Vec::new();
        for (r, scan) in sub.runs.iter().enumerate() {
            let path = add(
                FileKind::Scan,
                format!("sub-{m:03}_run-{r}.bold"),
                Some(m),
                Some(r),
            );
            io::save_bold(&path, scan)?;
            scans.push(PathBuf::from(path.file_name().expect("file name")));
        }
        io::save_matrix(
            add(
                FileKind::Truth,
                format!("sub-{m:03}_truth.matrix"),
                Some(m),
                None,
            ),
            &io::columns_to_matrix(&sub.truth)?,
        )?;
        let fit_cfg = RunConfig {
            output: PathBuf::from(format!("fit-sub-{m:03}")),
            seed: cfg.seed,
            data: DataFiles {
                mesh: Some("mesh.txt".into()),
                scans,
                stimuli: Some("stimuli.txt".into()),
                nuisance: None,
            },
            preprocess: surface_glm::preprocess::PreprocessOptions {
                prewhiten: !sc.ar_coeffs.is_empty(),
                ..cfg.preprocess.clone()
            },
            ..RunConfig::default()
        };
        save_json(
            &add(
                FileKind::FitConfig,
                format!("sub-{m:03}_fit.json"),
                Some(m),
                None,
            ),
            &fit_cfg,
        )?;
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        scenario: sc,
        n_vertices: pop.mesh.mesh.n_vertices(),
        files,
    };
    save_json(&out.join("manifest.json"), &manifest)?;
    Ok(Status::Success)
}

fn analysis(cfg: &RunConfig, method: Method) -> Analysis {
    Analysis {
        method,
        fit: cfg.fit_options(),
        draws: cfg.draws,
        gamma: cfg.gamma.clone(),
        alpha: cfg.alpha,
        fdr_q: cfg.fdr_q,
        seed: cfg.seed,
    }
}

fn canonical(files: &DataFiles) -> anyhow::Result<DataFiles> {
    let c = |p: &PathBuf| fs::canonicalize(p).with_context(|| format!("resolving {}", p.display()));
    Ok(DataFiles {
        mesh: files.mesh.as_ref().map(c).transpose()?,
        scans: files.scans.iter().map(c).collect::<anyhow::Result<_>>()?,
        stimuli: files.stimuli.as_ref().map(c).transpose()?,
        nuisance: files.nuisance.as_ref().map(c).transpose()?,
    })
}

fn classical_record(f: &ClassicalFit) -> ClassicalRecord {
    let cols = |m: &DMatrix<f64>| {
        (0..m.ncols())
            .map(|k| m.column(k).iter().copied().collect())
            .collect()
    };
    ClassicalRecord {
        beta: cols(&f.beta),
        se: cols(&f.se),
        resid_var: f.resid_var.clone(),
        valid: f.valid.clone(),
        df: f.df,
    }
}

fn classical_fit(r: &ClassicalRecord) -> anyhow::Result<ClassicalFit> {
    let m = |f: &[Vec<f64>]| io::columns_to_matrix(f);
    Ok(ClassicalFit {
        beta: m(&r.beta)?,
        se: m(&r.se)?,
        resid_var: r.resid_var.clone(),
        df: r.df,
        valid: r.valid.clone(),
    })
}

/// The results file of one fit.
pub fn results_file(
    cfg: &RunConfig,
    inputs: DataFiles,
    prep: &Prepared,
    out: &Outcome,
    preprocess_secs: f64,
) -> ResultsFile {
    ResultsFile {
        format: FIT_FORMAT.into(),
        method: cfg.method,
        seed: cfg.seed,
        inputs,
        preprocess: cfg.preprocess.clone(),
        fit_options: cfg.fit_options(),
        draws: cfg.draws,
        alpha: cfg.alpha,
        fdr_q: cfg.fdr_q,
        n_mesh: prep.n_mesh,
        task_names: prep.task_names.clone(),
        kept: prep.kept.clone(),
        masked: prep.masked.clone(),
        converged: out.converged(),
        em: out.em.as_ref().map(|f| EmRecord {
            theta0: f.theta0.clone(),
            theta: f.theta.clone(),
            converged: f.converged,
            iterations: f.iterations,
            evaluations: f.evaluations,
            history: f.history.clone(),
        }),
        beta: out.beta.clone(),
        classical: classical_record(&out.classical),
        activations: out.activations.clone(),
        timing: FitTiming {
            preprocess_secs,
            fit_secs: out.fit_secs,
            activation_secs: out.activation_secs,
        },
    }
}

/// Preprocesses and fits one subject; writes `results.json`, `beta.matrix`
/// and `masks.matrix`.
pub fn fit(cfg: &RunConfig) -> anyhow::Result<Status> {
    let inputs = canonical(&cfg.data)?;
    let data = SubjectData::load(&inputs)?;
    let start = Instant::now();
    let prep = prepare(&data, &cfg.preprocess)?;
    let preprocess_secs = start.elapsed().as_secs_f64();
    let out = analyze(&prep, operator(&data.mesh)?, &analysis(cfg, cfg.method))?;
    let res = results_file(cfg, inputs, &prep, &out, preprocess_secs);
    res.validate()?;
    create_dir(&cfg.output)?;
    save_json(&cfg.output.join("results.json"), &res)?;
    io::save_matrix(
        cfg.output.join("beta.matrix"),
        &vertex_matrix(&res.beta, &res.kept, res.n_mesh),
    )?;
    save_masks(
        &cfg.output.join("masks.matrix"),
        &res.activations,
        res.n_mesh,
    )?;
    if !res.converged {
        log::warn!(
            "EM stopped after {} iterations without converging",
            cfg.max_iter
        );
        return Ok(Status::NotConverged);
    }
    Ok(Status::Success)
}

pub fn load_results(path: &Path) -> anyhow::Result<ResultsFile> {
    let r: ResultsFile =
        io::load_json(path).with_context(|| format!("reading {}", path.display()))?;
    r.validate()
        .map_err(|e| InvalidConfig(format!("{}: {}", path.display(), e.0)))?;
    Ok(r)
}

/// Combines subject fits into group estimates and activation masks; writes
/// `group.json`, `group_mean.matrix` and `group_masks.matrix`.
pub fn group(cfg: &RunConfig) -> anyhow::Result<Status> {
    let start = Instant::now();
    if cfg.subjects.is_empty() {
        return Err(InvalidConfig("group needs at least one results file".into()).into());
    }
    let subjects: Vec<ResultsFile> = cfg
        .subjects
        .iter()
        .map(|p| load_results(p))
        .collect::<anyhow::Result<_>>()?;
    let first = &subjects[0];
    for (p, s) in cfg.subjects.iter().zip(&subjects) {
        if s.task_names != first.task_names {
            return Err(surface_glm::Error::DimensionMismatch(format!(
                "{} has tasks {:?}, expected {:?}",
                p.display(),
                s.task_names,
                first.task_names
            ))
            .into());
        }
        if s.kept != first.kept || s.n_mesh != first.n_mesh {
            return Err(surface_glm::Error::DimensionMismatch(format!(
                "{} covers different locations than {}",
                p.display(),
                cfg.subjects[0].display()
            ))
            .into());
        }
    }
    let m = subjects.len();
    let k = first.task_names.len();
    let lambda = equal_weights(m);
    let mut tasks = Vec::with_capacity(k);
    let mut activations = Vec::new();
    let theta_g = match cfg.method {
        Method::Em => {
            let thetas = subjects
                .iter()
                .zip(&cfg.subjects)
                .map(|(s, p)| {
                    s.em.as_ref()
                        .map(|e| e.theta.clone())
                        .ok_or_else(|| InvalidConfig(format!("{} holds no EM fit", p.display())))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let theta_g = combine_theta(&thetas, &lambda, Default::default())?;
            let mut systems = Vec::with_capacity(m);
            let mut projectors = Vec::with_capacity(m);
            let mut op = None;
            let mut mesh = None;
            for (s, p) in subjects.iter().zip(&cfg.subjects) {
                let data = SubjectData::load(&s.inputs)?;
                match &mesh {
                    None => {
                        op = Some(operator(&data.mesh)?);
                        mesh = Some(data.mesh.clone());
                    }
                    Some(first) if *first != data.mesh => {
                        return Err(surface_glm::Error::DimensionMismatch(format!(
                            "{} uses a different mesh",
                            p.display()
                        ))
                        .into());
                    }
                    _ => {}
                }
                let prep = prepare(&data, &s.preprocess)?;
                if prep.kept != first.kept {
                    return Err(surface_glm::Error::Validation(format!(
                        "preprocessing {} no longer reproduces its kept locations",
                        p.display()
                    ))
                    .into());
                }
                let op = op.clone().expect("operator built with the first mesh");
                systems.push(PosteriorSystem::new(&prep.input, op)?);
                projectors.push(Projector::identity(first.n_mesh).select_rows(&first.kept));
            }
            let model = GroupModel::new(&systems, projectors, theta_g.clone(), lambda.clone())?;
            for t in 0..k {
                let contrast = Contrast::task_average(m, k, t)?;
                let inf = group_inference(
                    &model,
                    &contrast,
                    &cfg.gamma,
                    cfg.alpha,
                    cfg.draws,
                    draw_seed(cfg.seed),
                )?;
                for ex in &inf.excursions {
                    activations.push(ActivationRecord {
                        task: first.task_names[t].clone(),
                        gamma: ex.gamma,
                        level: cfg.alpha,
                        active: to_vertices(&ex.active, &first.kept),
                    });
                }
                tasks.push(GroupTask {
                    task: first.task_names[t].clone(),
                    contrast,
                    mean: inf.mean,
                });
            }
            Some(theta_g)
        }
        Method::Classical => {
            let fits = subjects
                .iter()
                .map(|s| classical_fit(&s.classical))
                .collect::<anyhow::Result<Vec<_>>>()?;
            for t in 0..k {
                let contrast = Contrast::task_average(m, k, t)?;
                let g = classical_group(&fits, &contrast)?;
                for &gamma in &cfg.gamma {
                    let mask = classical_group_activation(&g, gamma, cfg.fdr_q)?;
                    activations.push(ActivationRecord {
                        task: first.task_names[t].clone(),
                        gamma,
                        level: cfg.fdr_q,
                        active: to_vertices(&mask, &first.kept),
                    });
                }
                tasks.push(GroupTask {
                    task: first.task_names[t].clone(),
                    contrast,
                    mean: g.estimate,
                });
            }
            None
        }
    };
    let res = GroupResultsFile {
        format: GROUP_FORMAT.into(),
        method: cfg.method,
        seed: cfg.seed,
        subjects: cfg
            .subjects
            .iter()
            .map(|p| fs::canonicalize(p).unwrap_or_else(|_| p.clone()))
            .collect(),
        lambda,
        theta_g,
        draws: cfg.draws,
        alpha: cfg.alpha,
        fdr_q: cfg.fdr_q,
        n_mesh: first.n_mesh,
        task_names: first.task_names.clone(),
        kept: first.kept.clone(),
        tasks,
        activations,
        seconds: start.elapsed().as_secs_f64(),
    };
    res.validate()?;
    create_dir(&cfg.output)?;
    save_json(&cfg.output.join("group.json"), &res)?;
    let means: Vec<Vec<f64>> = res.tasks.iter().map(|t| t.mean.clone()).collect();
    io::save_matrix(
        cfg.output.join("group_mean.matrix"),
        &vertex_matrix(&means, &res.kept, res.n_mesh),
    )?;
    save_masks(
        &cfg.output.join("group_masks.matrix"),
        &res.activations,
        res.n_mesh,
    )?;
    Ok(Status::Success)
}

fn failed_row(
    scenario: &str,
    replicate: usize,
    method: Method,
    err: &anyhow::Error,
) -> BenchmarkRow {
    BenchmarkRow {
        scenario: scenario.into(),
        replicate,
        method,
        rmse: f64::NAN,
        dice: f64::NAN,
        seconds: f64::NAN,
        iterations: 0,
        converged: false,
        status: format!("{err:#}"),
    }
}

/// Scores one analysis against the first subject's truth: RMSE over every
/// task and kept location, Dice of the activation masks at `gamma[0]`
/// pooled over tasks.
fn score(
    scenario: &SimulationScenario,
    replicate: usize,
    method: Method,
    truth: &[Vec<f64>],
    prep: &Prepared,
    out: &Outcome,
    gamma: f64,
) -> anyhow::Result<BenchmarkRow> {
    let mut est = Vec::new();
    let mut tru = Vec::new();
    let mut found = Vec::new();
    let mut active = Vec::new();
    for (k, b) in out.beta.iter().enumerate() {
        est.extend_from_slice(b);
        tru.extend(prep.kept.iter().map(|&v| truth[k][v]));
        let name = &prep.task_names[k];
        let act = out
            .activations
            .iter()
            .find(|a| &a.task == name && a.gamma == gamma)
            .expect("activation for every task and threshold");
        let mask = act.mask(prep.n_mesh);
        found.extend(prep.kept.iter().map(|&v| mask[v]));
        active.extend(prep.kept.iter().map(|&v| truth[k][v] > gamma));
    }
    Ok(BenchmarkRow {
        scenario: scenario.name.clone(),
        replicate,
        method,
        rmse: rmse(&est, &tru)?,
        dice: dice_masks(&found, &active)?,
        seconds: out.fit_secs,
        iterations: out.em.as_ref().map_or(0, |f| f.iterations),
        converged: out.converged(),
        status: "ok".into(),
    })
}

/// Seed of replicate `r` of scenario `s`.
pub fn replicate_seed(seed: u64, s: usize, r: usize) -> u64 {
    seed::derive(seed, &[s as u64, r as u64])
}

/// Rows for one replicate; the first subject of the simulated scenario is
/// analyzed by every method.
pub fn benchmark_replicate(
    cfg: &RunConfig,
    s: usize,
    sc: &SimulationScenario,
    r: usize,
) -> Vec<BenchmarkRow> {
    let seed = replicate_seed(cfg.seed, s, r);
    let prepared = (|| {
        let mut sc = sc.clone();
        sc.seed = seed;
        let pop = simulate_population(&sc)?;
        let sub = &pop.subjects[0];
        let data = SubjectData {
            mesh: pop.mesh.mesh.clone(),
            runs: sub.runs.clone(),
            stimuli: pop.stimuli.clone(),
            nuisance: None,
        };
        let opts = surface_glm::preprocess::PreprocessOptions {
            prewhiten: cfg.preprocess.prewhiten && !sc.ar_coeffs.is_empty(),
            ..cfg.preprocess.clone()
        };
        let prep = prepare(&data, &opts)?;
        anyhow::Ok((prep, operator(&data.mesh)?, sub.truth.clone()))
    })();
    let (prep, op, truth) = match prepared {
        Ok(p) => p,
        Err(e) => {
            return cfg
                .methods
                .iter()
                .map(|&m| failed_row(&sc.name, r, m, &e))
                .collect();
        }
    };
    cfg.methods
        .iter()
        .map(|&method| {
            let mut a = analysis(cfg, method);
            a.seed = seed;
            a.fit.seed = seed;
            analyze(&prep, op.clone(), &a)
                .and_then(|out| score(sc, r, method, &truth, &prep, &out, cfg.gamma[0]))
                .unwrap_or_else(|e| failed_row(&sc.name, r, method, &e))
        })
        .collect()
}

/// Runs every scenario × replicate × method and writes `benchmark.csv`.
/// Rows are written as each replicate finishes.
pub fn benchmark(cfg: &RunConfig) -> anyhow::Result<Status> {
    if cfg.scenarios.is_empty() || cfg.replicates == 0 || cfg.methods.is_empty() {
        return Err(
            InvalidConfig("benchmark needs scenarios, replicates and methods".into()).into(),
        );
    }
    for sc in &cfg.scenarios {
        sc.validate()?;
    }
    create_dir(&cfg.output)?;
    let path = cfg.output.join("benchmark.csv");
    let mut w =
        csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    for (s, sc) in cfg.scenarios.iter().enumerate() {
        for r in 0..cfg.replicates {
            for row in benchmark_replicate(cfg, s, sc, r) {
                if row.status != "ok" {
                    log::warn!("{} replicate {r} {}: {}", sc.name, row.method, row.status);
                }
                w.serialize(&row)?;
            }
            w.flush()?;
        }
    }
    Ok(Status::Success)
}

pub fn read_benchmark(path: &Path) -> anyhow::Result<Vec<BenchmarkRow>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<Vec<BenchmarkRow>, _>>()?)
}
