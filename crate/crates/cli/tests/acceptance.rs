//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criterion outcomes are reported, not asserted, so that a criterion the
//! implementation does not meet shows up as FAIL without hiding the others.
//! Runs without the test harness so the report is printed under `cargo test`;
//! it exits nonzero only if a criterion cannot be evaluated.

#[path = "../../core/tests/oracle/mod.rs"]
mod oracle;

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};
use surface_glm::em::{
    fit_subject, hutchinson_trace, EmModel, FitOptions, PosteriorSystem, SubjectInput, TraceMode,
};
use surface_glm::group::{
    classical_group, classical_group_activation, combine_theta, equal_weights, group_inference,
    CombineScale, Contrast, GroupModel,
};
use surface_glm::inference::{dice_masks, excursion_set, rmse};
use surface_glm::preprocess::{
    ar_covariance, hrf_double_gamma, scale_percent_change, whitening_matrix, ArModel,
    PreprocessOptions,
};
use surface_glm::simulate::{simulate_population, SimulationScenario};
use surface_glm::{build_fem_matrices, seed, CholeskyFactor, CscMatrix, SpdeOperator};
use surface_glm_cli::commands::benchmark_replicate;
use surface_glm_cli::pipeline::{operator, prepare, SubjectData};
use surface_glm_cli::{Method, RunConfig};

type Check = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn dense_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for s in 0..20 {
        let toy = oracle::random_toy(s);
        let op = Arc::new(SpdeOperator::new(build_fem_matrices(&toy.mesh).unwrap()).unwrap());
        let em = EmModel::new(&toy.input(), op, FitOptions::default()).unwrap();
        let dense = oracle::DenseModel::new(&toy);
        let want = dense.step(&toy.theta);
        let post = em.system().posterior(&toy.theta, TraceMode::Exact).unwrap();
        for (a, b) in post.mu.iter().zip(want.mu.iter()) {
            worst = worst.max((a - b).abs() / (1e-12 + b.abs()).max(1.0));
        }
        let got = em.update(&toy.theta, TraceMode::Exact).unwrap();
        worst = worst.max(oracle::rel_err(got.sigma2, want.sigma2));
        for k in 0..toy.k {
            worst = worst.max(oracle::rel_err(got.phi[k], want.phi[k]));
            worst = worst.max(oracle::rel_err(got.kappa2[k], want.kappa2[k]));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: worst < 1e-6 && secs < 10.0,
        detail: format!("max relative error {worst:.2e}, {secs:.1} s"),
    }
}

fn em_ascent() -> Outcome {
    let start = Instant::now();
    let mut worst_drop = 0.0f64;
    for s in 0..10 {
        let toy = oracle::random_toy(100 + s);
        let op = Arc::new(SpdeOperator::new(build_fem_matrices(&toy.mesh).unwrap()).unwrap());
        let opts = FitOptions {
            accelerate: false,
            ..FitOptions::default()
        };
        let em = EmModel::new(&toy.input(), op, opts).unwrap();
        let dense = oracle::DenseModel::new(&toy);
        let mut theta = toy.theta.clone();
        for _ in 0..20 {
            let next = em.update(&theta, TraceMode::Exact).unwrap();
            let before = dense.expected_complete_loglik(&theta, &theta);
            let after = dense.expected_complete_loglik(&next, &theta);
            worst_drop = worst_drop.max(before - after);
            theta = next;
        }
    }
    Outcome {
        pass: worst_drop <= 1e-6,
        detail: format!(
            "largest per-step decrease of the dense objective {worst_drop:.2e} over 10 toys x 20 iterations, {:.1} s",
            start.elapsed().as_secs_f64()
        ),
    }
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
    &b * b.transpose() + DMatrix::identity(n, n)
}

fn hutchinson_accuracy() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut hits = 0;
    for trial in 0..1000u64 {
        let p = random_spd(100, &mut rng);
        let a = random_spd(100, &mut rng);
        let exact = (&a * p.clone().try_inverse().unwrap()).trace();
        let f = CholeskyFactor::new(&CscMatrix::from_dense(&p, 0.0)).unwrap();
        let est = hutchinson_trace(&CscMatrix::from_dense(&a, 0.0), &f, 50, trial);
        if ((est - exact) / exact).abs() <= 0.1 {
            hits += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: hits >= 950 && secs < 60.0,
        detail: format!("{hits}/1000 within 10%, {secs:.1} s"),
    }
}

/// First subject of a single-subject scenario, preprocessed without
/// prewhitening (the simulated noise is white).
fn single_subject(
    n: usize,
    k: usize,
    replicate: u64,
) -> (
    surface_glm_cli::pipeline::Prepared,
    Arc<SpdeOperator>,
    Vec<Vec<f64>>,
) {
    let sc = SimulationScenario {
        seed: seed::derive(4, &[replicate]),
        ..SimulationScenario::single_subject(n, k)
    };
    let pop = simulate_population(&sc).unwrap();
    let data = SubjectData {
        mesh: pop.mesh.mesh.clone(),
        runs: pop.subjects[0].runs.clone(),
        stimuli: pop.stimuli.clone(),
        nuisance: None,
    };
    let opts = PreprocessOptions {
        prewhiten: false,
        ..PreprocessOptions::default()
    };
    let prep = prepare(&data, &opts).unwrap();
    let op = operator(&data.mesh).unwrap();
    (prep, op, pop.subjects[0].truth.clone())
}

fn stacked_rmse(beta: &[Vec<f64>], truth: &[Vec<f64>], kept: &[usize]) -> f64 {
    let est: Vec<f64> = beta.iter().flatten().copied().collect();
    let tru: Vec<f64> = truth
        .iter()
        .flat_map(|t| kept.iter().map(move |&v| t[v]))
        .collect();
    rmse(&est, &tru).unwrap()
}

fn stopping_tolerance() -> Outcome {
    let start = Instant::now();
    let eps = [1.0, 0.1, 0.01, 0.001];
    let mut iters = vec![Vec::new(); eps.len()];
    let mut errs = vec![Vec::new(); eps.len()];
    for r in 0..9 {
        let (prep, op, truth) = single_subject(5000, 4, r);
        for (i, &e) in eps.iter().enumerate() {
            let opts = FitOptions {
                epsilon: e,
                seed: r,
                ..FitOptions::default()
            };
            let fit = fit_subject(&prep.input, op.clone(), &opts).unwrap();
            iters[i].push(fit.iterations as f64);
            errs[i].push(stacked_rmse(&fit.beta_mean, &truth, &prep.kept));
        }
    }
    let med_it: Vec<f64> = iters.into_iter().map(median).collect();
    let med_rmse: Vec<f64> = errs.into_iter().map(median).collect();
    let increasing = med_it.windows(2).all(|w| w[1] > w[0]);
    Outcome {
        pass: med_rmse[3] <= med_rmse[0] && increasing,
        detail: format!(
            "median iterations {med_it:?}, median RMSE {:?}, {:.0} s",
            med_rmse
                .iter()
                .map(|x| format!("{x:.4}"))
                .collect::<Vec<_>>(),
            start.elapsed().as_secs_f64()
        ),
    }
}

fn single_subject_accuracy() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig {
        seed: 5,
        draws: 100,
        methods: vec![Method::Em, Method::Classical],
        ..RunConfig::default()
    };
    let sc = SimulationScenario::single_subject(2000, 2);
    let mut wins = 0;
    let mut pairs = Vec::new();
    for r in 0..10 {
        let rows = benchmark_replicate(&cfg, 0, &sc, r);
        assert!(rows.iter().all(|row| row.status == "ok"), "{rows:?}");
        let (em, cl) = (rows[0].rmse, rows[1].rmse);
        if em < cl {
            wins += 1;
        }
        pairs.push(format!("{em:.3}/{cl:.3}"));
    }
    Outcome {
        pass: wins >= 8,
        detail: format!(
            "EM better in {wins}/10 (EM/classical RMSE {}), {:.0} s",
            pairs.join(" "),
            start.elapsed().as_secs_f64()
        ),
    }
}

fn multi_subject_dice() -> Outcome {
    let start = Instant::now();
    let sc = SimulationScenario {
        seed: 6,
        n_target: 2000,
        ..SimulationScenario::population(50)
    };
    let pop = simulate_population(&sc).unwrap();
    let op = operator(&pop.mesh.mesh).unwrap();
    let opts = PreprocessOptions {
        prewhiten: false,
        ..PreprocessOptions::default()
    };
    let mut inputs: Vec<SubjectInput> = Vec::new();
    let mut thetas = Vec::new();
    let mut fits = Vec::new();
    let mut kept = None;
    for (m, sub) in pop.subjects.iter().enumerate() {
        let data = SubjectData {
            mesh: pop.mesh.mesh.clone(),
            runs: sub.runs.clone(),
            stimuli: pop.stimuli.clone(),
            nuisance: None,
        };
        let prep = prepare(&data, &opts).unwrap();
        assert!(kept.get_or_insert_with(|| prep.kept.clone()) == &prep.kept);
        let f = fit_subject(
            &prep.input,
            op.clone(),
            &FitOptions {
                seed: m as u64,
                ..FitOptions::default()
            },
        )
        .unwrap();
        thetas.push(f.theta);
        fits.push(f.classical);
        inputs.push(prep.input);
    }
    let kept = kept.unwrap();
    let k = sc.k;
    let truth: Vec<bool> = (0..k)
        .flat_map(|t| {
            let a = pop.active_set(t, 0.0);
            kept.iter().map(move |&v| a[v]).collect::<Vec<_>>()
        })
        .collect();
    let mut rng = seed::rng(6, &[77]);
    let mut bayes = Vec::new();
    let mut classical = Vec::new();
    for s in 0..10 {
        let mut ids: Vec<usize> = (0..50).collect();
        for i in 0..10 {
            let j = rng.random_range(i..50);
            ids.swap(i, j);
        }
        let subset = &ids[..10];
        let lambda = equal_weights(10);
        let sub_thetas: Vec<_> = subset.iter().map(|&m| thetas[m].clone()).collect();
        let theta_g = combine_theta(&sub_thetas, &lambda, CombineScale::Raw).unwrap();
        let systems: Vec<PosteriorSystem> = subset
            .iter()
            .map(|&m| PosteriorSystem::new(&inputs[m], op.clone()).unwrap())
            .collect();
        let projectors = subset
            .iter()
            .map(|&m| inputs[m].projector().clone())
            .collect();
        let model = GroupModel::new(&systems, projectors, theta_g, lambda).unwrap();
        let sub_fits: Vec<_> = subset.iter().map(|&m| fits[m].clone()).collect();
        let mut found_b = Vec::new();
        let mut found_c = Vec::new();
        for t in 0..k {
            let c = Contrast::task_average(10, k, t).unwrap();
            let inf =
                group_inference(&model, &c, &[0.0], 0.01, 1000, seed::derive(6, &[s])).unwrap();
            found_b.extend_from_slice(&inf.excursions[0].active);
            let g = classical_group(&sub_fits, &c).unwrap();
            found_c.extend(classical_group_activation(&g, 0.0, 0.01).unwrap());
        }
        bayes.push(dice_masks(&found_b, &truth).unwrap());
        classical.push(dice_masks(&found_c, &truth).unwrap());
    }
    let (mb, mc) = (median(bayes), median(classical));
    Outcome {
        pass: mb > mc,
        detail: format!(
            "median Dice Bayesian {mb:.3} vs classical {mc:.3}, {} vertices, {:.0} s",
            pop.mesh.mesh.n_vertices(),
            start.elapsed().as_secs_f64()
        ),
    }
}

const EXCEED: [f64; 5] = [0.999, 0.99, 0.9, 0.5, 0.1];

fn brute_force(alpha: f64) -> Vec<bool> {
    let mut best: Option<(u32, f64, u32)> = None;
    for mask in 0u32..32 {
        let prob: f64 = (0..5)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| EXCEED[i])
            .product();
        let size = mask.count_ones();
        if prob >= 1.0 - alpha && best.is_none_or(|(s, p, _)| size > s || (size == s && prob > p)) {
            best = Some((size, prob, mask));
        }
    }
    let m = best.unwrap().2;
    (0..5).map(|i| m >> i & 1 == 1).collect()
}

fn excursion_oracle() -> Outcome {
    let start = Instant::now();
    let z = Normal::new(0.0, 1.0).unwrap();
    let means: Vec<f64> = EXCEED.iter().map(|&p| z.inverse_cdf(p)).collect();
    let mut agree = 0;
    for alpha in [0.01, 0.05, 0.1] {
        let want = brute_force(alpha);
        for s in 0..10u64 {
            let mut rng = seed::rng(s, &[7]);
            let draws: Vec<Vec<f64>> = (0..100_000)
                .map(|_| {
                    means
                        .iter()
                        .map(|m| {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            m + e
                        })
                        .collect()
                })
                .collect();
            if excursion_set(&draws, 0.0, alpha).unwrap().active == want {
                agree += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: agree == 30 && secs < 60.0,
        detail: format!("{agree}/30 match enumeration, {secs:.1} s"),
    }
}

/// Stationary AR(p) from partial autocorrelations in (−0.9, 0.9).
fn random_stationary(p: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut a: Vec<f64> = Vec::new();
    for _ in 0..p {
        let r = rng.random_range(-0.9..0.9);
        let prev = a.clone();
        let k = prev.len();
        a = (0..k).map(|j| prev[j] - r * prev[k - 1 - j]).collect();
        a.push(r);
    }
    a
}

/// Autocovariances `γ(0..t)` from the MA(∞) expansion, truncated once the
/// weights have decayed below 1e-15 of their peak over `p` consecutive lags.
fn ma_autocovariance(phi: &[f64], var: f64, t: usize) -> Vec<f64> {
    let p = phi.len();
    let mut psi = vec![1.0];
    let mut peak = 1.0f64;
    let mut quiet = 0;
    while quiet < p || psi.len() < t {
        let j = psi.len();
        let next: f64 = (1..=p.min(j)).map(|i| phi[i - 1] * psi[j - i]).sum();
        peak = peak.max(next.abs());
        quiet = if next.abs() < 1e-15 * peak {
            quiet + 1
        } else {
            0
        };
        psi.push(next);
    }
    let len = psi.len();
    (0..t)
        .map(|h| var * (0..len - h).map(|j| psi[j] * psi[j + h]).sum::<f64>())
        .collect()
}

fn preprocessing_identities() -> Outcome {
    let t = 300;
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut worst_dsd = 0.0f64;
    let mut worst_cov = 0.0f64;
    for _ in 0..100 {
        let model = ArModel {
            coeffs: random_stationary(6, &mut rng),
            innovation_var: rng.random_range(0.2..2.0),
        };
        let g = ma_autocovariance(&model.coeffs, model.innovation_var, t);
        let s = DMatrix::from_fn(t, t, |i, j| g[i.abs_diff(j)]);
        worst_cov = worst_cov.max((ar_covariance(&model, t).unwrap() - &s).amax() / g[0]);
        let d = whitening_matrix(&model, t).unwrap();
        worst_dsd = worst_dsd.max((&d * &s * &d - DMatrix::identity(t, t)).amax());
    }
    let mut worst_sum = 0.0f64;
    for _ in 0..100 {
        let y: Vec<f64> = (0..t).map(|_| 100.0 + 10.0 * rng.random::<f64>()).collect();
        let pc = scale_percent_change(&y).unwrap();
        worst_sum = worst_sum.max(pc.iter().sum::<f64>().abs() / t as f64);
    }
    let (mut peak, mut best) = (0.0, f64::NEG_INFINITY);
    for i in 0..=3000 {
        let x = i as f64 * 0.01;
        let h = hrf_double_gamma(x).unwrap();
        if h > best {
            best = h;
            peak = x;
        }
    }
    let ok_dsd = worst_dsd < 1e-8;
    let ok_sum = worst_sum < 1e-10;
    let ok_peak = (peak - 5.0f64).abs() <= 0.2;
    Outcome {
        pass: ok_dsd && ok_sum && ok_peak,
        detail: format!(
            "max |DSD - I| {worst_dsd:.1e} (covariance vs MA oracle {worst_cov:.1e}), \
             max |sum|/T {worst_sum:.1e}, HRF peak {peak:.2} s"
        ),
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_surface-glm"))
}

fn run_ok(args: &[&str], threads: usize) {
    let out = bin()
        .args(args)
        .args(["--threads", &threads.to_string()])
        .output()
        .unwrap();
    assert!(
        out.status.code() == Some(0),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// JSON with timing fields removed and the run directory replaced by a
/// placeholder in recorded paths.
fn strip_timing(path: &Path, root: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path)
        .unwrap()
        .replace(root.to_str().unwrap(), "<run>");
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let obj = v.as_object_mut().unwrap();
    obj.remove("timing");
    obj.remove("seconds");
    v
}

fn csv_without_seconds(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let secs = r
        .headers()
        .unwrap()
        .iter()
        .position(|h| h == "seconds")
        .unwrap();
    r.records()
        .map(|rec| {
            rec.unwrap()
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != secs)
                .map(|(_, f)| f.to_string())
                .collect()
        })
        .collect()
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let mut diffs = Vec::new();
    let mut outputs = Vec::new();
    for threads in [1, 4] {
        let dir = root.path().join(format!("t{threads}"));
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = dir.join("run.json");
        std::fs::write(
            &cfg,
            r#"{
  "scenario": {"n_target": 400, "k": 2, "t": 120, "subjects": 2, "subject_shift_mm": 5, "ar_coeffs": [0.3]},
  "scenarios": [{"name": "small", "n_target": 400, "k": 2}],
  "replicates": 2,
  "draws": 200
}"#,
        )
        .unwrap();
        let d = |p: &str| dir.join(p).to_string_lossy().into_owned();
        let c = d("run.json");
        run_ok(
            &["simulate", "--config", &c, "--seed", "3", "-o", &d("sim")],
            threads,
        );
        for m in 0..2 {
            let fit_cfg = d(&format!("sim/sub-{m:03}_fit.json"));
            run_ok(&["fit", "--config", &fit_cfg, "--draws", "200"], threads);
            run_ok(
                &[
                    "fit",
                    "--config",
                    &fit_cfg,
                    "--method",
                    "classical",
                    "-o",
                    &d(&format!("cl{m}")),
                ],
                threads,
            );
        }
        let r0 = d("sim/fit-sub-000/results.json");
        let r1 = d("sim/fit-sub-001/results.json");
        run_ok(
            &["group", "--draws", "200", "-o", &d("grp"), &r0, &r1],
            threads,
        );
        run_ok(
            &[
                "group",
                "--method",
                "classical",
                "-o",
                &d("grpc"),
                &d("cl0/results.json"),
                &d("cl1/results.json"),
            ],
            threads,
        );
        run_ok(
            &[
                "benchmark",
                "--config",
                &c,
                "--seed",
                "3",
                "-o",
                &d("bench"),
            ],
            threads,
        );
        outputs.push(dir);
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    for entry in std::fs::read_dir(a.join("sim")).unwrap() {
        let name = entry.unwrap().file_name();
        let p = Path::new("sim").join(&name);
        if a.join(&p).is_file()
            && std::fs::read(a.join(&p)).unwrap() != std::fs::read(b.join(&p)).unwrap()
        {
            diffs.push(p.display().to_string());
        }
    }
    let mut compare_json = |p: &str| {
        if strip_timing(&a.join(p), a) != strip_timing(&b.join(p), b) {
            diffs.push(p.to_string());
        }
    };
    for p in [
        "sim/fit-sub-000/results.json",
        "sim/fit-sub-001/results.json",
        "cl0/results.json",
        "grp/group.json",
        "grpc/group.json",
    ] {
        compare_json(p);
    }
    for p in [
        "sim/fit-sub-000/beta.matrix",
        "sim/fit-sub-000/masks.matrix",
        "grp/group_mean.matrix",
        "grp/group_masks.matrix",
    ] {
        if std::fs::read(a.join(p)).unwrap() != std::fs::read(b.join(p)).unwrap() {
            diffs.push(p.to_string());
        }
    }
    if csv_without_seconds(&a.join("bench/benchmark.csv"))
        != csv_without_seconds(&b.join("bench/benchmark.csv"))
    {
        diffs.push("bench/benchmark.csv".into());
    }
    Outcome {
        pass: diffs.is_empty(),
        detail: format!(
            "simulate, fit (em, classical), group (em, classical), benchmark at 1 vs 4 threads; differing: {diffs:?}, {:.0} s",
            start.elapsed().as_secs_f64()
        ),
    }
}

fn main() {
    let criteria: [(&str, Check); 9] = [
        ("dense-oracle equivalence", dense_oracle),
        ("EM ascent", em_ascent),
        ("Hutchinson accuracy", hutchinson_accuracy),
        ("stopping tolerance", stopping_tolerance),
        ("single-subject accuracy", single_subject_accuracy),
        ("multi-subject Dice", multi_subject_dice),
        ("excursion oracle", excursion_oracle),
        ("preprocessing identities", preprocessing_identities),
        ("determinism", determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut lines = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            lines.push(format!("criterion {}: SKIPPED [{name}]", i + 1));
            continue;
        }
        let o = f();
        let line = format!(
            "criterion {}: {} [{}] {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            name,
            o.detail
        );
        println!("{line}");
        lines.push(line);
    }
    println!("\nacceptance summary");
    for l in &lines {
        println!("{l}");
    }
    assert_eq!(lines.len(), 9);
}
