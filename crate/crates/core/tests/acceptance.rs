//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! The desk-scale experiment (criteria 1-3) takes hours on one CPU core. Its
//! result is cached under the cargo target tmp dir, keyed by a hash of the
//! library sources and the desk config, so unchanged code is not retrained.
//! `BVIB_ACCEPTANCE_SKIP_DESK=1` skips it; criteria 1-3 then report FAIL.

use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use sha2::{Digest, Sha256};

use bvib::bayes::{be_layer_forward, be_materialize, concrete_gate, BatchEnsembleState};
use bvib::eval::{fit_pca, outlier_degree, outlier_terms, surface_to_surface};
use bvib::harness::{run_experiment, ExperimentConfig, Summary, SUMMARY_FILE};
use bvib::inference::{decompose_uncertainty, epistemic_one_pass, SampleSet, SampleTag};
use bvib::model::{reparameterize_with, LatentDist, Mode, ModelConfig, Network, Variant};
use bvib::nn::Grid5;
use bvib::objectives::{backprop_objective, kl_gauss_std_normal, step_objective, StepDraws};
use bvib::shapegen::{superformula_radius, SupershapeParams, SurfaceMesh, Volume};

// Pinned tolerances.
const R_ERROR_TOTAL_MIN: f64 = 0.5;
const RMSE_REDUCTION_MIN: f64 = 0.30;
const MC_DRAWS: usize = 1_000_000;
const MC_STANDARD_ERRORS: f64 = 3.0;
const ONE_PASS_REL_TOL: f64 = 1e-10;
const KL_INPUTS: usize = 20;
const KL_REL_TOL: f64 = 0.01;
const GATE_TEMPERATURE: f64 = 0.01;
const GATE_DRAWS: usize = 100_000;
const GATE_ABS_TOL: f64 = 0.02;
const BE_CONFIGS: usize = 100;
const BE_REL_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-4;
const RADIUS_GRID: usize = 1000;
const RADIUS_TOL: f64 = 1e-12;
const SPHERE_GAP_REL_TOL: f64 = 0.02;
const OUTLIER_MEAN_TOL: f64 = 1e-6;
const OUTLIER_2SIGMA_TOL: f64 = 1e-6;

struct Outcome {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: &'static str, name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, name, pass, detail }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------- desk scale

fn source_hash(config_text: &str) -> String {
    let mut files = Vec::new();
    let mut stack = vec![Path::new(env!("CARGO_MANIFEST_DIR")).join("src")];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).expect("src dir").flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.file_name().unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(&f).expect("source file"));
    }
    h.update(config_text.as_bytes());
    hex::encode(h.finalize())
}

/// Runs the desk experiment, or loads the cached summary of an identical one.
fn desk_summary() -> Result<Summary, String> {
    let path = repo_root().join("configs/desk.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut cfg = ExperimentConfig::from_toml(&text).map_err(|e| e.to_string())?;
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk");
    cfg.output_dir = root.join("experiments");
    cfg.dataset.path = Some(root.join("data"));
    let key = source_hash(&text);
    let stamp = root.join("cache.json");
    if let Ok(s) = std::fs::read_to_string(&stamp) {
        let v: serde_json::Value = serde_json::from_str(&s).map_err(|e| e.to_string())?;
        if v["key"] == key.as_str() {
            let dir = PathBuf::from(v["dir"].as_str().unwrap_or_default());
            if let Ok(summary) = Summary::read(&dir.join(SUMMARY_FILE)) {
                println!("desk experiment: reusing {} (sources unchanged)", dir.display());
                return Ok(summary);
            }
        }
    }
    println!("desk experiment: training {:?} x {} runs, this takes a while", cfg.variants, cfg.runs);
    let t0 = std::time::Instant::now();
    let bundle = run_experiment(&cfg).map_err(|e| e.to_string())?;
    println!("desk experiment: {} in {:.0} s", bundle.dir.display(), t0.elapsed().as_secs_f64());
    let v = serde_json::json!({ "key": key, "dir": bundle.dir });
    std::fs::write(&stamp, v.to_string()).map_err(|e| e.to_string())?;
    Ok(bundle.summary)
}

fn mean_over_runs(s: &Summary, v: Variant, f: impl Fn(&bvib::harness::RunMetrics) -> Option<f64>) -> Option<f64> {
    let vs = s.variant(v)?;
    let vals: Option<Vec<f64>> = vs.runs.iter().map(|r| f(&r.metrics)).collect();
    let vals = vals?;
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

fn desk_criteria(out: &mut Vec<Outcome>) {
    // Skipping (for quick iterations on the other criteria) counts as failing.
    let run = if std::env::var("BVIB_ACCEPTANCE_SKIP_DESK").is_ok_and(|v| v == "1") {
        Err("skipped by BVIB_ACCEPTANCE_SKIP_DESK=1".to_string())
    } else {
        desk_summary()
    };
    let summary = match run {
        Ok(s) => s,
        Err(e) => {
            for (id, name) in [
                ("1", "desk r(error, total) per BVIB variant"),
                ("2", "desk uncertainty-type separation"),
                ("3", "desk accuracy floor"),
            ] {
                out.push(outcome(id, name, false, format!("experiment failed: {e}")));
            }
            return;
        }
    };
    let bvib: Vec<Variant> = summary.variants.iter().map(|v| v.variant).filter(|v| v.is_bayesian()).collect();
    let expected = [Variant::Vib, Variant::Cd, Variant::Be, Variant::BeCd];
    let all_present = expected.iter().all(|v| summary.variant(*v).is_some_and(|s| s.runs.len() == 2));

    // 1: variant-level r is the mean over runs.
    let mut ok = all_present && summary.complete;
    let mut parts = Vec::new();
    for &v in &bvib {
        let per_run: Vec<String> = summary.variant(v).unwrap().runs.iter().map(|r| fmt_opt(r.metrics.r_error_total)).collect();
        let m = mean_over_runs(&summary, v, |m| m.r_error_total);
        ok &= m.is_some_and(|r| r >= R_ERROR_TOTAL_MIN);
        parts.push(format!("{v} {} (runs {})", fmt_opt(m), per_run.join(", ")));
    }
    out.push(outcome(
        "1",
        "desk r(error, total) >= 0.5 for every BVIB variant",
        ok,
        parts.join("; "),
    ));

    // 2: epistemic vs shape outliers, aleatoric vs blur.
    let mut ok = all_present;
    let mut parts = Vec::new();
    for &v in &bvib {
        let top = mean_over_runs(&summary, v, |m| m.epistemic_median_top_outliers);
        let bottom = mean_over_runs(&summary, v, |m| m.epistemic_median_bottom_outliers);
        let high = mean_over_runs(&summary, v, |m| m.aleatoric_mean_high_blur);
        let low = mean_over_runs(&summary, v, |m| m.aleatoric_mean_low_blur);
        let epi = matches!((top, bottom), (Some(t), Some(b)) if t > b);
        let ale = matches!((high, low), (Some(h), Some(l)) if h > l);
        ok &= epi && ale;
        parts.push(format!(
            "{v} epistemic top10% {} vs bottom50% {}, aleatoric blur[6,8] {} vs blur[1,3] {}",
            fmt_opt(top),
            fmt_opt(bottom),
            fmt_opt(high),
            fmt_opt(low)
        ));
    }
    out.push(outcome("2", "desk uncertainty-type separation", ok, parts.join("; ")));

    // 3: every run of every variant.
    let limit = (1.0 - RMSE_REDUCTION_MIN) * summary.baseline_rmse;
    let mut ok = all_present;
    let mut parts = vec![format!("baseline {:.4}, limit {limit:.4}", summary.baseline_rmse)];
    for vs in &summary.variants {
        let r: Vec<f64> = vs.runs.iter().map(|r| r.metrics.test_rmse).collect();
        ok &= r.iter().all(|&x| x <= limit);
        parts.push(format!("{} {:.4?}", vs.variant, r));
    }
    out.push(outcome("3", "desk RMSE at least 30% below the training-mean shape", ok, parts.join("; ")));
}

// ------------------------------------------------------------------ oracles

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, f) = (12, 6);
    let y_hat: Vec<Vec<f64>> = (0..t).map(|_| (0..f).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
    let sigma2: Vec<Vec<f64>> = (0..t).map(|_| (0..f).map(|_| rng.gen_range(0.05..2.0)).collect()).collect();
    let set = SampleSet::new(y_hat.clone(), sigma2.clone(), vec![SampleTag { member: 0, mask_stream: None }; t]).unwrap();
    let rep = decompose_uncertainty(&set).unwrap();

    // Brute force: draw a component uniformly, then y ~ N(ŷ_t, σ²_t).
    let (mut s1, mut s2) = (vec![0.0; f], vec![0.0; f]);
    let mut draws = vec![vec![0.0; f]; MC_DRAWS];
    for row in draws.iter_mut() {
        let k = rng.gen_range(0..t);
        for c in 0..f {
            let e: f64 = rng.sample(StandardNormal);
            row[c] = y_hat[k][c] + sigma2[k][c].sqrt() * e;
            s1[c] += row[c];
        }
    }
    let n = MC_DRAWS as f64;
    let mean: Vec<f64> = s1.iter().map(|s| s / n).collect();
    let mut m4 = vec![0.0; f];
    for row in &draws {
        for c in 0..f {
            let d = row[c] - mean[c];
            s2[c] += d * d;
            m4[c] += d.powi(4);
        }
    }
    let mut worst_z: f64 = 0.0;
    for c in 0..f {
        let var = s2[c] / (n - 1.0);
        let se = ((m4[c] / n - var * var) / n).sqrt();
        worst_z = worst_z.max((var - rep.total[c]).abs() / se);
    }
    let one = epistemic_one_pass(&set);
    let worst_rel = one
        .iter()
        .zip(&rep.epistemic)
        .map(|(a, b)| (a - b).abs() / b.abs())
        .fold(0.0, f64::max);
    outcome(
        "4",
        "variance decomposition vs mixture Monte Carlo, one-pass vs two-pass",
        worst_z <= MC_STANDARD_ERRORS && worst_rel <= ONE_PASS_REL_TOL,
        format!("worst |z| {worst_z:.3} (limit 3), one-pass relative error {worst_rel:.2e} (limit 1e-10)"),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..KL_INPUTS {
        let d = rng.gen_range(1..=4);
        let mu: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lv: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let exact = kl_gauss_std_normal(&mu, &lv);
        // E_q[log q(z) − log p(z)] with z = μ + σε.
        let mut acc = 0.0;
        for _ in 0..MC_DRAWS {
            for j in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                let z = mu[j] + (0.5 * lv[j]).exp() * e;
                acc += -0.5 * lv[j] - 0.5 * e * e + 0.5 * z * z;
            }
        }
        let mc = acc / MC_DRAWS as f64;
        worst = worst.max((mc - exact).abs() / exact);
    }
    let unit = kl_gauss_std_normal(&[1.0], &[0.0]);
    outcome(
        "5",
        "KL(N(mu, sigma^2) || N(0, I)) vs Monte Carlo, exact at (1, 0)",
        worst <= KL_REL_TOL && unit == 0.5,
        format!("worst relative error {worst:.4} over {KL_INPUTS} inputs (limit 0.01), KL(1, 0) = {unit}"),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ok = true;
    let mut parts = Vec::new();
    for &p in &[0.1, 0.3, 0.5, 0.8] {
        let mut hits = 0usize;
        for _ in 0..GATE_DRAWS {
            let u: f64 = rng.gen_range(0.0..1.0);
            if u == 0.0 {
                continue;
            }
            hits += (concrete_gate(p, u, GATE_TEMPERATURE).unwrap() > 0.5) as usize;
        }
        let frac = hits as f64 / GATE_DRAWS as f64;
        ok &= (frac - p).abs() <= GATE_ABS_TOL;
        parts.push(format!("p {p}: {frac:.4}"));
    }
    outcome("6", "concrete gates at t = 0.01 behave as Bernoulli(p)", ok, parts.join(", "))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..BE_CONFIGS {
        let k = rng.gen_range(1..=6);
        let (i, o, n) = (rng.gen_range(1..=24), rng.gen_range(1..=24), rng.gen_range(1..=12));
        let mut g = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || rng.gen_range(-2.0..2.0));
        let state = BatchEnsembleState {
            shared: g(o, i),
            bias: g(1, o).row(0).to_owned(),
            r: g(k, o),
            s: g(k, i),
        };
        let x = g(n, i);
        let members: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let fast = be_layer_forward(&x, &members, &state).unwrap();
        for (row, &m) in members.iter().enumerate() {
            let w = be_materialize(state.shared.view(), state.r.row(m), state.s.row(m)).unwrap();
            let y = w.dot(&x.row(row)) + &state.bias;
            for (a, b) in fast.row(row).iter().zip(&y) {
                worst = worst.max((a - b).abs() / b.abs().max(1e-12));
            }
        }
    }

    // Whole network: unit fast weights give the shared network for every member.
    let cfg = ModelConfig {
        input_dims: [6, 6, 6],
        latent_dim: 3,
        num_points: 4,
        conv_channels: vec![2, 3],
        encoder_fc: vec![5],
        decoder_fc: vec![6, 7],
        variant: Variant::Be,
        ensemble_size: 3,
        ..ModelConfig::default()
    };
    let mut be = Network::new(cfg, &mut rng).unwrap();
    be.set_unit_fast_weights();
    let shared = be.shared_network();
    let x = Volume::from_data([6, 6, 6], (0..216).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let base = shared.encode(&x, Mode::Eval, None, &mut rng).unwrap();
    let base_y = shared.decode(&base.mu, Mode::Eval, None, &mut rng).unwrap();
    let exact = (0..3).all(|k| {
        let d = be.encode(&x, Mode::Eval, Some(k), &mut rng).unwrap();
        let y = be.decode(&d.mu, Mode::Eval, Some(k), &mut rng).unwrap();
        d == base && y == base_y
    });
    outcome(
        "7",
        "batch-ensemble fast path and unit fast weights",
        worst <= BE_REL_TOL && exact,
        format!("worst relative difference {worst:.2e} on {BE_CONFIGS} layers (limit 1e-6), unit fast weights exact: {exact}"),
    )
}

fn tiny_net(variant: Variant) -> ModelConfig {
    ModelConfig {
        input_dims: [4, 4, 4],
        latent_dim: 2,
        num_points: 3,
        conv_channels: vec![2],
        kernel: 3,
        encoder_fc: vec![],
        decoder_fc: vec![5],
        variant,
        ensemble_size: 2,
        temperature: 0.5,
        init_drop: 0.3,
        length_scale: 0.5,
        dataset_size: 4,
    }
}

/// Largest relative difference between backprop and central differences of
/// the batch objective over every parameter entry.
fn network_gradient_error(variant: Variant, beta: f64, alpha: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut net = Network::new(tiny_net(variant), &mut rng).unwrap();
    let mut x = Grid5::zeros(3, 1, [4, 4, 4]);
    x.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    let y = Array2::from_shape_simple_fn((3, 9), || rng.gen_range(-1.0..1.0));
    let draws = StepDraws::sample(&net, 3, false, &mut rng);
    net.zero_grad();
    let (_, o, cache) = step_objective(&net, &x, &y, &draws, beta, alpha, true).unwrap();
    backprop_objective(&mut net, &cache, &o, &y, beta, alpha);
    let analytic: Vec<Vec<f64>> = net.params().iter().map(|(_, p)| p.grad.clone()).collect();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let mut eval = |d: f64| {
                net.params_mut()[pi].1.value[k] += d;
                let l = step_objective(&net, &x, &y, &draws, beta, alpha, true).unwrap().0.total;
                net.params_mut()[pi].1.value[k] -= d;
                l
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-3));
        }
    }
    worst
}

fn criterion_8() -> Outcome {
    let vib = network_gradient_error(Variant::Vib, 0.01, 1.0);
    let cd = network_gradient_error(Variant::Cd, 0.01, 1.0);
    let cd_blend = network_gradient_error(Variant::Cd, 0.01, 0.6);

    // z = μ + exp(lv/2)·ε: dz/dμ = 1, dz/dlv = exp(lv/2)·ε/2.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut rep: f64 = 0.0;
    let h = 1e-6;
    for _ in 0..50 {
        let mu: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lv: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let eps: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        for j in 0..3 {
            let z = |dm: f64, dl: f64| {
                let (mut m, mut l) = (mu.clone(), lv.clone());
                m[j] += dm;
                l[j] += dl;
                reparameterize_with(&LatentDist { mu: m, log_var: l }, &eps)[j]
            };
            let fd_mu = (z(h, 0.0) - z(-h, 0.0)) / (2.0 * h);
            let fd_lv = (z(0.0, h) - z(0.0, -h)) / (2.0 * h);
            let a_lv = 0.5 * (0.5 * lv[j]).exp() * eps[j];
            rep = rep.max((fd_mu - 1.0).abs());
            rep = rep.max((fd_lv - a_lv).abs() / fd_lv.abs().max(a_lv.abs()).max(1e-3));
        }
    }
    let worst = vib.max(cd).max(cd_blend).max(rep);
    outcome(
        "8",
        "analytic gradients vs central differences",
        worst <= GRAD_REL_TOL,
        format!(
            "VIB {vib:.2e}, CD BVIB with regularizer {cd:.2e}, CD during burn-in blend {cd_blend:.2e}, reparameterize {rep:.2e} (limit 1e-4)"
        ),
    )
}

fn criterion_9() -> Outcome {
    let p = SupershapeParams::new(4, 2.0, 2.0, 2.0);
    let worst = (0..RADIUS_GRID)
        .map(|i| {
            let th = -std::f64::consts::PI + 2.0 * std::f64::consts::PI * i as f64 / (RADIUS_GRID - 1) as f64;
            (superformula_radius(th, &p).unwrap() - 1.0).abs()
        })
        .fold(0.0, f64::max);
    let (r1, r2) = (10.0, 12.0);
    let a = SurfaceMesh::sphere(r1, 128, 64).unwrap();
    let b = SurfaceMesh::sphere(r2, 128, 64).unwrap();
    let d = surface_to_surface(&a, &b, 10_000).unwrap();
    let rel = (d - (r2 - r1)).abs() / (r2 - r1);
    outcome(
        "9",
        "superformula sphere identity and concentric-sphere distance",
        worst <= RADIUS_TOL && rel <= SPHERE_GAP_REL_TOL,
        format!("max |r - 1| {worst:.1e} (limit 1e-12), gap {d:.4} vs 2 ({:.2}%, limit 2%)", 100.0 * rel),
    )
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (n, f) = (200, 12);
    let scales: Vec<f64> = (0..f).map(|j| 5.0 / (1.0 + j as f64)).collect();
    let mix = Array2::from_shape_simple_fn((f, f), || rng.gen_range(-1.0..1.0));
    let data: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let z: Vec<f64> = scales.iter().map(|s| Normal::new(0.0, *s).unwrap().sample(&mut rng)).collect();
            (0..f).map(|r| 3.0 + (0..f).map(|c| mix[[r, c]] * z[c]).sum::<f64>()).collect()
        })
        .collect();
    let pca = fit_pca(&data, 0.95).unwrap();
    let at_mean = outlier_degree(&pca.mean, &pca).unwrap();
    let sigma = pca.eigenvalues[0].sqrt();
    let v: Vec<f64> = pca.mean.iter().zip(&pca.components[0]).map(|(m, c)| m + 2.0 * sigma * c).collect();
    let (within, _) = outlier_terms(&v, &pca).unwrap();
    outcome(
        "10",
        "outlier degree at the mean and at 2 sigma",
        at_mean < OUTLIER_MEAN_TOL && (within - 2.0).abs() <= OUTLIER_2SIGMA_TOL,
        format!("mean scores {at_mean:.1e} (limit 1e-6), 2 sigma within-subspace term {within:.9}"),
    )
}

fn criterion_11() -> Outcome {
    let config = repo_root().join("configs/tiny.toml");
    let tmp = tempfile::tempdir().unwrap();
    let mut summaries = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_bvib"))
            .args(["run-all", "--config"])
            .arg(&config)
            .args(["--seed", "11", "--out"])
            .arg(&out)
            .env("RUST_LOG", "warn")
            .status();
        match status {
            Ok(s) if s.success() => {}
            other => return outcome("11", "run-all determinism", false, format!("run-all failed: {other:?}")),
        }
        summaries.push(std::fs::read(out.join("run-001").join(SUMMARY_FILE)).unwrap_or_default());
    }
    let same = !summaries[0].is_empty() && summaries[0] == summaries[1];
    outcome(
        "11",
        "run-all with a fixed seed writes byte-identical summaries",
        same,
        format!("{} and {} bytes, identical: {same}", summaries[0].len(), summaries[1].len()),
    )
}

fn main() {
    let mut results = vec![
        criterion_4(),
        criterion_5(),
        criterion_6(),
        criterion_7(),
        criterion_8(),
        criterion_9(),
        criterion_10(),
        criterion_11(),
    ];
    desk_criteria(&mut results);
    results.sort_by_key(|o| o.id.parse::<u32>().unwrap_or(0));
    println!();
    for o in &results {
        println!("[{}] {:>2}. {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    }
    let failed = results.iter().filter(|o| !o.pass).count();
    println!("\nacceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
