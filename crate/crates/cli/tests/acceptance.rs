//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;
use voltstab::cpflow::{apply_lambda, trace_pv_curve, ContinuationOptions, LoadDirection};
use voltstab::grid::{build_ybus, GridCase};
use voltstab::pmu::{sample_pmu, NoiseModel, PmuPlacement};
use voltstab::powerflow::{generator_outputs, solve_newton, warm_start, SolverOptions};
use voltstab::stability::{align, fit_alignment, monitor_stream, AlignmentMap, TemperatureConfig};
use voltstab::vae::{kl_gauss, Arch, InitScheme, LatentDistribution, Likelihood, NormStats, VaeModel};

type Outcome = Result<String, String>;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data").join(name)
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn cli(out: &Path, seed: u64, config: Option<&Path>, args: &[&str]) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_voltstab"));
    cmd.arg("--out-dir").arg(out).arg("--seed").arg(seed.to_string());
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    let o = cmd.args(args).output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("voltstab {args:?} failed: {}", String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn read_json(p: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Outcome {
    let case = GridCase::from_file(data("case14.m")).map_err(|e| e.to_string())?;
    let reference = read_json(&fixture("case14_pf.json"))?;
    let t = Instant::now();
    let sol = solve_newton(&case, &build_ybus(&case), &SolverOptions::default()).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let vm: Vec<f64> = serde_json::from_value(reference["vm"].clone()).map_err(|e| e.to_string())?;
    let va: Vec<f64> = serde_json::from_value(reference["va_rad"].clone()).map_err(|e| e.to_string())?;
    let dm = sol.v_mag.iter().zip(&vm).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let da = sol.v_ang.iter().zip(&va).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(
        dm < 1e-6 && da < 1e-6 && secs < 0.1,
        format!("max |dV| {dm:.2e} pu, max |dθ| {da:.2e} rad, {secs:.4} s"),
    )
}

/// Largest λ reached by warm-started solves in steps of `step`, refined by
/// bisection once a solve fails.
fn sweep_lambda_max(case: &GridCase, dir: &LoadDirection, step: f64) -> f64 {
    let opts = SolverOptions::default();
    let solve = |lambda: f64, from: &GridCase| {
        let c = apply_lambda(from, dir, lambda);
        solve_newton(&c, &build_ybus(&c), &opts).map(|s| warm_start(case, &s))
    };
    let mut last = case.clone();
    let mut lambda = 0.0;
    while let Ok(next) = solve(lambda + step, &last) {
        last = next;
        lambda += step;
    }
    let (mut lo, mut hi) = (lambda, lambda + step);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        match solve(mid, &last) {
            Ok(next) => {
                last = next;
                lo = mid;
            }
            Err(_) => hi = mid,
        }
    }
    lo
}

fn criterion_2() -> Outcome {
    let case = GridCase::from_file(data("case14.m")).map_err(|e| e.to_string())?;
    let dir = LoadDirection::single_active(4, 1.0);
    let t = Instant::now();
    let curve = trace_pv_curve(&case, &dir, &ContinuationOptions::default()).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let oracle = sweep_lambda_max(&case, &dir, 1e-3);
    let rel = (curve.lambda_max() - oracle).abs() / oracle;
    check(
        rel < 0.01 && secs < 10.0,
        format!("λ_max {:.5} vs sweep {oracle:.5} (rel {rel:.2e}), {secs:.3} s", curve.lambda_max()),
    )
}

fn random_model(seed: u64) -> VaeModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Arch::from_unit_lists(&[8, 4], &[8, 4], 4).unwrap();
    let mut m = VaeModel::new(4, &arch, Likelihood::Gaussian, InitScheme::Scaled, &mut rng).unwrap();
    for p in m.params_mut() {
        for v in p.iter_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    m
}

fn criterion_3() -> Outcome {
    let kl = |mu: f64, var: f64| {
        kl_gauss(&LatentDistribution {
            mu: vec![mu],
            var: vec![var],
        })
    };
    let exact_ok = kl(0.0, 1.0) == 0.0 && (kl(1.0, 1.0) - 0.5).abs() < 1e-15;

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst_grad: f64 = 0.0;
    for seed in 0..3 {
        let model = random_model(seed);
        let x = voltstab_matrix(4, 3, |_, _| rng.random_range(0.05..0.95));
        let eps = voltstab_matrix(2, 3, |_, _| StandardNormal.sample(&mut rng));
        let (_, analytic) = model.elbo_with_noise(&x, &eps).map_err(|e| e.to_string())?;
        let mut probe = model.clone();
        let h = 1e-6;
        let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
        for (b, block) in analytic.iter().enumerate() {
            for (i, g) in block.iter().enumerate() {
                let orig = probe.params_mut()[b][i];
                probe.params_mut()[b][i] = orig + h;
                let up = probe.elbo_with_noise(&x, &eps).unwrap().0.loss;
                probe.params_mut()[b][i] = orig - h;
                let down = probe.elbo_with_noise(&x, &eps).unwrap().0.loss;
                probe.params_mut()[b][i] = orig;
                let n = (up - down) / (2.0 * h);
                diff += (g - n) * (g - n);
                norm_a += g * g;
                norm_n += n * n;
            }
        }
        worst_grad = worst_grad.max(diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt()));
    }

    let mut worst_mc: f64 = 0.0;
    for _ in 0..20 {
        let mu: f64 = rng.random_range(-0.5..0.5);
        let var: f64 = rng.random_range(0.5..1.5);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = mu + var.sqrt() * e;
            acc += -0.5 * var.ln() - 0.5 * e * e + 0.5 * z * z;
        }
        worst_mc = worst_mc.max((acc / n as f64 - kl(mu, var)).abs());
    }
    check(
        exact_ok && worst_grad < 1e-4 && worst_mc < 1e-2,
        format!(
            "KL(0,1)={}, KL(1,1)={}, gradient rel err {worst_grad:.2e}, Monte-Carlo KL err {worst_mc:.2e}",
            kl(0.0, 1.0),
            kl(1.0, 1.0)
        ),
    )
}

fn voltstab_matrix(r: usize, c: usize, mut f: impl FnMut(usize, usize) -> f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |i, j| f(i, j))
}

struct Trained {
    dir: PathBuf,
    model: PathBuf,
    seed: u64,
}

fn tutorial_config(dir: &Path) -> Result<PathBuf, String> {
    let p = dir.join("tutorial.json");
    let cfg = serde_json::json!({
        "train": { "learning_rate": 3e-4, "max_steps": 40000 },
        "intercept": true
    });
    std::fs::write(&p, cfg.to_string()).map_err(|e| e.to_string())?;
    Ok(p)
}

/// Dataset, training, alignment and both evaluations for one seed.
fn tutorial_run(root: &Path, seed: u64) -> Result<(f64, f64, Trained), String> {
    let dir = root.join(format!("seed{seed}"));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let cfg = tutorial_config(&dir)?;
    let case = data("case14.m");
    let case = case.to_str().unwrap();
    let ds = dir.join("dataset");
    cli(&ds, seed, Some(&cfg), &["dataset", "gen", "--case", case, "--curves", "40"])?;
    cli(&dir, seed, Some(&cfg), &["train", "--dataset", ds.to_str().unwrap()])?;
    let model = dir.join("model.json");
    cli(&dir, seed, Some(&cfg), &["fit-alignment", "--model", model.to_str().unwrap(), "--dataset", ds.to_str().unwrap()])?;
    let aligned = dir.join("model_aligned.json");
    let mut mapes = [0.0; 2];
    for (k, sc) in ["sli", "dli"].iter().enumerate() {
        cli(&dir, seed, Some(&cfg), &["eval", "vcp", "--model", aligned.to_str().unwrap(), "--case", case, "--scenario", sc, "--phi", "0"])?;
        let r = read_json(&dir.join(format!("vcp_{sc}.json")))?;
        if r["failed"].as_u64() != Some(0) {
            return Err(format!("seed {seed}: {sc} has directions without an estimate"));
        }
        mapes[k] = r["mape"].as_f64().ok_or("missing mape")?;
    }
    Ok((
        mapes[0],
        mapes[1],
        Trained {
            dir,
            model: aligned,
            seed,
        },
    ))
}

fn criterion_4(root: &Path) -> (Outcome, Option<Trained>) {
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut passes = 0;
    let mut first = None;
    for seed in [1u64, 2, 3] {
        match tutorial_run(root, seed) {
            Ok((sli, dli, trained)) => {
                let ok = sli <= 0.10 && dli <= sli;
                passes += ok as usize;
                lines.push(format!("seed {seed}: SLI {sli:.4} DLI {dli:.4}{}", if ok { "" } else { " (miss)" }));
                first.get_or_insert(trained);
            }
            Err(e) => lines.push(format!("seed {seed}: {e}")),
        }
        if seed == 1 && passes == 1 {
            break;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let needed = if lines.len() == 1 { 1 } else { 2 };
    let detail = format!("{}; {secs:.0} s", lines.join(", "));
    (check(passes >= needed && secs < 1800.0, detail), first)
}

fn criterion_5(trained: Option<&Trained>) -> Outcome {
    let tr = trained.ok_or("no trained tutorial model")?;
    let case = data("case14.m");
    let case = case.to_str().unwrap();
    let input = tr.dir.join("dataset/curve_000.csv");
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = tr.dir.join(format!("determinism{run}"));
        let m = tr.model.to_str().unwrap();
        cli(&out, tr.seed, None, &["monitor", "--model", m, "--input", input.to_str().unwrap(), "--phi", "0"])?;
        cli(&out, tr.seed, None, &["eval", "vcp", "--model", m, "--case", case, "--scenario", "sli", "--phi", "0"])?;
        let read = |n: &str| std::fs::read(out.join(n)).map_err(|e| e.to_string());
        outputs.push((read("monitor.csv")?, read("vcp_sli.json")?, read("vcp_sli.csv")?));
    }
    check(
        outputs[0] == outputs[1],
        format!("monitor.csv {} bytes, vcp_sli.json {} bytes, identical across reruns", outputs[0].0.len(), outputs[0].1.len()),
    )
}

fn criterion_6(root: &Path) -> Outcome {
    let dir = root.join("case57");
    let seed = 1;
    let case = data("case57.m");
    let case = case.to_str().unwrap();
    let cfg = tutorial_config(root)?;
    let ds = dir.join("dataset");
    let t = Instant::now();
    cli(&ds, seed, Some(&cfg), &["dataset", "gen", "--case", case, "--curves", "50", "--max-nodes", "5"])?;
    cli(&dir, seed, Some(&cfg), &["train", "--dataset", ds.to_str().unwrap()])?;
    let model = dir.join("model.json");
    cli(&dir, seed, Some(&cfg), &["fit-alignment", "--model", model.to_str().unwrap(), "--dataset", ds.to_str().unwrap(), "--phi", "0.05"])?;
    let aligned = dir.join("model_aligned.json");
    cli(&dir, seed, None, &["monitor", "--model", aligned.to_str().unwrap(), "--schedule", "table1", "--case", case])?;

    let mut r = csv::Reader::from_path(dir.join("monitor.csv")).map_err(|e| e.to_string())?;
    let mut lam = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        lam.push(rec[3].parse::<f64>().map_err(|e| e.to_string())?);
    }
    if lam.len() != 1500 {
        return Err(format!("{} monitor rows, expected 1500", lam.len()));
    }
    // Non-overlapping 20-tick means; block b covers ticks 20b+1 ..= 20b+20.
    let blocks: Vec<f64> = lam.chunks(20).map(|c| c.iter().sum::<f64>() / 20.0).collect();
    let mean = |r: std::ops::Range<usize>| blocks[r.clone()].iter().sum::<f64>() / r.len() as f64;
    let rising = blocks[25..35].windows(2).all(|w| w[1] > w[0]);
    let falling = blocks[45..60].windows(2).all(|w| w[1] < w[0]);
    let base = mean(0..25);
    let plateau = mean(35..45);
    let spread = blocks[35..45].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - blocks[35..45].iter().cloned().fold(f64::INFINITY, f64::min);
    let flat = spread <= 0.1 * (plateau - base).abs();
    let end = blocks[74];
    let ends_lower = end < plateau;
    check(
        rising && flat && falling && ends_lower,
        format!(
            "rise {rising}, plateau spread {spread:.2e} vs step {:.3e} ({flat}), fall {falling}, end {end:.4} < plateau {plateau:.4} ({ends_lower}); {:.0} s",
            plateau - base,
            t.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_normal: f64 = 0.0;
    for _ in 0..20 {
        let n = 200;
        let z: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let c: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..5.0), rng.random_range(0.5..1.1)]).collect();
        let map = fit_alignment(&z, &c, false).map_err(|e| e.to_string())?;
        // Zᵀ(Zβ − C), accumulated directly.
        let mut g = [[0.0; 2]; 2];
        for (zi, ci) in z.iter().zip(&c) {
            let (l, v) = align(&map, zi).unwrap();
            let r = [l - ci[0], v - ci[1]];
            for a in 0..2 {
                for b in 0..2 {
                    g[a][b] += zi[a] * r[b];
                }
            }
        }
        worst_normal = worst_normal.max(g.iter().flatten().fold(0.0, |m, v| m.max(v.abs())));
    }
    let planted = vec![[0.8, -1.2], [2.5, 0.3]];
    let z: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let c: Vec<[f64; 2]> = z
        .iter()
        .map(|r| [r[0] * planted[0][0] + r[1] * planted[1][0], r[0] * planted[0][1] + r[1] * planted[1][1]])
        .collect();
    let map = fit_alignment(&z, &c, false).map_err(|e| e.to_string())?;
    let err = (0..2)
        .flat_map(|i| (0..2).map(move |j| (i, j)))
        .map(|(i, j)| (map.beta[i][j] - planted[i][j]).abs())
        .fold(0.0, f64::max);
    check(
        worst_normal < 1e-8 && err < 1e-10,
        format!("normal-equation residual {worst_normal:.2e}, planted map error {err:.2e}"),
    )
}

fn criterion_8(trained: Option<&Trained>) -> Outcome {
    let tr = trained.ok_or("no trained tutorial model")?;
    let out = tr.dir.join("bench");
    cli(&out, 0, None, &["bench", "--model", tr.model.to_str().unwrap(), "--repeats", "10000"])?;
    let r = read_json(&out.join("bench.json"))?;
    let median = r["report"]["median_us"].as_f64().ok_or("missing median")?;
    let p95 = r["report"]["p95_us"].as_f64().ok_or("missing p95")?;
    check(median < 1000.0, format!("median {median:.2} µs, p95 {p95:.2} µs per vector"))
}

fn run_property<S: Strategy>(name: &str, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    let mut runner = TestRunner::new(Config {
        cases: 64,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

fn criterion_9() -> Outcome {
    let case14 = GridCase::from_file(data("case14.m")).map_err(|e| e.to_string())?;

    run_property("KL non-negativity", (-5.0f64..5.0, 1e-6f64..50.0), |(mu, var)| {
        let kl = kl_gauss(&LatentDistribution {
            mu: vec![mu],
            var: vec![var],
        });
        prop_assert!(kl >= 0.0);
        Ok(())
    })?;

    run_property("Q-limit soundness", 1.0f64..1.8, |scale| {
        let mut c = case14.clone();
        for b in &mut c.buses {
            b.p_demand *= scale;
            b.q_demand *= scale;
        }
        if let Ok(sol) = solve_newton(&c, &build_ybus(&c), &SolverOptions::default()) {
            let slack = c.buses[c.slack_position()].id;
            for (g, out) in c.gens.iter().zip(generator_outputs(&c, &sol)) {
                if g.status && g.bus != slack {
                    prop_assert!(out.q_mvar >= g.q_min - 1e-6 && out.q_mvar <= g.q_max + 1e-6);
                }
            }
        }
        Ok(())
    })?;

    run_property(
        "normalization round trip",
        (
            prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 2..10),
            prop::collection::vec(-1e3f64..1e3, 4),
        ),
        |(rows, probe)| {
            let n = NormStats::fit(&rows).unwrap();
            let back = n.denormalize(&n.normalize(&probe).unwrap()).unwrap();
            for (a, b) in back.iter().zip(&probe) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            Ok(())
        },
    )?;

    let model = {
        let mut m = random_model(5);
        m.norm_stats = NormStats::fit(&[vec![0.9, 0.95, -0.3, -0.1], vec![1.05, 1.1, 0.0, 0.2]]).unwrap();
        m
    };
    run_property(
        "monitor statelessness",
        (prop::collection::vec(prop::collection::vec(0.9f64..1.1, 4), 3..12), any::<u64>(), 0usize..3),
        |(stream, seed, a)| {
            let temp = TemperatureConfig { phi: 0.05 };
            let map = AlignmentMap::identity();
            let whole: Vec<_> = monitor_stream(&model, &map, &temp, &stream, 1, seed).into_iter().map(Result::unwrap).collect();
            let b = stream.len() - 1;
            let mut swapped = stream.clone();
            swapped.swap(a, b);
            let other: Vec<_> = monitor_stream(&model, &map, &temp, &swapped, 1, seed).into_iter().map(Result::unwrap).collect();
            // Tick numbers travel with position, so compare at φ = 0 for the swap
            // and check that single-tick replays agree with the whole stream.
            for (k, rec) in whole.iter().enumerate() {
                let alone = monitor_stream(&model, &map, &temp, &stream[k..=k], k + 1, seed).remove(0).unwrap();
                prop_assert_eq!(&alone, rec);
            }
            let t0 = TemperatureConfig { phi: 0.0 };
            let m0: Vec<_> = monitor_stream(&model, &map, &t0, &stream, 1, seed).into_iter().map(Result::unwrap).collect();
            let s0: Vec<_> = monitor_stream(&model, &map, &t0, &swapped, 1, seed).into_iter().map(Result::unwrap).collect();
            prop_assert_eq!(&s0[a].z, &m0[b].z);
            prop_assert_eq!(&s0[b].z, &m0[a].z);
            prop_assert_eq!(other.len(), whole.len());
            Ok(())
        },
    )?;

    let sol = solve_newton(&case14, &build_ybus(&case14), &SolverOptions::default()).map_err(|e| e.to_string())?;
    let placement = PmuPlacement::preset("case14").unwrap();
    let noise = NoiseModel {
        sigma_mag: 1e-3,
        sigma_ang: 2e-3,
        seed: 9,
    };
    let clean = sample_pmu(&sol, &placement, &NoiseModel::none(), &mut noise.rng()).map_err(|e| e.to_string())?;
    let mut rng = noise.rng();
    let n = 10_000;
    let mut sq = vec![0.0; clean.len()];
    for _ in 0..n {
        let v = sample_pmu(&sol, &placement, &noise, &mut rng).unwrap();
        for (k, (a, b)) in v.iter().zip(&clean).enumerate() {
            sq[k] += (a - b).powi(2);
        }
    }
    let half = clean.len() / 2;
    for (k, s) in sq.iter().enumerate() {
        let sigma = if k < half { noise.sigma_mag } else { noise.sigma_ang };
        let sd = (s / n as f64).sqrt();
        if (sd - sigma).abs() > 0.05 * sigma {
            return Err(format!("noise statistics: channel {k} std {sd:.3e} vs {sigma:.1e}"));
        }
    }
    Ok("KL ≥ 0, Q-limit soundness, normalization round trip, monitor statelessness, noise statistics".into())
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let mut failed = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        let (tag, detail) = match o {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n} [{tag}] {name}: {detail}");
    };
    report(1, "power-flow fidelity", criterion_1());
    report(2, "continuation nose accuracy", criterion_2());
    report(3, "ELBO correctness", criterion_3());
    let (c4, trained) = criterion_4(root.path());
    report(4, "tutorial-scale VCP estimation", c4);
    report(5, "determinism", criterion_5(trained.as_ref()));
    report(6, "57-bus monitoring shape", criterion_6(root.path()));
    report(7, "alignment optimality", criterion_7());
    report(8, "inference latency", criterion_8(trained.as_ref()));
    report(9, "property suites", criterion_9());
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
