use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use voltstab::checkpoint::Checkpoint;
use voltstab::cpflow::{trace_pv_curve, LoadDirection};
use voltstab::grid::{build_ybus, BusKind};
use voltstab::pipeline::{
    alignment_rows, evaluate_vcp, generate_dataset, read_dataset, write_dataset, Scenario,
};
use voltstab::pmu::{replay_schedule, table1_schedule, table2_schedule, LoadSchedule, MeasurementWindow, NoiseModel};
use voltstab::powerflow::solve_newton;
use voltstab::stability::{align, extract_feature, fit_alignment, monitor_stream, tick_rng, write_monitor_csv, MonitorRecord};
use voltstab::vae::{train, train_plain_ae, Arch};
use voltstab::{Error, Result};

use crate::args::*;
use crate::config::RunConfig;
use crate::plot;

pub struct Ctx {
    pub cfg: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, serde_json::to_string_pretty(value)?)?;
        Ok(p)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let ctx = Ctx {
        seed: cfg.seed(cli.seed),
        cfg,
        out: cli.out_dir,
    };
    std::fs::create_dir_all(&ctx.out)?;
    match cli.command {
        Command::Case { action: CaseCmd::Info(a) } => case_info(&ctx, &a),
        Command::Pf { action: PfCmd::Run { case, no_q_limits } } => pf_run(&ctx, &case, no_q_limits),
        Command::Cpflow {
            action: CpflowCmd::Trace {
                case,
                bus,
                direction,
                upper_only,
            },
        } => cpflow_trace(&ctx, &case, &bus, direction.as_deref(), upper_only),
        Command::Dataset {
            action:
                DatasetCmd::Gen {
                    case,
                    curves,
                    min_nodes,
                    max_nodes,
                    placement,
                },
        } => dataset_gen(&ctx, &case, curves, min_nodes, max_nodes, placement.as_deref()),
        Command::Train(a) => train_cmd(&ctx, &a),
        Command::FitAlignment(a) => fit_cmd(&ctx, &a),
        Command::Monitor(a) => monitor_cmd(&ctx, &a),
        Command::Eval {
            action: EvalCmd::Vcp {
                model,
                case,
                scenario,
                phi,
            },
        } => eval_vcp(&ctx, &model, &case, &scenario, phi),
        Command::ExportPlot(a) => export_plot(&ctx, &a),
        Command::Bench(a) => bench(&ctx, &a),
    }
}

fn case_info(ctx: &Ctx, a: &CaseArg) -> Result<()> {
    let (path, case) = ctx.cfg.load_case(a.case.as_ref())?;
    let count = |k: BusKind| case.buses.iter().filter(|b| b.kind == k).count();
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let info = json!({
        "case": path,
        "base_mva": case.base_mva,
        "buses": case.buses.len(),
        "pq": count(BusKind::Pq),
        "pv": count(BusKind::Pv),
        "slack": count(BusKind::Slack),
        "generators": case.gens.len(),
        "branches": case.branches.len(),
        "total_p_demand_mw": case.total_p_demand(),
        "total_q_demand_mvar": case.buses.iter().map(|b| b.q_demand).sum::<f64>(),
        "loaded_pq_buses": case.loaded_pq_buses(),
        "placement_preset": voltstab::pmu::PmuPlacement::preset(stem).map(|p| p.observed_buses),
    });
    ctx.write_json("case_info.json", &info)?;
    println!(
        "{}: {} buses ({} PQ, {} PV, {} slack), {} generators, {} branches, load {:.1} MW",
        path.display(),
        case.buses.len(),
        count(BusKind::Pq),
        count(BusKind::Pv),
        count(BusKind::Slack),
        case.gens.len(),
        case.branches.len(),
        case.total_p_demand()
    );
    Ok(())
}

fn pf_run(ctx: &Ctx, a: &CaseArg, no_q_limits: bool) -> Result<()> {
    let (path, case) = ctx.cfg.load_case(a.case.as_ref())?;
    let mut opts = ctx.cfg.solver;
    if no_q_limits {
        opts.enforce_q_limits = false;
    }
    let t = Instant::now();
    let sol = solve_newton(&case, &build_ybus(&case), &opts)?;
    let secs = t.elapsed().as_secs_f64();
    ctx.write_json(
        "pf.json",
        &json!({ "case": path, "options": opts, "seconds": secs, "solution": sol }),
    )?;
    let (lo, hi) = sol
        .v_mag
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    println!(
        "converged in {} iterations, mismatch {:.2e}, |V| in [{lo:.4}, {hi:.4}], {} reactive limits hit",
        sol.iterations,
        sol.max_mismatch,
        sol.q_limited.len()
    );
    Ok(())
}

fn cpflow_trace(ctx: &Ctx, a: &CaseArg, buses: &[i64], direction: Option<&Path>, upper_only: bool) -> Result<()> {
    let (path, case) = ctx.cfg.load_case(a.case.as_ref())?;
    let dir = match direction {
        Some(p) => serde_json::from_str::<LoadDirection>(&std::fs::read_to_string(p)?)?,
        None if buses.is_empty() => {
            return Err(Error::EmptyRequest("give --bus or --direction".into()));
        }
        None => LoadDirection::uniform_active(&case, buses, case.total_p_demand())?,
    };
    let mut opts = ctx.cfg.continuation;
    if upper_only {
        opts.trace_lower_branch = false;
    }
    let t = Instant::now();
    let curve = trace_pv_curve(&case, &dir, &opts)?;
    let secs = t.elapsed().as_secs_f64();
    curve.write_csv(std::fs::File::create(ctx.path("pv_curve.csv"))?)?;
    let crit = curve.critical_bus();
    ctx.write_json(
        "cpflow.json",
        &json!({
            "case": path,
            "direction": dir,
            "options": opts,
            "lambda_max": curve.lambda_max(),
            "nose_index": curve.nose_index,
            "points": curve.points.len(),
            "critical_bus": crit,
            "v_critical_at_nose": curve.points[curve.nose_index].solution.voltage(crit)?.0,
            "seconds": secs,
        }),
    )?;
    println!(
        "lambda_max {:.6} ({:.1} MW added) at point {} of {}, critical bus {crit}",
        curve.lambda_max(),
        curve.lambda_max() * case.total_p_demand(),
        curve.nose_index,
        curve.points.len()
    );
    Ok(())
}

fn dataset_gen(
    ctx: &Ctx,
    a: &CaseArg,
    curves: Option<usize>,
    min_nodes: Option<usize>,
    max_nodes: Option<usize>,
    placement: Option<&str>,
) -> Result<()> {
    let (path, case) = ctx.cfg.load_case(a.case.as_ref())?;
    let placement = ctx.cfg.placement(placement, &path)?;
    let mut recipe = ctx.cfg.recipe;
    recipe.curves = curves.unwrap_or(recipe.curves);
    recipe.min_nodes = min_nodes.unwrap_or(recipe.min_nodes);
    recipe.max_nodes = max_nodes.unwrap_or(recipe.max_nodes);
    recipe.continuation = ctx.cfg.continuation;
    let t = Instant::now();
    let (manifest, data) = generate_dataset(&case, &placement, &recipe, ctx.seed)?;
    write_dataset(&ctx.out, &manifest, &data)?;
    let rows: usize = data.iter().map(|c| c.measurements.len()).sum();
    println!(
        "{} curves ({rows} measurement vectors, {} skipped) in {:.1} s -> {}",
        manifest.curves.len(),
        manifest.skipped.len(),
        t.elapsed().as_secs_f64(),
        ctx.out.display()
    );
    Ok(())
}

/// Architectures used for the three standard placements; other sizes get
/// the smallest one.
pub fn default_arch(input_dim: usize) -> (Vec<usize>, Vec<usize>) {
    match input_dim {
        42 => (vec![300, 300, 4], vec![300, 300, 42]),
        78 => (vec![200, 650, 650, 4], vec![650, 650, 200, 78]),
        n => (vec![100, 100, 4], vec![100, 100, n]),
    }
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let (manifest, curves) = read_dataset(&a.dataset)?;
    let data: Vec<Vec<f64>> = curves.into_iter().flat_map(|c| c.measurements).collect();
    let dim = manifest.placement.vector_len();
    let (d_enc, d_dec) = default_arch(dim);
    let enc = pick(&a.encoder, &ctx.cfg.encoder, d_enc);
    let dec = pick(&a.decoder, &ctx.cfg.decoder, d_dec);
    let arch = Arch::from_unit_lists(&enc, &dec, dim)?;
    let mut tc = ctx.cfg.train;
    tc.seed = ctx.seed;
    tc.learning_rate = a.learning_rate.unwrap_or(tc.learning_rate);
    tc.max_steps = a.max_steps.unwrap_or(tc.max_steps);
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    let t = Instant::now();
    let (report, file) = if a.plain {
        let (ae, report) = train_plain_ae(&data, &arch, &tc)?;
        (report, ctx.write_json("autoencoder.json", &ae)?)
    } else {
        let (model, report) = train(&data, &arch, &tc)?;
        let mut ck = Checkpoint::new(model);
        ck.placement = Some(manifest.placement.clone());
        ck.train_config = Some(tc);
        let p = ctx.path("model.json");
        ck.save(&p)?;
        (report, p)
    };
    let secs = t.elapsed().as_secs_f64();
    let mut log = csv::Writer::from_path(ctx.path("train_log.csv"))?;
    log.write_record(["step", "loss"])?;
    for (i, l) in report.losses.iter().enumerate() {
        log.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    log.flush()?;
    let tail = report.smoothed(tc.eval_window).last().copied();
    ctx.write_json(
        "train.json",
        &json!({
            "dataset": a.dataset,
            "rows": data.len(),
            "encoder": enc,
            "decoder": dec,
            "config": tc,
            "steps": report.steps,
            "stopped_early": report.stopped_early,
            "final_smoothed_loss": tail,
            "seconds": secs,
            "model": file,
        }),
    )?;
    println!(
        "trained on {} vectors for {} steps{} in {:.1} s, smoothed loss {:.5} -> {}",
        data.len(),
        report.steps,
        if report.stopped_early { " (plateau)" } else { "" },
        secs,
        tail.unwrap_or(f64::NAN),
        file.display()
    );
    Ok(())
}

fn pick(flag: &[usize], cfg: &Option<Vec<usize>>, default: Vec<usize>) -> Vec<usize> {
    if !flag.is_empty() {
        flag.to_vec()
    } else {
        cfg.clone().unwrap_or(default)
    }
}

fn fit_cmd(ctx: &Ctx, a: &FitArgs) -> Result<()> {
    let mut ck = Checkpoint::load(&a.model)?;
    let (manifest, curves) = read_dataset(&a.dataset)?;
    if let Some(p) = &ck.placement {
        if *p != manifest.placement {
            return Err(Error::Config("dataset placement differs from the model's".into()));
        }
    }
    let intercept = !a.no_intercept && ctx.cfg.intercept.unwrap_or(true);
    // Latent means are fitted; the stored temperature applies when monitoring.
    let mean = voltstab::stability::TemperatureConfig { phi: 0.0 };
    let (z, c) = alignment_rows(&ck.model, &curves, &mean, ctx.seed)?;
    let map = fit_alignment(&z, &c, intercept)?;
    let r2 = r_squared(&map, &z, &c)?;
    ck.alignment = Some(map.clone());
    ck.temperature = Some(ctx.cfg.temperature(a.phi, 0.05)?);
    let out = ctx.path("model_aligned.json");
    ck.save(&out)?;
    ctx.write_json(
        "alignment.json",
        &json!({
            "model": a.model,
            "dataset": a.dataset,
            "rows": z.len(),
            "map": map,
            "r2_lambda": r2[0],
            "r2_v": r2[1],
            "temperature": ck.temperature,
            "seed": ctx.seed,
            "checkpoint": out,
        }),
    )?;
    println!(
        "alignment over {} rows: R² λ {:.4}, V {:.4} -> {}",
        z.len(),
        r2[0],
        r2[1],
        out.display()
    );
    Ok(())
}

fn r_squared(map: &voltstab::stability::AlignmentMap, z: &[Vec<f64>], c: &[[f64; 2]]) -> Result<[f64; 2]> {
    let mut out = [0.0; 2];
    let fitted = z.iter().map(|zi| align(map, zi)).collect::<Result<Vec<_>>>()?;
    for (k, o) in out.iter_mut().enumerate() {
        let mean = c.iter().map(|r| r[k]).sum::<f64>() / c.len() as f64;
        let tot: f64 = c.iter().map(|r| (r[k] - mean).powi(2)).sum();
        let res: f64 = c
            .iter()
            .zip(&fitted)
            .map(|(r, f)| (r[k] - if k == 0 { f.0 } else { f.1 }).powi(2))
            .sum();
        *o = 1.0 - res / tot;
    }
    Ok(out)
}

fn monitor_cmd(ctx: &Ctx, a: &MonitorArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.model)?;
    let map = ck.alignment()?;
    let temp = match a.phi {
        Some(p) => voltstab::stability::TemperatureConfig::new(p)?,
        None => ck.temperature.unwrap_or(ctx.cfg.temperature(None, 0.05)?),
    };
    let (window, source) = match (&a.input, &a.schedule) {
        (Some(p), _) => {
            let (placement, w) = MeasurementWindow::read_csv(std::fs::File::open(p)?)?;
            if let Some(own) = &ck.placement {
                if *own != placement {
                    return Err(Error::Config("measurement columns differ from the model's placement".into()));
                }
            }
            (w, json!({ "input": p }))
        }
        (None, Some(s)) => {
            let (path, case) = ctx.cfg.load_case(a.case.case.as_ref())?;
            let schedule = match s.as_str() {
                "table1" => table1_schedule(),
                "table2" => table2_schedule(),
                file => LoadSchedule::from_json(&std::fs::read_to_string(file)?)?,
            };
            let placement = ck
                .placement
                .clone()
                .ok_or_else(|| Error::Config("checkpoint has no placement".into()))?;
            let noise = ctx.cfg.noise.unwrap_or(NoiseModel {
                seed: ctx.seed,
                ..NoiseModel::default()
            });
            let w = replay_schedule(&case, &schedule, &placement, &noise, &ctx.cfg.solver)?;
            w.write_csv(&placement, std::fs::File::create(ctx.path("measurements.csv"))?)?;
            (w, json!({ "case": path, "schedule": s, "noise": noise }))
        }
        (None, None) => return Err(Error::EmptyRequest("give --input or --schedule".into())),
    };
    let results = monitor_stream(&ck.model, map, &temp, &window.columns, window.t_start, ctx.seed);
    let mut records: Vec<MonitorRecord> = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => errors.push(json!({ "t": window.t_start + k, "error": e.to_string() })),
        }
    }
    write_monitor_csv(&records, std::fs::File::create(ctx.path("monitor.csv"))?)?;
    ctx.write_json(
        "monitor.json",
        &json!({
            "model": a.model,
            "source": source,
            "phi": temp.phi,
            "seed": ctx.seed,
            "ticks": records.len(),
            "errors": errors,
        }),
    )?;
    println!(
        "{} ticks monitored, {} failed (phi {}) -> {}",
        records.len(),
        errors.len(),
        temp.phi,
        ctx.path("monitor.csv").display()
    );
    Ok(())
}

fn eval_vcp(ctx: &Ctx, model: &Path, a: &CaseArg, scenario: &str, phi: Option<f64>) -> Result<()> {
    let scenario: Scenario = scenario.parse()?;
    let ck = Checkpoint::load(model)?;
    let (path, case) = ctx.cfg.load_case(a.case.as_ref())?;
    let placement = match &ck.placement {
        Some(p) => p.clone(),
        None => ctx.cfg.placement(None, &path)?,
    };
    let cfg = ctx.cfg.eval_config(phi, ctx.seed)?;
    let t = Instant::now();
    let report = evaluate_vcp(&case, &ck.model, ck.alignment()?, &placement, scenario, &cfg)?;
    let name = match scenario {
        Scenario::Sli => "vcp_sli",
        Scenario::Dli => "vcp_dli",
    };
    ctx.write_json(&format!("{name}.json"), &report)?;
    let mut w = csv::Writer::from_path(ctx.path(&format!("{name}.csv")))?;
    w.write_record(["buses", "lambda_real", "lambda_pre"])?;
    for c in &report.cases {
        let buses: Vec<String> = c.buses.iter().map(|b| b.to_string()).collect();
        w.write_record([
            buses.join(" "),
            c.lambda_real.to_string(),
            c.lambda_pre.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    println!(
        "{scenario:?}: {} directions, {} without estimate, MAPE {} ({:.1} s)",
        report.cases.len(),
        report.failed,
        report.mape.map(|m| format!("{m:.4}")).unwrap_or_else(|| "n/a".into()),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn export_plot(ctx: &Ctx, a: &PlotArgs) -> Result<()> {
    let table = plot::read_table(&a.input)?;
    let svg = plot::render_svg(&table, &a.x, &a.y)?;
    let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
    let out = ctx.path(&format!("{stem}.svg"));
    if out == a.input {
        return Err(Error::Config("plot output would overwrite its input".into()));
    }
    std::fs::write(&out, svg)?;
    println!("{} rows plotted -> {}", table.rows.len(), out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub repeats: usize,
    pub median_us: f64,
    pub p95_us: f64,
    pub mean_us: f64,
}

/// Wall time of one feature extraction plus alignment, per vector.
pub fn bench_model(ck: &Checkpoint, repeats: usize, seed: u64) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::EmptyRequest("bench needs at least one repeat".into()));
    }
    let model = &ck.model;
    let identity = voltstab::stability::AlignmentMap::identity();
    let map = ck.alignment.as_ref().unwrap_or(&identity);
    let temp = ck.temperature.unwrap_or_default();
    let x = model.norm_stats.denormalize(&vec![0.5; model.input_dim()])?;
    let mut rng = tick_rng(seed, 0);
    let mut sink = 0.0;
    for _ in 0..repeats.min(1000) {
        let f = extract_feature(model, &x, &temp, &mut rng)?;
        sink += align(map, &f.z_hat)?.0;
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        let f = extract_feature(model, &x, &temp, &mut rng)?;
        sink += align(map, &f.z_hat)?.0;
        times.push(t.elapsed().as_secs_f64() * 1e6);
    }
    std::hint::black_box(sink);
    times.sort_by(f64::total_cmp);
    let q = |p: f64| times[((times.len() - 1) as f64 * p).round() as usize];
    Ok(BenchReport {
        repeats,
        median_us: q(0.5),
        p95_us: q(0.95),
        mean_us: times.iter().sum::<f64>() / times.len() as f64,
    })
}

fn bench(ctx: &Ctx, a: &BenchArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.model)?;
    let r = bench_model(&ck, a.repeats, ctx.seed)?;
    ctx.write_json("bench.json", &json!({ "model": a.model, "seed": ctx.seed, "report": r }))?;
    println!(
        "{} inferences: median {:.2} µs, p95 {:.2} µs, mean {:.2} µs",
        r.repeats, r.median_us, r.p95_us, r.mean_us
    );
    Ok(())
}
