//! `flowplan` — guided trajectory generation toolkit: dataset synthesis,
//! guided sampling, safety repair, benchmark scorecards, and figure data.

mod formats;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use flowplan_core::field::VelocityField;
use flowplan_core::metrics::{
    self, dataset_field, expert_options, kc_forward, kc_inverse, pipeline_trial, reroll, score,
    synth_dataset, PipelineError,
};
use flowplan_core::ode;
use flowplan_core::planner::{
    guided_sample, plan_gpc, plan_path, plan_trajectory, ConstraintSet, FloorSpec, PlanResult,
    SamplerConfig,
};
use flowplan_core::ptzf::{RateMap, ZeroingSchedule};
use flowplan_core::refine::{extract_windows, refine_frozen, refine_violation, RefineError};
use flowplan_core::scene::{toy2d, Scene};
use flowplan_core::traj::Trajectory;

use formats::{
    load_run_config, load_scene, read_trajectories_csv, write_diagnostics_csv, write_json,
    write_trajectories_csv, MetricsJson, RunConfig,
};

#[derive(Parser)]
#[command(name = "flowplan", version, about = "Constrained flow-matching trajectory planner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlanMode {
    /// Flow over the full interleaved trajectory vector.
    Traj,
    /// Flow over the state block; actions recovered by the tracking QP.
    Path,
    /// Flow over (initial state, action sequence); states by rollout.
    Gpc,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize an expert dataset with a receding-horizon controller.
    Dataset {
        #[arg(long)]
        scene: String,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Drop-rate report destination.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Sample one guided trajectory from a dataset-backed velocity field.
    Plan {
        #[arg(long)]
        scene: String,
        /// Dataset CSV the empirical velocity field is built from.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = PlanMode::Traj)]
        mode: PlanMode,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-step guidance diagnostics CSV.
        #[arg(long)]
        diag: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Repair trajectories against the scene constraints.
    Refine {
        #[arg(long)]
        scene: String,
        /// Trajectory CSV to repair (one or many trajectories).
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the end-to-end benchmark and aggregate a scorecard.
    Bench {
        #[arg(long)]
        scene: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reuse an existing dataset CSV instead of synthesizing one.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Dataset size when synthesizing.
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        report: PathBuf,
        /// Per-trial rows.
        #[arg(long)]
        trials_csv: Option<PathBuf>,
    },
    /// Emit figure data: schedule curves and a guidance-trace comparison.
    Figs {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Start value of the plotted zeroing schedule.
        #[arg(long, default_value_t = 1.0)]
        r0: f64,
    },
}

/// Decorrelate derived seeds (trials, repair streams) from a base seed.
fn mix(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

enum CliError {
    /// A repair loop exhausted its budget with residual penetration; mapped
    /// to a distinct exit code so callers can tell it from usage errors.
    Refinement(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Other(e)
    }
}

fn refine_to_cli(e: RefineError) -> CliError {
    match e {
        RefineError::RefinementFailed { .. } => CliError::Refinement(e.to_string()),
        other => CliError::Other(anyhow::anyhow!(other.to_string())),
    }
}

fn pipeline_to_cli(e: PipelineError) -> CliError {
    match e {
        PipelineError::Refine(r) => refine_to_cli(r),
        PipelineError::Plan(p) => CliError::Other(anyhow::anyhow!(p.to_string())),
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), CliError> {
    if cond {
        Ok(())
    } else {
        Err(CliError::Other(anyhow::anyhow!(msg())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Refinement(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Dataset { scene, count, seed, out, report } => {
            cmd_dataset(&scene, count, seed, &out, report.as_deref())
        }
        Cmd::Plan { scene, data, mode, config, seed, out, diag, report } => cmd_plan(
            &scene,
            &data,
            mode,
            config.as_deref(),
            seed,
            &out,
            diag.as_deref(),
            report.as_deref(),
        ),
        Cmd::Refine { scene, traj, config, seed, out, report } => {
            cmd_refine(&scene, &traj, config.as_deref(), seed, &out, report.as_deref())
        }
        Cmd::Bench { scene, config, trials, seed, data, count, report, trials_csv } => cmd_bench(
            &scene,
            config.as_deref(),
            trials,
            seed,
            data.as_deref(),
            count,
            &report,
            trials_csv.as_deref(),
        ),
        Cmd::Figs { out_dir, config, seed, r0 } => {
            cmd_figs(&out_dir, config.as_deref(), seed, r0).map_err(CliError::from)
        }
    }
}

#[derive(Serialize)]
struct DatasetReport<'a> {
    scene: &'a str,
    count: usize,
    dropped: usize,
    drop_rate: f64,
    seed: u64,
}

fn cmd_dataset(
    scene_arg: &str,
    count: usize,
    seed: u64,
    out: &Path,
    report: Option<&Path>,
) -> Result<(), CliError> {
    let scene = load_scene(scene_arg)?;
    let opts = expert_options(&scene);
    let ds = synth_dataset(&scene, count, seed, &opts)
        .map_err(|e| CliError::Other(anyhow::anyhow!(e.to_string())))?;
    write_trajectories_csv(out, &ds.trajectories)?;
    let attempts = ds.trajectories.len() + ds.dropped;
    let rep = DatasetReport {
        scene: scene.name,
        count: ds.trajectories.len(),
        dropped: ds.dropped,
        drop_rate: ds.dropped as f64 / attempts as f64,
        seed,
    };
    if let Some(p) = report {
        write_json(p, &rep)?;
    }
    println!(
        "dataset: {} trajectories -> {} ({} dropped)",
        rep.count,
        out.display(),
        rep.dropped
    );
    Ok(())
}

/// Project dataset trajectories onto the flow coordinates of a mode and
/// build the empirical velocity field over them.
fn mode_field(trajs: &[Trajectory], mode: PlanMode) -> Result<VelocityField> {
    anyhow::ensure!(!trajs.is_empty(), "empty dataset");
    let l = trajs[0].layout;
    let dim = match mode {
        PlanMode::Traj => l.dim(),
        PlanMode::Path => (l.h + 1) * l.d_s,
        PlanMode::Gpc => l.d_s + l.h * l.d_a,
    };
    let mut points = Vec::with_capacity(trajs.len() * dim);
    for t in trajs {
        match mode {
            PlanMode::Traj => points.extend_from_slice(&t.data),
            PlanMode::Path => points.extend_from_slice(&t.states_flat()),
            PlanMode::Gpc => {
                points.extend_from_slice(t.state(0));
                points.extend_from_slice(&t.actions_flat());
            }
        }
    }
    VelocityField::empirical(points, dim).map_err(|e| anyhow::anyhow!("{e:?}"))
}

#[derive(Serialize)]
struct PlanReport {
    certified: bool,
    initial_equality: f64,
    final_equality: f64,
    initial_max_barrier: Option<f64>,
    final_max_barrier: Option<f64>,
    steps: usize,
}

#[allow(clippy::too_many_arguments)]
fn cmd_plan(
    scene_arg: &str,
    data: &Path,
    mode: PlanMode,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
    diag: Option<&Path>,
    report: Option<&Path>,
) -> Result<(), CliError> {
    let scene = load_scene(scene_arg)?;
    let cfg = load_run_config(config)?;
    let sampler = cfg.sampler.to_config();
    let trajs = read_trajectories_csv(data)?;
    anyhow::ensure!(
        trajs[0].layout == scene.layout(),
        "dataset layout {:?} does not match the scene layout {:?}",
        trajs[0].layout,
        scene.layout()
    );
    let field = mode_field(&trajs, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planned: PlanResult = match mode {
        PlanMode::Traj => plan_trajectory(&scene, &field, &sampler, &mut rng),
        PlanMode::Path => plan_path(&scene, &field, &sampler, &mut rng),
        PlanMode::Gpc => plan_gpc(&scene, &field, &sampler, &mut rng),
    }
    .map_err(|e| CliError::Other(anyhow::anyhow!(e.to_string())))?;

    write_trajectories_csv(out, std::slice::from_ref(&planned.trajectory))?;
    if let Some(p) = diag {
        write_diagnostics_csv(p, &planned.outcome.diagnostics)?;
    }
    let o = &planned.outcome;
    if let Some(p) = report {
        write_json(
            p,
            &PlanReport {
                certified: o.certified,
                initial_equality: o.initial_equality,
                final_equality: o.final_equality,
                initial_max_barrier: o.initial_max_barrier,
                final_max_barrier: o.final_max_barrier,
                steps: o.diagnostics.len(),
            },
        )?;
    }
    println!(
        "plan: certified={} equality {:.2e} -> {:.2e}; wrote {}",
        o.certified,
        o.initial_equality,
        o.final_equality,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct WindowsJson {
    violation: Vec<Vec<usize>>,
    recovery: Vec<Vec<usize>>,
    frozen: Vec<Vec<usize>>,
}

#[derive(Serialize)]
struct RefineEntry {
    traj: usize,
    windows: WindowsJson,
    worst_before: f64,
    worst_after: f64,
    kc_f_before: f64,
    kc_f_after: f64,
    repaired: bool,
}

fn worst_penetration_all(t: &Trajectory, scene: &Scene) -> f64 {
    (0..=t.layout.h).fold(0.0_f64, |w, k| w.max(-scene.state_clearance(t.state(k))))
}

fn cmd_refine(
    scene_arg: &str,
    traj_path: &Path,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
    report: Option<&Path>,
) -> Result<(), CliError> {
    let scene = load_scene(scene_arg)?;
    let cfg = load_run_config(config)?;
    let trajs = read_trajectories_csv(traj_path)?;
    let mut repaired = Vec::with_capacity(trajs.len());
    let mut entries = Vec::with_capacity(trajs.len());
    for (i, t) in trajs.iter().enumerate() {
        anyhow::ensure!(
            t.layout.d_s == scene.model.d_s() && t.layout.d_a == scene.model.d_a(),
            "trajectory {i} does not fit the scene model"
        );
        let repair = cfg.repair.to_config(mix(seed, i as u64));
        let h: Vec<f64> =
            (0..=t.layout.h).map(|k| -scene.state_clearance(t.state(k))).collect();
        let plan = extract_windows(&h, repair.n_pad, repair.n_rec);
        let staged =
            refine_frozen(t, &plan, &scene.model, &repair).map_err(refine_to_cli)?;
        let fixed = if plan.has_violations() {
            refine_violation(&staged, &plan, &scene, &scene.model, &repair)
                .map_err(refine_to_cli)?
        } else {
            staged
        };
        entries.push(RefineEntry {
            traj: i,
            windows: WindowsJson {
                violation: plan.violation.clone(),
                recovery: plan.recovery.clone(),
                frozen: plan.frozen.clone(),
            },
            worst_before: worst_penetration_all(t, &scene),
            worst_after: worst_penetration_all(&fixed, &scene),
            kc_f_before: kc_forward(t, &scene.model),
            kc_f_after: kc_forward(&fixed, &scene.model),
            repaired: plan.has_violations(),
        });
        repaired.push(fixed);
    }
    write_trajectories_csv(out, &repaired)?;
    if let Some(p) = report {
        write_json(p, &entries)?;
    }
    let n_rep = entries.iter().filter(|e| e.repaired).count();
    println!("refine: {} trajectories ({} repaired) -> {}", repaired.len(), n_rep, out.display());
    Ok(())
}

#[derive(Serialize)]
struct BenchReport<'a> {
    scene: &'a str,
    trials: usize,
    seed: u64,
    dataset_size: usize,
    dataset_dropped: usize,
    metrics: MetricsJson,
    /// Median per-trial wall clock; `metrics.time_ms` carries the same value.
    median_time_ms: f64,
}

struct TrialRow {
    seed: u64,
    time_ms: f64,
    violations_repaired: usize,
    kc_f: f64,
    kc_i: f64,
    cost: f64,
    safe_states: bool,
    safe_reroll: bool,
    within_bounds: bool,
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    scene_arg: &str,
    config: Option<&Path>,
    trials: usize,
    seed: u64,
    data: Option<&Path>,
    count: usize,
    report: &Path,
    trials_csv: Option<&Path>,
) -> Result<(), CliError> {
    anyhow::ensure!(trials > 0, "need at least one trial");
    let scene = load_scene(scene_arg)?;
    let cfg = load_run_config(config)?;
    let sampler = cfg.sampler.to_config();

    let (dataset, dropped) = match data {
        Some(p) => (read_trajectories_csv(p)?, 0),
        None => {
            let ds = synth_dataset(&scene, count, mix(seed, 0xD5), &expert_options(&scene))
                .map_err(|e| CliError::Other(anyhow::anyhow!(e.to_string())))?;
            (ds.trajectories, ds.dropped)
        }
    };
    anyhow::ensure!(
        dataset[0].layout == scene.layout(),
        "dataset layout does not match the scene"
    );
    let field = dataset_field(&dataset).map_err(|e| anyhow::anyhow!("{e:?}"))?;

    // Trials are embarrassingly parallel; the reduction below is a
    // single-threaded pass in trial order, so reports are deterministic in
    // the seed regardless of scheduling.
    let results: Vec<Result<(Trajectory, TrialRow), CliError>> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let trial_seed = mix(seed, 1 + i as u64);
            let repair = cfg.repair.to_config(trial_seed);
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
            let start = Instant::now();
            let res = pipeline_trial(&scene, &field, &sampler, &repair, &mut rng)
                .map_err(pipeline_to_cli)?;
            let time_ms = start.elapsed().as_secs_f64() * 1e3;
            let t = res.trajectory;
            let row = TrialRow {
                seed: trial_seed,
                time_ms,
                violations_repaired: res.windows.violation.len(),
                kc_f: kc_forward(&t, &scene.model),
                kc_i: kc_inverse(&t, &scene.model).rmse,
                cost: metrics::trajectory_cost(&t, &scene),
                safe_states: metrics::states_safe(&t, &scene),
                safe_reroll: metrics::states_safe(&reroll(&t, &scene.model), &scene),
                within_bounds: metrics::actions_within_bounds(&t, &scene),
            };
            Ok((t, row))
        })
        .collect();

    let mut trajs = Vec::with_capacity(trials);
    let mut rows = Vec::with_capacity(trials);
    for r in results {
        let (t, row) = r?;
        trajs.push(t);
        rows.push(row);
    }

    let mut times: Vec<f64> = rows.iter().map(|r| r.time_ms).collect();
    times.sort_by(f64::total_cmp);
    let median = if times.len() % 2 == 1 {
        times[times.len() / 2]
    } else {
        0.5 * (times[times.len() / 2 - 1] + times[times.len() / 2])
    };

    let mut rep = score(&trajs, &scene);
    rep.time_ms = median;
    let bench = BenchReport {
        scene: scene.name,
        trials,
        seed,
        dataset_size: dataset.len(),
        dataset_dropped: dropped,
        metrics: MetricsJson::from(&rep),
        median_time_ms: median,
    };
    write_json(report, &bench)?;

    if let Some(p) = trials_csv {
        let mut w = csv::Writer::from_path(p)
            .with_context(|| format!("creating {}", p.display()))?;
        w.write_record([
            "trial",
            "seed",
            "time_ms",
            "violation_windows",
            "kc_f",
            "kc_i",
            "cost",
            "safe_states",
            "safe_reroll",
            "within_bounds",
        ])
        .map_err(|e| CliError::Other(e.into()))?;
        for (i, r) in rows.iter().enumerate() {
            w.write_record([
                i.to_string(),
                r.seed.to_string(),
                format!("{:.3}", r.time_ms),
                r.violations_repaired.to_string(),
                format!("{:.17e}", r.kc_f),
                format!("{:.17e}", r.kc_i),
                format!("{:.17e}", r.cost),
                (r.safe_states as u8).to_string(),
                (r.safe_reroll as u8).to_string(),
                (r.within_bounds as u8).to_string(),
            ])
            .map_err(|e| CliError::Other(e.into()))?;
        }
        w.flush().map_err(|e| CliError::Other(e.into()))?;
    }

    println!(
        "bench {}: SR-S {:.1} SR-A {:.1} AR {:.1} TSR {:.1} | KC-F {:.2e} KC-I {:.2e} | cost {:.3} | median {:.0} ms",
        scene.name, rep.sr_s, rep.sr_a, rep.ar, rep.tsr, rep.kc_f, rep.kc_i, rep.cost, median
    );
    Ok(())
}

/// Floor parameters of the planar toy problem; residual Lipschitz constants
/// cover the prior's ±6σ-bounded start box.
fn toy_floor() -> FloorSpec {
    FloorSpec { c_pt: 2.0, c_g: 1.0, v_bar: 40.0, lipschitz_eq: 60.0, lipschitz_ineq: 10.0 }
}

fn cmd_figs(out_dir: &Path, config: Option<&Path>, seed: u64, r0: f64) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let cfg: RunConfig = load_run_config(config)?;
    let s = &cfg.sampler;

    // Schedule curve: the numerically integrated zeroing schedule against
    // its closed form on a uniform grid.
    let numeric = ZeroingSchedule::numeric(
        r0,
        RateMap::Linear { c_gamma: s.c_gamma },
        s.c_r,
        s.t_pre,
    );
    let closed = ZeroingSchedule::closed_form_linear(r0, s.c_gamma, s.c_r, s.t_pre);
    let rt_path = out_dir.join("rt_curve.csv");
    {
        let mut w = csv::Writer::from_path(&rt_path)
            .with_context(|| format!("creating {}", rt_path.display()))?;
        w.write_record(["t", "r_numeric", "r_closed"])?;
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            w.write_record([
                format!("{t:.6}"),
                format!("{:.17e}", numeric.eval(t).0),
                format!("{:.17e}", closed.eval(t).0),
            ])?;
        }
        w.flush()?;
    }

    // Guidance comparison on the planar toy problem: schedules at the
    // free-generation floor against a conventional prescribed-time decay
    // (no hold window), same start point.
    let toy = toy2d();
    let cons = ConstraintSet {
        equality: Some(Box::new(|x: &[f64]| toy.equality(x))),
        barriers: Some(Box::new(|x: &[f64]| {
            let (h, g) = toy.barrier(x);
            vec![(h, flowplan_core::guidance::SparseRow::dense(0, g))]
        })),
    };
    let velocity =
        |t: f64, x: &[f64], out: &mut [f64]| toy.field.velocity(t, x, out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = ode::sample_prior(&mut rng, 2);

    let ptzf_cfg = SamplerConfig {
        c_r: 0.3,
        margin: 1.0,
        floor: Some(toy_floor()),
        ..cfg.sampler.to_config()
    };
    let pt_cfg = SamplerConfig { c_r: 0.0, ..ptzf_cfg.clone() };
    let a = guided_sample(2, &velocity, &cons, &ptzf_cfg, &x0)
        .map_err(|e| anyhow::anyhow!(e.to_string()))?;
    let b = guided_sample(2, &velocity, &cons, &pt_cfg, &x0)
        .map_err(|e| anyhow::anyhow!(e.to_string()))?;

    let cmp_path = out_dir.join("guidance_compare.csv");
    {
        let mut w = csv::Writer::from_path(&cmp_path)
            .with_context(|| format!("creating {}", cmp_path.display()))?;
        w.write_record(["t", "u_norm_ptzf", "u_norm_pt"])?;
        for (da, db) in a.diagnostics.iter().zip(&b.diagnostics) {
            w.write_record([
                format!("{:.6}", da.t),
                format!("{:.17e}", da.u_norm),
                format!("{:.17e}", db.u_norm),
            ])?;
        }
        w.flush()?;
    }

    println!("figs: wrote {} and {}", rt_path.display(), cmp_path.display());
    Ok(())
}
