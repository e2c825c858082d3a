//! File formats for the command-line front end: long-form trajectory CSV,
//! guidance-diagnostics CSV, JSON mirrors of the library configuration
//! structs, and named-scene loading with optional JSON overrides.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use flowplan_core::metrics::MetricsReport;
use flowplan_core::planner::{FloorSpec, SamplerConfig, StepDiag};
use flowplan_core::refine::{CemConfig, RefineConfig};
use flowplan_core::scene::{car_kin, pendulum2, Scene};
use flowplan_core::traj::{TrajLayout, Trajectory};

/// Long-form trajectory CSV: one row per step with columns
/// `traj,k,s0..s{d_s−1},a0..a{d_a−1}`; terminal rows leave the action cells
/// empty. A file holds one trajectory or a whole dataset.
pub fn write_trajectories_csv(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    anyhow::ensure!(!trajs.is_empty(), "refusing to write an empty trajectory file");
    let l = trajs[0].layout;
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec!["traj".to_string(), "k".to_string()];
    header.extend((0..l.d_s).map(|i| format!("s{i}")));
    header.extend((0..l.d_a).map(|i| format!("a{i}")));
    w.write_record(&header)?;
    for (id, t) in trajs.iter().enumerate() {
        anyhow::ensure!(t.layout == l, "trajectory {id} has a different layout");
        for k in 0..=l.h {
            let mut row = vec![id.to_string(), k.to_string()];
            row.extend(t.state(k).iter().map(|v| format!("{v:.17e}")));
            if k < l.h {
                row.extend(t.action(k).iter().map(|v| format!("{v:.17e}")));
            } else {
                row.extend(std::iter::repeat(String::new()).take(l.d_a));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a long-form trajectory CSV back; the layout is inferred from the
/// header and the per-trajectory row counts.
pub fn read_trajectories_csv(path: &Path) -> Result<Vec<Trajectory>> {
    let mut r = csv::Reader::from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.clone();
    let d_s = header.iter().filter(|h| h.starts_with('s')).count();
    let d_a = header.iter().filter(|h| h.starts_with('a')).count();
    anyhow::ensure!(
        d_s > 0 && header.len() == 2 + d_s + d_a,
        "unrecognized trajectory header: {header:?}"
    );

    // Rows grouped by trajectory id, in file order.
    let mut groups: Vec<(Vec<f64>, Vec<f64>)> = Vec::new(); // (states, actions)
    let mut last_id: Option<usize> = None;
    for rec in r.records() {
        let rec = rec?;
        let id: usize = rec[0].parse().context("bad trajectory id")?;
        let k: usize = rec[1].parse().context("bad step index")?;
        if last_id != Some(id) {
            anyhow::ensure!(id == groups.len(), "trajectory ids must be contiguous");
            anyhow::ensure!(k == 0, "trajectory {id} does not start at step 0");
            groups.push((Vec::new(), Vec::new()));
            last_id = Some(id);
        }
        let g = groups.last_mut().unwrap();
        anyhow::ensure!(k == g.0.len() / d_s, "steps of trajectory {id} out of order");
        for i in 0..d_s {
            g.0.push(rec[2 + i].parse::<f64>().context("bad state value")?);
        }
        let acts: Vec<&str> = (0..d_a).map(|i| &rec[2 + d_s + i]).collect();
        if acts.iter().all(|s| s.is_empty()) {
            continue; // terminal row
        }
        for s in acts {
            g.1.push(s.parse::<f64>().context("bad action value")?);
        }
    }
    anyhow::ensure!(!groups.is_empty(), "{} holds no trajectories", path.display());

    let mut out = Vec::with_capacity(groups.len());
    for (id, (states, actions)) in groups.into_iter().enumerate() {
        let h = actions.len() / d_a;
        anyhow::ensure!(
            states.len() == (h + 1) * d_s && actions.len() == h * d_a,
            "trajectory {id} is ragged: {} states, {} actions",
            states.len() / d_s,
            h
        );
        out.push(Trajectory::from_parts(TrajLayout::new(h, d_s, d_a), &states, &actions));
    }
    Ok(out)
}

/// Per-step guidance diagnostics: integration time, correction norm, worst
/// inequality residual, worst slack.
pub fn write_diagnostics_csv(path: &Path, diags: &[StepDiag]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["t", "u_norm", "rho_max", "delta_max"])?;
    for d in diags {
        w.write_record([
            format!("{:.17e}", d.t),
            format!("{:.17e}", d.u_norm),
            format!("{:.17e}", d.rho_max),
            format!("{:.17e}", d.delta_max),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FloorCfg {
    pub c_pt: f64,
    pub c_g: f64,
    pub v_bar: f64,
    pub lipschitz_eq: f64,
    pub lipschitz_ineq: f64,
}

impl From<FloorCfg> for FloorSpec {
    fn from(f: FloorCfg) -> Self {
        FloorSpec {
            c_pt: f.c_pt,
            c_g: f.c_g,
            v_bar: f.v_bar,
            lipschitz_eq: f.lipschitz_eq,
            lipschitz_ineq: f.lipschitz_ineq,
        }
    }
}

/// JSON mirror of the sampler settings; omitted fields keep library defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerCfg {
    pub steps: usize,
    pub t_pre: f64,
    pub c_r: f64,
    pub c_gamma: f64,
    pub c_gain: f64,
    pub clamp_eps: Option<f64>,
    pub margin: f64,
    pub floor: Option<FloorCfg>,
    pub p_u: f64,
    pub p_state_ratio: f64,
    pub p_delta: f64,
    pub tol_eq: f64,
    pub tol_ineq: f64,
}

impl Default for SamplerCfg {
    fn default() -> Self {
        let d = SamplerConfig::default();
        SamplerCfg {
            steps: d.steps,
            t_pre: d.t_pre,
            c_r: d.c_r,
            c_gamma: d.c_gamma,
            c_gain: d.c_gain,
            clamp_eps: d.clamp_eps,
            margin: d.margin,
            floor: None,
            p_u: d.p_u,
            p_state_ratio: d.p_state_ratio,
            p_delta: d.p_delta,
            tol_eq: d.tol_eq,
            tol_ineq: d.tol_ineq,
        }
    }
}

impl SamplerCfg {
    pub fn to_config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            t_pre: self.t_pre,
            c_r: self.c_r,
            c_gamma: self.c_gamma,
            c_gain: self.c_gain,
            clamp_eps: self.clamp_eps,
            margin: self.margin,
            floor: self.floor.map(FloorSpec::from),
            p_u: self.p_u,
            p_u_diag: None,
            p_state_ratio: self.p_state_ratio,
            p_delta: self.p_delta,
            tol_eq: self.tol_eq,
            tol_ineq: self.tol_ineq,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CemCfg {
    pub population: usize,
    pub elite_frac: f64,
    pub iters: usize,
    pub init_std: f64,
    pub std_floor: f64,
}

impl Default for CemCfg {
    fn default() -> Self {
        let d = CemConfig::default();
        CemCfg {
            population: d.population,
            elite_frac: d.elite_frac,
            iters: d.iters,
            init_std: d.init_std,
            std_floor: d.std_floor,
        }
    }
}

impl CemCfg {
    pub fn to_config(&self, seed: u64) -> CemConfig {
        CemConfig {
            population: self.population,
            elite_frac: self.elite_frac,
            iters: self.iters,
            init_std: self.init_std,
            std_floor: self.std_floor,
            seed,
        }
    }
}

/// JSON mirror of the repair settings; omitted fields keep library defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepairCfg {
    pub n_pad: usize,
    pub n_rec: usize,
    pub w_obs: f64,
    pub w_limit: f64,
    pub w_track: f64,
    pub w_term: f64,
    pub w_smooth: f64,
    pub w_smooth_frozen: f64,
    pub w_seam: f64,
    pub max_outer: usize,
    pub safety_tol: f64,
    pub penalty_margin: f64,
    pub cem: CemCfg,
}

impl Default for RepairCfg {
    fn default() -> Self {
        let d = RefineConfig::default();
        RepairCfg {
            n_pad: d.n_pad,
            n_rec: d.n_rec,
            w_obs: d.w_obs,
            w_limit: d.w_limit,
            w_track: d.w_track,
            w_term: d.w_term,
            w_smooth: d.w_smooth,
            w_smooth_frozen: d.w_smooth_frozen,
            w_seam: d.w_seam,
            max_outer: d.max_outer,
            safety_tol: d.safety_tol,
            penalty_margin: d.penalty_margin,
            cem: CemCfg::default(),
        }
    }
}

impl RepairCfg {
    pub fn to_config(&self, seed: u64) -> RefineConfig {
        RefineConfig {
            n_pad: self.n_pad,
            n_rec: self.n_rec,
            w_obs: self.w_obs,
            w_limit: self.w_limit,
            w_track: self.w_track,
            w_term: self.w_term,
            w_smooth: self.w_smooth,
            w_smooth_frozen: self.w_smooth_frozen,
            w_seam: self.w_seam,
            max_outer: self.max_outer,
            safety_tol: self.safety_tol,
            penalty_margin: self.penalty_margin,
            cem: self.cem.to_config(seed),
        }
    }
}

/// Top-level run configuration shared by the subcommands.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sampler: SamplerCfg,
    pub repair: RepairCfg,
}

pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

/// Scene request: a builtin name with optional overrides.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub base: String,
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub s_cur: Option<Vec<f64>>,
    #[serde(default)]
    pub init_spread: Option<Vec<f64>>,
    #[serde(default)]
    pub action_bounds: Option<Vec<f64>>,
    #[serde(default)]
    pub goal: Option<Vec<f64>>,
}

fn builtin_scene(name: &str) -> Option<Scene> {
    match name {
        "pendulum2" => Some(pendulum2()),
        "car_kin" => Some(car_kin()),
        _ => None,
    }
}

/// Load a scene from a builtin name or a JSON spec file.
pub fn load_scene(arg: &str) -> Result<Scene> {
    if let Some(s) = builtin_scene(arg) {
        return Ok(s);
    }
    let p = Path::new(arg);
    if !p.exists() {
        bail!("unknown scene '{arg}' (builtins: pendulum2, car_kin) and no such file");
    }
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    let spec: SceneSpec =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
    let mut scene = builtin_scene(&spec.base)
        .with_context(|| format!("unknown base scene '{}'", spec.base))?;
    if let Some(h) = spec.horizon {
        scene.horizon = h;
    }
    if let Some(s) = spec.s_cur {
        anyhow::ensure!(s.len() == scene.model.d_s(), "s_cur has the wrong dimension");
        scene.s_cur = s;
    }
    if let Some(s) = spec.init_spread {
        anyhow::ensure!(s.len() == scene.model.d_s(), "init_spread has the wrong dimension");
        scene.init_spread = s;
    }
    if let Some(b) = spec.action_bounds {
        anyhow::ensure!(b.len() == scene.model.d_a(), "action_bounds has the wrong dimension");
        scene.action_bounds = Some(b);
    }
    if let Some(g) = spec.goal {
        anyhow::ensure!(g.len() == scene.model.d_s(), "goal has the wrong dimension");
        scene.goal = Some(g);
    }
    Ok(scene)
}

/// Serializable scorecard, one-to-one with the library's report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsJson {
    pub sr_s: f64,
    pub sr_a: f64,
    pub ar: f64,
    pub tsr: f64,
    pub kc_f: f64,
    pub kc_i: f64,
    pub cost: f64,
    pub time_ms: f64,
}

impl From<&MetricsReport> for MetricsJson {
    fn from(r: &MetricsReport) -> Self {
        MetricsJson {
            sr_s: r.sr_s,
            sr_a: r.sr_a,
            ar: r.ar,
            tsr: r.tsr,
            kc_f: r.kc_f,
            kc_i: r.kc_i,
            cost: r.cost,
            time_ms: r.time_ms,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
