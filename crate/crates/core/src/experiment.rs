//! Experiment configuration, built-in recipes and the batch runner.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homotopy::{homotopy_dp, JointOptions, DEFAULT_LAMBDA};
use crate::integrator::{orbit, Rk4Map, Trajectory, DEFAULT_DT};
use crate::io::{self, Summary};
use crate::similarity::similarity_degree;
use crate::staging::{bellman_dp, pontryagin_align, SolverOptions, StagePlan, StageReport};
use crate::systems::{make_hybrid, make_system, SystemSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    AlignPontryagin,
    AlignBellman,
    AlignHomotopy,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::AlignPontryagin => "align-pontryagin",
            Mode::AlignBellman => "align-bellman",
            Mode::AlignHomotopy => "align-homotopy",
        }
    }
}

/// A catalog system (`name` + `params`) or a hybrid (`from` + `to`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDescriptor {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<Box<SystemDescriptor>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<Box<SystemDescriptor>>,
    /// Embedding parameter of a hybrid: fixed when simulating, the starting value when aligning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl SystemDescriptor {
    pub fn catalog(name: &str) -> Self {
        SystemDescriptor {
            name: Some(name.to_string()),
            params: BTreeMap::new(),
            from: None,
            to: None,
            lambda: None,
        }
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn hybrid(from: SystemDescriptor, to: SystemDescriptor, lambda: f64) -> Self {
        SystemDescriptor {
            name: None,
            params: BTreeMap::new(),
            from: Some(Box::new(from)),
            to: Some(Box::new(to)),
            lambda: Some(lambda),
        }
    }

    pub fn build(&self) -> Result<SystemSpec> {
        match (&self.name, &self.from, &self.to) {
            (Some(name), None, None) => {
                if self.lambda.is_some() {
                    return Err(Error::UnexpectedLambda(name.clone()));
                }
                make_system(name, self.params.iter().map(|(k, v)| (k, *v)))
            }
            (None, Some(from), Some(to)) if self.params.is_empty() => make_hybrid(from.build()?, to.build()?),
            _ => Err(Error::Config {
                line: None,
                message: "a system needs either `name` (with optional `params`) or both `from` and `to`".into(),
            }),
        }
    }
}

fn default_x0() -> Vec<f64> {
    vec![0.1, 0.1, 0.1]
}
fn default_dt() -> f64 {
    DEFAULT_DT
}
fn default_tol() -> f64 {
    SolverOptions::default().tol
}
fn default_max_iter() -> usize {
    SolverOptions::default().max_iter
}
fn default_bound() -> f64 {
    SolverOptions::default().bound
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// One or two systems for `simulate`, exactly two (first, second) for the alignment modes.
    pub systems: Vec<SystemDescriptor>,
    #[serde(default = "default_x0")]
    pub x0: Vec<f64>,
    /// Number of steps `N`.
    #[serde(alias = "N")]
    pub steps: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<StagePlan>,
    #[serde(default)]
    pub tau: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_bound")]
    pub bound: f64,
    /// Recorded in the summary. No current mode draws random numbers.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_lo: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_hi: Option<[f64; 2]>,
    #[serde(default)]
    pub tie_lambda: bool,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

/// 1-based line of the first occurrence of `"key"` in `text`.
fn locate(text: &str, key: &str) -> Option<usize> {
    let quoted = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&quoted)).map(|i| i + 1)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config {
            line: Some(e.line()),
            message: e.to_string(),
        })?;
        config.validate_in(Some(text))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_in(None)
    }

    fn validate_in(&self, text: Option<&str>) -> Result<()> {
        let fail = |key: &str, message: String| Error::Config {
            line: text.and_then(|t| locate(t, key)),
            message,
        };
        let wanted = match self.mode {
            Mode::Simulate => 1..=2,
            _ => 2..=2,
        };
        if !wanted.contains(&self.systems.len()) {
            return Err(fail(
                "systems",
                format!("mode {} takes {:?} systems, got {}", self.mode.name(), wanted, self.systems.len()),
            ));
        }
        let specs = self
            .systems
            .iter()
            .map(|d| {
                d.build().map_err(|e| match e {
                    Error::Config { message, .. } => fail("systems", message),
                    other => fail("systems", other.to_string()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for (d, s) in self.systems.iter().zip(&specs) {
            s.resolve_lambda(self.descriptor_lambda(d, s)).map_err(|e| fail("lambda", e.to_string()))?;
        }
        let dim = specs[0].dim();
        if specs.iter().any(|s| s.dim() != dim) {
            return Err(fail("systems", "systems have different dimensions".into()));
        }
        if self.x0.len() != dim {
            return Err(fail("x0", format!("x0 has {} components, the systems have {dim}", self.x0.len())));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(fail("x0", "x0 must be finite".into()));
        }
        if self.steps == 0 {
            return Err(fail("steps", "steps must be positive".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(fail("dt", format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(fail("tau", format!("tau must be non-negative, got {}", self.tau)));
        }
        if !(self.tol > 0.0) {
            return Err(fail("tol", format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.bound >= 1.0) {
            return Err(fail("bound", format!("bound must be at least 1, got {}", self.bound)));
        }
        for (key, value) in [("lambda_lo", self.lambda_lo), ("lambda_hi", self.lambda_hi)] {
            if let Some(l) = value {
                if l.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(fail(key, format!("{key} must lie in [0, 1]^2")));
                }
            }
        }
        match (self.mode, self.plan) {
            (Mode::Simulate, _) => {}
            (_, None) => return Err(fail("mode", format!("mode {} needs a plan", self.mode.name()))),
            (_, Some(plan)) => {
                if plan.stage_len == 0 || plan.num_stages == 0 {
                    return Err(fail("plan", "plan needs positive stage_len and num_stages".into()));
                }
                if plan.total_steps() != self.steps {
                    return Err(fail(
                        "plan",
                        format!(
                            "plan covers {} steps ({} x {}), config has {}",
                            plan.total_steps(),
                            plan.num_stages,
                            plan.stage_len,
                            self.steps
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    fn descriptor_lambda(&self, d: &SystemDescriptor, s: &SystemSpec) -> Option<f64> {
        match (s.is_hybrid(), d.lambda) {
            (true, None) if self.mode == Mode::AlignHomotopy => Some(DEFAULT_LAMBDA[0]),
            (_, l) => l,
        }
    }

    fn solver(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            bound: self.bound,
        }
    }

    fn plan(&self) -> Result<StagePlan> {
        self.plan.ok_or_else(|| Error::Config {
            line: None,
            message: "missing plan".into(),
        })
    }
}

/// Command-line overrides applied on top of a config or recipe.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub tau: Option<f64>,
    pub tol: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(dir) = &self.output_dir {
            config.output_dir = dir.clone();
        }
        if let Some(tau) = self.tau {
            config.tau = tau;
        }
        if let Some(tol) = self.tol {
            config.tol = tol;
        }
    }
}

pub const RECIPES: [&str; 5] = ["example4.1", "example4.2", "example4.3", "example4.4", "example4.5"];

/// Control values of the controlled Lü system used by `example4.5`.
pub const EXAMPLE45_CONTROLS: [f64; 4] = [-1.0, 8.0, 12.0, -12.0];

fn recipe_config(mode: Mode, x: SystemDescriptor, y: SystemDescriptor, steps: usize, stage_len: usize, tau: f64) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        systems: vec![x, y],
        x0: default_x0(),
        steps,
        dt: DEFAULT_DT,
        plan: Some(StagePlan {
            stage_len,
            num_stages: steps / stage_len,
        }),
        tau,
        tol: default_tol(),
        max_iter: default_max_iter(),
        bound: default_bound(),
        seed: 0,
        lambda_lo: None,
        lambda_hi: None,
        tie_lambda: false,
        output_dir: default_output(),
    }
}

/// Built-in experiment setups. Each entry is a sub-directory name (empty for
/// single runs) and its config; `output_dir` is the recipe name.
pub fn recipe(name: &str) -> Result<Vec<(String, ExperimentConfig)>> {
    let lorenz = || SystemDescriptor::catalog("lorenz");
    let mut runs = match name {
        "example4.1" => vec![(
            String::new(),
            recipe_config(Mode::AlignPontryagin, lorenz(), SystemDescriptor::catalog("chua"), 2000, 10, 1e-4),
        )],
        "example4.2" => vec![(
            String::new(),
            recipe_config(Mode::AlignPontryagin, lorenz(), SystemDescriptor::catalog("rossler"), 2000, 10, 1e-4),
        )],
        "example4.3" => vec![(
            String::new(),
            recipe_config(Mode::AlignBellman, lorenz(), SystemDescriptor::catalog("chen"), 2000, 10, 0.0),
        )],
        "example4.4" => vec![(
            String::new(),
            recipe_config(
                Mode::AlignBellman,
                lorenz(),
                SystemDescriptor::catalog("lu").with_param("u", 0.0),
                2000,
                10,
                0.0,
            ),
        )],
        "example4.5" => EXAMPLE45_CONTROLS
            .iter()
            .map(|&u| {
                let hybrid = SystemDescriptor::hybrid(SystemDescriptor::catalog("chua"), lorenz(), DEFAULT_LAMBDA[0]);
                let lu = SystemDescriptor::catalog("lu").with_param("u", u);
                (format!("u_{u}"), recipe_config(Mode::AlignHomotopy, hybrid, lu, 1000, 5, 0.0))
            })
            .collect(),
        other => {
            return Err(Error::Config {
                line: None,
                message: format!("unknown recipe `{other}` (expected one of {})", RECIPES.join(", ")),
            })
        }
    };
    for (_, c) in &mut runs {
        c.output_dir = PathBuf::from(name);
    }
    Ok(runs)
}

/// Resolves a recipe with overrides into configs whose `output_dir` is final.
pub fn recipe_runs(name: &str, overrides: &Overrides) -> Result<Vec<ExperimentConfig>> {
    recipe(name)?
        .into_iter()
        .map(|(sub, mut config)| {
            overrides.apply(&mut config);
            if !sub.is_empty() {
                config.output_dir = config.output_dir.join(sub);
            }
            config.validate()?;
            Ok(config)
        })
        .collect()
}

/// The three orbit sets behind the plots: `{x_k}`, `{A x_k}` and `{y_k}`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Orbits {
    pub x: Vec<DVector<f64>>,
    pub ax: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: Summary,
    pub reports: Vec<StageReport>,
    pub cumulative: Vec<f64>,
    pub files: Vec<PathBuf>,
}

fn lambda_map<'a>(spec: &'a SystemSpec, d: &SystemDescriptor, dt: f64) -> Result<Rk4Map<'a>> {
    Rk4Map::new(spec, dt, if spec.is_hybrid() { d.lambda } else { None })
}

/// Stagewise orbits: each stage applies its matrix to its window of `x` and
/// regenerates the second orbit from the stage's boundary.
fn staged_orbits(x: &[DVector<f64>], reports: &[StageReport], plan: &StagePlan, y_map: &Rk4Map) -> Result<Orbits> {
    let mut out = Orbits {
        x: x[..=plan.total_steps()].to_vec(),
        ..Default::default()
    };
    for (m, r) in reports.iter().enumerate() {
        let window = &x[plan.start(m)..=plan.start(m) + plan.stage_len];
        let ys = orbit(y_map, &r.a.apply(&window[0]), plan.stage_len)?;
        for k in usize::from(m > 0)..=plan.stage_len {
            out.ax.push(r.a.apply(&window[k]));
            out.y.push(ys[k].clone());
        }
    }
    Ok(out)
}

/// Runs one experiment and writes its artifacts under `config.output_dir`.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut emit = |name: &str| {
        let p = dir.join(name);
        files.push(p.clone());
        p
    };
    io::write_json(&emit("config.json"), config)?;

    let specs = config.systems.iter().map(SystemDescriptor::build).collect::<Result<Vec<_>>>()?;
    let x0 = DVector::from_vec(config.x0.clone());
    let (reports, cumulative, final_rho, orbits) = match config.mode {
        Mode::Simulate => {
            for (i, (spec, d)) in specs.iter().zip(&config.systems).enumerate() {
                let map = lambda_map(spec, d, config.dt)?;
                let states = orbit(&map, &x0, config.steps)?;
                let name = if i == 0 { "trajectory_x.csv" } else { "trajectory_y.csv" };
                io::write_trajectory_csv(&emit(name), &states)?;
            }
            (Vec::new(), Vec::new(), None, Orbits::default())
        }
        Mode::AlignPontryagin => {
            let plan = config.plan()?;
            let xm = lambda_map(&specs[0], &config.systems[0], config.dt)?;
            let ym = lambda_map(&specs[1], &config.systems[1], config.dt)?;
            let traj = |map: &Rk4Map| -> Result<Trajectory> {
                Ok(Trajectory {
                    states: orbit(map, &x0, config.steps)?,
                    dt: config.dt,
                    system_name: map.system().name().to_string(),
                    lambda: map.lambda(),
                })
            };
            let (x, y) = (traj(&xm)?, traj(&ym)?);
            io::write_trajectory_csv(&emit("trajectory_x.csv"), &x.states)?;
            io::write_trajectory_csv(&emit("trajectory_y.csv"), &y.states)?;
            let reports = pontryagin_align(&x, &y, &plan, config.tau)?;
            let pooled = reports.iter().map(|r| r.omega).sum::<f64>() / reports.len() as f64;
            let mut orbits = Orbits {
                x: x.states.clone(),
                y: y.states.clone(),
                ax: Vec::with_capacity(x.states.len()),
            };
            for (k, state) in x.states.iter().enumerate() {
                let m = (k / plan.stage_len).min(plan.num_stages - 1);
                orbits.ax.push(reports[m].a.apply(state));
            }
            (reports, Vec::new(), Some(similarity_degree(pooled)?), orbits)
        }
        Mode::AlignBellman => {
            let plan = config.plan()?;
            let xm = lambda_map(&specs[0], &config.systems[0], config.dt)?;
            let ym = lambda_map(&specs[1], &config.systems[1], config.dt)?;
            let result = bellman_dp(&xm, &ym, &x0, &plan, &config.solver())?;
            io::write_trajectory_csv(&emit("trajectory_x.csv"), &result.x)?;
            io::write_json(&emit("baseline.json"), &result.baseline)?;
            let orbits = staged_orbits(&result.x, &result.reports, &plan, &ym)?;
            (result.reports, result.cumulative, None, orbits)
        }
        Mode::AlignHomotopy => {
            let plan = config.plan()?;
            let lambda_init = [0, 1].map(|i| config.systems[i].lambda.unwrap_or(DEFAULT_LAMBDA[i]));
            let defaults = JointOptions::default();
            let opts = JointOptions {
                solver: config.solver(),
                lambda_lo: config.lambda_lo.unwrap_or(defaults.lambda_lo),
                lambda_hi: config.lambda_hi.unwrap_or(defaults.lambda_hi),
                tie: config.tie_lambda,
                ..defaults
            };
            let result = homotopy_dp(&specs[0], &specs[1], &x0, &plan, config.dt, lambda_init, &opts)?;
            io::write_trajectory_csv(&emit("trajectory_x.csv"), &result.x)?;
            io::write_homotopy_csv(&emit("homotopy.csv"), &result.reports)?;
            io::write_json(&emit("baseline.json"), &result.baseline)?;
            let orbits = Orbits {
                x: result.x,
                ax: result.simulated,
                y: result.actual,
            };
            (result.reports, result.cumulative, None, orbits)
        }
    };

    if config.mode != Mode::Simulate {
        io::write_json(&emit("stages.json"), &reports)?;
    }
    let summary = Summary::new(config.mode.name(), config.steps, &reports, &cumulative, final_rho, config.seed);
    io::write_json(&emit("summary.json"), &summary)?;
    files.extend(emit_plot_data(&reports, &orbits, &cumulative, dir)?);
    Ok(RunOutcome {
        summary,
        reports,
        cumulative,
        files,
    })
}

/// Runs independent experiments concurrently. Each writes only to its own `output_dir`.
pub fn run_many(configs: &[ExperimentConfig]) -> Vec<Result<RunOutcome>> {
    configs.par_iter().map(run).collect()
}

const PLANES: [(&str, usize, usize); 3] = [("xy", 0, 1), ("xz", 0, 2), ("yz", 1, 2)];

/// Plot data: `orbit_{x,ax,y}.csv`, `plane_{xy,xz,yz}.csv`, `stage_rho.csv`,
/// `series.csv` (actual `y_k` against simulated `A x_k`) and `cumulative.csv`.
/// Writes nothing when there are no stage reports.
pub fn emit_plot_data(reports: &[StageReport], orbits: &Orbits, cumulative: &[f64], dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Ok(Vec::new());
    }
    if orbits.ax.len() != orbits.x.len() || orbits.y.len() != orbits.x.len() {
        return Err(Error::LengthMismatch {
            left: orbits.x.len(),
            right: orbits.ax.len().min(orbits.y.len()),
        });
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (name, states) in [("orbit_x.csv", &orbits.x), ("orbit_ax.csv", &orbits.ax), ("orbit_y.csv", &orbits.y)] {
        let path = dir.join(name);
        io::write_trajectory_csv(&path, states)?;
        files.push(path);
    }
    let dim = orbits.x.first().map_or(0, |s| s.len());
    if dim >= 3 {
        for (plane, i, j) in PLANES {
            let path = dir.join(format!("plane_{plane}.csv"));
            let header: Vec<String> = std::iter::once("k".to_string())
                .chain(["x", "ax", "y"].iter().flat_map(|p| [format!("{p}{}", i + 1), format!("{p}{}", j + 1)]))
                .collect();
            let rows = (0..orbits.x.len()).map(|k| {
                let pick = |s: &DVector<f64>| [s[i], s[j]];
                let mut row = Vec::with_capacity(6);
                row.extend(pick(&orbits.x[k]));
                row.extend(pick(&orbits.ax[k]));
                row.extend(pick(&orbits.y[k]));
                (k, row)
            });
            io::write_table(&path, &header, rows)?;
            files.push(path);
        }
    }
    let path = dir.join("stage_rho.csv");
    io::write_table(
        &path,
        &["stage".to_string(), "rho".to_string()],
        reports.iter().map(|r| (r.index, vec![r.rho])),
    )?;
    files.push(path);

    let path = dir.join("series.csv");
    let header: Vec<String> = std::iter::once("k".to_string())
        .chain((1..=dim).map(|i| format!("actual{i}")))
        .chain((1..=dim).map(|i| format!("simulated{i}")))
        .collect();
    let rows = (0..orbits.x.len()).map(|k| {
        let mut row = orbits.y[k].as_slice().to_vec();
        row.extend_from_slice(orbits.ax[k].as_slice());
        (k, row)
    });
    io::write_table(&path, &header, rows)?;
    files.push(path);

    if !cumulative.is_empty() {
        let path = dir.join("cumulative.csv");
        io::write_cumulative_csv(&path, cumulative)?;
        files.push(path);
    }
    Ok(files)
}
