//! Experiment configuration, dispatch and persistence.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::carleman::{sample_estimate, sample_seed, sweep_parameters, Estimate, SweepRow};
use crate::error::{LabError, Result};
use crate::fixedpoint::{picard_backward, picard_forward, PicardConfig, PicardTrace};
use crate::grid::{ComplexField, GLCoefficients, SpatialGrid, TimeGrid};
use crate::hum::{
    cost_report_backward, cost_report_forward, BackwardHum, BackwardInput, CostBreakdown,
    CostReport, ForwardHum, ForwardInput, HumSolution, PenalizationConfig,
};
use crate::nonlinear::NonlinearitySpec;
use crate::solvers::{solve_forward, ControlSet, ForwardData, Model};
use crate::tree::{build_tree, AdaptedField, Layout};
use crate::weights::{build_beta, build_weight_set, BetaProfile, Geometry, WeightParams, WeightVariant};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_NONCONVERGED: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    /// Uncontrolled forward trajectory, nonlinearity switched on.
    Simulate,
    #[default]
    ForwardLinear,
    BackwardLinear,
    ForwardSemilinear,
    BackwardSemilinear,
    CarlemanSweep,
}

impl Pipeline {
    pub fn name(&self) -> &'static str {
        match self {
            Pipeline::Simulate => "simulate",
            Pipeline::ForwardLinear => "forward-linear",
            Pipeline::BackwardLinear => "backward-linear",
            Pipeline::ForwardSemilinear => "forward-semilinear",
            Pipeline::BackwardSemilinear => "backward-semilinear",
            Pipeline::CarlemanSweep => "carleman-sweep",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub n_interior: usize,
    pub n_steps: usize,
    /// Depth of the scenario tree.
    pub n_b: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            n_interior: 31,
            n_steps: 64,
            n_b: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenalizationSection {
    pub eps: Option<f64>,
    pub eps_list: Option<Vec<f64>>,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
}

impl Default for PenalizationSection {
    fn default() -> Self {
        let d = PenalizationConfig::default();
        PenalizationSection {
            eps: None,
            eps_list: None,
            cg_tol: d.cg_tol,
            cg_max_iters: d.cg_max_iters,
        }
    }
}

impl PenalizationSection {
    pub fn eps_values(&self) -> Vec<f64> {
        match (&self.eps_list, self.eps) {
            (Some(list), _) => list.clone(),
            (None, Some(e)) => vec![e],
            (None, None) => vec![PenalizationConfig::default().eps],
        }
    }

    pub fn config(&self, eps: f64) -> PenalizationConfig {
        PenalizationConfig {
            eps,
            cg_tol: self.cg_tol,
            cg_max_iters: self.cg_max_iters,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DataProfile {
    Zero,
    /// `amplitude * sin(mode pi j / (n + 1))` on interior node `j`.
    #[default]
    Sine,
    /// Independent uniform entries in `[-amplitude, amplitude]` (real and
    /// imaginary parts), one draw per leaf for terminal data.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub profile: DataProfile,
    pub mode: usize,
    pub amplitude: f64,
    /// Source profile; `sine` is read as zero.
    pub source: DataProfile,
    pub source_amplitude: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            profile: DataProfile::Sine,
            mode: 1,
            amplitude: 1.0,
            source: DataProfile::Zero,
            source_amplitude: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarlemanSection {
    pub estimate: Estimate,
    pub lambdas: Vec<f64>,
    /// Empty means the single `mu` of the weight section.
    pub mus: Vec<f64>,
    pub repetitions: usize,
}

impl Default for CarlemanSection {
    fn default() -> Self {
        CarlemanSection {
            estimate: Estimate::Backward,
            lambdas: vec![4.0, 8.0, 16.0],
            mus: Vec::new(),
            repetitions: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: Pipeline,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Report non-converged CG or Picard runs without a failing exit code.
    pub allow_nonconvergence: bool,
    pub geometry: Geometry,
    pub grid: GridConfig,
    pub coefficients: GLCoefficients,
    pub weights: WeightParams,
    pub penalization: PenalizationSection,
    pub nonlinearity: NonlinearitySpec,
    pub picard: PicardConfig,
    pub data: DataConfig,
    pub carleman: CarlemanSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            problem: Pipeline::default(),
            seed: 42,
            output_dir: PathBuf::from("out"),
            allow_nonconvergence: false,
            geometry: Geometry::default(),
            grid: GridConfig::default(),
            coefficients: GLCoefficients::default(),
            weights: WeightParams::default(),
            penalization: PenalizationSection::default(),
            nonlinearity: NonlinearitySpec::default(),
            picard: PicardConfig::default(),
            data: DataConfig::default(),
            carleman: CarlemanSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Every cross-field invariant; the first violation is reported.
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if !(w.horizon > 0.0 && w.horizon < 1.0) {
            return Err(LabError::Config("T must lie in (0,1)".into()));
        }
        self.geometry.validate()?;
        w.validate()?;
        self.coefficients.validate()?;
        self.nonlinearity.validate()?;
        let g = &self.grid;
        if g.n_steps % 4 != 0 {
            return Err(LabError::Config(format!("n_steps = {} must be divisible by 4", g.n_steps)));
        }
        if g.n_b > 0 && g.n_steps % g.n_b != 0 {
            return Err(LabError::Config(format!(
                "n_steps = {} must be divisible by n_b = {}",
                g.n_steps, g.n_b
            )));
        }
        if self.penalization.eps.is_some() && self.penalization.eps_list.is_some() {
            return Err(LabError::Config("give either eps or eps_list, not both".into()));
        }
        let eps = self.penalization.eps_values();
        if eps.is_empty() {
            return Err(LabError::Config("eps_list must be non-empty".into()));
        }
        for e in eps {
            self.penalization.config(e).validate()?;
            if e >= w.horizon / 2.0 {
                return Err(LabError::Config(format!("eps = {e} must be below T/2")));
            }
        }
        if !(self.picard.fp_tol > 0.0) || self.picard.max_iters == 0 {
            return Err(LabError::Config("picard fp_tol and max_iters must be positive".into()));
        }
        if self.data.mode == 0 || !self.data.amplitude.is_finite() || !self.data.source_amplitude.is_finite() {
            return Err(LabError::Config("data mode must be >= 1 and amplitudes finite".into()));
        }
        let c = &self.carleman;
        if c.lambdas.is_empty() || c.repetitions == 0 {
            return Err(LabError::Config("carleman lambdas and repetitions must be non-empty".into()));
        }
        for &lambda in &c.lambdas {
            WeightParams { lambda, ..*w }.validate()?;
        }
        for &mu in &c.mus {
            WeightParams { mu, ..*w }.validate()?;
        }
        self.build_model(self.grid.n_b).map(|_| ())
    }

    pub fn space(&self) -> Result<SpatialGrid> {
        SpatialGrid::new(self.geometry.domain_left, self.geometry.domain_right, self.grid.n_interior)
    }

    pub fn time(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.weights.horizon, self.grid.n_steps)
    }

    pub fn build_model(&self, depth: usize) -> Result<Model> {
        let tree = build_tree(depth, self.weights.horizon)?;
        Model::new(&self.space()?, &self.time()?, &tree, &self.coefficients, &self.geometry)
    }

    pub fn beta(&self) -> Result<BetaProfile> {
        build_beta(&self.geometry, &self.space()?)
    }
}

/// Reads and validates a TOML experiment file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Sub-seeds drawn in a fixed order from one generator.
#[derive(Debug, Clone, Copy)]
struct Seeds {
    data: u64,
    source: u64,
    carleman: u64,
}

impl Seeds {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Seeds {
            data: rng.next_u64(),
            source: rng.next_u64(),
            carleman: rng.next_u64(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpsTrendRow {
    pub eps: f64,
    pub residual: f64,
    pub cost_total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PicardRow {
    pub eps: f64,
    pub iteration: usize,
    pub increment: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact: String,
    pub version: String,
    pub pipeline: String,
    pub config: ExperimentConfig,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub files: Vec<String>,
    pub summary: BTreeMap<String, f64>,
    pub eps_trend: Vec<EpsTrendRow>,
    pub picard: Vec<PicardRow>,
    pub carleman: Vec<SweepRow>,
    pub converged: bool,
    pub exit_code: i32,
    pub error: Option<String>,
}

/// JSON report of one penalized solve.
#[derive(Debug, Clone, Serialize)]
pub struct HumReport {
    pub direction: &'static str,
    pub eps: f64,
    pub j_terms: CostBreakdown,
    pub residual: f64,
    pub optimality_defect: f64,
    pub control_scale: f64,
    pub duality_defect: f64,
    pub iterations: usize,
    pub converged: bool,
    pub cost_report: CostReport,
}

#[derive(Debug, Clone, Serialize)]
struct PicardReport<'a> {
    eps: f64,
    trace: &'a PicardTrace,
    hum: HumReport,
}

#[derive(Debug, Serialize)]
struct ControlRow {
    field: &'static str,
    node: usize,
    k: usize,
    i: usize,
    re: f64,
    im: f64,
}

#[derive(Debug, Serialize)]
struct TrajectoryRow {
    k: usize,
    t: f64,
    mean_sq_norm: f64,
}

#[derive(Debug, Serialize)]
struct WeightRow {
    t: f64,
    x: f64,
    gamma: f64,
    phi: f64,
    xi: f64,
    log_theta: f64,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| LabError::Internal(e.to_string()))?;
        fs::write(self.path(name), text + "\n")?;
        Ok(())
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let path = self.path(name);
        write_csv(&path, rows)
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> LabError {
    LabError::Io(std::io::Error::other(e.to_string()))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn profile_field(profile: DataProfile, mode: usize, amplitude: f64, nx: usize, rng: &mut ChaCha8Rng) -> ComplexField {
    match profile {
        DataProfile::Zero => vec![Complex64::new(0.0, 0.0); nx],
        DataProfile::Sine => (1..=nx)
            .map(|j| {
                let s = (mode as f64 * std::f64::consts::PI * j as f64 / (nx + 1) as f64).sin();
                Complex64::new(amplitude * s, 0.0)
            })
            .collect(),
        DataProfile::Random => (0..nx)
            .map(|_| Complex64::new(amplitude * rng.gen_range(-1.0..1.0), amplitude * rng.gen_range(-1.0..1.0)))
            .collect(),
    }
}

fn source_field(cfg: &DataConfig, model: &Model, layout: Layout, rng: &mut ChaCha8Rng) -> Option<AdaptedField> {
    match cfg.source {
        DataProfile::Random => {
            let mut f = model.zeros(layout);
            for v in f.data.iter_mut() {
                let a = cfg.source_amplitude;
                *v = Complex64::new(a * rng.gen_range(-1.0..1.0), a * rng.gen_range(-1.0..1.0));
            }
            Some(f)
        }
        _ => None,
    }
}

struct Context {
    cfg: ExperimentConfig,
    model: Model,
    beta: BetaProfile,
    seeds: Seeds,
}

impl Context {
    fn forward_input(&self) -> ForwardInput {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seeds.data);
        let d = &self.cfg.data;
        let y0 = profile_field(d.profile, d.mode, d.amplitude, self.model.nx(), &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seeds.source);
        ForwardInput {
            y0,
            source: source_field(d, &self.model, Layout::Step, &mut rng),
        }
    }

    fn backward_input(&self) -> BackwardInput {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seeds.data);
        let d = &self.cfg.data;
        let terminal = (0..self.model.tree().n_leaves())
            .map(|_| profile_field(d.profile, d.mode, d.amplitude, self.model.nx(), &mut rng))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seeds.source);
        BackwardInput {
            terminal,
            source: source_field(d, &self.model, Layout::State, &mut rng),
        }
    }

    fn weights(&self, variant: WeightVariant) -> Result<crate::weights::WeightSet> {
        let op = &self.model.op;
        build_weight_set(&self.beta, &self.cfg.weights, &op.space, &op.time, variant)
    }
}

fn hum_report(sol: &HumSolution, duality_defect: f64, cost_report: CostReport) -> HumReport {
    HumReport {
        direction: match sol.direction {
            crate::hum::Direction::Forward => "forward",
            crate::hum::Direction::Backward => "backward",
        },
        eps: sol.eps,
        j_terms: sol.cost,
        residual: sol.residual,
        optimality_defect: sol.optimality_defect,
        control_scale: sol.control_scale,
        duality_defect,
        iterations: sol.iterations,
        converged: sol.converged,
        cost_report,
    }
}

fn control_rows(c: &ControlSet) -> Vec<ControlRow> {
    let mut rows = Vec::new();
    let mut push = |name: &'static str, f: &AdaptedField| {
        for node in 0..f.tree().n_nodes() {
            for k in f.range(node) {
                for (i, v) in f.get(node, k).iter().enumerate() {
                    rows.push(ControlRow { field: name, node, k, i, re: v.re, im: v.im });
                }
            }
        }
    };
    push("h", &c.h);
    if let Some(hh) = c.big_h.as_ref() {
        push("H", hh);
    }
    rows
}

/// `E h sum |y_k|^2` per time index of a state-layout field.
fn mean_sq_profile(y: &AdaptedField, h: f64) -> Vec<f64> {
    let mut out = vec![0.0; y.lattice.n_steps() + 1];
    y.for_each_slot(|_, k, p, v| out[k] += p * h * v.iter().map(|z| z.norm_sqr()).sum::<f64>());
    out
}

struct RunState {
    out: Outputs,
    summary: BTreeMap<String, f64>,
    eps_trend: Vec<EpsTrendRow>,
    picard: Vec<PicardRow>,
    carleman: Vec<SweepRow>,
    converged: bool,
}

fn run_pipeline(ctx: &Context, st: &mut RunState) -> Result<()> {
    let cfg = &ctx.cfg;
    let model = &ctx.model;
    match cfg.problem {
        Pipeline::Simulate => {
            let input = ctx.forward_input();
            let y = solve_forward(
                model,
                &ForwardData {
                    y0: input.y0,
                    source: input.source,
                    controls: ControlSet::zero_forward(model),
                    nonlinearity: cfg.nonlinearity.clone(),
                },
            )?;
            let time = cfg.time()?;
            let profile = mean_sq_profile(&y, model.h());
            let rows: Vec<TrajectoryRow> = profile
                .iter()
                .enumerate()
                .map(|(k, v)| TrajectoryRow { k, t: time.time(k), mean_sq_norm: *v })
                .collect();
            st.summary.insert("terminal_mean_sq_norm".into(), *profile.last().unwrap_or(&0.0));
            st.out.csv("trajectory.csv", &rows)?;
        }
        Pipeline::ForwardLinear | Pipeline::ForwardSemilinear => {
            let ws = ctx.weights(WeightVariant::Forward)?;
            let input = ctx.forward_input();
            for (idx, eps) in cfg.penalization.eps_values().into_iter().enumerate() {
                let we = ctx.weights(WeightVariant::ForwardEps(eps))?;
                let hum = ForwardHum::new(model, &ws, &we, cfg.penalization.config(eps))?;
                if cfg.problem == Pipeline::ForwardLinear {
                    let sol = hum.solve(&input)?;
                    let dual = hum.duality(&sol, &input).defect;
                    let report = hum_report(&sol, dual, cost_report_forward(&sol, &input, model, &ws)?);
                    record_hum(st, idx, &sol, report)?;
                } else {
                    let (sol, trace) = picard_forward(&hum, &input.y0, &cfg.nonlinearity, &cfg.picard)?;
                    let with_source = ForwardInput { y0: input.y0.clone(), source: trace.final_source.clone() };
                    let dual = hum.duality(&sol, &with_source).defect;
                    let report = hum_report(&sol, dual, cost_report_forward(&sol, &with_source, model, &ws)?);
                    record_picard(st, idx, eps, &sol, &trace, report)?;
                }
            }
            st.out.csv("eps_trend.csv", &st.eps_trend)?;
        }
        Pipeline::BackwardLinear | Pipeline::BackwardSemilinear => {
            let ws = ctx.weights(WeightVariant::Backward)?;
            let input = ctx.backward_input();
            for (idx, eps) in cfg.penalization.eps_values().into_iter().enumerate() {
                let we = ctx.weights(WeightVariant::BackwardEps(eps))?;
                let hum = BackwardHum::new(model, &ws, &we, cfg.penalization.config(eps))?;
                if cfg.problem == Pipeline::BackwardLinear {
                    let sol = hum.solve(&input)?;
                    let dual = hum.duality(&sol, &input).defect;
                    let report = hum_report(&sol, dual, cost_report_backward(&sol, &input, model, &ws)?);
                    record_hum(st, idx, &sol, report)?;
                } else {
                    let (sol, trace) = picard_backward(&hum, &input.terminal, &cfg.nonlinearity, &cfg.picard)?;
                    let with_source = BackwardInput { terminal: input.terminal.clone(), source: trace.final_source.clone() };
                    let dual = hum.duality(&sol, &with_source).defect;
                    let report = hum_report(&sol, dual, cost_report_backward(&sol, &with_source, model, &ws)?);
                    record_picard(st, idx, eps, &sol, &trace, report)?;
                }
            }
            st.out.csv("eps_trend.csv", &st.eps_trend)?;
        }
        Pipeline::CarlemanSweep => {
            let c = &cfg.carleman;
            let depth = if c.estimate == Estimate::Deterministic { 0 } else { cfg.grid.n_b };
            let sweep_model = cfg.build_model(depth)?;
            let mus = if c.mus.is_empty() { vec![cfg.weights.mu] } else { c.mus.clone() };
            let variant = if c.estimate.uses_mirrored_weights() { WeightVariant::Backward } else { WeightVariant::Forward };
            let op = &sweep_model.op;
            let rows = sweep_parameters(
                |lambda, mu, rep| {
                    let params = WeightParams { lambda, mu, ..cfg.weights };
                    let ws = build_weight_set(&ctx.beta, &params, &op.space, &op.time, variant)?;
                    sample_estimate(&sweep_model, &ws, c.estimate, sample_seed(ctx.seeds.carleman, lambda, mu, rep), rep)
                },
                &c.lambdas,
                &mus,
                cfg.weights.m,
                c.repetitions,
            )?;
            let flagged = rows.iter().filter(|r| r.flagged).count();
            st.summary.insert("flagged_cells".into(), flagged as f64);
            st.summary.insert("max_ratio".into(), rows.iter().map(|r| r.ratio_max).fold(0.0, f64::max));
            st.out.csv("carleman_sweep.csv", &rows)?;
            st.out.json("carleman_sweep.json", &rows)?;
            st.carleman = rows;
        }
    }
    Ok(())
}

fn record_hum(st: &mut RunState, idx: usize, sol: &HumSolution, report: HumReport) -> Result<()> {
    st.out.json(&format!("hum_eps_{idx}.json"), &report)?;
    st.out.csv(&format!("controls_eps_{idx}.csv"), &control_rows(&sol.controls))?;
    st.eps_trend.push(EpsTrendRow { eps: sol.eps, residual: sol.residual, cost_total: sol.cost.total });
    st.summary.insert(format!("eps_{idx}.J"), sol.cost.total);
    st.summary.insert(format!("eps_{idx}.residual"), sol.residual);
    st.summary.insert(format!("eps_{idx}.duality_defect"), report.duality_defect);
    st.converged &= sol.converged;
    Ok(())
}

fn record_picard(
    st: &mut RunState,
    idx: usize,
    eps: f64,
    sol: &HumSolution,
    trace: &PicardTrace,
    report: HumReport,
) -> Result<()> {
    let rows: Vec<PicardRow> = trace
        .increments
        .iter()
        .enumerate()
        .map(|(i, inc)| PicardRow { eps, iteration: i + 1, increment: *inc })
        .collect();
    st.out.csv(&format!("picard_eps_{idx}.csv"), &rows)?;
    st.picard.extend(rows);
    st.summary.insert(format!("eps_{idx}.picard_iterations"), trace.iterations as f64);
    st.summary.insert(format!("eps_{idx}.picard_factor"), trace.median_factor());
    st.converged &= trace.converged;
    st.out.json(&format!("picard_eps_{idx}.json"), &PicardReport { eps, trace, hum: report.clone() })?;
    record_hum(st, idx, sol, report)
}

/// Runs the configured pipeline into `cfg.output_dir`. Module failures are
/// recorded in the manifest (with their exit code) rather than returned; only
/// failure to write the output directory itself is an `Err`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let started_unix = unix_now();
    fs::create_dir_all(&cfg.output_dir)?;
    let mut st = RunState {
        out: Outputs { dir: cfg.output_dir.clone(), files: Vec::new() },
        summary: BTreeMap::new(),
        eps_trend: Vec::new(),
        picard: Vec::new(),
        carleman: Vec::new(),
        converged: true,
    };
    let outcome = cfg.validate().and_then(|_| {
        let ctx = Context {
            cfg: cfg.clone(),
            model: cfg.build_model(cfg.grid.n_b)?,
            beta: cfg.beta()?,
            seeds: Seeds::new(cfg.seed),
        };
        run_pipeline(&ctx, &mut st)
    });
    let (exit_code, error) = match &outcome {
        Ok(()) if st.converged || cfg.allow_nonconvergence => (EXIT_OK, None),
        Ok(()) => (EXIT_NONCONVERGED, Some("a solver did not reach its tolerance".to_string())),
        Err(e) => (e.exit_code(), Some(e.to_string())),
    };
    let manifest = RunManifest {
        artifact: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        pipeline: cfg.problem.name().to_string(),
        config: cfg.clone(),
        started_unix,
        finished_unix: unix_now(),
        files: st.out.files.clone(),
        summary: st.summary,
        eps_trend: st.eps_trend,
        picard: st.picard,
        carleman: st.carleman,
        converged: st.converged,
        exit_code,
        error,
    };
    write_manifest(&cfg.output_dir, &manifest)?;
    Ok(manifest)
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn write_manifest(dir: &Path, m: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(m).map_err(|e| LabError::Internal(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| LabError::Config(format!("malformed manifest: {e}")))
}

pub const SELECTORS: [&str; 4] = ["eps-trend", "weights", "picard", "carleman"];

/// Writes `plot_<selector>.csv` into `dir` and returns its path.
pub fn emit_plot_data(manifest: &RunManifest, selector: &str, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(format!("plot_{selector}.csv"));
    let empty = |what: &str| LabError::Config(format!("manifest holds no {what} data"));
    match selector {
        "eps-trend" => {
            if manifest.eps_trend.is_empty() {
                return Err(empty("eps-trend"));
            }
            write_csv(&path, &manifest.eps_trend)?;
        }
        "picard" => {
            if manifest.picard.is_empty() {
                return Err(empty("picard"));
            }
            write_csv(&path, &manifest.picard)?;
        }
        "carleman" => {
            if manifest.carleman.is_empty() {
                return Err(empty("carleman"));
            }
            write_csv(&path, &manifest.carleman)?;
        }
        "weights" => {
            let cfg = &manifest.config;
            let (space, time) = (cfg.space()?, cfg.time()?);
            let ws = build_weight_set(&cfg.beta()?, &cfg.weights, &space, &time, WeightVariant::Forward)?;
            let mut rows = Vec::with_capacity(ws.nt() * ws.nx());
            for k in 0..ws.nt() {
                for i in 0..ws.nx() {
                    rows.push(WeightRow {
                        t: ws.times[k],
                        x: ws.xs[i],
                        gamma: ws.gamma[k],
                        phi: ws.phi_at(k, i),
                        xi: ws.log_xi_at(k, i).exp(),
                        log_theta: ws.log_theta_at(k, i),
                    });
                }
            }
            write_csv(&path, &rows)?;
        }
        other => {
            return Err(LabError::Config(format!(
                "unknown selector '{other}'; available: {}",
                SELECTORS.join(", ")
            )))
        }
    }
    Ok(path)
}
