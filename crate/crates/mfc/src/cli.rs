//! Experiment runner: JSON configuration, problem assembly, diagnostics and export.
//!
//! Every run writes into the output directory:
//!
//! | file | content |
//! |---|---|
//! | `config.json` | resolved configuration and its hash |
//! | `summary.json` | solver summary, check verdicts, exit code |
//! | `report.json` | full check output, residual reports included |
//! | `quadruple.csv` | `node,atom,scenario,dim,Y,Z,u` |
//! | `residuals.csv` | `check,equation,t,x,component,value` (residual checks only) |
//!
//! CSV files start with a `# config_hash=<sha256>` line. Floats carry 17
//! significant digits. Nothing time-dependent is written, so identical configs
//! give byte-identical outputs.
//!
//! Exit codes: 0 all enabled checks pass, 1 a check fails or a runtime error,
//! 2 invalid configuration, 3 solver non-convergence, 4 convexity gate `c0 <= 0`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{brownian_paths, fmt17, hm_inner_weighted, RandomField, TimeGrid};
use crate::error::Error;
use crate::fbsde::{
    gradient, solve_with, Method, OptimalQuadruple, QuadrupleSummary, SolverConfig,
};
use crate::jacobian::{fd_check_against, solve_jacobian_flow, FdJacobianPoint};
use crate::model::{
    builtin_models, check_assumptions, gaussian_atoms, quadrature_atoms, AssumptionReport,
    ControlProblem, CostModel, ProbeCloud, StandardModel, StandardParams,
};
use crate::oracle::{fd_gradient_oracle, polynomial_direction, random_control, riccati_solve};
use crate::pde::{bellman_residual, master_residual, ResidualReport};
use crate::regression::RegressionSpec;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NOT_CONVERGED: u8 = 3;
pub const EXIT_GATE: u8 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Builtin name, or any label when `params` is given.
    pub name: String,
    /// Replaces the builtin parameters.
    pub params: Option<StandardParams>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            name: "lq_scalar".into(),
            params: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub t0: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            t0: 0.0,
            t_end: 1.0,
            steps: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomLayout {
    /// I.i.d. normal draws.
    Sampled,
    /// Midpoint quantiles; one dimension only.
    Quadrature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSpec {
    pub atoms: usize,
    pub scenarios: usize,
    pub dim: usize,
    pub seed: u64,
    /// `m = N(init_mean, init_sd^2)` per component.
    pub init_mean: f64,
    pub init_sd: f64,
    pub layout: AtomLayout,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            atoms: 200,
            scenarios: 100,
            dim: 1,
            seed: 0,
            init_mean: 0.5,
            init_sd: 1.0,
            layout: AtomLayout::Sampled,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSpec {
    pub method: Method,
    pub tol: f64,
    pub max_iters: usize,
    pub damping: f64,
    pub step: Option<f64>,
    pub degree: usize,
    pub ridge: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self {
            method: d.method,
            tol: d.tol,
            max_iters: d.max_iters,
            damping: d.damping,
            step: d.step,
            degree: d.regression.degree,
            ridge: d.regression.ridge,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckToggles {
    pub grad_check: bool,
    pub jacobian_check: bool,
    pub bellman: bool,
    pub master: bool,
    pub lq_validate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    /// Probe points of the master check.
    pub x: Vec<Vec<f64>>,
    /// Number of random directions (gradient check pairs, Jacobian directions).
    pub directions: usize,
    /// Probe times; empty means `t0 + (T - t0) / 4`.
    pub times: Vec<f64>,
    /// Gaussian draws of the trace cross-check; 0 disables it.
    pub trace_draws: usize,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            x: vec![vec![0.0], vec![1.0]],
            directions: 10,
            times: Vec::new(),
            trace_draws: 0,
        }
    }
}

/// Full description of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub ensemble: EnsembleSpec,
    /// Row-major `n x n`; a single entry means that multiple of the identity.
    pub eta: Vec<f64>,
    pub solver: SolverSpec,
    pub checks: CheckToggles,
    pub probes: ProbeSpec,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            grid: GridSpec::default(),
            ensemble: EnsembleSpec::default(),
            eta: vec![0.3],
            solver: SolverSpec::default(),
            checks: CheckToggles::default(),
            probes: ProbeSpec::default(),
            out: PathBuf::from("mfc-out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("config: {e}"))
    }

    pub fn params(&self) -> Result<StandardParams, String> {
        match (
            &self.model.params,
            StandardModel::builtin(&self.model.name, 1),
        ) {
            (Some(p), _) => Ok(*p),
            (None, Some(b)) => Ok(b.p),
            (None, None) => Err(format!(
                "unknown model '{}' without params; builtins are {}",
                self.model.name,
                builtin_models().join(", ")
            )),
        }
    }

    pub fn model(&self) -> Result<StandardModel, String> {
        Ok(StandardModel::new(
            self.model.name.clone(),
            self.ensemble.dim,
            self.params()?,
        ))
    }

    /// The volatility as a full row-major matrix.
    pub fn eta_matrix(&self) -> Vec<f64> {
        let n = self.ensemble.dim;
        if self.eta.len() == 1 {
            let mut out = vec![0.0; n * n];
            (0..n).for_each(|i| out[i * n + i] = self.eta[0]);
            out
        } else {
            self.eta.clone()
        }
    }

    pub fn probe_times(&self) -> Vec<f64> {
        if self.probes.times.is_empty() {
            vec![self.grid.t0 + 0.25 * (self.grid.t_end - self.grid.t0)]
        } else {
            self.probes.times.clone()
        }
    }

    /// Schema checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<(), String> {
        let p = self.params()?;
        let fields = [p.r, p.q, p.q_t, p.lam, p.s, p.w, p.lam_t, p.s_t];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err("model params must be finite".into());
        }
        let e = &self.ensemble;
        if e.dim == 0 || e.atoms == 0 || e.scenarios == 0 {
            return Err("ensemble needs dim, atoms and scenarios >= 1".into());
        }
        if e.layout == AtomLayout::Quadrature && e.dim != 1 {
            return Err("quadrature atoms are one-dimensional".into());
        }
        if !(e.init_sd >= 0.0 && e.init_mean.is_finite() && e.init_sd.is_finite()) {
            return Err("init_mean must be finite and init_sd nonnegative".into());
        }
        TimeGrid::new(self.grid.t0, self.grid.t_end, self.grid.steps).map_err(|e| e.to_string())?;
        let n = e.dim;
        if !(self.eta.len() == 1 || self.eta.len() == n * n)
            || self.eta.iter().any(|v| !v.is_finite())
        {
            return Err(format!("eta must hold 1 or {} finite entries", n * n));
        }
        let s = &self.solver;
        if !(s.tol > 0.0)
            || s.max_iters == 0
            || !(s.damping > 0.0 && s.damping <= 1.0)
            || s.degree == 0
            || !(s.ridge >= 0.0)
        {
            return Err(
                "solver needs tol > 0, max_iters >= 1, damping in (0, 1], degree >= 1, ridge >= 0"
                    .into(),
            );
        }
        if let Some(step) = s.step {
            if !(step > 0.0) {
                return Err("solver step must be positive".into());
            }
        }
        if self.probes.x.iter().any(|x| x.len() != n) {
            return Err(format!("probe points must have {n} components"));
        }
        for t in self.probe_times() {
            if !(t >= self.grid.t0 && t < self.grid.t_end) {
                return Err(format!("probe time {t} outside [t0, T)"));
            }
        }
        Ok(())
    }

    /// Canonical JSON of the resolved configuration, without the output directory.
    pub fn canonical(&self) -> String {
        let cfg = Self {
            out: PathBuf::new(),
            ..self.clone()
        };
        serde_json::to_string(&cfg).expect("config serializes")
    }

    /// SHA-256 of [`RunConfig::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn solver_config(&self) -> SolverConfig {
        let s = &self.solver;
        SolverConfig {
            method: s.method,
            tol: s.tol,
            max_iters: s.max_iters,
            step: s.step,
            damping: s.damping,
            regression: RegressionSpec {
                degree: s.degree,
                ridge: s.ridge,
            },
        }
    }

    pub fn problem(&self) -> crate::Result<ControlProblem> {
        let model = Arc::new(self.model().map_err(Error::Invalid)?);
        let grid = TimeGrid::new(self.grid.t0, self.grid.t_end, self.grid.steps)?;
        let e = &self.ensemble;
        let atoms = match e.layout {
            AtomLayout::Sampled => gaussian_atoms(e.atoms, e.dim, e.init_mean, e.init_sd, e.seed),
            AtomLayout::Quadrature => quadrature_atoms(e.atoms, e.init_mean, e.init_sd),
        };
        let x0 = RandomField::from_atoms(&atoms, e.dim, e.scenarios)?;
        // independent stream for the noise
        let noise = brownian_paths(&grid, e.seed.wrapping_add(0x9e37_79b9), e.scenarios, e.dim)?;
        ControlProblem::new(model, self.eta_matrix(), grid, x0, noise)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    GradCheck,
    JacobianCheck,
    BellmanCheck,
    MasterCheck,
    LqValidate,
}

impl CheckKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::GradCheck => "grad-check",
            Self::JacobianCheck => "jacobian-check",
            Self::BellmanCheck => "bellman-check",
            Self::MasterCheck => "master-check",
            Self::LqValidate => "lq-validate",
        }
    }

    fn enable(self, t: &mut CheckToggles) {
        match self {
            Self::GradCheck => t.grad_check = true,
            Self::JacobianCheck => t.jacobian_check = true,
            Self::BellmanCheck => t.bellman = true,
            Self::MasterCheck => t.master = true,
            Self::LqValidate => t.lq_validate = true,
        }
    }
}

fn enabled(t: &CheckToggles) -> Vec<CheckKind> {
    let mut out = Vec::new();
    for (on, kind) in [
        (t.lq_validate, CheckKind::LqValidate),
        (t.grad_check, CheckKind::GradCheck),
        (t.jacobian_check, CheckKind::JacobianCheck),
        (t.bellman, CheckKind::BellmanCheck),
        (t.master, CheckKind::MasterCheck),
    ] {
        if on {
            out.push(kind);
        }
    }
    out
}

/// Verdict of one diagnostic with its scalar metrics and full detail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub metrics: BTreeMap<String, f64>,
    pub thresholds: BTreeMap<String, f64>,
    pub detail: serde_json::Value,
    #[serde(skip)]
    pub residuals: Vec<ResidualReport>,
}

impl CheckOutcome {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            passed: true,
            metrics: BTreeMap::new(),
            thresholds: BTreeMap::new(),
            detail: serde_json::Value::Null,
            residuals: Vec::new(),
        }
    }

    fn metric(&mut self, key: &str, v: f64) {
        self.metrics.insert(key.into(), v);
    }

    /// Record `value <= bound` as a requirement.
    fn at_most(&mut self, key: &str, value: f64, bound: f64) {
        self.metric(key, value);
        self.thresholds.insert(key.into(), bound);
        if !(value <= bound) {
            self.passed = false;
        }
    }
}

pub const LQ_TOL: f64 = 0.02;
pub const GRAD_TOL: f64 = 1e-3;
pub const GRAD_EPS: f64 = 1e-3;
pub const JACOBIAN_EPS: [f64; 2] = [1e-2, 5e-3];
pub const HALVING_BAND: (f64, f64) = (0.4, 0.6);
/// Below this the finite difference reproduces the flow to round-off and the halving ratio is undefined.
pub const JACOBIAN_EXACT: f64 = 1e-6;
pub const BELLMAN_TOL: f64 = 0.05;
pub const MASTER_TOL: f64 = 0.10;
pub const TERMINAL_TOL: f64 = 1e-10;

/// Relative errors of the solver against the Riccati oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqComparison {
    /// Per node `‖u - u*(Y)‖ / ‖u*(Y)‖` in H_m.
    pub control_by_node: Vec<f64>,
    pub control_max: f64,
    /// Same ratio in `L²(t0, T; H_m)`.
    pub control_aggregate: f64,
    pub value: f64,
    pub oracle_value: f64,
    pub value_rel: f64,
}

/// Compare an optimum with the oracle feedback along the solver's own path.
pub fn lq_compare(quad: &OptimalQuadruple, params: &StandardParams) -> crate::Result<LqComparison> {
    let problem = &quad.problem;
    let n = problem.dim();
    if problem
        .eta
        .iter()
        .enumerate()
        .any(|(i, v)| i % (n + 1) != 0 && *v != 0.0)
        || problem
            .eta
            .iter()
            .step_by(n + 1)
            .any(|v| *v != problem.eta[0])
    {
        return Err(Error::Invalid(
            "the Riccati oracle needs eta proportional to the identity".into(),
        ));
    }
    let eta_diag = vec![problem.eta[0]; n];
    let ric = riccati_solve(params, &eta_diag, &problem.grid)?;
    let weights = problem.point_weights();
    let mean_of = |vals: &[f64]| -> Vec<f64> {
        let mut m = vec![0.0; n];
        for (i, w) in weights.iter().enumerate() {
            (0..n).for_each(|j| m[j] += w * vals[i * n + j]);
        }
        m
    };
    let mut by_node = Vec::with_capacity(problem.grid.steps);
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..problem.grid.steps {
        let y = &quad.y.nodes[k];
        let mean = mean_of(&y.values);
        let mut star = y.clone();
        for (i, out) in star.values.chunks_mut(n).enumerate() {
            ric.feedback(k, &y.values[i * n..(i + 1) * n], &mean, out);
        }
        let diff = quad.u.nodes[k].axpy(-1.0, &star)?;
        let e = hm_inner_weighted(&diff, &diff, &problem.atom_weights)?;
        let d = hm_inner_weighted(&star, &star, &problem.atom_weights)?;
        num += e;
        den += d;
        by_node.push(if d > 0.0 { (e / d).sqrt() } else { e.sqrt() });
    }
    let x0 = &problem.x0.values;
    let m2: f64 = weights
        .iter()
        .enumerate()
        .map(|(i, w)| w * x0[i * n..(i + 1) * n].iter().map(|v| v * v).sum::<f64>())
        .sum();
    let oracle_value = ric.value(0, m2, &mean_of(x0));
    let control_max = by_node.iter().cloned().fold(0.0, f64::max);
    Ok(LqComparison {
        control_by_node: by_node,
        control_max,
        control_aggregate: if den > 0.0 {
            (num / den).sqrt()
        } else {
            num.sqrt()
        },
        value: quad.value,
        oracle_value,
        value_rel: (quad.value - oracle_value).abs() / oracle_value.abs().max(f64::MIN_POSITIVE),
    })
}

fn lq_validate(cfg: &RunConfig, quad: &OptimalQuadruple) -> crate::Result<CheckOutcome> {
    let params = cfg.params().map_err(Error::Invalid)?;
    let mut out = CheckOutcome::new("lq-validate");
    let cmp = lq_compare(quad, &params)?;
    out.at_most("control_rel_err_max_node", cmp.control_max, LQ_TOL);
    out.metric("control_rel_err_aggregate", cmp.control_aggregate);
    out.at_most("value_rel_err", cmp.value_rel, LQ_TOL);
    out.detail = serde_json::to_value(&cmp)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GradPair {
    seed: u64,
    analytic: f64,
    finite_difference: f64,
    rel_err: f64,
}

fn grad_check(cfg: &RunConfig, problem: &ControlProblem) -> crate::Result<CheckOutcome> {
    let mut out = CheckOutcome::new("grad-check");
    let dt = problem.grid.dt();
    let mut pairs = Vec::new();
    for i in 0..cfg.probes.directions as u64 {
        let seed = cfg.ensemble.seed.wrapping_mul(1000).wrapping_add(i);
        let u = random_control(problem, 1.0, seed);
        let psi = polynomial_direction(problem, &u, 1.0, seed ^ 0x5555)?;
        let analytic = gradient(problem, &u)?.inner(&psi, dt)?;
        let fd = fd_gradient_oracle(problem, &u, &psi, GRAD_EPS)?;
        let rel_err = (analytic - fd).abs() / fd.abs().max(1e-12);
        pairs.push(GradPair {
            seed,
            analytic,
            finite_difference: fd,
            rel_err,
        });
    }
    let worst = pairs.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    out.at_most("max_rel_err", worst, GRAD_TOL);
    out.detail = serde_json::to_value(&pairs)?;
    Ok(out)
}

/// Per-atom Gaussian direction of unit H_m size, constant over scenarios.
pub fn random_initial_direction(problem: &ControlProblem, seed: u64) -> crate::Result<RandomField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (problem.atoms(), problem.dim());
    let pts: Vec<f64> = (0..m * n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        })
        .collect();
    let psi = RandomField::from_atoms(&pts, n, problem.scenarios())?;
    let size = hm_inner_weighted(&psi, &psi, &problem.atom_weights)?.sqrt();
    Ok(psi.scaled(1.0 / size.max(f64::MIN_POSITIVE)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct JacobianDirection {
    seed: u64,
    points: Vec<FdJacobianPoint>,
    ratio: f64,
}

fn jacobian_check(cfg: &RunConfig, quad: &OptimalQuadruple) -> crate::Result<CheckOutcome> {
    let mut out = CheckOutcome::new("jacobian-check");
    let mut dirs = Vec::new();
    for i in 0..cfg.probes.directions.clamp(1, 3) as u64 {
        let seed = cfg.ensemble.seed.wrapping_mul(1000).wrapping_add(500 + i);
        let psi = random_initial_direction(&quad.problem, seed)?;
        let flow = solve_jacobian_flow(quad, &psi)?;
        let points = fd_check_against(quad, &flow, &psi, &JACOBIAN_EPS)?;
        let ratio = points[1].discrepancy / points[0].discrepancy.max(f64::MIN_POSITIVE);
        dirs.push(JacobianDirection {
            seed,
            points,
            ratio,
        });
    }
    let mut passed = true;
    let (mut lo, mut hi, mut worst) = (f64::INFINITY, 0.0f64, 0.0f64);
    for d in &dirs {
        let big = d.points[0].discrepancy;
        worst = worst.max(big);
        if big > JACOBIAN_EXACT {
            lo = lo.min(d.ratio);
            hi = hi.max(d.ratio);
            passed &= d.ratio >= HALVING_BAND.0 && d.ratio <= HALVING_BAND.1;
        }
    }
    out.metric("max_discrepancy", worst);
    if lo.is_finite() {
        out.metric("min_halving_ratio", lo);
        out.metric("max_halving_ratio", hi);
    }
    out.passed = passed;
    out.detail = serde_json::to_value(&dirs)?;
    Ok(out)
}

fn bellman_check(cfg: &RunConfig, problem: &ControlProblem) -> crate::Result<CheckOutcome> {
    let mut out = CheckOutcome::new("bellman-check");
    let solver = cfg.solver_config();
    let mut worst: f64 = 0.0;
    let mut terminal: f64 = 0.0;
    for t in cfg.probe_times() {
        let r = bellman_residual(
            problem,
            t,
            &solver,
            cfg.probes.trace_draws,
            cfg.ensemble.seed,
        )?;
        worst = worst.max(r.normalized);
        terminal = terminal.max(r.terminal_identity);
        out.residuals.push(r);
    }
    out.at_most("max_normalized_residual", worst, BELLMAN_TOL);
    out.at_most("terminal_identity", terminal, TERMINAL_TOL);
    out.detail = serde_json::to_value(&out.residuals)?;
    Ok(out)
}

fn master_check(cfg: &RunConfig, problem: &ControlProblem) -> crate::Result<CheckOutcome> {
    let mut out = CheckOutcome::new("master-check");
    let solver = cfg.solver_config();
    let mut worst: f64 = 0.0;
    let mut terminal: f64 = 0.0;
    for t in cfg.probe_times() {
        for r in master_residual(problem, &cfg.probes.x, t, &solver)? {
            worst = worst.max(r.normalized);
            terminal = terminal.max(r.terminal_identity);
            out.residuals.push(r);
        }
    }
    out.at_most("max_normalized_residual", worst, MASTER_TOL);
    out.at_most("terminal_identity", terminal, TERMINAL_TOL);
    out.detail = serde_json::to_value(&out.residuals)?;
    Ok(out)
}

/// Why a run stopped early, with its exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    NotConverged(String),
    Gate(f64),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::NotConverged(_) => EXIT_NOT_CONVERGED,
            Self::Gate(_) => EXIT_GATE,
            Self::Runtime(_) => EXIT_CHECK,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config(m) => write!(f, "configuration error: {m}"),
            Self::NotConverged(m) => write!(f, "solver did not converge: {m}"),
            Self::Gate(c0) => write!(
                f,
                "convexity gate failed: c0 = {} <= 0 (use --force to proceed)",
                fmt17(*c0)
            ),
            Self::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NotConverged { .. } => Self::NotConverged(e.to_string()),
            Error::Invalid(m) | Error::Shape(m) => Self::Config(m),
            other => Self::Runtime(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub command: String,
    pub c0: f64,
    pub forced: bool,
    pub solver: Option<QuadrupleSummary>,
    pub checks: Vec<CheckOutcome>,
    pub assumptions: Option<AssumptionReport>,
    pub exit_code: u8,
    pub error: Option<String>,
}

/// What the run should do besides solving.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Solve,
    Assumptions,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> crate::Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

fn hash_line(hash: &str) -> String {
    format!("# config_hash={hash}")
}

fn write_residuals(path: &Path, hash: &str, checks: &[CheckOutcome]) -> crate::Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{}", hash_line(hash))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["check", "equation", "t", "x", "component", "value"])?;
    for c in checks {
        for r in &c.residuals {
            let x =
                r.x.as_ref()
                    .map(|x| x.iter().map(|v| fmt17(*v)).collect::<Vec<_>>().join(" "))
                    .unwrap_or_default();
            let mut rows: Vec<(String, f64)> = r
                .components
                .iter()
                .map(|c| (c.name.clone(), c.value))
                .collect();
            rows.push(("residual".into(), r.residual));
            rows.push(("normalized".into(), r.normalized));
            rows.push(("terminal_identity".into(), r.terminal_identity));
            for (name, v) in rows {
                w.write_record([
                    c.name.as_str(),
                    r.equation.as_str(),
                    &fmt17(r.t),
                    &x,
                    &name,
                    &fmt17(v),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Execute `task` for `cfg`, write artifacts into `cfg.out` and return the exit code.
pub fn run(cfg: &RunConfig, task: Task, force: bool) -> (u8, RunSummary) {
    let hash = cfg.hash();
    let mut summary = RunSummary {
        config_hash: hash.clone(),
        command: match task {
            Task::Solve => "solve".into(),
            Task::Assumptions => "assumptions".into(),
        },
        c0: f64::NAN,
        forced: force,
        solver: None,
        checks: Vec::new(),
        assumptions: None,
        exit_code: EXIT_OK,
        error: None,
    };
    let result = execute(cfg, task, force, &mut summary);
    let code = match result {
        Ok(code) => code,
        Err(f) => {
            summary.error = Some(f.to_string());
            f.code()
        }
    };
    summary.exit_code = code;
    if code != EXIT_CONFIG {
        if let Err(e) = write_outputs(cfg, &summary) {
            summary.error = Some(format!("writing outputs: {e}"));
            summary.exit_code = EXIT_CHECK;
            return (EXIT_CHECK, summary);
        }
    }
    (code, summary)
}

fn write_outputs(cfg: &RunConfig, summary: &RunSummary) -> crate::Result<()> {
    fs::create_dir_all(&cfg.out)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        config_hash: &'a str,
        config: &'a RunConfig,
    }
    write_json(
        &cfg.out.join("config.json"),
        &Resolved {
            config_hash: &summary.config_hash,
            config: cfg,
        },
    )?;
    write_json(&cfg.out.join("summary.json"), &ShortSummary::from(summary))?;
    write_json(&cfg.out.join("report.json"), summary)?;
    if summary.checks.iter().any(|c| !c.residuals.is_empty()) {
        write_residuals(
            &cfg.out.join("residuals.csv"),
            &summary.config_hash,
            &summary.checks,
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ShortCheck<'a> {
    name: &'a str,
    passed: bool,
    metrics: &'a BTreeMap<String, f64>,
    thresholds: &'a BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct ShortSummary<'a> {
    config_hash: &'a str,
    command: &'a str,
    c0: f64,
    forced: bool,
    value: Option<f64>,
    residual: Option<f64>,
    iterations: Option<usize>,
    converged: Option<bool>,
    assumptions_passed: Option<bool>,
    checks: Vec<ShortCheck<'a>>,
    exit_code: u8,
    error: Option<&'a str>,
}

impl<'a> From<&'a RunSummary> for ShortSummary<'a> {
    fn from(s: &'a RunSummary) -> Self {
        Self {
            config_hash: &s.config_hash,
            command: &s.command,
            c0: s.c0,
            forced: s.forced,
            value: s.solver.as_ref().map(|q| q.value),
            residual: s.solver.as_ref().map(|q| q.residual),
            iterations: s.solver.as_ref().map(|q| q.iterations),
            converged: s.solver.as_ref().map(|q| q.converged),
            assumptions_passed: s.assumptions.as_ref().map(|a| a.passed),
            checks: s
                .checks
                .iter()
                .map(|c| ShortCheck {
                    name: &c.name,
                    passed: c.passed,
                    metrics: &c.metrics,
                    thresholds: &c.thresholds,
                })
                .collect(),
            exit_code: s.exit_code,
            error: s.error.as_deref(),
        }
    }
}

fn execute(
    cfg: &RunConfig,
    task: Task,
    force: bool,
    summary: &mut RunSummary,
) -> Result<u8, Failure> {
    cfg.validate().map_err(Failure::Config)?;
    let model = cfg.model().map_err(Failure::Config)?;
    let horizon = cfg.grid.t_end - cfg.grid.t0;
    summary.c0 = crate::model::c0(&model.constants(), horizon);

    if task == Task::Assumptions {
        let probes = ProbeCloud::standard(cfg.ensemble.dim, cfg.ensemble.seed);
        let report = check_assumptions(&model, &probes, horizon);
        let passed = report.passed;
        summary.assumptions = Some(report);
        return Ok(if passed { EXIT_OK } else { EXIT_CHECK });
    }

    if !model.is_trivial() && summary.c0 <= 0.0 && !force {
        return Err(Failure::Gate(summary.c0));
    }
    let problem = cfg.problem()?;
    let quad = solve_with(&problem, &cfg.solver_config(), None)?;
    summary.solver = Some(quad.summary());
    fs::create_dir_all(&cfg.out).map_err(|e| Failure::Runtime(e.to_string()))?;
    let csv = fs::File::create(cfg.out.join("quadruple.csv"))
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    quad.write_csv(
        std::io::BufWriter::new(csv),
        Some(&hash_line(&summary.config_hash)),
    )?;
    let quad = quad.require_converged()?;

    let mut code = EXIT_OK;
    for kind in enabled(&cfg.checks) {
        let outcome = match kind {
            CheckKind::LqValidate => lq_validate(cfg, &quad),
            CheckKind::GradCheck => grad_check(cfg, &problem),
            CheckKind::JacobianCheck => jacobian_check(cfg, &quad),
            CheckKind::BellmanCheck => bellman_check(cfg, &problem),
            CheckKind::MasterCheck => master_check(cfg, &problem),
        };
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                let f = Failure::from(e);
                if let Failure::NotConverged(_) = f {
                    return Err(f);
                }
                let mut o = CheckOutcome::new(kind.label());
                o.passed = false;
                o.detail = serde_json::Value::String(f.to_string());
                o
            }
        };
        if !outcome.passed {
            code = EXIT_CHECK;
        }
        summary.checks.push(outcome);
    }
    Ok(code)
}

/// Flags shared by every subcommand.
#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Builtin model name.
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Proceed when the convexity gate fails.
    #[arg(long, global = true)]
    pub force: bool,
    #[arg(long, global = true)]
    pub atoms: Option<usize>,
    #[arg(long, global = true)]
    pub scenarios: Option<usize>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub method: Option<MethodArg>,
    /// Worker threads; defaults to every core.
    #[arg(long, global = true, env = "MFC_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    GradientDescent,
    PicardFeedback,
}

#[derive(Parser, Debug)]
#[command(
    name = "mfc",
    version,
    about = "Mean-field type control solver and verification harness"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Solve the optimality system and run the requested checks.
    Solve {
        /// Extra checks; repeatable.
        #[arg(long, value_enum)]
        check: Vec<CheckKind>,
    },
    /// Gradient against central finite differences.
    GradCheck,
    /// Jacobian flow against finite differences of re-solves.
    JacobianCheck,
    /// Bellman equation residual.
    BellmanCheck,
    /// Master equation residual.
    MasterCheck,
    /// Optimum against the Riccati oracle.
    LqValidate,
    /// Probe the standing assumptions and print `c0`.
    Assumptions,
}

impl Cli {
    /// Resolved configuration: file (or defaults), then flag overrides, then the subcommand's check.
    pub fn resolve(&self) -> Result<(RunConfig, Task), Failure> {
        let mut cfg = match &self.common.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
                RunConfig::from_json(&text).map_err(Failure::Config)?
            }
            None => RunConfig::default(),
        };
        let c = &self.common;
        if let Some(m) = &c.model {
            cfg.model = ModelSpec {
                name: m.clone(),
                params: None,
            };
        }
        if let Some(s) = c.seed {
            cfg.ensemble.seed = s;
        }
        if let Some(o) = &c.out {
            cfg.out = o.clone();
        }
        if let Some(a) = c.atoms {
            cfg.ensemble.atoms = a;
        }
        if let Some(k) = c.scenarios {
            cfg.ensemble.scenarios = k;
        }
        if let Some(n) = c.steps {
            cfg.grid.steps = n;
        }
        if let Some(m) = c.method {
            cfg.solver.method = match m {
                MethodArg::GradientDescent => Method::GradientDescent,
                MethodArg::PicardFeedback => Method::PicardFeedback,
            };
        }
        let task = match &self.command {
            Command::Solve { check } => {
                check.iter().for_each(|k| k.enable(&mut cfg.checks));
                Task::Solve
            }
            Command::GradCheck => Self::only(&mut cfg, CheckKind::GradCheck),
            Command::JacobianCheck => Self::only(&mut cfg, CheckKind::JacobianCheck),
            Command::BellmanCheck => Self::only(&mut cfg, CheckKind::BellmanCheck),
            Command::MasterCheck => Self::only(&mut cfg, CheckKind::MasterCheck),
            Command::LqValidate => Self::only(&mut cfg, CheckKind::LqValidate),
            Command::Assumptions => Task::Assumptions,
        };
        Ok((cfg, task))
    }

    fn only(cfg: &mut RunConfig, kind: CheckKind) -> Task {
        kind.enable(&mut cfg.checks);
        Task::Solve
    }
}

/// Human-readable table of a finished run.
pub fn render(summary: &RunSummary, out: &Path) -> String {
    let mut s = String::new();
    s.push_str(&format!("config_hash {}\n", summary.config_hash));
    s.push_str(&format!("c0          {}\n", fmt17(summary.c0)));
    if let Some(q) = &summary.solver {
        s.push_str(&format!(
            "solver      {:?} value {} residual {:.3e} iterations {} converged {}\n",
            q.method,
            fmt17(q.value),
            q.residual,
            q.iterations,
            q.converged
        ));
    }
    if let Some(a) = &summary.assumptions {
        for c in &a.checks {
            s.push_str(&format!(
                "{:<12}{:<6} worst margin {:.3e}\n",
                c.name,
                if c.passed { "pass" } else { "FAIL" },
                c.worst_margin
            ));
        }
        s.push_str(&format!("b(v)* {}  b(v)+ {}\n", a.b5_star, a.b5_dagger));
    }
    for c in &summary.checks {
        s.push_str(&format!(
            "{:<16}{}\n",
            c.name,
            if c.passed { "pass" } else { "FAIL" }
        ));
        for (k, v) in &c.metrics {
            let bound = c
                .thresholds
                .get(k)
                .map(|b| format!(" (<= {b:e})"))
                .unwrap_or_default();
            s.push_str(&format!("    {k:<28}{v:.6e}{bound}\n"));
        }
        for r in &c.residuals {
            let x =
                r.x.as_ref()
                    .map(|x| format!(" x={x:?}"))
                    .unwrap_or_default();
            s.push_str(&format!("    {} t={}{x}\n", r.equation, r.t));
            for comp in &r.components {
                s.push_str(&format!("        {:<14}{:+.6e}\n", comp.name, comp.value));
            }
            s.push_str(&format!(
                "        {:<14}{:+.6e} normalized {:.3e}\n",
                "residual", r.residual, r.normalized
            ));
        }
    }
    if let Some(e) = &summary.error {
        s.push_str(&format!("{e}\n"));
    }
    s.push_str(&format!("outputs in {}\n", out.display()));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"grid": {"steps": 10, "dt": 0.1}}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.ensemble.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn invalid_configs() {
        let mut c = RunConfig::default();
        c.grid.t_end = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model.name = "nope".into();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.eta = vec![0.1, 0.2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn scalar_eta_expands() {
        let mut c = RunConfig::default();
        c.ensemble.dim = 2;
        assert_eq!(c.eta_matrix(), vec![0.3, 0.0, 0.0, 0.3]);
    }
}
