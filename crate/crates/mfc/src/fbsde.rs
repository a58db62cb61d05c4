//! Forward simulation, regression Monte Carlo adjoint, objective, gradient and the
//! two solvers of the optimality system.
//!
//! Time stepping on nodes `0..=N`:
//!
//! ```text
//! Y_{k+1} = Y_k + u_k dt + eta dW_k
//! p_N     = h_x(Y_N) + D_x dF_T/dν(μ_N)(Y_N)
//! p_k     = p_{k+1} + dt [l_x(Y_k, u_k) + D_x dF/dν(μ_k)(Y_k)]      (pathwise)
//! Z⁺_k    = Ê_k[p_{k+1}],   Z_k = Z⁺_k + dt [driver]_k,   Z_N = p_N
//! ```
//!
//! `l_v(Y_k, u_k) + Z⁺_k` is the exact gradient of the discrete objective with
//! respect to `u_k` along directions in the span of the regression basis.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{fmt17, hm_inner_weighted, FieldProcess, RandomField};
use crate::error::{Error, Result};
use crate::hamiltonian::feedback_from;
use crate::model::{default_step, ControlProblem, CostModel, Measure, Stage};
use crate::regression::{LocalFit, RegressionSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GradientDescent,
    PicardFeedback,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    /// Bound on the sup over nodes of the H_m norm of `l_v + Z⁺`.
    pub tol: f64,
    pub max_iters: usize,
    /// Gradient-descent step; `None` uses the convexity-based default.
    pub step: Option<f64>,
    pub damping: f64,
    pub regression: RegressionSpec,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::PicardFeedback,
            tol: 1e-6,
            max_iters: 5000,
            step: None,
            damping: 0.5,
            regression: RegressionSpec::default(),
        }
    }
}

impl SolverConfig {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
}

/// Measures per node together with their summaries.
#[derive(Clone, Debug)]
pub struct MeasureFlow {
    pub dim: usize,
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub summaries: Vec<Vec<f64>>,
}

impl MeasureFlow {
    pub fn from_path(model: &dyn CostModel, y: &FieldProcess, weights: Vec<f64>) -> Self {
        let dim = y.nodes[0].dim;
        let points: Vec<Vec<f64>> = y.nodes.iter().map(|f| f.values.clone()).collect();
        let summaries = points
            .iter()
            .map(|p| model.summarize(p, &weights))
            .collect();
        Self {
            dim,
            points,
            weights,
            summaries,
        }
    }

    pub fn measure(&self, k: usize) -> Measure<'_> {
        Measure {
            dim: self.dim,
            points: &self.points[k],
            weights: &self.weights,
            summary: &self.summaries[k],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// How mean-field terms see the measure.
#[derive(Clone, Copy)]
pub enum Coupling<'a> {
    /// The ensemble's own empirical law at each node.
    Pooled,
    /// A fixed flow of measures; the ensemble is a set of tagged particles.
    Frozen(&'a MeasureFlow),
}

fn summaries_of(model: &dyn CostModel, y: &FieldProcess, weights: &[f64]) -> Vec<Vec<f64>> {
    y.nodes
        .iter()
        .map(|f| model.summarize(&f.values, weights))
        .collect()
}

fn node_measure<'a>(
    coupling: Coupling<'a>,
    y: &'a FieldProcess,
    weights: &'a [f64],
    summaries: &'a [Vec<f64>],
    k: usize,
) -> Measure<'a> {
    match coupling {
        Coupling::Pooled => Measure {
            dim: y.nodes[k].dim,
            points: &y.nodes[k].values,
            weights,
            summary: &summaries[k],
        },
        Coupling::Frozen(flow) => flow.measure(k),
    }
}

/// `Y_0 = x0`, `Y_{k+1} = Y_k + u_k dt + eta dW_k`.
pub fn simulate_forward(problem: &ControlProblem, control: &FieldProcess) -> Result<FieldProcess> {
    let n_steps = problem.grid.steps;
    if control.len() != n_steps {
        return Err(Error::Shape(format!(
            "control has {} nodes, grid has {n_steps} steps",
            control.len()
        )));
    }
    let x0 = &problem.x0;
    let (m, k, n) = (x0.atoms, x0.scenarios, x0.dim);
    let dt = problem.grid.dt();
    let mut nodes = Vec::with_capacity(n_steps + 1);
    let mut cur = x0.clone();
    cur.adapted_to = 0;
    nodes.push(cur.clone());
    for step in 0..n_steps {
        let u = &control.nodes[step];
        if u.atoms != m || u.scenarios != k || u.dim != n {
            return Err(Error::Shape(format!(
                "control node {step} has the wrong shape"
            )));
        }
        let dw = problem.noise.step(step);
        let mut next = cur.clone();
        for a in 0..m {
            for s in 0..k {
                let o = (a * k + s) * n;
                for i in 0..n {
                    let mut noise = 0.0;
                    for j in 0..n {
                        noise += problem.eta[i * n + j] * dw[s * n + j];
                    }
                    next.values[o + i] = cur.values[o + i] + u.values[o + i] * dt + noise;
                }
            }
        }
        next.adapted_to = step + 1;
        nodes.push(next.clone());
        cur = next;
    }
    Ok(FieldProcess { nodes })
}

/// Output of the backward sweep.
#[derive(Clone, Debug)]
pub struct AdjointSolution {
    /// Reported costate on nodes `0..=N`.
    pub z: FieldProcess,
    /// Conditional expectation of the next pathwise adjoint, nodes `0..N`.
    pub z_plus: FieldProcess,
    /// Pathwise adjoint on nodes `0..=N`.
    pub p: FieldProcess,
    /// Per node and atom regression fits of `p_{k+1}` on `Y_k`.
    pub fits: Vec<Vec<LocalFit>>,
    /// Martingale integrands, `n x n` per point; entry `i * n + j` is component `i` of `r_j`.
    pub r: Option<FieldProcess>,
    pub diagnostics: Vec<RegressionDiagnostics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionDiagnostics {
    pub node: usize,
    pub max_columns: usize,
    pub min_pivot: f64,
    /// H_m norm of `p_{k+1} - Z⁺_k`.
    pub residual_norm: f64,
}

fn backward(
    problem: &ControlProblem,
    y: &FieldProcess,
    control: &FieldProcess,
    spec: RegressionSpec,
    coupling: Coupling,
) -> Result<AdjointSolution> {
    let model = problem.model.as_ref();
    let x0 = &problem.x0;
    let (m, k, n) = (x0.atoms, x0.scenarios, x0.dim);
    let steps = problem.grid.steps;
    let dt = problem.grid.dt();
    let weights = problem.point_weights();
    let summaries = match coupling {
        Coupling::Pooled => summaries_of(model, y, &weights),
        Coupling::Frozen(_) => Vec::new(),
    };
    let block = k * n;

    let mut p_nodes = vec![RandomField::zeros(m, k, n, steps); steps + 1];
    let mut z_nodes = vec![RandomField::zeros(m, k, n, 0); steps + 1];
    let mut zp_nodes: Vec<RandomField> =
        (0..steps).map(|s| RandomField::zeros(m, k, n, s)).collect();
    let mut fits = Vec::with_capacity(steps);
    let mut diagnostics = Vec::with_capacity(steps);

    {
        let mu = node_measure(coupling, y, &weights, &summaries, steps);
        let yn = &y.nodes[steps].values;
        let pn = &mut p_nodes[steps].values;
        pn.par_chunks_mut(n)
            .zip(yn.par_chunks(n))
            .for_each(|(out, x)| {
                let mut g = vec![0.0; n];
                model.h_x(x, out);
                model.mf_grad(Stage::Terminal, &mu, x, &mut g);
                out.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            });
        z_nodes[steps] = p_nodes[steps].clone();
        z_nodes[steps].adapted_to = steps;
    }

    for step in (0..steps).rev() {
        let mu = node_measure(coupling, y, &weights, &summaries, step);
        let yk = &y.nodes[step].values;
        let uk = &control.nodes[step].values;
        let next = &p_nodes[step + 1].values;
        let per_atom: Vec<(LocalFit, Vec<f64>, Vec<f64>)> = (0..m)
            .into_par_iter()
            .map(|a| {
                let range = a * block..(a + 1) * block;
                let inputs = &yk[range.clone()];
                let fit = LocalFit::fit(inputs, n, &next[range.clone()], n, spec)?;
                let target = &next[range.clone()];
                let zp: Vec<f64> = target
                    .iter()
                    .zip(fit.residuals())
                    .map(|(t, r)| t - r)
                    .collect();
                let mut drv = vec![0.0; block];
                let mut g = vec![0.0; n];
                for s in 0..k {
                    let o = s * n;
                    let (x, v) = (&inputs[o..o + n], &uk[range.start + o..range.start + o + n]);
                    model.l_x(x, v, &mut drv[o..o + n]);
                    model.mf_grad(Stage::Running, &mu, x, &mut g);
                    for i in 0..n {
                        drv[o + i] += g[i];
                    }
                }
                Ok((fit, zp, drv))
            })
            .collect::<Result<_>>()?;
        let mut node_fits = Vec::with_capacity(m);
        let mut pk = RandomField::zeros(m, k, n, steps);
        let mut zk = RandomField::zeros(m, k, n, step);
        let mut resid = 0.0;
        let mut max_cols = 0;
        let mut min_pivot = f64::INFINITY;
        for (a, (fit, zp, drv)) in per_atom.into_iter().enumerate() {
            let range = a * block..(a + 1) * block;
            for j in 0..block {
                let idx = range.start + j;
                zp_nodes[step].values[idx] = zp[j];
                pk.values[idx] = next[idx] + dt * drv[j];
                zk.values[idx] = zp[j] + dt * drv[j];
                resid += problem.atom_weights[a] / k as f64 * (next[idx] - zp[j]).powi(2);
            }
            max_cols = max_cols.max(fit.ncols());
            min_pivot = min_pivot.min(fit.min_pivot);
            node_fits.push(fit);
        }
        p_nodes[step] = pk;
        z_nodes[step] = zk;
        fits.push(node_fits);
        diagnostics.push(RegressionDiagnostics {
            node: step,
            max_columns: max_cols,
            min_pivot,
            residual_norm: resid.sqrt(),
        });
    }
    fits.reverse();
    diagnostics.reverse();
    Ok(AdjointSolution {
        z: FieldProcess { nodes: z_nodes },
        z_plus: FieldProcess { nodes: zp_nodes },
        p: FieldProcess { nodes: p_nodes },
        fits,
        r: None,
        diagnostics,
    })
}

/// `r_{k,j} = Ê_k[p_{k+1} dW_{k,j}] / dt` on the stored regression bases.
fn martingale_integrands(
    problem: &ControlProblem,
    y: &FieldProcess,
    adj: &AdjointSolution,
) -> FieldProcess {
    let x0 = &problem.x0;
    let (m, k, n) = (x0.atoms, x0.scenarios, x0.dim);
    let dt = problem.grid.dt();
    let nodes = (0..problem.grid.steps)
        .map(|step| {
            let dw = problem.noise.step(step);
            let blocks: Vec<Vec<f64>> = (0..m)
                .into_par_iter()
                .map(|a| {
                    let fit = &adj.fits[step][a];
                    let inputs = &y.nodes[step].values[a * k * n..(a + 1) * k * n];
                    let next = &adj.p.nodes[step + 1].values[a * k * n..(a + 1) * k * n];
                    let mut out = vec![0.0; k * n * n];
                    for j in 0..n {
                        let target: Vec<f64> = (0..k * n)
                            .map(|idx| next[idx] * dw[(idx / n) * n + j] / dt)
                            .collect();
                        let proj = fit.project(inputs, &target);
                        for s in 0..k {
                            for i in 0..n {
                                out[(s * n + i) * n + j] = proj[s * n + i];
                            }
                        }
                    }
                    out
                })
                .collect();
            let mut f = RandomField::zeros(m, k, n * n, step);
            for (a, b) in blocks.into_iter().enumerate() {
                f.values[a * k * n * n..(a + 1) * k * n * n].copy_from_slice(&b);
            }
            f
        })
        .collect();
    FieldProcess { nodes }
}

/// Adjoint along a given path and control, including the martingale integrands.
pub fn solve_adjoint_bsde(
    problem: &ControlProblem,
    y: &FieldProcess,
    control: &FieldProcess,
    spec: RegressionSpec,
) -> Result<AdjointSolution> {
    let mut adj = backward(problem, y, control, spec, Coupling::Pooled)?;
    adj.r = Some(martingale_integrands(problem, y, &adj));
    Ok(adj)
}

fn path_cost(
    problem: &ControlProblem,
    y: &FieldProcess,
    control: &FieldProcess,
    coupling: Coupling,
) -> f64 {
    let steps = problem.grid.steps;
    let running = running_costs(problem, y, control, coupling);
    let terminal = match coupling {
        Coupling::Pooled => terminal_cost(problem, &y.nodes[steps], None),
        Coupling::Frozen(flow) => {
            terminal_cost(problem, &y.nodes[steps], Some(&flow.measure(steps)))
        }
    };
    problem.grid.dt() * running.iter().sum::<f64>() + terminal
}

/// Running cost integrand at every node `0..N`.
fn running_costs(
    problem: &ControlProblem,
    y: &FieldProcess,
    control: &FieldProcess,
    coupling: Coupling,
) -> Vec<f64> {
    let model = problem.model.as_ref();
    let weights = problem.point_weights();
    let summaries = match coupling {
        Coupling::Pooled => summaries_of(model, y, &weights),
        Coupling::Frozen(_) => Vec::new(),
    };
    let n = problem.dim();
    let steps = problem.grid.steps;
    let node_cost = |k: usize| -> f64 {
        let mu = node_measure(coupling, y, &weights, &summaries, k);
        let pts = &y.nodes[k].values;
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            let x = &pts[i * n..(i + 1) * n];
            let mut c = model.l(x, &control.nodes[k].values[i * n..(i + 1) * n]);
            if let Coupling::Frozen(_) = coupling {
                c += model.mf_lfd(Stage::Running, &mu, x);
            }
            acc += w * c;
        }
        if let Coupling::Pooled = coupling {
            acc += model.mf(Stage::Running, &mu);
        }
        acc
    };
    (0..steps).into_par_iter().map(node_cost).collect()
}

/// Terminal payoff of the field `x`: `⟨h⟩ + F_T` against its own law, or
/// `⟨h + dF_T/dν(μ)⟩` against a frozen terminal measure.
pub fn terminal_cost(problem: &ControlProblem, x: &RandomField, frozen: Option<&Measure>) -> f64 {
    let model = problem.model.as_ref();
    let weights = problem.point_weights();
    let n = problem.dim();
    let summary = model.summarize(&x.values, &weights);
    let own = Measure {
        dim: n,
        points: &x.values,
        weights: &weights,
        summary: &summary,
    };
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        let p = &x.values[i * n..(i + 1) * n];
        let mut c = model.h(p);
        if let Some(mu) = frozen {
            c += model.mf_lfd(Stage::Terminal, mu, p);
        }
        acc += w * c;
    }
    if frozen.is_none() {
        acc += model.mf(Stage::Terminal, &own);
    }
    acc
}

/// Left-endpoint quadrature of the running cost plus the terminal cost.
pub fn objective(problem: &ControlProblem, control: &FieldProcess) -> Result<f64> {
    let y = simulate_forward(problem, control)?;
    Ok(path_cost(problem, &y, control, Coupling::Pooled))
}

fn gradient_of(
    problem: &ControlProblem,
    y: &FieldProcess,
    control: &FieldProcess,
    z_plus: &FieldProcess,
) -> FieldProcess {
    let model = problem.model.as_ref();
    let n = problem.dim();
    let nodes = control
        .nodes
        .iter()
        .enumerate()
        .map(|(k, u)| {
            let mut g = z_plus.nodes[k].clone();
            g.values.par_chunks_mut(n).enumerate().for_each_init(
                || vec![0.0; n],
                |lv, (i, out)| {
                    model.l_v(
                        &y.nodes[k].values[i * n..(i + 1) * n],
                        &u.values[i * n..(i + 1) * n],
                        lv,
                    );
                    out.iter_mut().zip(lv.iter()).for_each(|(a, b)| *a += b);
                },
            );
            g.adapted_to = k;
            g
        })
        .collect();
    FieldProcess { nodes }
}

/// `l_v(Y, u) + Z⁺` along the path driven by `control`.
pub fn gradient(problem: &ControlProblem, control: &FieldProcess) -> Result<FieldProcess> {
    let y = simulate_forward(problem, control)?;
    let adj = backward(
        problem,
        &y,
        control,
        RegressionSpec::default(),
        Coupling::Pooled,
    )?;
    Ok(gradient_of(problem, &y, control, &adj.z_plus))
}

pub(crate) fn sup_weighted_norm(f: &FieldProcess, atom_weights: &[f64]) -> f64 {
    f.nodes
        .iter()
        .map(|x| hm_inner_weighted(x, x, atom_weights).unwrap_or(0.0).sqrt())
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub residual: f64,
    pub objective: f64,
}

/// Optimal path, costate, control and integrands with the solver log.
#[derive(Clone, Debug)]
pub struct OptimalQuadruple {
    pub problem: ControlProblem,
    pub config: SolverConfig,
    pub y: FieldProcess,
    pub z: FieldProcess,
    pub z_plus: FieldProcess,
    pub u: FieldProcess,
    pub r: FieldProcess,
    pub p: FieldProcess,
    pub fits: Vec<Vec<LocalFit>>,
    /// Measures the mean-field terms were evaluated against.
    pub measures: Arc<MeasureFlow>,
    /// True when the measures are an external frozen flow.
    pub frozen: bool,
    pub value: f64,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub log: Vec<IterRecord>,
    pub diagnostics: Vec<RegressionDiagnostics>,
}

impl OptimalQuadruple {
    pub fn coupling(&self) -> Coupling<'_> {
        if self.frozen {
            Coupling::Frozen(&self.measures)
        } else {
            Coupling::Pooled
        }
    }

    /// Error out unless the solver reached its tolerance.
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged {
                what: "optimality system",
                iterations: self.iterations,
                residual: self.residual,
            })
        }
    }

    /// Rows `(node, atom, scenario, dim, Y, Z, u)`; `u` is empty at the terminal node.
    pub fn write_csv<W: Write>(&self, out: W, header: Option<&str>) -> Result<()> {
        let mut out = out;
        if let Some(h) = header {
            writeln!(out, "{h}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["node", "atom", "scenario", "dim", "Y", "Z", "u"])?;
        let x0 = &self.problem.x0;
        let (m, k, n) = (x0.atoms, x0.scenarios, x0.dim);
        for node in 0..self.y.len() {
            for a in 0..m {
                for s in 0..k {
                    for i in 0..n {
                        let idx = (a * k + s) * n + i;
                        let u = self
                            .u
                            .nodes
                            .get(node)
                            .map(|f| fmt17(f.values[idx]))
                            .unwrap_or_default();
                        w.write_record([
                            node.to_string(),
                            a.to_string(),
                            s.to_string(),
                            i.to_string(),
                            fmt17(self.y.nodes[node].values[idx]),
                            fmt17(self.z.nodes[node].values[idx]),
                            u,
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> QuadrupleSummary {
        let w = &self.problem.atom_weights;
        let norm = |f: &RandomField| hm_inner_weighted(f, f, w).unwrap_or(0.0).sqrt();
        QuadrupleSummary {
            model: self.problem.model.name(),
            method: self.config.method,
            value: self.value,
            residual: self.residual,
            iterations: self.iterations,
            converged: self.converged,
            y_norms: self.y.nodes.iter().map(norm).collect(),
            z_norms: self.z.nodes.iter().map(norm).collect(),
            u_norms: self.u.nodes.iter().map(norm).collect(),
            log: self.log.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadrupleSummary {
    pub model: String,
    pub method: Method,
    pub value: f64,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub y_norms: Vec<f64>,
    pub z_norms: Vec<f64>,
    pub u_norms: Vec<f64>,
    pub log: Vec<IterRecord>,
}

fn feedback_field(
    problem: &ControlProblem,
    y: &FieldProcess,
    z_plus: &FieldProcess,
    u: &FieldProcess,
) -> Result<FieldProcess> {
    let model = problem.model.as_ref();
    let n = problem.dim();
    let nodes = (0..u.len())
        .map(|k| {
            let mut out = u.nodes[k].clone();
            let res: Result<()> =
                out.values
                    .par_chunks_mut(n)
                    .enumerate()
                    .try_for_each(|(i, o)| {
                        let r = i * n..(i + 1) * n;
                        let fb = feedback_from(
                            model,
                            &y.nodes[k].values[r.clone()],
                            &z_plus.nodes[k].values[r.clone()],
                            &u.nodes[k].values[r],
                        )?;
                        o.copy_from_slice(&fb.u);
                        Ok(())
                    });
            res.map(|_| out)
        })
        .collect::<Result<_>>()?;
    Ok(FieldProcess { nodes })
}

/// Solve with the default configuration for `method`.
pub fn solve_optimal(problem: &ControlProblem, method: Method) -> Result<OptimalQuadruple> {
    solve_with(problem, &SolverConfig::with_method(method), None)
}

/// Solve the self-consistent problem, optionally warm-started from a control.
pub fn solve_with(
    problem: &ControlProblem,
    cfg: &SolverConfig,
    warm: Option<&FieldProcess>,
) -> Result<OptimalQuadruple> {
    solve_coupled(problem, cfg, warm, None)
}

/// Solve for tagged particles in a frozen flow of measures.
pub fn solve_tagged(
    problem: &ControlProblem,
    cfg: &SolverConfig,
    frozen: Arc<MeasureFlow>,
    warm: Option<&FieldProcess>,
) -> Result<OptimalQuadruple> {
    if frozen.len() != problem.grid.steps + 1 {
        return Err(Error::Shape(format!(
            "frozen flow has {} nodes, grid needs {}",
            frozen.len(),
            problem.grid.steps + 1
        )));
    }
    solve_coupled(problem, cfg, warm, Some(frozen))
}

fn solve_coupled(
    problem: &ControlProblem,
    cfg: &SolverConfig,
    warm: Option<&FieldProcess>,
    frozen: Option<Arc<MeasureFlow>>,
) -> Result<OptimalQuadruple> {
    let x0 = &problem.x0;
    let (m, k, n) = (x0.atoms, x0.scenarios, x0.dim);
    let steps = problem.grid.steps;
    let mut u = match warm {
        Some(w) => w.clone(),
        None => FieldProcess::zeros(steps, m, k, n),
    };
    let rho = cfg
        .step
        .unwrap_or_else(|| default_step(&problem.model.constants(), problem.grid.horizon()));
    let theta = cfg.damping;
    let mut log = Vec::new();
    let mut iter = 0;
    loop {
        let coupling = match &frozen {
            Some(f) => Coupling::Frozen(f),
            None => Coupling::Pooled,
        };
        let y = simulate_forward(problem, &u)?;
        let adj = backward(problem, &y, &u, cfg.regression, coupling)?;
        let grad = gradient_of(problem, &y, &u, &adj.z_plus);
        let residual = sup_weighted_norm(&grad, &problem.atom_weights);
        let value = path_cost(problem, &y, &u, coupling);
        log.push(IterRecord {
            iteration: iter,
            residual,
            objective: value,
        });
        let converged = residual <= cfg.tol;
        if converged || iter >= cfg.max_iters || !residual.is_finite() {
            let r = martingale_integrands(problem, &y, &adj);
            let is_frozen = frozen.is_some();
            let measures = match frozen {
                Some(f) => f,
                None => Arc::new(MeasureFlow::from_path(
                    problem.model.as_ref(),
                    &y,
                    problem.point_weights(),
                )),
            };
            return Ok(OptimalQuadruple {
                problem: problem.clone(),
                config: *cfg,
                frozen: is_frozen,
                y,
                z: adj.z,
                z_plus: adj.z_plus,
                u,
                r,
                p: adj.p,
                fits: adj.fits,
                measures,
                value,
                residual,
                iterations: iter,
                converged,
                log,
                diagnostics: adj.diagnostics,
            });
        }
        u = match cfg.method {
            Method::GradientDescent => u.axpy(-rho, &grad)?,
            Method::PicardFeedback => {
                let target = feedback_field(problem, &y, &adj.z_plus, &u)?;
                let mut mixed = u.axpy(-theta, &u)?;
                mixed = mixed.axpy(theta, &target)?;
                mixed
            }
        };
        iter += 1;
    }
}

/// Objective at the optimal control.
pub fn value_function(problem: &ControlProblem) -> Result<f64> {
    Ok(solve_optimal(problem, Method::PicardFeedback)?
        .require_converged()?
        .value)
}

fn restart(quad: &OptimalQuadruple, node: usize) -> Result<OptimalQuadruple> {
    let mut start = quad.y.nodes[node].clone();
    start.adapted_to = 0;
    let restarted = quad.problem.restarted(node, start)?;
    let warm = FieldProcess {
        nodes: quad.u.nodes[node..]
            .iter()
            .enumerate()
            .map(|(j, f)| {
                let mut f = f.clone();
                f.adapted_to = j;
                f
            })
            .collect(),
    };
    solve_with(&restarted, &quad.config, Some(&warm))?.require_converged()
}

/// Re-solve from `(s_k, Y(s_k))` on the noise tail and return the largest node-wise
/// H_m distance of `Y` plus that of `Z` over the remaining nodes.
pub fn flow_restart_check(quad: &OptimalQuadruple, node: usize) -> Result<f64> {
    let again = restart(quad, node)?;
    let w = &quad.problem.atom_weights;
    let mut worst: f64 = 0.0;
    for j in 0..again.y.len() {
        let dy = again.y.nodes[j].axpy(-1.0, &quad.y.nodes[node + j])?;
        let dz = again.z.nodes[j].axpy(-1.0, &quad.z.nodes[node + j])?;
        let d = hm_inner_weighted(&dy, &dy, w)?.sqrt() + hm_inner_weighted(&dz, &dz, w)?.sqrt();
        worst = worst.max(d);
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicProgramming {
    pub node: usize,
    pub value: f64,
    /// Running cost on `[t0, s_k]` along the optimum.
    pub running: f64,
    /// Value re-solved from `(s_k, Y(s_k))`.
    pub tail_value: f64,
    /// `value - running - tail_value`.
    pub gap: f64,
}

/// `V(t0) = ∫_{t0}^{s} cost + V(Y(s), s)` at node `k`.
pub fn dynamic_programming_check(
    quad: &OptimalQuadruple,
    node: usize,
) -> Result<DynamicProgramming> {
    let again = restart(quad, node)?;
    let costs = running_costs(&quad.problem, &quad.y, &quad.u, quad.coupling());
    let running = quad.problem.grid.dt() * costs[..node].iter().sum::<f64>();
    Ok(DynamicProgramming {
        node,
        value: quad.value,
        running,
        tail_value: again.value,
        gap: quad.value - running - again.value,
    })
}

/// Smallest `C` with `max(‖Y(s)‖, ‖Z(s)‖, ‖u(s)‖) ≤ C (1 + ‖x0‖)` at every node.
pub fn growth_constant(quad: &OptimalQuadruple) -> f64 {
    let w = &quad.problem.atom_weights;
    let x0 = &quad.problem.x0;
    let size = hm_inner_weighted(x0, x0, w).unwrap_or(0.0).sqrt();
    let sup = sup_weighted_norm(&quad.y, w)
        .max(sup_weighted_norm(&quad.z, w))
        .max(sup_weighted_norm(&quad.u, w));
    sup / (1.0 + size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{brownian_paths, TimeGrid};
    use crate::model::StandardModel;

    fn problem(name: &str, eta: f64, atoms: &[f64], k: usize, steps: usize) -> ControlProblem {
        let model = Arc::new(StandardModel::builtin(name, 1).unwrap());
        let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
        let x0 = RandomField::from_atoms(atoms, 1, k).unwrap();
        let noise = brownian_paths(&grid, 11, k, 1).unwrap();
        ControlProblem::new(model, vec![eta], grid, x0, noise).unwrap()
    }

    #[test]
    fn forward_without_noise() {
        let p = problem("lq_scalar", 0.0, &[0.5, -1.0], 3, 10);
        let zero = FieldProcess::zeros(10, 2, 3, 1);
        let y = simulate_forward(&p, &zero).unwrap();
        for f in &y.nodes {
            assert_eq!(f.values, p.x0.values);
        }
        let c = FieldProcess::constant(
            &RandomField::from_values(2, 3, 1, vec![0.7; 6], 0).unwrap(),
            10,
        );
        let y = simulate_forward(&p, &c).unwrap();
        for (k, f) in y.nodes.iter().enumerate() {
            let t = p.grid.node(k);
            assert!((f.values[0] - (0.5 + 0.7 * t)).abs() < 1e-14);
        }
        assert!(y.is_adapted());
    }

    #[test]
    fn zero_cost_accepts_zero_control() {
        let p = problem("zero_cost", 0.3, &[0.5, -1.0], 8, 10);
        let q = solve_optimal(&p, Method::GradientDescent).unwrap();
        assert_eq!(q.iterations, 0);
        assert!(q.converged);
        assert_eq!(q.value, 0.0);
        assert!(q.z.sup_norm() == 0.0 && q.r.sup_norm() == 0.0);
    }

    #[test]
    fn kinetic_objective() {
        let model = Arc::new(StandardModel::new(
            "kinetic",
            1,
            crate::model::StandardParams {
                r: 1.0,
                ..Default::default()
            },
        ));
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let x0 = RandomField::from_atoms(&[0.1, 0.4], 1, 2).unwrap();
        let noise = brownian_paths(&grid, 1, 2, 1).unwrap();
        let p = ControlProblem::new(model, vec![0.5], grid, x0, noise).unwrap();
        let c = FieldProcess::constant(
            &RandomField::from_values(2, 2, 1, vec![1.5; 4], 0).unwrap(),
            10,
        );
        assert!((objective(&p, &c).unwrap() - 0.5 * 1.5 * 1.5).abs() < 1e-12);
        let g = gradient(&p, &c).unwrap();
        for f in &g.nodes {
            assert!(f.values.iter().all(|v| (v - 1.5).abs() < 1e-12));
        }
    }

    #[test]
    fn deterministic_adjoint_is_a_backward_sum() {
        let p = problem("lq_scalar", 0.0, &[0.5, -1.0, 2.0], 2, 20);
        let q = solve_optimal(&p, Method::PicardFeedback).unwrap();
        let model = StandardModel::builtin("lq_scalar", 1).unwrap();
        let dt = p.grid.dt();
        for i in 0..6 {
            let mut acc = q.y.nodes[20].values[i] * model.p.q_t;
            for k in (0..20).rev() {
                let yk = q.y.nodes[k].values[i];
                acc += dt * (model.p.q * yk + model.p.lam * yk);
                assert!((q.z.nodes[k].values[i] - acc).abs() < 1e-12, "node {k}");
            }
        }
    }
}
