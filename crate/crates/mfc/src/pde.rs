//! Residuals of the Bellman and master equations assembled from solver output,
//! and the mean-field Itô check.
//!
//! Time derivatives are central differences of re-solved problems started at
//! `t ± δt` with `δt = 2 dt`, one-sided when `t - δt` falls before the template
//! start. All re-solves use the same number of steps and the same normals, so
//! their Monte Carlo errors largely cancel in the difference; the price is a
//! first-order bias from the slightly different step sizes. Measure integrals
//! are weighted averages over the solver's atoms.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{hm_inner_weighted, FieldProcess, RandomField};
use crate::error::{Error, Result};
use crate::fbsde::{solve_with, terminal_cost, OptimalQuadruple, SolverConfig};
use crate::hamiltonian::hamiltonian;
use crate::jacobian::{
    linear_flow, matrix_jacobian, matrix_jacobian_with, FlowCoefficients, FlowInput,
};
use crate::lfd::{
    mean_value_lfd, solve_grad_lfd_flow, solve_lfd_flow, solve_probe, LfdBase, SourceCloud,
};
use crate::model::{ControlProblem, Measure, Stage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub value: f64,
}

/// Residual at one probe with its additive breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub equation: String,
    pub t: f64,
    pub x: Option<Vec<f64>>,
    pub dt: f64,
    pub time_step: f64,
    /// Components as entering the residual; they sum to `residual`.
    pub components: Vec<Component>,
    pub residual: f64,
    /// `|residual| / max |component|`.
    pub normalized: f64,
    /// Uncentered components, when the report is centered.
    pub raw_components: Option<Vec<Component>>,
    pub raw_residual: Option<f64>,
    /// Trace term recomputed with sampled Gaussian directions.
    pub trace_cross_check: Option<f64>,
    pub terminal_identity: f64,
}

impl ResidualReport {
    fn new(
        equation: &str,
        t: f64,
        x: Option<Vec<f64>>,
        dt: f64,
        time_step: f64,
        components: Vec<Component>,
    ) -> Self {
        let residual = components.iter().map(|c| c.value).sum::<f64>();
        let scale = components.iter().map(|c| c.value.abs()).fold(0.0, f64::max);
        let normalized = if scale > 0.0 {
            residual.abs() / scale
        } else {
            residual.abs()
        };
        Self {
            equation: equation.into(),
            t,
            x,
            dt,
            time_step,
            components,
            residual,
            normalized,
            raw_components: None,
            raw_residual: None,
            trace_cross_check: None,
            terminal_identity: 0.0,
        }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.value)
    }
}

fn comp(name: &str, value: f64) -> Component {
    Component {
        name: name.into(),
        value,
    }
}

/// `tr(η^T A η)` for row-major `A`.
fn eta_trace(eta: &[f64], a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let mut eet = 0.0;
            for k in 0..n {
                eet += eta[i * n + k] * eta[j * n + k];
            }
            s += a[i * n + j] * eet;
        }
    }
    s
}

/// Scenario means at node 0, one `dim` block per atom.
fn atom_means(f: &RandomField) -> Vec<Vec<f64>> {
    (0..f.atoms)
        .map(|a| {
            let mut out = vec![0.0; f.dim];
            for s in 0..f.scenarios {
                out.iter_mut()
                    .zip(f.at(a, s))
                    .for_each(|(o, v)| *o += v / f.scenarios as f64);
            }
            out
        })
        .collect()
}

/// Sampling times of the derivative, the divisor and the common step count.
struct Stencil {
    lo: f64,
    hi: f64,
    div: f64,
    steps: usize,
}

fn time_stencil(template: &ControlProblem, t: f64) -> Result<Stencil> {
    let dt = template.grid.dt();
    let delta = 2.0 * dt;
    if t < template.grid.t0 - 1e-12 || t + delta >= template.grid.t_end - 0.5 * dt {
        return Err(Error::Invalid(format!(
            "probe time {t} is outside the grid or too close to the horizon"
        )));
    }
    let steps = (((template.grid.t_end - t) / dt).round() as usize).clamp(1, template.grid.steps);
    if t - delta < template.grid.t0 - 1e-12 {
        Ok(Stencil {
            lo: t,
            hi: t + delta,
            div: delta,
            steps,
        })
    } else {
        Ok(Stencil {
            lo: t - delta,
            hi: t + delta,
            div: 2.0 * delta,
            steps,
        })
    }
}

fn solve_at(
    template: &ControlProblem,
    t: f64,
    steps: usize,
    cfg: &SolverConfig,
) -> Result<OptimalQuadruple> {
    solve_with(&template.rescaled(t, steps)?, cfg, None)?.require_converged()
}

fn measure_of<'a>(
    problem: &ControlProblem,
    values: &'a [f64],
    weights: &'a [f64],
    summary: &'a [f64],
) -> Measure<'a> {
    Measure {
        dim: problem.dim(),
        points: values,
        weights,
        summary,
    }
}

/// Bellman residual at `(m, t)`, `m` the law of the template's initial field.
pub fn bellman_residual(
    template: &ControlProblem,
    t: f64,
    cfg: &SolverConfig,
    trace_draws: usize,
    seed: u64,
) -> Result<ResidualReport> {
    let st = time_stencil(template, t)?;
    let div = st.div;
    let base = solve_at(template, t, st.steps, cfg)?;
    let v_lo = if st.lo == t {
        base.value
    } else {
        solve_at(template, st.lo, st.steps, cfg)?.value
    };
    let v_hi = solve_at(template, st.hi, st.steps, cfg)?.value;
    let problem = &base.problem;
    let model = problem.model.as_ref();
    let n = problem.dim();
    let w = &problem.atom_weights;

    let jac = matrix_jacobian(&base)?;
    let dz = atom_means(&jac.dz.nodes[0]);
    let z = atom_means(&base.z.nodes[0]);
    let x = atom_means(&problem.x0);
    let mut trace = 0.0;
    let mut ham = 0.0;
    for a in 0..problem.atoms() {
        trace += w[a] * eta_trace(&problem.eta, &dz[a], n);
        ham += w[a] * hamiltonian(model, &x[a], &z[a])?.h;
    }
    let pw = problem.point_weights();
    let summary = model.summarize(&problem.x0.values, &pw);
    let f = model.mf(
        Stage::Running,
        &measure_of(problem, &problem.x0.values, &pw, &summary),
    );

    let components = vec![
        comp("time", -(v_hi - v_lo) / div),
        comp("trace", -0.5 * trace),
        comp("hamiltonian", -ham),
        comp("mean_field", -f),
    ];
    let mut report =
        ResidualReport::new("bellman", t, None, problem.grid.dt(), div / 2.0, components);
    if trace_draws > 0 {
        report.trace_cross_check = Some(trace_by_directions(&base, trace_draws, seed)?);
    }
    report.terminal_identity = bellman_terminal_identity(problem);
    Ok(report)
}

/// `|V(m, T) - ∫h dm - F_T(m)|` with `V(m, T)` the solver's terminal payoff.
pub fn bellman_terminal_identity(problem: &ControlProblem) -> f64 {
    let model = problem.model.as_ref();
    let pw = problem.point_weights();
    let x = &problem.x0;
    let summary = model.summarize(&x.values, &pw);
    let mu = measure_of(problem, &x.values, &pw, &summary);
    let n = problem.dim();
    let direct: f64 = pw
        .iter()
        .enumerate()
        .map(|(i, w)| w * model.h(&x.values[i * n..(i + 1) * n]))
        .sum::<f64>()
        + model.mf(Stage::Terminal, &mu);
    (terminal_cost(problem, x, None) - direct).abs()
}

/// `∫ tr(η^T D_x Z η) dm` as the mean of `⟨DZ^Ψ(t0), Ψ⟩` over `Ψ = η N` per atom.
pub fn trace_by_directions(base: &OptimalQuadruple, draws: usize, seed: u64) -> Result<f64> {
    let problem = &base.problem;
    let (m, k, n) = (problem.atoms(), problem.scenarios(), problem.dim());
    let coef = FlowCoefficients::new(base)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..draws {
        let mut psi = RandomField::zeros(m, k, n, 0);
        for a in 0..m {
            let g: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            for s in 0..k {
                for i in 0..n {
                    psi.values[(a * k + s) * n + i] =
                        (0..n).map(|j| problem.eta[i * n + j] * g[j]).sum();
                }
            }
        }
        let flow = linear_flow(
            base,
            &coef,
            FlowInput {
                init: Some(&psi),
                ..Default::default()
            },
        )?;
        acc += hm_inner_weighted(&flow.dz.nodes[0], &psi, &problem.atom_weights)?;
    }
    Ok(acc / draws as f64)
}

/// Master-equation residual at `(x, m, t)` for each probe, centered over `m`.
pub fn master_residual(
    template: &ControlProblem,
    probes: &[Vec<f64>],
    t: f64,
    cfg: &SolverConfig,
) -> Result<Vec<ResidualReport>> {
    let st = time_stencil(template, t)?;
    let div = st.div;
    let base = Arc::new(solve_at(template, t, st.steps, cfg)?);
    let lo = if st.lo == t {
        base.clone()
    } else {
        Arc::new(solve_at(template, st.lo, st.steps, cfg)?)
    };
    let hi = Arc::new(solve_at(template, st.hi, st.steps, cfg)?);
    let problem = &base.problem;
    let model = problem.model.as_ref();
    let n = problem.dim();
    let w = problem.atom_weights.clone();
    let m_atoms = problem.atoms();

    let mut lfd = LfdBase::new(base.clone())?;
    lfd.matrix()?;
    let pw = problem.point_weights();
    let summary = model.summarize(&problem.x0.values, &pw);
    let mu0 = measure_of(problem, &problem.x0.values, &pw, &summary);
    let xs = atom_means(&problem.x0);
    let z_atoms = atom_means(&base.z.nodes[0]);
    let u_atoms = atom_means(&base.u.nodes[0]);
    let dz_atoms = atom_means(&lfd.matrix_ref().unwrap().dz.nodes[0]);

    // m-averages of every component
    let averaged = {
        let cloud = SourceCloud::from_quad(&base);
        let flow = solve_lfd_flow(&lfd, &cloud)?;
        let grad = solve_grad_lfd_flow(&lfd, &flow, &cloud)?;
        let time = -(mean_value_lfd(&hi)? - mean_value_lfd(&lo)?) / div;
        let mut parts = [time, 0.0, 0.0, 0.0, 0.0, 0.0];
        let dnu = atom_means(&flow.dz.nodes[0]);
        let gnu = atom_means(&grad.dz.nodes[0]);
        for a in 0..m_atoms {
            parts[1] -= 0.5 * w[a] * eta_trace(&problem.eta, &dz_atoms[a], n);
            parts[2] -= 0.5 * w[a] * eta_trace(&problem.eta, &gnu[a], n);
            parts[3] -= w[a] * hamiltonian(model, &xs[a], &z_atoms[a])?.h;
            parts[4] -= w[a] * dot(&u_atoms[a], &dnu[a]);
            parts[5] -= w[a] * model.mf_lfd(Stage::Running, &mu0, &xs[a]);
        }
        parts
    };

    let terminal_mean = {
        let mut acc = 0.0;
        let tm = base.measures.measure(base.problem.grid.steps);
        for a in 0..m_atoms {
            acc += w[a] * (model.h(&xs[a]) + model.mf_lfd(Stage::Terminal, &tm, &xs[a]));
        }
        acc
    };

    probes
        .iter()
        .map(|x| {
            let probe = solve_probe(&base, x)?;
            let u_lo = solve_probe(&lo, x)?.value;
            let u_hi = solve_probe(&hi, x)?.value;
            let jac = matrix_jacobian_with(&probe, &FlowCoefficients::new(&probe)?)?;
            let dzx = atom_means(&jac.dz.nodes[0]).remove(0);
            let zx = atom_means(&probe.z.nodes[0]).remove(0);
            let cloud = SourceCloud::from_quad(&probe);
            let flow = solve_lfd_flow(&lfd, &cloud)?;
            let grad = solve_grad_lfd_flow(&lfd, &flow, &cloud)?;
            let dnu = atom_means(&flow.dz.nodes[0]);
            let gnu = atom_means(&grad.dz.nodes[0]);
            let mut trace_xi = 0.0;
            let mut transport = 0.0;
            for a in 0..m_atoms {
                trace_xi -= 0.5 * w[a] * eta_trace(&problem.eta, &gnu[a], n);
                transport -= w[a] * dot(&u_atoms[a], &dnu[a]);
            }
            let raw = [
                -(u_hi - u_lo) / div,
                -0.5 * eta_trace(&problem.eta, &dzx, n),
                trace_xi,
                -hamiltonian(model, x, &zx)?.h,
                transport,
                -model.mf_lfd(Stage::Running, &mu0, x),
            ];
            let names = [
                "time",
                "trace_x",
                "trace_xi",
                "hamiltonian",
                "transport",
                "mean_field",
            ];
            let raw_components: Vec<Component> =
                names.iter().zip(raw).map(|(nm, v)| comp(nm, v)).collect();
            let centered: Vec<Component> = names
                .iter()
                .zip(raw.iter().zip(averaged))
                .map(|(nm, (v, a))| comp(nm, v - a))
                .collect();
            let mut report = ResidualReport::new(
                "master",
                t,
                Some(x.clone()),
                problem.grid.dt(),
                div / 2.0,
                centered,
            );
            report.raw_residual = Some(raw.iter().sum());
            report.raw_components = Some(raw_components);
            let tm = base.measures.measure(base.problem.grid.steps);
            let direct = model.h(x) + model.mf_lfd(Stage::Terminal, &tm, x) - terminal_mean;
            let probe_problem = crate::lfd::probe_problem(problem, x)?;
            let solver_side = terminal_cost(&probe_problem, &probe_problem.x0, Some(&tm))
                - terminal_cost(problem, &problem.x0, Some(&tm));
            report.terminal_identity = (solver_side - direct).abs();
            Ok(report)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Test function `ψ` of a linear measure functional `∫ψ dμ`.
pub trait TestFunction: Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn grad(&self, x: &[f64], out: &mut [f64]);
    fn hess(&self, x: &[f64], out: &mut [f64]);
}

/// `ψ(x) = Σ x_i`.
pub struct LinearTest;

impl TestFunction for LinearTest {
    fn value(&self, x: &[f64]) -> f64 {
        x.iter().sum()
    }
    fn grad(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(1.0);
    }
    fn hess(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// `ψ(x) = |x|²`.
pub struct QuadraticTest;

impl TestFunction for QuadraticTest {
    fn value(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }
    fn grad(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().zip(x).for_each(|(o, v)| *o = 2.0 * v);
    }
    fn hess(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        out.fill(0.0);
        for i in 0..n {
            out[i * n + i] = 2.0;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItoReport {
    /// Forward difference of `∫ψ d(Y_k ⊗ m)` per step.
    pub lhs: Vec<f64>,
    /// `∫ [ψ_x·b + tr(η η^T ψ_xx)/2] d(Y_k ⊗ m)` per step.
    pub rhs: Vec<f64>,
    pub sup_discrepancy: f64,
    /// Least-squares slope of `∫ψ d(Y_k ⊗ m)` against time.
    pub fitted_slope: f64,
    pub mean_rhs: f64,
}

/// Compare both sides of the Itô formula for `∫ψ dμ` along `y` driven by `drift` and `eta`.
pub fn ito_check(
    psi: &dyn TestFunction,
    y: &FieldProcess,
    drift: &FieldProcess,
    eta: &[f64],
    weights: &[f64],
    dt: f64,
) -> Result<ItoReport> {
    if drift.len() + 1 != y.len() {
        return Err(Error::Shape(
            "drift must have one node less than the path".into(),
        ));
    }
    let n = y.nodes[0].dim;
    let pw: Vec<f64> = {
        let k = y.nodes[0].scenarios;
        weights
            .iter()
            .flat_map(|w| std::iter::repeat_n(w / k as f64, k))
            .collect()
    };
    let integral = |f: &RandomField| -> f64 {
        pw.iter()
            .enumerate()
            .map(|(i, w)| w * psi.value(&f.values[i * n..(i + 1) * n]))
            .sum()
    };
    let levels: Vec<f64> = y.nodes.par_iter().map(integral).collect();
    let lhs: Vec<f64> = levels.windows(2).map(|p| (p[1] - p[0]) / dt).collect();
    let rhs: Vec<f64> = (0..drift.len())
        .into_par_iter()
        .map(|k| {
            let mut g = vec![0.0; n];
            let mut h = vec![0.0; n * n];
            let mut acc = 0.0;
            for (i, w) in pw.iter().enumerate() {
                let x = &y.nodes[k].values[i * n..(i + 1) * n];
                psi.grad(x, &mut g);
                psi.hess(x, &mut h);
                acc += w
                    * (dot(&g, &drift.nodes[k].values[i * n..(i + 1) * n])
                        + 0.5 * eta_trace(eta, &h, n));
            }
            acc
        })
        .collect();
    let sup_discrepancy = lhs
        .iter()
        .zip(&rhs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let times: Vec<f64> = (0..levels.len()).map(|k| k as f64 * dt).collect();
    let tm = times.iter().sum::<f64>() / times.len() as f64;
    let lm = levels.iter().sum::<f64>() / levels.len() as f64;
    let cov: f64 = times
        .iter()
        .zip(&levels)
        .map(|(t, l)| (t - tm) * (l - lm))
        .sum();
    let var: f64 = times.iter().map(|t| (t - tm).powi(2)).sum();
    let mean_rhs = rhs.iter().sum::<f64>() / rhs.len() as f64;
    Ok(ItoReport {
        lhs,
        rhs,
        sup_discrepancy,
        fitted_slope: cov / var,
        mean_rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{brownian_paths, TimeGrid};
    use crate::fbsde::simulate_forward;
    use crate::model::StandardModel;

    fn template(name: &str, atoms: &[f64], k: usize, steps: usize, eta: f64) -> ControlProblem {
        let model = Arc::new(StandardModel::builtin(name, 1).unwrap());
        let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
        let x0 = RandomField::from_atoms(atoms, 1, k).unwrap();
        ControlProblem::new(
            model,
            vec![eta],
            grid,
            x0,
            brownian_paths(&grid, 9, k, 1).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_cost_bellman_is_zero() {
        let p = template("zero_cost", &[0.3, -0.5], 8, 20, 0.3);
        let r = bellman_residual(&p, 0.25, &SolverConfig::default(), 0, 0).unwrap();
        assert!(r.residual.abs() < 1e-12);
        assert!(r.terminal_identity <= 1e-10);
    }

    #[test]
    fn ito_linear_constant_drift() {
        let p = template("zero_cost", &[0.3, -0.5], 8, 10, 0.0);
        let c = FieldProcess::constant(
            &RandomField::from_values(2, 8, 1, vec![0.4; 16], 0).unwrap(),
            10,
        );
        let y = simulate_forward(&p, &c).unwrap();
        let r = ito_check(&LinearTest, &y, &c, &p.eta, &p.atom_weights, p.grid.dt()).unwrap();
        assert!(r.sup_discrepancy < 1e-12);
        assert!((r.mean_rhs - 0.4).abs() < 1e-12);
    }

    #[test]
    fn eta_trace_matches_definition() {
        let eta = [1.0, 2.0, 0.0, 1.0];
        let a = [2.0, 0.5, 0.5, 1.0];
        // η^T A η = [[2, 4.5], [4.5, 11]]
        assert!((eta_trace(&eta, &a, 2) - 13.0).abs() < 1e-12);
    }
}
