//! Linear functional derivatives in the measure argument: the value derivative
//! `dV/dν` along tagged probe paths, the flows `dY/dν`, `dZ/dν` and their
//! gradients in the base point.
//!
//! A probe at `x` is a single atom started at `x` that optimizes against the
//! frozen measure flow of the base solution with costs `l + dF/dν(μ_s)`. Its
//! law over the scenarios is the source cloud of the `dν` system on the base
//! ensemble.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense::{inverse, matvec, matvec_add, matvec_t_add};
use crate::ensemble::{hm_inner_weighted, FieldProcess, RandomField};
use crate::error::{Error, Result};
use crate::fbsde::{solve_tagged, solve_with, OptimalQuadruple};
use crate::jacobian::{
    linear_flow, matrix_jacobian_with, FlowCoefficients, FlowInput, JacobianFlowSolution,
    MatrixJacobian,
};
use crate::model::{delta1_margin, search_delta1, ControlProblem, Stage};

/// Largest admissible `δ₁` for the base problem, or the refusal.
pub fn delta1_gate(problem: &ControlProblem) -> Result<f64> {
    let k = problem.model.constants();
    let horizon = problem.grid.horizon();
    search_delta1(&k, horizon).ok_or(Error::DeltaCondition(delta1_margin(&k, horizon, 0.0)))
}

/// Single-atom problem started at `x` with the base noise.
pub fn probe_problem(base: &ControlProblem, x: &[f64]) -> Result<ControlProblem> {
    let x0 = RandomField::from_atoms(x, base.dim(), base.scenarios())?;
    ControlProblem::new(
        base.model.clone(),
        base.eta.clone(),
        base.grid,
        x0,
        base.noise.clone(),
    )
}

/// Tagged optimal path from `x` in the base measure flow.
pub fn solve_probe(base: &OptimalQuadruple, x: &[f64]) -> Result<OptimalQuadruple> {
    let problem = probe_problem(&base.problem, x)?;
    solve_tagged(&problem, &base.config, base.measures.clone(), None)?.require_converged()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueLfd {
    pub x: Vec<f64>,
    /// Expected tagged cost; `dV/dν(m, t0)(x)` with the representative constant.
    pub raw: f64,
    /// `raw - ∫ dV/dν dm`.
    pub normalized: f64,
    /// `D_x dV/dν(m, t0)(x) = Z_{txm}(t0)`.
    pub grad: Vec<f64>,
}

/// `∫ dV/dν dm`: the base ensemble optimizing against its own frozen flow.
pub fn mean_value_lfd(base: &OptimalQuadruple) -> Result<f64> {
    Ok(solve_tagged(
        &base.problem,
        &base.config,
        base.measures.clone(),
        Some(&base.u),
    )?
    .require_converged()?
    .value)
}

fn node0_mean(f: &RandomField) -> Vec<f64> {
    let n = f.dim;
    let mut out = vec![0.0; n];
    for s in 0..f.scenarios {
        for i in 0..n {
            out[i] += f.values[s * n + i] / f.scenarios as f64;
        }
    }
    out
}

pub fn value_lfd_at(base: &OptimalQuadruple, x: &[f64], mean: f64) -> Result<ValueLfd> {
    let probe = solve_probe(base, x)?;
    Ok(ValueLfd {
        x: x.to_vec(),
        raw: probe.value,
        normalized: probe.value - mean,
        grad: node0_mean(&probe.z.nodes[0]),
    })
}

/// Solve the base problem and evaluate `dV/dν` at `x`.
pub fn value_lfd(problem: &ControlProblem, x: &[f64]) -> Result<ValueLfd> {
    let base = solve_with(problem, &Default::default(), None)?.require_converged()?;
    let mean = mean_value_lfd(&base)?;
    value_lfd_at(&base, x, mean)
}

/// Weighted point cloud per node entering the `dν` sources.
#[derive(Clone, Debug)]
pub struct SourceCloud {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl SourceCloud {
    pub fn from_quad(quad: &OptimalQuadruple) -> Self {
        Self {
            points: quad.y.nodes.iter().map(|f| f.values.clone()).collect(),
            weights: quad.problem.point_weights(),
        }
    }
}

/// `dY/dν`, `dZ/dν`, `du/dν` at one probe, optionally with their base-point gradients.
#[derive(Clone, Debug)]
pub struct LfdSolution {
    pub probe: Option<Vec<f64>>,
    pub flow: JacobianFlowSolution,
    pub grad: Option<GradLfd>,
}

/// `D_ξ dY/dν`, `D_ξ dZ/dν` as `n x n` fields; entry `i * n + j` is component `i` along `ξ_j`.
#[derive(Clone, Debug)]
pub struct GradLfd {
    pub dy: FieldProcess,
    pub dz: FieldProcess,
    pub columns: Vec<JacobianFlowSolution>,
}

/// Base solution with what every probe reuses.
pub struct LfdBase {
    pub quad: Arc<OptimalQuadruple>,
    pub coef: FlowCoefficients,
    pub delta1: f64,
    matrix: Option<MatrixJacobian>,
}

impl LfdBase {
    pub fn new(quad: Arc<OptimalQuadruple>) -> Result<Self> {
        if quad.frozen {
            return Err(Error::Invalid(
                "dν flows need a self-consistent base solution".into(),
            ));
        }
        let delta1 = delta1_gate(&quad.problem)?;
        let coef = FlowCoefficients::new(&quad)?;
        Ok(Self {
            quad,
            coef,
            delta1,
            matrix: None,
        })
    }

    /// Matrix Jacobian of the base path with the measure fixed.
    pub fn matrix(&mut self) -> Result<&MatrixJacobian> {
        if self.matrix.is_none() {
            self.matrix = Some(matrix_jacobian_with(&self.quad, &self.coef)?);
        }
        Ok(self.matrix.as_ref().unwrap())
    }

    pub fn matrix_ref(&self) -> Option<&MatrixJacobian> {
        self.matrix.as_ref()
    }
}

fn stage_at(step: usize, steps: usize) -> Stage {
    if step < steps {
        Stage::Running
    } else {
        Stage::Terminal
    }
}

/// `dν` flow with sources against `cloud`.
pub fn solve_lfd_flow(base: &LfdBase, cloud: &SourceCloud) -> Result<JacobianFlowSolution> {
    let quad = &base.quad;
    let model = quad.problem.model.as_ref();
    let steps = quad.problem.grid.steps;
    if cloud.points.len() != steps + 1 {
        return Err(Error::Shape("source cloud must cover every node".into()));
    }
    let x0 = &quad.problem.x0;
    let driver: Vec<RandomField> = (0..=steps)
        .into_par_iter()
        .map(|k| {
            let mut f = RandomField::zeros(x0.atoms, x0.scenarios, x0.dim, k.min(steps));
            model.mf_second_grad_mean(
                stage_at(k, steps),
                &quad.measures.measure(k),
                &quad.y.nodes[k].values,
                &cloud.points[k],
                &cloud.weights,
                &mut f.values,
            );
            f
        })
        .collect();
    linear_flow(
        quad,
        &base.coef,
        FlowInput {
            pooled: true,
            driver: Some(&driver),
            ..Default::default()
        },
    )
}

/// `dν` flow for the probe at `x`, solving the tagged path first.
pub fn solve_lfd_at(base: &LfdBase, x: &[f64]) -> Result<(OptimalQuadruple, LfdSolution)> {
    let probe = solve_probe(&base.quad, x)?;
    let flow = solve_lfd_flow(base, &SourceCloud::from_quad(&probe))?;
    Ok((
        probe,
        LfdSolution {
            probe: Some(x.to_vec()),
            flow,
            grad: None,
        },
    ))
}

/// Gradient in the base point of a `dν` flow.
pub fn solve_grad_lfd_flow(
    base: &LfdBase,
    lfd: &JacobianFlowSolution,
    cloud: &SourceCloud,
) -> Result<GradLfd> {
    let quad = &base.quad;
    let model = quad.problem.model.as_ref();
    if !model.has_third_order() {
        return Err(Error::MissingThirdOrder);
    }
    let matrix = base
        .matrix_ref()
        .ok_or_else(|| Error::Invalid("matrix Jacobian not computed".into()))?;
    let steps = quad.problem.grid.steps;
    let x0 = &quad.problem.x0;
    let (m, k, n) = (x0.atoms, x0.scenarios, x0.dim);
    let nn = n * n;
    let columns = matrix
        .columns
        .iter()
        .map(|col| {
            let driver: Vec<RandomField> = (0..=steps)
                .into_par_iter()
                .map(|step| {
                    let stage = stage_at(step, steps);
                    let mu = quad.measures.measure(step);
                    let y = &quad.y.nodes[step].values;
                    let g = &col.dy.nodes[step].values;
                    let a = &lfd.dy.nodes[step].values;
                    let mut f = RandomField::zeros(m, k, n, step);
                    let mut mat = vec![0.0; nn];
                    let mut tmp = vec![0.0; nn];
                    for p in 0..m * k {
                        let r = p * n..(p + 1) * n;
                        let out = &mut f.values[r.clone()];
                        if step < steps {
                            let v = &quad.u.nodes[step].values[r.clone()];
                            let w = &col.du.nodes[step].values[r.clone()];
                            model.l_xx_dir(&y[r.clone()], v, &g[r.clone()], w, &mut mat);
                            model.mf_hess_dir(stage, &mu, &y[r.clone()], &g[r.clone()], &mut tmp);
                            mat.iter_mut().zip(&tmp).for_each(|(p, q)| *p += q);
                            matvec(n, &mat, &a[r.clone()], out);
                            model.l_xv_dir(&y[r.clone()], v, &g[r.clone()], w, &mut mat);
                            matvec_add(n, &mat, &lfd.du.nodes[step].values[r.clone()], out);
                        } else {
                            model.h_xx_dir(&y[r.clone()], &g[r.clone()], &mut mat);
                            model.mf_hess_dir(stage, &mu, &y[r.clone()], &g[r.clone()], &mut tmp);
                            mat.iter_mut().zip(&tmp).for_each(|(p, q)| *p += q);
                            matvec(n, &mat, &a[r.clone()], out);
                        }
                    }
                    let mut extra = vec![0.0; m * k * n];
                    model.mf_pooled_dir(stage, &mu, y, g, a, &mut extra);
                    f.values.iter_mut().zip(&extra).for_each(|(p, q)| *p += q);
                    model.mf_second_hess_mean(
                        stage,
                        &mu,
                        y,
                        g,
                        &cloud.points[step],
                        &cloud.weights,
                        &mut extra,
                    );
                    f.values.iter_mut().zip(&extra).for_each(|(p, q)| *p += q);
                    f
                })
                .collect();
            let control: Vec<RandomField> = (0..steps)
                .into_par_iter()
                .map(|step| {
                    let mut f = RandomField::zeros(m, k, n, step);
                    let y = &quad.y.nodes[step].values;
                    let u = &quad.u.nodes[step].values;
                    let mut lvv = vec![0.0; nn];
                    let mut dlvv = vec![0.0; nn];
                    let mut lxv = vec![0.0; nn];
                    let mut dlxv = vec![0.0; nn];
                    let mut rhs = vec![0.0; n];
                    let mut t1 = vec![0.0; n];
                    for p in 0..m * k {
                        let r = p * n..(p + 1) * n;
                        let (x, v) = (&y[r.clone()], &u[r.clone()]);
                        let (g, w) = (
                            &col.dy.nodes[step].values[r.clone()],
                            &col.du.nodes[step].values[r.clone()],
                        );
                        let (a, zp) = (
                            &lfd.dy.nodes[step].values[r.clone()],
                            &lfd.dz_plus.nodes[step].values[r.clone()],
                        );
                        model.l_vv(x, v, &mut lvv);
                        model.l_vv_dir(x, v, g, w, &mut dlvv);
                        model.l_xv(x, v, &mut lxv);
                        model.l_xv_dir(x, v, g, w, &mut dlxv);
                        let Ok(inv) = inverse(n, &lvv) else { continue };
                        // L^{-1} DL L^{-1} (l_vx a + zp) - L^{-1} (D l_xv)^T a
                        rhs.copy_from_slice(zp);
                        matvec_t_add(n, &lxv, a, &mut rhs);
                        matvec(n, &inv, &rhs, &mut t1);
                        matvec(n, &dlvv, &t1, &mut rhs);
                        t1.fill(0.0);
                        matvec_t_add(n, &dlxv, a, &mut t1);
                        rhs.iter_mut().zip(&t1).for_each(|(p, q)| *p -= q);
                        matvec(n, &inv, &rhs, &mut f.values[r]);
                    }
                    f
                })
                .collect();
            let regression: Vec<RandomField> = (0..steps)
                .into_par_iter()
                .map(|step| {
                    let mut f = RandomField::zeros(m, k, n, step);
                    let block = k * n;
                    for atom in 0..m {
                        let r = atom * block..(atom + 1) * block;
                        let out = quad.fits[step][atom].second(
                            &quad.y.nodes[step].values[r.clone()],
                            &lfd.dp.nodes[step + 1].values[r.clone()],
                            &lfd.dy.nodes[step].values[r.clone()],
                            &col.dp.nodes[step + 1].values[r.clone()],
                            &col.dy.nodes[step].values[r.clone()],
                        );
                        f.values[r].copy_from_slice(&out);
                    }
                    f
                })
                .collect();
            linear_flow(
                quad,
                &base.coef,
                FlowInput {
                    driver: Some(&driver),
                    control: Some(&control),
                    regression: Some(&regression),
                    ..Default::default()
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let interleave = |pick: &dyn Fn(&JacobianFlowSolution) -> &FieldProcess| {
        let len = pick(&columns[0]).len();
        let nodes = (0..len)
            .map(|step| {
                let mut f = RandomField::zeros(m, k, nn, step);
                for (j, c) in columns.iter().enumerate() {
                    let src = &pick(c).nodes[step].values;
                    for p in 0..m * k {
                        for i in 0..n {
                            f.values[(p * n + i) * n + j] = src[p * n + i];
                        }
                    }
                }
                f
            })
            .collect();
        FieldProcess { nodes }
    };
    Ok(GradLfd {
        dy: interleave(&|c| &c.dy),
        dz: interleave(&|c| &c.dz),
        columns,
    })
}

/// `sup_s (‖dY/dν(s)‖² + ‖dZ/dν(s)‖²)` in H_m, the quantity bounded by `C (1 + |x|²)`.
pub fn l2_size(quad: &OptimalQuadruple, dy: &FieldProcess, dz: &FieldProcess) -> Result<f64> {
    let w = &quad.problem.atom_weights;
    let mut worst: f64 = 0.0;
    for step in 0..dy.len() {
        let a = hm_inner_weighted(&dy.nodes[step], &dy.nodes[step], w)?;
        let b = hm_inner_weighted(&dz.nodes[step], &dz.nodes[step], w)?;
        worst = worst.max(a + b);
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LfdBounds {
    pub probes: Vec<Vec<f64>>,
    /// `l2_size` of the `dν` flow per probe.
    pub flow_sizes: Vec<f64>,
    /// `l2_size` of its base-point gradient per probe, when third derivatives exist.
    pub grad_sizes: Option<Vec<f64>>,
    /// Smallest `C` with `flow size ≤ C (1 + |x|²)` over the probes.
    pub flow_constant: f64,
    pub grad_constant: Option<f64>,
}

/// Fitted constants of the quadratic-growth bounds of the `dν` flows and their gradients.
pub fn lfd_bounds(base: &mut LfdBase, probes: &[Vec<f64>]) -> Result<LfdBounds> {
    let third = base.quad.problem.model.has_third_order();
    if third {
        base.matrix()?;
    }
    let base = &*base;
    let mut flow_sizes = Vec::with_capacity(probes.len());
    let mut grad_sizes = Vec::with_capacity(probes.len());
    for x in probes {
        let probe = solve_probe(&base.quad, x)?;
        let cloud = SourceCloud::from_quad(&probe);
        let flow = solve_lfd_flow(base, &cloud)?;
        flow_sizes.push(l2_size(&base.quad, &flow.dy, &flow.dz)?);
        if third {
            let grad = solve_grad_lfd_flow(base, &flow, &cloud)?;
            grad_sizes.push(l2_size(&base.quad, &grad.dy, &grad.dz)?);
        }
    }
    let fit = |sizes: &[f64]| {
        sizes
            .iter()
            .zip(probes)
            .map(|(v, x)| v / (1.0 + x.iter().map(|a| a * a).sum::<f64>()))
            .fold(0.0, f64::max)
    };
    let flow_constant = fit(&flow_sizes);
    let (grad_sizes, grad_constant) = if third {
        let c = fit(&grad_sizes);
        (Some(grad_sizes), Some(c))
    } else {
        (None, None)
    };
    Ok(LfdBounds {
        probes: probes.to_vec(),
        flow_sizes,
        grad_sizes,
        flow_constant,
        grad_constant,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurePerturbation {
    pub x: Vec<f64>,
    pub eps: Vec<f64>,
    /// `(V((1-ε)m + εδ_x) - V(m)) / ε` per `ε`.
    pub quotients: Vec<f64>,
    /// Linear extrapolation of the quotients to `ε = 0`.
    pub extrapolated: f64,
    /// Normalized `dV/dν(m)(x)`.
    pub lfd: f64,
}

/// Reweighted re-solves against the normalized value derivative.
pub fn measure_perturbation_check(
    base: &OptimalQuadruple,
    x: &[f64],
    eps: [f64; 2],
) -> Result<MeasurePerturbation> {
    let problem = &base.problem;
    let (m, k, n) = (problem.atoms(), problem.scenarios(), problem.dim());
    let mut pts: Vec<f64> = (0..m).flat_map(|a| problem.x0.at(a, 0).to_vec()).collect();
    pts.extend_from_slice(x);
    let x0 = RandomField::from_atoms(&pts, n, k)?;
    let with = |e: f64| -> Result<f64> {
        let mut w: Vec<f64> = problem.atom_weights.iter().map(|a| (1.0 - e) * a).collect();
        w.push(e);
        let p = ControlProblem::new(
            problem.model.clone(),
            problem.eta.clone(),
            problem.grid,
            x0.clone(),
            problem.noise.clone(),
        )?
        .with_atom_weights(w)?;
        Ok(solve_with(&p, &base.config, None)?
            .require_converged()?
            .value)
    };
    let v0 = with(0.0)?;
    let quotients = eps
        .iter()
        .map(|&e| Ok((with(e)? - v0) / e))
        .collect::<Result<Vec<_>>>()?;
    let (e1, e2) = (eps[0], eps[1]);
    let extrapolated = (quotients[1] * e1 - quotients[0] * e2) / (e1 - e2);
    let mean = mean_value_lfd(base)?;
    let lfd = value_lfd_at(base, x, mean)?.normalized;
    Ok(MeasurePerturbation {
        x: x.to_vec(),
        eps: eps.to_vec(),
        quotients,
        extrapolated,
        lfd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{brownian_paths, TimeGrid};
    use crate::fbsde::{solve_optimal, Method};
    use crate::model::StandardModel;

    fn base(name: &str, atoms: &[f64], k: usize, steps: usize) -> OptimalQuadruple {
        let model = Arc::new(StandardModel::builtin(name, 1).unwrap());
        let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
        let x0 = RandomField::from_atoms(atoms, 1, k).unwrap();
        let noise = brownian_paths(&grid, 3, k, 1).unwrap();
        let p = ControlProblem::new(model, vec![0.3], grid, x0, noise).unwrap();
        solve_optimal(&p, Method::PicardFeedback).unwrap()
    }

    #[test]
    fn no_second_derivative_means_no_flow() {
        let q = base("lq_scalar", &[0.1, 0.7, -0.4], 16, 10);
        let b = LfdBase::new(Arc::new(q)).unwrap();
        let (_, sol) = solve_lfd_at(&b, &[1.0]).unwrap();
        assert_eq!(sol.flow.dy.sup_norm(), 0.0);
        assert_eq!(sol.flow.dz.sup_norm(), 0.0);
    }

    #[test]
    fn probe_from_an_atom_matches_base_gradient() {
        let q = base("mean_interaction", &[0.1, 0.7, -0.4], 1, 20);
        // deterministic: the tagged path from an atom is that atom's path
        let probe = solve_probe(&q, &[0.7]).unwrap();
        for step in 0..=20 {
            assert!((probe.y.nodes[step].values[0] - q.y.nodes[step].values[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn delta1_refusal() {
        let model = Arc::new(StandardModel::new(
            "steep",
            1,
            crate::model::StandardParams {
                r: 1.0,
                s: 10.0,
                ..Default::default()
            },
        ));
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let x0 = RandomField::from_atoms(&[0.0], 1, 2).unwrap();
        let p = ControlProblem::new(
            model,
            vec![0.0],
            grid,
            x0,
            brownian_paths(&grid, 1, 2, 1).unwrap(),
        )
        .unwrap();
        assert!(matches!(delta1_gate(&p), Err(Error::DeltaCondition(_))));
    }
}
