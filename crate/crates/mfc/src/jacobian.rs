//! Linear flows along a solved optimality system: directional and matrix
//! Jacobians, the second derivative of the value and finite-difference checks.
//!
//! Every flow here is an instance of one frozen-coefficient linear system,
//! solved by damped Picard iteration on the control increment:
//!
//! ```text
//! δY_{k+1} = δY_k + δu_k dt
//! δp_N     = H_T δY_N + pool_T(δY_N) + s_N
//! δp_k     = δp_{k+1} + dt [H_x δY_k + l_xv δu_k + pool(δY_k) + s_k]
//! δZ⁺_k    = tangent of Ê_k along (δp_{k+1}, δY_k) + ρ_k
//! δu_k     = ∂_y u δY_k + ∂_z u δZ⁺_k + κ_k
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense::{matvec, matvec_add};
use crate::ensemble::{hm_inner_weighted, FieldProcess, RandomField};
use crate::error::{Error, Result};
use crate::fbsde::{solve_with, sup_weighted_norm, OptimalQuadruple, SolverConfig};
use crate::hamiltonian::jacobians_at;
use crate::model::{ControlProblem, Stage};

pub const FLOW_DAMPING: f64 = 0.5;
pub const FLOW_MAX_ITERS: usize = 200;
pub const FLOW_TOL: f64 = 1e-8;

/// Coefficients of the linearized system, per node and point, row-major `n x n`.
#[derive(Clone, Debug)]
pub struct FlowCoefficients {
    pub hx: Vec<Vec<f64>>,
    pub lxv: Vec<Vec<f64>>,
    pub uy: Vec<Vec<f64>>,
    pub uz: Vec<Vec<f64>>,
    pub ht: Vec<f64>,
}

impl FlowCoefficients {
    pub fn new(quad: &OptimalQuadruple) -> Result<Self> {
        let model = quad.problem.model.as_ref();
        let n = quad.problem.dim();
        let nn = n * n;
        let steps = quad.problem.grid.steps;
        // without costs the control does not respond
        let trivial = model.is_trivial();
        let mut hx = Vec::with_capacity(steps);
        let mut lxv = Vec::with_capacity(steps);
        let mut uy = Vec::with_capacity(steps);
        let mut uz = Vec::with_capacity(steps);
        for k in 0..steps {
            let mu = quad.measures.measure(k);
            let y = &quad.y.nodes[k].values;
            let u = &quad.u.nodes[k].values;
            let pts = y.len() / n;
            let rows: Vec<[Vec<f64>; 4]> = (0..pts)
                .into_par_iter()
                .map(|i| {
                    let (x, v) = (&y[i * n..(i + 1) * n], &u[i * n..(i + 1) * n]);
                    let mut a = vec![0.0; nn];
                    let mut b = vec![0.0; nn];
                    let mut c = vec![0.0; nn];
                    model.l_xx(x, v, &mut a);
                    model.mf_hess(Stage::Running, &mu, x, &mut c);
                    a.iter_mut().zip(&c).for_each(|(p, q)| *p += q);
                    model.l_xv(x, v, &mut b);
                    let (jy, jz) = if trivial {
                        (vec![0.0; nn], vec![0.0; nn])
                    } else {
                        jacobians_at(model, x, v)?
                    };
                    Ok([a, b, jy, jz])
                })
                .collect::<Result<_>>()?;
            let mut blocks = [
                vec![0.0; pts * nn],
                vec![0.0; pts * nn],
                vec![0.0; pts * nn],
                vec![0.0; pts * nn],
            ];
            for (i, r) in rows.into_iter().enumerate() {
                for (dst, src) in blocks.iter_mut().zip(r.iter()) {
                    dst[i * nn..(i + 1) * nn].copy_from_slice(src);
                }
            }
            let [a, b, c, d] = blocks;
            hx.push(a);
            lxv.push(b);
            uy.push(c);
            uz.push(d);
        }
        let mu = quad.measures.measure(steps);
        let y = &quad.y.nodes[steps].values;
        let pts = y.len() / n;
        let mut ht = vec![0.0; pts * nn];
        ht.par_chunks_mut(nn).enumerate().for_each(|(i, out)| {
            let x = &y[i * n..(i + 1) * n];
            let mut c = vec![0.0; nn];
            model.h_xx(x, out);
            model.mf_hess(Stage::Terminal, &mu, x, &mut c);
            out.iter_mut().zip(&c).for_each(|(p, q)| *p += q);
        });
        Ok(Self {
            hx,
            lxv,
            uy,
            uz,
            ht,
        })
    }
}

/// Data of one linear flow solve.
#[derive(Clone, Copy, Default)]
pub struct FlowInput<'a> {
    /// `δY_0`; zero when absent.
    pub init: Option<&'a RandomField>,
    /// Include the kernel coupling against the ensemble's own increment.
    pub pooled: bool,
    /// Extra adjoint driver on nodes `0..=N`.
    pub driver: Option<&'a [RandomField]>,
    /// Extra control term `κ` on nodes `0..N`.
    pub control: Option<&'a [RandomField]>,
    /// Extra regression term `ρ` on nodes `0..N`.
    pub regression: Option<&'a [RandomField]>,
}

/// Solution of a linear flow along an optimal quadruple.
#[derive(Clone, Debug)]
pub struct JacobianFlowSolution {
    pub dy: FieldProcess,
    pub dz: FieldProcess,
    pub dz_plus: FieldProcess,
    pub du: FieldProcess,
    pub dp: FieldProcess,
    /// `n x n` per point; entry `i * n + j` is component `i` of `Dr_j`.
    pub dr: FieldProcess,
    pub psi: Option<RandomField>,
    pub iterations: usize,
    pub residual: f64,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Solve the linear system described by `input` along `quad`.
pub fn linear_flow(
    quad: &OptimalQuadruple,
    coef: &FlowCoefficients,
    input: FlowInput,
) -> Result<JacobianFlowSolution> {
    if input.pooled && quad.frozen {
        return Err(Error::Invalid(
            "a frozen quadruple has no pooled coupling".into(),
        ));
    }
    let problem = &quad.problem;
    let model = problem.model.as_ref();
    let x0 = &problem.x0;
    let (m, k, n) = (x0.atoms, x0.scenarios, x0.dim);
    let nn = n * n;
    let steps = problem.grid.steps;
    let dt = problem.grid.dt();
    let block = k * n;
    let weights = &problem.atom_weights;

    let init = match input.init {
        Some(f) => {
            if !f.same_shape(x0) {
                return Err(Error::Shape(
                    "flow initial data must match the initial field".into(),
                ));
            }
            let mut f = f.clone();
            f.adapted_to = 0;
            f
        }
        None => RandomField::zeros(m, k, n, 0),
    };

    let mut du = FieldProcess::zeros(steps, m, k, n);
    let mut iterations = 0;
    let mut residual;
    loop {
        // forward
        let mut dy = Vec::with_capacity(steps + 1);
        dy.push(init.clone());
        for step in 0..steps {
            let mut next = dy[step].axpy(dt, &du.nodes[step])?;
            next.adapted_to = step + 1;
            dy.push(next);
        }
        // mean-field coupling of the increment
        let pools: Vec<Option<Vec<f64>>> = (0..=steps)
            .into_par_iter()
            .map(|step| {
                if !input.pooled {
                    return None;
                }
                let stage = if step < steps {
                    Stage::Running
                } else {
                    Stage::Terminal
                };
                let mut out = vec![0.0; m * block];
                model.mf_pooled(
                    stage,
                    &quad.measures.measure(step),
                    &quad.y.nodes[step].values,
                    &dy[step].values,
                    &mut out,
                );
                Some(out)
            })
            .collect();

        // backward, independent per atom
        let per_atom: Vec<AtomBackward> = (0..m)
            .into_par_iter()
            .map(|a| {
                let range = a * block..(a + 1) * block;
                let mut dp = vec![vec![0.0; block]; steps + 1];
                let mut dz = vec![vec![0.0; block]; steps + 1];
                let mut dzp = vec![vec![0.0; block]; steps];
                let mut target = vec![vec![0.0; block]; steps];
                {
                    let yk = &dy[steps].values[range.clone()];
                    let out = &mut dp[steps];
                    for s in 0..k {
                        let o = s * n;
                        let c =
                            &coef.ht[(range.start / n + s) * nn..(range.start / n + s + 1) * nn];
                        matvec(n, c, &yk[o..o + n], &mut out[o..o + n]);
                    }
                    if let Some(p) = &pools[steps] {
                        add_into(out, &p[range.clone()]);
                    }
                    if let Some(d) = input.driver {
                        add_into(out, &d[steps].values[range.clone()]);
                    }
                    dz[steps] = out.clone();
                }
                for step in (0..steps).rev() {
                    let yk = &dy[step].values[range.clone()];
                    let uk = &du.nodes[step].values[range.clone()];
                    let mut drv = vec![0.0; block];
                    for s in 0..k {
                        let o = s * n;
                        let pt = range.start / n + s;
                        let c = pt * nn..(pt + 1) * nn;
                        matvec(
                            n,
                            &coef.hx[step][c.clone()],
                            &yk[o..o + n],
                            &mut drv[o..o + n],
                        );
                        matvec_add(n, &coef.lxv[step][c], &uk[o..o + n], &mut drv[o..o + n]);
                    }
                    if let Some(p) = &pools[step] {
                        add_into(&mut drv, &p[range.clone()]);
                    }
                    if let Some(d) = input.driver {
                        add_into(&mut drv, &d[step].values[range.clone()]);
                    }
                    let inputs = &quad.y.nodes[step].values[range.clone()];
                    let mut zp = quad.fits[step][a].tangent(inputs, &dp[step + 1], yk);
                    if let Some(r) = input.regression {
                        add_into(&mut zp, &r[step].values[range.clone()]);
                    }
                    let mut tgt = vec![0.0; block];
                    for s in 0..k {
                        let o = s * n;
                        let pt = range.start / n + s;
                        let c = pt * nn..(pt + 1) * nn;
                        matvec(
                            n,
                            &coef.uy[step][c.clone()],
                            &yk[o..o + n],
                            &mut tgt[o..o + n],
                        );
                        matvec_add(n, &coef.uz[step][c], &zp[o..o + n], &mut tgt[o..o + n]);
                    }
                    if let Some(c) = input.control {
                        add_into(&mut tgt, &c[step].values[range.clone()]);
                    }
                    let mut pk = dp[step + 1].clone();
                    let mut zk = zp.clone();
                    for j in 0..block {
                        pk[j] += dt * drv[j];
                        zk[j] += dt * drv[j];
                    }
                    dp[step] = pk;
                    dz[step] = zk;
                    dzp[step] = zp;
                    target[step] = tgt;
                }
                AtomBackward {
                    dp,
                    dz,
                    dzp,
                    target,
                }
            })
            .collect();

        let assemble = |pick: &dyn Fn(&AtomBackward) -> &Vec<Vec<f64>>,
                        len: usize,
                        adapt: &dyn Fn(usize) -> usize| {
            let nodes = (0..len)
                .map(|step| {
                    let mut f = RandomField::zeros(m, k, n, adapt(step));
                    for (a, ab) in per_atom.iter().enumerate() {
                        f.values[a * block..(a + 1) * block].copy_from_slice(&pick(ab)[step]);
                    }
                    f
                })
                .collect();
            FieldProcess { nodes }
        };
        let target = assemble(&|a| &a.target, steps, &|s| s);
        let change = target.axpy(-1.0, &du)?;
        residual = sup_weighted_norm(&change, weights);
        let scale = sup_weighted_norm(&target, weights);
        if residual <= FLOW_TOL * (1.0 + scale)
            || iterations >= FLOW_MAX_ITERS
            || !residual.is_finite()
        {
            if residual > FLOW_TOL * (1.0 + scale) {
                return Err(Error::NotConverged {
                    what: "linear flow",
                    iterations,
                    residual,
                });
            }
            let dp = assemble(&|a| &a.dp, steps + 1, &|_| steps);
            let dz = assemble(&|a| &a.dz, steps + 1, &|s| s);
            let dz_plus = assemble(&|a| &a.dzp, steps, &|s| s);
            let dy = FieldProcess { nodes: dy };
            let dr = flow_integrands(quad, &dy, &dp);
            return Ok(JacobianFlowSolution {
                dy,
                dz,
                dz_plus,
                du,
                dp,
                dr,
                psi: input.init.cloned(),
                iterations,
                residual,
            });
        }
        du = du.axpy(FLOW_DAMPING, &change)?;
        iterations += 1;
    }
}

struct AtomBackward {
    dp: Vec<Vec<f64>>,
    dz: Vec<Vec<f64>>,
    dzp: Vec<Vec<f64>>,
    target: Vec<Vec<f64>>,
}

/// Projection of `δp_{k+1} ΔW_{k,j} / dt` on the frozen regression bases.
fn flow_integrands(quad: &OptimalQuadruple, dy: &FieldProcess, dp: &FieldProcess) -> FieldProcess {
    let problem = &quad.problem;
    let x0 = &problem.x0;
    let (m, k, n) = (x0.atoms, x0.scenarios, x0.dim);
    let dt = problem.grid.dt();
    let nodes = (0..problem.grid.steps)
        .map(|step| {
            let dw = problem.noise.step(step);
            let blocks: Vec<Vec<f64>> = (0..m)
                .into_par_iter()
                .map(|a| {
                    let fit = &quad.fits[step][a];
                    let inputs = &quad.y.nodes[step].values[a * k * n..(a + 1) * k * n];
                    let next = &dp.nodes[step + 1].values[a * k * n..(a + 1) * k * n];
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
            let mut f = RandomField::zeros(m, k, n * n, dy.nodes[step].adapted_to.max(step));
            for (a, b) in blocks.into_iter().enumerate() {
                f.values[a * k * n * n..(a + 1) * k * n * n].copy_from_slice(&b);
            }
            f
        })
        .collect();
    FieldProcess { nodes }
}

/// Directional flow `(DY^Ψ, DZ^Ψ)` of the self-consistent system.
pub fn solve_jacobian_flow(
    quad: &OptimalQuadruple,
    psi: &RandomField,
) -> Result<JacobianFlowSolution> {
    let coef = FlowCoefficients::new(quad)?;
    linear_flow(
        quad,
        &coef,
        FlowInput {
            init: Some(psi),
            pooled: !quad.frozen,
            ..Default::default()
        },
    )
}

/// `D²_X V(Ψ) = DZ^Ψ(t0)`.
pub fn second_derivative_v(quad: &OptimalQuadruple, psi: &RandomField) -> Result<RandomField> {
    Ok(solve_jacobian_flow(quad, psi)?.dz.nodes[0].clone())
}

/// Matrix flows `D_x Y`, `D_x Z`, `D_x u` with the measure held fixed.
#[derive(Clone, Debug)]
pub struct MatrixJacobian {
    /// `n x n` per point; entry `i * n + j` is component `i` of column `j`.
    pub dy: FieldProcess,
    pub dz: FieldProcess,
    pub du: FieldProcess,
    pub columns: Vec<JacobianFlowSolution>,
}

fn interleave(cols: &[&FieldProcess], n: usize) -> FieldProcess {
    let nodes = (0..cols[0].len())
        .map(|step| {
            let base = &cols[0].nodes[step];
            let mut f = RandomField::zeros(base.atoms, base.scenarios, n * n, base.adapted_to);
            for p in 0..base.points() {
                for (j, c) in cols.iter().enumerate() {
                    for i in 0..n {
                        f.values[(p * n + i) * n + j] = c.nodes[step].values[p * n + i];
                    }
                }
            }
            f
        })
        .collect();
    FieldProcess { nodes }
}

/// Columns are flows started from the unit vectors at every point.
pub fn matrix_jacobian(quad: &OptimalQuadruple) -> Result<MatrixJacobian> {
    let coef = FlowCoefficients::new(quad)?;
    matrix_jacobian_with(quad, &coef)
}

pub fn matrix_jacobian_with(
    quad: &OptimalQuadruple,
    coef: &FlowCoefficients,
) -> Result<MatrixJacobian> {
    let x0 = &quad.problem.x0;
    let n = x0.dim;
    let columns = (0..n)
        .map(|j| {
            let mut e = RandomField::zeros(x0.atoms, x0.scenarios, n, 0);
            for p in 0..x0.points() {
                e.values[p * n + j] = 1.0;
            }
            linear_flow(
                quad,
                coef,
                FlowInput {
                    init: Some(&e),
                    ..Default::default()
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let dy = interleave(&columns.iter().map(|c| &c.dy).collect::<Vec<_>>(), n);
    let dz = interleave(&columns.iter().map(|c| &c.dz).collect::<Vec<_>>(), n);
    let du = interleave(&columns.iter().map(|c| &c.du).collect::<Vec<_>>(), n);
    Ok(MatrixJacobian {
        dy,
        dz,
        du,
        columns,
    })
}

/// Apply an `n x n` field to an `n` field pointwise.
pub fn apply_matrix(mat: &RandomField, v: &RandomField) -> Result<RandomField> {
    let n = v.dim;
    if mat.dim != n * n || mat.points() != v.points() {
        return Err(Error::Shape(
            "matrix field does not match vector field".into(),
        ));
    }
    let mut out = RandomField::zeros(v.atoms, v.scenarios, n, v.adapted_to.max(mat.adapted_to));
    for p in 0..v.points() {
        matvec(
            n,
            &mat.values[p * n * n..(p + 1) * n * n],
            &v.values[p * n..(p + 1) * n],
            &mut out.values[p * n..(p + 1) * n],
        );
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdJacobianPoint {
    pub eps: f64,
    /// Sup over nodes of the H_m distance of the difference quotients to the flow.
    pub discrepancy: f64,
    pub y_part: f64,
    pub z_part: f64,
}

/// Compare `(Y^ε - Y)/ε`, `(Z^ε - Z)/ε` with the directional flow for each `ε`.
pub fn fd_check_jacobian(
    problem: &ControlProblem,
    psi: &RandomField,
    eps: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<FdJacobianPoint>> {
    let base = solve_with(problem, cfg, None)?.require_converged()?;
    let flow = solve_jacobian_flow(&base, psi)?;
    fd_check_against(&base, &flow, psi, eps)
}

/// Same as [`fd_check_jacobian`] with a solved base and flow.
pub fn fd_check_against(
    base: &OptimalQuadruple,
    flow: &JacobianFlowSolution,
    psi: &RandomField,
    eps: &[f64],
) -> Result<Vec<FdJacobianPoint>> {
    let problem = &base.problem;
    let w = &problem.atom_weights;
    eps.iter()
        .map(|&e| {
            let x = problem.x0.axpy(e, psi)?;
            let bumped = solve_with(&problem.with_initial(x)?, &base.config, Some(&base.u))?
                .require_converged()?;
            let (mut y_part, mut z_part) = (0.0f64, 0.0f64);
            for step in 0..base.y.len() {
                let dy = bumped.y.nodes[step]
                    .axpy(-1.0, &base.y.nodes[step])?
                    .scaled(1.0 / e)
                    .axpy(-1.0, &flow.dy.nodes[step])?;
                let dz = bumped.z.nodes[step]
                    .axpy(-1.0, &base.z.nodes[step])?
                    .scaled(1.0 / e)
                    .axpy(-1.0, &flow.dz.nodes[step])?;
                y_part = y_part.max(hm_inner_weighted(&dy, &dy, w)?.sqrt());
                z_part = z_part.max(hm_inner_weighted(&dz, &dz, w)?.sqrt());
            }
            Ok(FdJacobianPoint {
                eps: e,
                discrepancy: y_part + z_part,
                y_part,
                z_part,
            })
        })
        .collect()
}

/// `l_vx DY + l_vv Du + DZ⁺` in sup-node H_m norm.
pub fn first_order_residual(quad: &OptimalQuadruple, flow: &JacobianFlowSolution) -> Result<f64> {
    let model = quad.problem.model.as_ref();
    let n = quad.problem.dim();
    let mut worst: f64 = 0.0;
    for step in 0..flow.du.len() {
        let mut r = flow.dz_plus.nodes[step].clone();
        let y = &quad.y.nodes[step].values;
        let u = &quad.u.nodes[step].values;
        r.values.par_chunks_mut(n).enumerate().for_each(|(p, out)| {
            let (x, v) = (&y[p * n..(p + 1) * n], &u[p * n..(p + 1) * n]);
            let mut lxv = vec![0.0; n * n];
            let mut lvv = vec![0.0; n * n];
            model.l_xv(x, v, &mut lxv);
            model.l_vv(x, v, &mut lvv);
            crate::dense::matvec_t_add(
                n,
                &lxv,
                &flow.dy.nodes[step].values[p * n..(p + 1) * n],
                out,
            );
            matvec_add(
                n,
                &lvv,
                &flow.du.nodes[step].values[p * n..(p + 1) * n],
                out,
            );
        });
        worst = worst.max(hm_inner_weighted(&r, &r, &quad.problem.atom_weights)?.sqrt());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{brownian_paths, TimeGrid};
    use crate::fbsde::{solve_optimal, Method};
    use crate::model::StandardModel;
    use crate::oracle::riccati_solve;
    use std::sync::Arc;

    fn lq(atoms: &[f64], k: usize, steps: usize, eta: f64) -> ControlProblem {
        let model = Arc::new(StandardModel::builtin("lq_scalar", 1).unwrap());
        let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
        let x0 = RandomField::from_atoms(atoms, 1, k).unwrap();
        let noise = brownian_paths(&grid, 5, k, 1).unwrap();
        ControlProblem::new(model, vec![eta], grid, x0, noise).unwrap()
    }

    #[test]
    fn zero_direction_gives_zero_flow() {
        let p = lq(&[0.2, -0.4, 1.0], 16, 10, 0.3);
        let q = solve_optimal(&p, Method::PicardFeedback).unwrap();
        let f = solve_jacobian_flow(&q, &RandomField::zeros(3, 16, 1, 0)).unwrap();
        assert_eq!(f.dy.sup_norm(), 0.0);
        assert_eq!(f.dz.sup_norm(), 0.0);
    }

    #[test]
    fn deterministic_lq_matrix_flow_matches_riccati() {
        let p = lq(&[0.5, -1.0], 1, 50, 0.0);
        let q = solve_optimal(&p, Method::PicardFeedback).unwrap();
        let jac = matrix_jacobian(&q).unwrap();
        let params = StandardModel::builtin("lq_scalar", 1).unwrap().p;
        let ric = riccati_solve(&params, &[0.0], &p.grid).unwrap();
        let dz0 = jac.dz.nodes[0].values[0];
        assert!(
            (dz0 - ric.p[0]).abs() / ric.p[0] < 0.02,
            "{dz0} vs {}",
            ric.p[0]
        );
        let fo = first_order_residual(&q, &jac.columns[0]).unwrap();
        assert!(fo < 1e-6);
    }

    #[test]
    fn flow_is_linear() {
        let p = lq(&[0.3, -0.2, 0.9], 32, 10, 0.3);
        let q = solve_optimal(&p, Method::PicardFeedback).unwrap();
        let a = RandomField::from_atoms(&[1.0, 0.5, -0.5], 1, 32).unwrap();
        let b = RandomField::from_atoms(&[0.0, 2.0, 1.0], 1, 32).unwrap();
        let fa = solve_jacobian_flow(&q, &a).unwrap();
        let fb = solve_jacobian_flow(&q, &b).unwrap();
        let c = a.scaled(2.0).axpy(-3.0, &b).unwrap();
        let fc = solve_jacobian_flow(&q, &c).unwrap();
        let combo = fa.dz.nodes[0]
            .scaled(2.0)
            .axpy(-3.0, &fb.dz.nodes[0])
            .unwrap();
        let diff = combo.axpy(-1.0, &fc.dz.nodes[0]).unwrap();
        assert!(diff.norm() < 1e-7 * (1.0 + combo.norm()));
    }
}
