//! Ground truth for the linear-quadratic members of the builtin family and
//! brute-force finite differences of the objective.
//!
//! For `F = lam/2 ∫|x|^2 + s/2 |∫x|^2` (and the terminal analogue) the value is
//! `V(m, t) = P(t)/2 ∫|x|^2 dm + S(t)/2 |∫x dm|^2 + O(t)` with
//!
//! ```text
//! P' = P^2/r - (q + lam),        P(T) = q_T + lam_T
//! S' = (2 P S + S^2)/r - s,      S(T) = s_T
//! O' = -tr(eta eta^T) P / 2,     O(T) = 0
//! ```
//!
//! and the optimal feedback is `u = -(P y + S mean)/r`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ensemble::{FieldProcess, RandomField, TimeGrid};
use crate::error::{Error, Result};
use crate::fbsde::{objective, simulate_forward};
use crate::model::{ControlProblem, StandardParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub times: Vec<f64>,
    pub p: Vec<f64>,
    /// Mean-coupling coefficient.
    pub s: Vec<f64>,
    /// Value offset coming from the noise.
    pub offset: Vec<f64>,
    pub r: f64,
}

impl RiccatiSolution {
    /// `V` at node `k` for a measure with second moment `m2` and mean `mean`.
    pub fn value(&self, k: usize, m2: f64, mean: &[f64]) -> f64 {
        let mean2: f64 = mean.iter().map(|v| v * v).sum();
        0.5 * self.p[k] * m2 + 0.5 * self.s[k] * mean2 + self.offset[k]
    }

    /// Optimal control at node `k`.
    pub fn feedback(&self, k: usize, y: &[f64], mean: &[f64], out: &mut [f64]) {
        for i in 0..y.len() {
            out[i] = -(self.p[k] * y[i] + self.s[k] * mean[i]) / self.r;
        }
    }

    /// Costate `P y + S mean` at node `k`.
    pub fn costate(&self, k: usize, y: &[f64], mean: &[f64], out: &mut [f64]) {
        for i in 0..y.len() {
            out[i] = self.p[k] * y[i] + self.s[k] * mean[i];
        }
    }
}

/// Backward RK4 with 10 substeps per grid step.
pub fn riccati_solve(
    params: &StandardParams,
    eta: &[f64],
    grid: &TimeGrid,
) -> Result<RiccatiSolution> {
    riccati_solve_with(params, eta, grid, 10)
}

pub fn riccati_solve_with(
    params: &StandardParams,
    eta: &[f64],
    grid: &TimeGrid,
    substeps: usize,
) -> Result<RiccatiSolution> {
    if params.w != 0.0 {
        return Err(Error::Invalid(
            "the Riccati oracle needs a linear-quadratic model (w = 0)".into(),
        ));
    }
    if params.r <= 0.0 {
        return Err(Error::Invalid("the Riccati oracle needs r > 0".into()));
    }
    let trace: f64 = eta.iter().map(|v| v * v).sum();
    let (r, qq, s_run) = (params.r, params.q + params.lam, params.s);
    let rhs = |y: [f64; 3]| -> [f64; 3] {
        let (p, s) = (y[0], y[1]);
        [
            p * p / r - qq,
            (2.0 * p * s + s * s) / r - s_run,
            -0.5 * trace * p,
        ]
    };
    let n = grid.steps;
    let mut out = RiccatiSolution {
        times: (0..=n).map(|k| grid.node(k)).collect(),
        p: vec![0.0; n + 1],
        s: vec![0.0; n + 1],
        offset: vec![0.0; n + 1],
        r,
    };
    let mut y = [params.q_t + params.lam_t, params.s_t, 0.0];
    let h = -grid.dt() / substeps as f64;
    let store = |out: &mut RiccatiSolution, k: usize, y: &[f64; 3]| {
        out.p[k] = y[0];
        out.s[k] = y[1];
        out.offset[k] = y[2];
    };
    store(&mut out, n, &y);
    for k in (0..n).rev() {
        for _ in 0..substeps {
            let add = |a: &[f64; 3], b: &[f64; 3], c: f64| {
                [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2]]
            };
            let k1 = rhs(y);
            let k2 = rhs(add(&y, &k1, h / 2.0));
            let k3 = rhs(add(&y, &k2, h / 2.0));
            let k4 = rhs(add(&y, &k3, h));
            for i in 0..3 {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if y.iter().any(|v| !v.is_finite() || v.abs() > 1e12) {
                return Err(Error::RiccatiBlowUp(grid.node(k)));
            }
        }
        store(&mut out, k, &y);
    }
    Ok(out)
}

/// Central difference `(J(u + eps psi) - J(u - eps psi)) / (2 eps)` under the problem's fixed noise.
pub fn fd_gradient_oracle(
    problem: &ControlProblem,
    control: &FieldProcess,
    psi: &FieldProcess,
    eps: f64,
) -> Result<f64> {
    let plus = control.axpy(eps, psi)?;
    let minus = control.axpy(-eps, psi)?;
    Ok((objective(problem, &plus)? - objective(problem, &minus)?) / (2.0 * eps))
}

/// Richardson combination of central differences at `eps` and `eps / 10`.
pub fn fd_gradient_richardson(
    problem: &ControlProblem,
    control: &FieldProcess,
    psi: &FieldProcess,
    eps: f64,
) -> Result<f64> {
    let coarse = fd_gradient_oracle(problem, control, psi, eps)?;
    let fine = fd_gradient_oracle(problem, control, psi, eps / 10.0)?;
    Ok((100.0 * fine - coarse) / 99.0)
}

/// Random adapted control `a + B W(s_k)` with per-node, per-atom Gaussian coefficients of size `scale`.
pub fn random_control(problem: &ControlProblem, scale: f64, seed: u64) -> FieldProcess {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (problem.atoms(), problem.scenarios(), problem.dim());
    let nodes = (0..problem.grid.steps)
        .map(|step| {
            let w = problem.noise.cumulative(step);
            let mut f = RandomField::zeros(m, k, n, step);
            for a in 0..m {
                let coef: Vec<f64> = (0..2 * n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        scale * z
                    })
                    .collect();
                for sc in 0..k {
                    for i in 0..n {
                        f.values[(a * k + sc) * n + i] = coef[i] + coef[n + i] * w[sc * n + i];
                    }
                }
            }
            f
        })
        .collect();
    FieldProcess { nodes }
}

/// Random direction `a + b y + c y²` (componentwise) of the path driven by `control`, with
/// Gaussian coefficients per node and atom. It lies in the span of the default regression basis.
pub fn polynomial_direction(
    problem: &ControlProblem,
    control: &FieldProcess,
    scale: f64,
    seed: u64,
) -> Result<FieldProcess> {
    let y = simulate_forward(problem, control)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (problem.atoms(), problem.scenarios(), problem.dim());
    let nodes = (0..problem.grid.steps)
        .map(|step| {
            let mut f = RandomField::zeros(m, k, n, step);
            for a in 0..m {
                let c: Vec<f64> = (0..3 * n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        scale * z
                    })
                    .collect();
                for sc in 0..k {
                    let p = (a * k + sc) * n;
                    for i in 0..n {
                        let x = y.nodes[step].values[p + i];
                        f.values[p + i] = c[i] + c[n + i] * x + c[2 * n + i] * x * x;
                    }
                }
            }
            f
        })
        .collect();
    Ok(FieldProcess { nodes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(q: f64, q_t: f64, r: f64) -> StandardParams {
        StandardParams {
            q,
            q_t,
            r,
            ..Default::default()
        }
    }

    #[test]
    fn no_state_cost_means_zero() {
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let sol = riccati_solve(&params(0.0, 0.0, 1.0), &[0.3], &grid).unwrap();
        assert!(sol.p.iter().all(|p| *p == 0.0));
        assert!(sol.offset.iter().all(|o| *o == 0.0));
        let mut u = [1.0];
        sol.feedback(0, &[2.0], &[1.0], &mut u);
        assert_eq!(u[0], 0.0);
    }

    #[test]
    fn terminal_only_closed_form() {
        let grid = TimeGrid::new(0.0, 2.0, 40).unwrap();
        let sol = riccati_solve(&params(0.0, 1.0, 1.0), &[0.0], &grid).unwrap();
        for (k, t) in sol.times.iter().enumerate() {
            let exact = 1.0 / (1.0 + (2.0 - t));
            assert!((sol.p[k] - exact).abs() < 1e-8);
        }
    }

    #[test]
    fn substep_refinement_is_converged() {
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let p = StandardParams {
            q: 1.0,
            q_t: 1.0,
            r: 1.0,
            lam: 0.5,
            s: 0.5,
            s_t: 0.2,
            ..Default::default()
        };
        let a = riccati_solve_with(&p, &[0.3], &grid, 10).unwrap();
        let b = riccati_solve_with(&p, &[0.3], &grid, 20).unwrap();
        for k in 0..=50 {
            assert!((a.p[k] - b.p[k]).abs() <= 1e-10);
            assert!((a.s[k] - b.s[k]).abs() <= 1e-10);
        }
    }

    #[test]
    fn blow_up_detected() {
        let grid = TimeGrid::new(0.0, 5.0, 50).unwrap();
        let p = StandardParams {
            q: 0.0,
            q_t: -2.0,
            r: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            riccati_solve(&p, &[0.0], &grid),
            Err(Error::RiccatiBlowUp(_))
        ));
    }
}
