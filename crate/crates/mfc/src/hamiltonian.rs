//! Pointwise feedback map `u(x, p) = argmin_v l(x, v) + v·p`, the Hamiltonian and
//! the feedback Jacobians.

use serde::{Deserialize, Serialize};

use crate::dense::{inverse, matmul, solve_in_place, transpose};
use crate::error::{Error, Result};
use crate::model::CostModel;

pub const FEEDBACK_TOL: f64 = 1e-10;
pub const FEEDBACK_MAX_ITERS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackResult {
    pub u: Vec<f64>,
    pub newton_iters: usize,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hamiltonian {
    pub h: f64,
    pub h_x: Vec<f64>,
    pub h_p: Vec<f64>,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn lagrangian(model: &dyn CostModel, x: &[f64], v: &[f64], p: &[f64]) -> f64 {
    model.l(x, v) + v.iter().zip(p).map(|(a, b)| a * b).sum::<f64>()
}

/// Damped Newton on `v -> l_v(x, v) + p` from `v = 0`.
pub fn feedback_u(model: &dyn CostModel, x: &[f64], p: &[f64]) -> Result<FeedbackResult> {
    feedback_from(model, x, p, &vec![0.0; p.len()])
}

/// Same as [`feedback_u`] with a caller-supplied starting point.
pub fn feedback_from(
    model: &dyn CostModel,
    x: &[f64],
    p: &[f64],
    start: &[f64],
) -> Result<FeedbackResult> {
    let n = p.len();
    let mut v = start.to_vec();
    let mut work = vec![0.0; 4 * n + n * n];
    let (g, rest) = work.split_at_mut(n);
    let (trial, rest) = rest.split_at_mut(n);
    let (gt, rest) = rest.split_at_mut(n);
    let (step, jac) = rest.split_at_mut(n);
    let residual = |v: &[f64], g: &mut [f64]| {
        model.l_v(x, v, g);
        g.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        norm(g)
    };
    let mut res = residual(&v, g);
    let mut iters = 0;
    while res > FEEDBACK_TOL && iters < FEEDBACK_MAX_ITERS {
        iters += 1;
        model.l_vv(x, &v, jac);
        step.iter_mut().zip(g.iter()).for_each(|(s, a)| *s = -a);
        solve_in_place(n, jac, step, 1)?;
        let slope: f64 = g.iter().zip(step.iter()).map(|(a, b)| a * b).sum();
        let mut base = None;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            for i in 0..n {
                trial[i] = v[i] + t * step[i];
            }
            let rt = residual(trial, gt);
            let descent = rt < res || {
                let b = *base.get_or_insert_with(|| lagrangian(model, x, &v, p));
                lagrangian(model, x, trial, p) <= b + 1e-4 * t * slope
            };
            if descent {
                v.copy_from_slice(trial);
                g.copy_from_slice(gt);
                res = rt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if res <= FEEDBACK_TOL {
        return Ok(FeedbackResult {
            u: v,
            newton_iters: iters,
            residual: res,
        });
    }
    Err(Error::Feedback {
        x: x.to_vec(),
        p: p.to_vec(),
        residual: res,
    })
}

/// `H(x, p) = l(x, u) + u·p` with `H_x = l_x(x, u)` and `H_p = u`.
pub fn hamiltonian(model: &dyn CostModel, x: &[f64], p: &[f64]) -> Result<Hamiltonian> {
    let fb = feedback_u(model, x, p)?;
    let mut h_x = vec![0.0; p.len()];
    model.l_x(x, &fb.u, &mut h_x);
    Ok(Hamiltonian {
        h: lagrangian(model, x, &fb.u, p),
        h_x,
        h_p: fb.u,
    })
}

/// `(∂_y u, ∂_z u) = (-l_vv^{-1} l_vx, -l_vv^{-1})` at `(x, u)`.
pub fn jacobians_at(model: &dyn CostModel, x: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.len();
    let mut lvv = vec![0.0; n * n];
    let mut lxv = vec![0.0; n * n];
    model.l_vv(x, u, &mut lvv);
    model.l_xv(x, u, &mut lxv);
    let inv = inverse(n, &lvv).map_err(|_| Error::Singular("l_vv"))?;
    let uz: Vec<f64> = inv.iter().map(|a| -a).collect();
    let mut uy = vec![0.0; n * n];
    matmul(n, n, n, &uz, &transpose(n, &lxv), &mut uy);
    Ok((uy, uz))
}

/// Feedback Jacobians at `(x, u(x, p))`.
pub fn feedback_jacobians(
    model: &dyn CostModel,
    x: &[f64],
    p: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let fb = feedback_u(model, x, p)?;
    jacobians_at(model, x, &fb.u)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dense::operator_norm;
    use crate::model::{Constants, Measure, Stage, StandardModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `l(x, v) = v^2/2 + 0.025 v^4 + x^2/2`, so `l_v = v + 0.1 v^3`.
    pub(crate) struct CubicDrag;

    impl CostModel for CubicDrag {
        fn name(&self) -> String {
            "cubic_drag".into()
        }
        fn dim(&self) -> usize {
            1
        }
        fn constants(&self) -> Constants {
            Constants {
                lambda: 1.0,
                c_l: 1.0,
                ..Default::default()
            }
        }
        fn l(&self, x: &[f64], v: &[f64]) -> f64 {
            0.5 * v[0] * v[0] + 0.025 * v[0].powi(4) + 0.5 * x[0] * x[0]
        }
        fn l_x(&self, x: &[f64], _v: &[f64], out: &mut [f64]) {
            out[0] = x[0];
        }
        fn l_v(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
            out[0] = v[0] + 0.1 * v[0].powi(3);
        }
        fn l_xx(&self, _x: &[f64], _v: &[f64], out: &mut [f64]) {
            out[0] = 1.0;
        }
        fn l_xv(&self, _x: &[f64], _v: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn l_vv(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
            out[0] = 1.0 + 0.3 * v[0] * v[0];
        }
        fn h(&self, _x: &[f64]) -> f64 {
            0.0
        }
        fn h_x(&self, _x: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn h_xx(&self, _x: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn mf(&self, _s: Stage, _mu: &Measure) -> f64 {
            0.0
        }
        fn mf_lfd(&self, _s: Stage, _mu: &Measure, _x: &[f64]) -> f64 {
            0.0
        }
        fn mf_grad(&self, _s: Stage, _mu: &Measure, _x: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
        fn mf_hess(&self, _s: Stage, _mu: &Measure, _x: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(lo) * f(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quadratic_feedback() {
        let m = StandardModel::builtin("nonquadratic", 2).unwrap();
        let fb = feedback_u(&m, &[0.3, 1.0], &[0.5, -2.0]).unwrap();
        assert!((fb.u[0] + 0.5).abs() < 1e-12 && (fb.u[1] - 2.0).abs() < 1e-12);
        let r2 = StandardModel::builtin("coupled", 1).unwrap();
        let fb = feedback_u(&r2, &[0.0], &[3.0]).unwrap();
        assert!((fb.u[0] + 1.5).abs() < 1e-12);
        let (uy, uz) = feedback_jacobians(&r2, &[1.0], &[1.0]).unwrap();
        assert_eq!(uy, vec![0.0]);
        assert!((uz[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn cubic_root_matches_bisection() {
        let fb = feedback_u(&CubicDrag, &[0.0], &[1.1]).unwrap();
        let oracle = bisect(|v| v + 0.1 * v.powi(3) + 1.1, -5.0, 5.0);
        assert!((oracle + 1.0).abs() < 1e-12);
        assert!((fb.u[0] - oracle).abs() < 1e-10);
        assert!(fb.residual <= FEEDBACK_TOL);
    }

    #[test]
    fn hamiltonian_identities() {
        let m = StandardModel::builtin("lq_scalar", 1).unwrap();
        let h = hamiltonian(&m, &[2.0], &[0.7]).unwrap();
        assert!((h.h - (0.5 * 4.0 - 0.5 * 0.49)).abs() < 1e-12);
        let z = hamiltonian(
            &StandardModel::builtin("nonquadratic", 1).unwrap(),
            &[0.0],
            &[0.0],
        )
        .unwrap();
        assert_eq!(z.h, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = [rng.random_range(-3.0..3.0)];
            let p = [rng.random_range(-3.0..3.0)];
            let e = 1e-5;
            let hp = hamiltonian(&CubicDrag, &x, &p).unwrap();
            let fd = (hamiltonian(&CubicDrag, &x, &[p[0] + e]).unwrap().h
                - hamiltonian(&CubicDrag, &x, &[p[0] - e]).unwrap().h)
                / (2.0 * e);
            assert!((fd - hp.h_p[0]).abs() < 1e-6);
            for _ in 0..20 {
                let v = [rng.random_range(-10.0..10.0)];
                assert!(hp.h <= lagrangian(&CubicDrag, &x, &v, &p) + 1e-12);
            }
        }
    }

    #[test]
    fn jacobian_norm_bounds_nonquadratic() {
        let m = StandardModel::builtin("nonquadratic", 1).unwrap();
        let k = m.constants();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let x = [rng.random_range(-10.0..10.0)];
            let p = [rng.random_range(-10.0..10.0)];
            let (uy, uz) = feedback_jacobians(&m, &x, &p).unwrap();
            assert!(operator_norm(1, &uy) <= k.c_l / k.lambda + 1e-12);
            assert!(operator_norm(1, &uz) <= 1.0 / k.lambda + 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn feedback_solves_first_order(x in -5.0..5.0f64, p in -20.0..20.0f64) {
                let fb = feedback_u(&CubicDrag, &[x], &[p]).unwrap();
                let mut g = [0.0];
                CubicDrag.l_v(&[x], &fb.u, &mut g);
                prop_assert!((g[0] + p).abs() <= FEEDBACK_TOL);
            }

            #[test]
            fn hamiltonian_is_concave_in_p(x in -3.0..3.0f64, p1 in -5.0..5.0f64, p2 in -5.0..5.0f64) {
                let h = |p: f64| hamiltonian(&CubicDrag, &[x], &[p]).unwrap().h;
                prop_assert!(h(0.5 * (p1 + p2)) >= 0.5 * (h(p1) + h(p2)) - 1e-9);
            }

            #[test]
            fn builtin_feedback_is_linear_in_p(name in prop::sample::select(vec!["lq_scalar", "nonquadratic", "coupled"]),
                                               x in -3.0..3.0f64, p in -5.0..5.0f64, c in -3.0..3.0f64) {
                let m = StandardModel::builtin(name, 1).unwrap();
                let u = feedback_u(&m, &[x], &[p]).unwrap().u[0];
                let uc = feedback_u(&m, &[x], &[c * p]).unwrap().u[0];
                prop_assert!((uc - c * u).abs() < 1e-9 * (1.0 + uc.abs()));
            }
        }
    }
}
