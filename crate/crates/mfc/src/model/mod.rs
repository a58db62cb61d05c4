//! Cost models: running and terminal costs, measure functionals through their
//! linear functional derivatives, declared constants and a probing checker.

mod assumptions;
mod problem;
mod standard;

pub use assumptions::{check_assumptions, AssumptionReport, Check, ProbeCloud};
pub use problem::{gaussian_atoms, quadrature_atoms, ControlProblem};
pub use standard::{builtin_models, StandardModel, StandardParams};

use serde::{Deserialize, Serialize};

/// Which measure functional a callback refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Running,
    Terminal,
}

/// An empirical measure as seen by model callbacks.
///
/// `summary` is whatever [`CostModel::summarize`] precomputed from the points
/// (a mean, moments, ...) so per-point callbacks stay O(1) for models that
/// allow it.
#[derive(Clone, Copy, Debug)]
pub struct Measure<'a> {
    pub dim: usize,
    pub points: &'a [f64],
    pub weights: &'a [f64],
    pub summary: &'a [f64],
}

impl<'a> Measure<'a> {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &'a [f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (i, w) in self.weights.iter().enumerate() {
            for (mj, xj) in m.iter_mut().zip(self.point(i)) {
                *mj += w * xj;
            }
        }
        m
    }
}

/// Constants of the standing assumptions, as declared by a model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub lambda: f64,
    pub c_l: f64,
    pub c_h: f64,
    pub c: f64,
    pub c_t: f64,
    pub c_prime: f64,
    pub c_prime_l: f64,
    pub c_prime_h: f64,
    pub c_prime_t: f64,
}

/// Convexity margin `lambda - (c'_T + c'_h)_+ T - (c'_l + c')_+ T^2 / 2` on a horizon of length `horizon`.
pub fn c0(k: &Constants, horizon: f64) -> f64 {
    k.lambda
        - (k.c_prime_t + k.c_prime_h).max(0.0) * horizon
        - (k.c_prime_l + k.c_prime).max(0.0) * horizon * horizon / 2.0
}

/// Margin of the dν-flow solvability condition at a given `delta1`.
pub fn delta1_margin(k: &Constants, horizon: f64, delta1: f64) -> f64 {
    (1.0 - delta1) * k.lambda
        - (k.c_prime_h + k.c_prime_t + k.c_t) * horizon
        - (k.c + k.c_prime + k.c_prime_l) * horizon * horizon / 2.0
}

/// Largest `delta1` on the grid `i / 101`, `i = 1..=100`, with positive margin.
pub fn search_delta1(k: &Constants, horizon: f64) -> Option<f64> {
    (1..=100)
        .rev()
        .map(|i| i as f64 / 101.0)
        .find(|&d| delta1_margin(k, horizon, d) > 0.0)
}

/// Default gradient-descent step `c0 / (c_l + c_T + c_h + c + 1)^2`, clamped to `(0, 1]`.
pub fn default_step(k: &Constants, horizon: f64) -> f64 {
    let r = c0(k, horizon) / (k.c_l + k.c_t + k.c_h + k.c + 1.0).powi(2);
    if r > 0.0 {
        r.min(1.0)
    } else {
        1e-3
    }
}

/// Callbacks of a mean-field control cost.
///
/// Matrices are row-major `n x n`. `l_xv[a][b]` is `d^2 l / dx_a dv_b`, so the
/// adjoint driver uses `l_xv * du` and the control equation uses `l_xv^T * dy`.
/// Kernel callbacks act on the second argument: `mf_kernel(x, y)[a][b]` is
/// `d_{x_a} d_{y_b}` of the second linear functional derivative.
pub trait CostModel: Send + Sync {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn constants(&self) -> Constants;

    /// True when every cost vanishes; such a model skips the convexity gate.
    fn is_trivial(&self) -> bool {
        false
    }

    fn l(&self, x: &[f64], v: &[f64]) -> f64;
    fn l_x(&self, x: &[f64], v: &[f64], out: &mut [f64]);
    fn l_v(&self, x: &[f64], v: &[f64], out: &mut [f64]);
    fn l_xx(&self, x: &[f64], v: &[f64], out: &mut [f64]);
    fn l_xv(&self, x: &[f64], v: &[f64], out: &mut [f64]);
    fn l_vv(&self, x: &[f64], v: &[f64], out: &mut [f64]);

    fn h(&self, x: &[f64]) -> f64;
    fn h_x(&self, x: &[f64], out: &mut [f64]);
    fn h_xx(&self, x: &[f64], out: &mut [f64]);

    fn summarize(&self, _points: &[f64], _weights: &[f64]) -> Vec<f64> {
        Vec::new()
    }

    /// F or F_T at the measure.
    fn mf(&self, stage: Stage, mu: &Measure) -> f64;
    /// dF/dν(μ)(x), up to an additive constant.
    fn mf_lfd(&self, stage: Stage, mu: &Measure, x: &[f64]) -> f64;
    /// D_x dF/dν(μ)(x).
    fn mf_grad(&self, stage: Stage, mu: &Measure, x: &[f64], out: &mut [f64]);
    /// D_x^2 dF/dν(μ)(x).
    fn mf_hess(&self, stage: Stage, mu: &Measure, x: &[f64], out: &mut [f64]);
    /// D_x d²F/dν²(μ)(x, y).
    fn mf_second_grad(
        &self,
        _stage: Stage,
        _mu: &Measure,
        _x: &[f64],
        _y: &[f64],
        out: &mut [f64],
    ) {
        out.fill(0.0);
    }
    /// D_x D_y d²F/dν²(μ)(x, y).
    fn mf_kernel(&self, _stage: Stage, _mu: &Measure, _x: &[f64], _y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    /// `out_i = sum_j w_j K(x_i, y_j) delta_j` where `y_j` are the points of `mu`.
    fn mf_pooled(&self, stage: Stage, mu: &Measure, x: &[f64], delta: &[f64], out: &mut [f64]) {
        let n = mu.dim;
        let mut k = vec![0.0; n * n];
        out.fill(0.0);
        for i in 0..x.len() / n {
            for j in 0..mu.len() {
                self.mf_kernel(stage, mu, &x[i * n..(i + 1) * n], mu.point(j), &mut k);
                let dj = &delta[j * n..(j + 1) * n];
                for a in 0..n {
                    for b in 0..n {
                        out[i * n + a] += mu.weights[j] * k[a * n + b] * dj[b];
                    }
                }
            }
        }
    }

    /// `out_i = sum_j w_j D_x d²F/dν²(x_i, y_j)` for the points `x` against the weighted cloud `ys`.
    fn mf_second_grad_mean(
        &self,
        stage: Stage,
        mu: &Measure,
        x: &[f64],
        ys: &[f64],
        yw: &[f64],
        out: &mut [f64],
    ) {
        let n = mu.dim;
        let mut g = vec![0.0; n];
        out.fill(0.0);
        for i in 0..x.len() / n {
            for (j, w) in yw.iter().enumerate() {
                self.mf_second_grad(
                    stage,
                    mu,
                    &x[i * n..(i + 1) * n],
                    &ys[j * n..(j + 1) * n],
                    &mut g,
                );
                for a in 0..n {
                    out[i * n + a] += w * g[a];
                }
            }
        }
    }

    fn has_third_order(&self) -> bool {
        false
    }
    /// Directional derivative of `l_xx` along `(dx, dv)`.
    fn l_xx_dir(&self, _x: &[f64], _v: &[f64], _dx: &[f64], _dv: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn l_xv_dir(&self, _x: &[f64], _v: &[f64], _dx: &[f64], _dv: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn l_vv_dir(&self, _x: &[f64], _v: &[f64], _dx: &[f64], _dv: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn h_xx_dir(&self, _x: &[f64], _dx: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    /// D_x^3 dF/dν(μ)(x) along `dx`.
    fn mf_hess_dir(&self, _stage: Stage, _mu: &Measure, _x: &[f64], _dx: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    /// D_x^2 d²F/dν²(μ)(x, y).
    fn mf_second_hess(
        &self,
        _stage: Stage,
        _mu: &Measure,
        _x: &[f64],
        _y: &[f64],
        out: &mut [f64],
    ) {
        out.fill(0.0);
    }
    /// D_x^2 D_y d²F/dν²(μ)(x, y) along `dx` in the first argument.
    fn mf_kernel_dir(
        &self,
        _stage: Stage,
        _mu: &Measure,
        _x: &[f64],
        _y: &[f64],
        _dx: &[f64],
        out: &mut [f64],
    ) {
        out.fill(0.0);
    }

    /// `out_i = sum_j w_j [D_x^2 D_y d²F(x_i, y_j) dx_i] delta_j` over the points of `mu`.
    fn mf_pooled_dir(
        &self,
        stage: Stage,
        mu: &Measure,
        x: &[f64],
        dx: &[f64],
        delta: &[f64],
        out: &mut [f64],
    ) {
        let n = mu.dim;
        let mut k = vec![0.0; n * n];
        out.fill(0.0);
        for i in 0..x.len() / n {
            for j in 0..mu.len() {
                let (xi, di) = (&x[i * n..(i + 1) * n], &dx[i * n..(i + 1) * n]);
                self.mf_kernel_dir(stage, mu, xi, mu.point(j), di, &mut k);
                for a in 0..n {
                    for b in 0..n {
                        out[i * n + a] += mu.weights[j] * k[a * n + b] * delta[j * n + b];
                    }
                }
            }
        }
    }

    /// `out_i = sum_j w_j D_x^2 d²F(x_i, y_j) dx_i` against the weighted cloud `ys`.
    fn mf_second_hess_mean(
        &self,
        stage: Stage,
        mu: &Measure,
        x: &[f64],
        dx: &[f64],
        ys: &[f64],
        yw: &[f64],
        out: &mut [f64],
    ) {
        let n = mu.dim;
        let mut m = vec![0.0; n * n];
        out.fill(0.0);
        for i in 0..x.len() / n {
            for (j, w) in yw.iter().enumerate() {
                self.mf_second_hess(
                    stage,
                    mu,
                    &x[i * n..(i + 1) * n],
                    &ys[j * n..(j + 1) * n],
                    &mut m,
                );
                for a in 0..n {
                    for b in 0..n {
                        out[i * n + a] += w * m[a * n + b] * dx[i * n + b];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn c0_arithmetic() {
        let mut k = Constants {
            lambda: 1.0,
            ..Default::default()
        };
        assert_eq!(c0(&k, 1.0), 1.0);
        k.c_prime_t = 0.25;
        k.c_prime_h = 0.25;
        k.c_prime_l = 0.25;
        k.c_prime = 0.25;
        assert_eq!(c0(&k, 1.0), 0.25);
        let k = Constants {
            lambda: 1.0,
            c_prime_t: 1.5,
            c_prime_h: 0.5,
            ..Default::default()
        };
        assert_eq!(c0(&k, 1.0), -1.0);
        let neg = Constants {
            lambda: 1.0,
            c_prime_t: -3.0,
            c_prime_l: -1.0,
            ..Default::default()
        };
        assert_eq!(c0(&neg, 2.0), 1.0);
    }

    #[test]
    fn delta1_grid() {
        let k = Constants {
            lambda: 1.0,
            c: 0.5,
            ..Default::default()
        };
        let d = search_delta1(&k, 1.0).unwrap();
        assert!(delta1_margin(&k, 1.0, d) > 0.0);
        assert!(delta1_margin(&k, 1.0, d + 1.0 / 101.0) <= 0.0);
        let bad = Constants {
            lambda: 1.0,
            c: 4.0,
            ..Default::default()
        };
        assert!(search_delta1(&bad, 1.0).is_none());
    }

    #[test]
    fn step_is_clamped() {
        let k = Constants {
            lambda: 1.0,
            c_l: 1.0,
            c_h: 1.0,
            c: 1.0,
            ..Default::default()
        };
        assert!((default_step(&k, 1.0) - 1.0 / 16.0).abs() < 1e-15);
        let tiny = Constants {
            lambda: 10.0,
            ..Default::default()
        };
        assert_eq!(default_step(&tiny, 1.0), 1.0);
    }
}
