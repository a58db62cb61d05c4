//! Per-atom least-squares projection onto polynomials of the current state.
//!
//! A [`LocalFit`] regresses `K` target vectors on monomials of total degree
//! `1..=degree` in the standardized inputs, plus an intercept. Besides the fitted
//! values it exposes the first and second derivatives of the fitted values with
//! respect to simultaneous perturbations of inputs and targets, which the linear
//! flows need to differentiate the conditional expectation itself.

use crate::dense::{cholesky, cholesky_solve};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionSpec {
    pub degree: usize,
    pub ridge: f64,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        Self {
            degree: 2,
            ridge: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LocalFit {
    n: usize,
    m: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Input coordinates with nonzero spread.
    active: Vec<usize>,
    /// Exponents over `active` of each non-intercept column.
    exponents: Vec<Vec<u32>>,
    col_mean: Vec<f64>,
    chol: Vec<f64>,
    /// `ncols x m` coefficients.
    coef: Vec<f64>,
    /// `K x m` residuals of the base targets.
    resid: Vec<f64>,
    pub min_pivot: f64,
}

fn exponent_sets(vars: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    fn rec(vars: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if cur.len() == vars {
            if cur.iter().sum::<u32>() > 0 {
                out.push(cur.clone());
            }
            return;
        }
        for e in 0..=left {
            cur.push(e);
            rec(vars, left - e, cur, out);
            cur.pop();
        }
    }
    rec(vars, degree as u32, &mut Vec::new(), &mut out);
    out.sort_by_key(|e| (e.iter().sum::<u32>(), std::cmp::Reverse(e.clone())));
    out
}

fn monomial(e: &[u32], z: &[f64]) -> f64 {
    e.iter().zip(z).map(|(&p, &v)| v.powi(p as i32)).product()
}

/// `∂/∂z_i` of the monomial.
fn monomial_d(e: &[u32], z: &[f64], i: usize) -> f64 {
    if e[i] == 0 {
        return 0.0;
    }
    let mut r = e[i] as f64 * z[i].powi(e[i] as i32 - 1);
    for (j, (&p, &v)) in e.iter().zip(z).enumerate() {
        if j != i {
            r *= v.powi(p as i32);
        }
    }
    r
}

/// `∂²/∂z_i∂z_j` of the monomial.
fn monomial_dd(e: &[u32], z: &[f64], i: usize, j: usize) -> f64 {
    let mut e2 = e.to_vec();
    let mut c = 1.0;
    for k in [i, j] {
        if e2[k] == 0 {
            return 0.0;
        }
        c *= e2[k] as f64;
        e2[k] -= 1;
    }
    c * monomial(&e2, z)
}

impl LocalFit {
    /// Fit `K x m` targets on `K x n` inputs.
    pub fn fit(
        inputs: &[f64],
        n: usize,
        targets: &[f64],
        m: usize,
        spec: RegressionSpec,
    ) -> Result<Self> {
        let k = inputs.len() / n;
        if k == 0 || targets.len() != k * m {
            return Err(Error::Shape(format!(
                "regression got {} inputs and {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let mut mean = vec![0.0; n];
        let mut scale = vec![0.0; n];
        for s in 0..k {
            for i in 0..n {
                mean[i] += inputs[s * n + i];
            }
        }
        mean.iter_mut().for_each(|v| *v /= k as f64);
        for s in 0..k {
            for i in 0..n {
                scale[i] += (inputs[s * n + i] - mean[i]).powi(2);
            }
        }
        scale.iter_mut().for_each(|v| *v = (*v / k as f64).sqrt());
        let active: Vec<usize> = (0..n)
            .filter(|&i| scale[i] > 1e-12 * (1.0 + mean[i].abs()))
            .collect();
        let exponents = if active.is_empty() {
            Vec::new()
        } else {
            exponent_sets(active.len(), spec.degree)
        };
        let mut fit = Self {
            n,
            m,
            mean,
            scale,
            active,
            exponents,
            col_mean: Vec::new(),
            chol: Vec::new(),
            coef: Vec::new(),
            resid: Vec::new(),
            min_pivot: 0.0,
        };
        let nc = fit.ncols();
        fit.col_mean = vec![0.0; nc];
        let mut x = fit.features(inputs);
        for s in 0..k {
            for c in 1..nc {
                fit.col_mean[c] += x[s * nc + c];
            }
        }
        fit.col_mean.iter_mut().for_each(|v| *v /= k as f64);
        for s in 0..k {
            for c in 1..nc {
                x[s * nc + c] -= fit.col_mean[c];
            }
        }
        let mut g = vec![0.0; nc * nc];
        for s in 0..k {
            let row = &x[s * nc..(s + 1) * nc];
            for a in 0..nc {
                for b in a..nc {
                    g[a * nc + b] += row[a] * row[b];
                }
            }
        }
        for a in 0..nc {
            for b in 0..a {
                g[a * nc + b] = g[b * nc + a];
            }
        }
        g.iter_mut().for_each(|v| *v /= k as f64);
        for a in 1..nc {
            g[a * nc + a] += spec.ridge;
        }
        cholesky(nc, &mut g)?;
        fit.min_pivot = (0..nc)
            .map(|a| g[a * nc + a].powi(2))
            .fold(f64::INFINITY, f64::min);
        fit.chol = g;
        fit.coef = fit.solve_normal(&x, targets);
        let fitted = fit.apply(&x, &fit.coef);
        fit.resid = targets.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        Ok(fit)
    }

    pub fn ncols(&self) -> usize {
        1 + self.exponents.len()
    }

    pub fn samples(&self) -> usize {
        self.resid.len() / self.m
    }

    fn standardize(&self, y: &[f64], z: &mut Vec<f64>) {
        z.clear();
        z.extend(
            self.active
                .iter()
                .map(|&i| (y[i] - self.mean[i]) / self.scale[i]),
        );
    }

    /// Centered design matrix (`K x ncols`, first column the intercept).
    pub fn features(&self, inputs: &[f64]) -> Vec<f64> {
        let nc = self.ncols();
        let k = inputs.len() / self.n;
        let mut out = vec![0.0; k * nc];
        let mut z = Vec::with_capacity(self.active.len());
        for s in 0..k {
            self.standardize(&inputs[s * self.n..(s + 1) * self.n], &mut z);
            out[s * nc] = 1.0;
            for (c, e) in self.exponents.iter().enumerate() {
                out[s * nc + c + 1] =
                    monomial(e, &z) - self.col_mean.get(c + 1).copied().unwrap_or(0.0);
            }
        }
        out
    }

    /// Derivative of the design matrix along input perturbations `g` (`K x n`).
    fn features_d(&self, inputs: &[f64], g: &[f64]) -> Vec<f64> {
        let nc = self.ncols();
        let k = inputs.len() / self.n;
        let mut out = vec![0.0; k * nc];
        let mut z = Vec::with_capacity(self.active.len());
        for s in 0..k {
            self.standardize(&inputs[s * self.n..(s + 1) * self.n], &mut z);
            let gs = &g[s * self.n..(s + 1) * self.n];
            for (c, e) in self.exponents.iter().enumerate() {
                let mut d = 0.0;
                for (ai, &i) in self.active.iter().enumerate() {
                    d += monomial_d(e, &z, ai) * gs[i] / self.scale[i];
                }
                out[s * nc + c + 1] = d;
            }
        }
        out
    }

    /// Second derivative of the design matrix along `g` and `h`.
    fn features_dd(&self, inputs: &[f64], g: &[f64], h: &[f64]) -> Vec<f64> {
        let nc = self.ncols();
        let k = inputs.len() / self.n;
        let mut out = vec![0.0; k * nc];
        let mut z = Vec::with_capacity(self.active.len());
        for s in 0..k {
            self.standardize(&inputs[s * self.n..(s + 1) * self.n], &mut z);
            let (gs, hs) = (
                &g[s * self.n..(s + 1) * self.n],
                &h[s * self.n..(s + 1) * self.n],
            );
            for (c, e) in self.exponents.iter().enumerate() {
                let mut d = 0.0;
                for (ai, &i) in self.active.iter().enumerate() {
                    for (aj, &j) in self.active.iter().enumerate() {
                        d += monomial_dd(e, &z, ai, aj) * gs[i] * hs[j]
                            / (self.scale[i] * self.scale[j]);
                    }
                }
                out[s * nc + c + 1] = d;
            }
        }
        out
    }

    /// `x c` for a `K x ncols` matrix and `ncols x m` coefficients.
    fn apply(&self, x: &[f64], c: &[f64]) -> Vec<f64> {
        let nc = self.ncols();
        let k = x.len() / nc;
        let mut out = vec![0.0; k * self.m];
        for s in 0..k {
            for a in 0..nc {
                let xa = x[s * nc + a];
                if xa == 0.0 {
                    continue;
                }
                for j in 0..self.m {
                    out[s * self.m + j] += xa * c[a * self.m + j];
                }
            }
        }
        out
    }

    /// `a^T b / K` for `K x ncols` a and `K x m` b.
    fn at_b(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let nc = self.ncols();
        let k = a.len() / nc;
        let mut out = vec![0.0; nc * self.m];
        for s in 0..k {
            for c in 0..nc {
                let ac = a[s * nc + c];
                if ac == 0.0 {
                    continue;
                }
                for j in 0..self.m {
                    out[c * self.m + j] += ac * b[s * self.m + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= k as f64);
        out
    }

    fn solve_normal(&self, x: &[f64], targets: &[f64]) -> Vec<f64> {
        let mut rhs = self.at_b(x, targets);
        cholesky_solve(self.ncols(), &self.chol, &mut rhs, self.m);
        rhs
    }

    /// Residuals of the base targets.
    pub fn residuals(&self) -> &[f64] {
        &self.resid
    }

    /// Fitted values of the base targets.
    pub fn fitted(&self, inputs: &[f64]) -> Vec<f64> {
        self.apply(&self.features(inputs), &self.coef)
    }

    /// Project new `K x m` targets onto the same basis.
    pub fn project(&self, inputs: &[f64], targets: &[f64]) -> Vec<f64> {
        let x = self.features(inputs);
        let c = self.solve_normal(&x, targets);
        self.apply(&x, &c)
    }

    fn tangent_parts(
        &self,
        inputs: &[f64],
        x: &[f64],
        q: &[f64],
        g: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let dx = self.features_d(inputs, g);
        let dxc = self.apply(&dx, &self.coef);
        let mut rhs = self.at_b(x, q);
        let a = self.at_b(&dx, &self.resid);
        let b = self.at_b(x, &dxc);
        for i in 0..rhs.len() {
            rhs[i] += a[i] - b[i];
        }
        cholesky_solve(self.ncols(), &self.chol, &mut rhs, self.m);
        (dx, rhs)
    }

    /// Derivative of the fitted values when inputs move along `g` and targets along `q`.
    pub fn tangent(&self, inputs: &[f64], q: &[f64], g: &[f64]) -> Vec<f64> {
        let x = self.features(inputs);
        let (dx, dc) = self.tangent_parts(inputs, &x, q, g);
        let mut out = self.apply(&dx, &self.coef);
        for (o, v) in out.iter_mut().zip(self.apply(&x, &dc)) {
            *o += v;
        }
        out
    }

    /// Derivative of [`LocalFit::tangent`]`(q, g)` when the base inputs and targets move
    /// along `(dy, dp)` with `(q, g)` held fixed.
    pub fn second(&self, inputs: &[f64], q: &[f64], g: &[f64], dp: &[f64], dy: &[f64]) -> Vec<f64> {
        let nc = self.ncols();
        let k = inputs.len() / self.n;
        let x = self.features(inputs);
        let (dxg, dcg) = self.tangent_parts(inputs, &x, q, g);
        let (dxd, dcd) = self.tangent_parts(inputs, &x, dp, dy);
        let ddx = self.features_dd(inputs, g, dy);
        let c = &self.coef;
        let ddx_c = self.apply(&ddx, c);
        // rhs = D(rhs_g) - dG dc_g
        let mut inner = vec![0.0; k * self.m];
        let dxd_c = self.apply(&dxd, c);
        let x_dcd = self.apply(&x, &dcd);
        for i in 0..inner.len() {
            inner[i] = dp[i] - dxd_c[i] - x_dcd[i];
        }
        let dxg_c = self.apply(&dxg, c);
        let dxg_dcd = self.apply(&dxg, &dcd);
        let mut rhs = self.at_b(&dxd, q);
        let terms = [
            (self.at_b(&ddx, &self.resid), 1.0),
            (self.at_b(&dxg, &inner), 1.0),
            (self.at_b(&dxd, &dxg_c), -1.0),
            (self.at_b(&x, &ddx_c), -1.0),
            (self.at_b(&x, &dxg_dcd), -1.0),
        ];
        for (t, sign) in &terms {
            for i in 0..rhs.len() {
                rhs[i] += sign * t[i];
            }
        }
        let x_dcg = self.apply(&x, &dcg);
        let dxd_dcg = self.apply(&dxd, &dcg);
        let g1 = self.at_b(&dxd, &x_dcg);
        let g2 = self.at_b(&x, &dxd_dcg);
        for i in 0..rhs.len() {
            rhs[i] -= g1[i] + g2[i];
        }
        cholesky_solve(nc, &self.chol, &mut rhs, self.m);
        let mut out = ddx_c;
        for (part_x, part_c) in [(&dxg, &dcd), (&dxd, &dcg), (&x, &rhs)] {
            for (o, v) in out.iter_mut().zip(self.apply(part_x, part_c)) {
                *o += v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(k: usize, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k * n).map(|_| rng.random_range(-1.0..2.0)).collect()
    }

    #[test]
    fn exponents_by_degree() {
        assert_eq!(exponent_sets(1, 2), vec![vec![1], vec![2]]);
        assert_eq!(exponent_sets(2, 2).len(), 5);
        assert_eq!(exponent_sets(2, 3).len(), 9);
    }

    #[test]
    fn reproduces_polynomials() {
        let y = cloud(60, 2, 1);
        let t: Vec<f64> = (0..60)
            .map(|s| 1.0 + 2.0 * y[2 * s] - y[2 * s] * y[2 * s + 1])
            .collect();
        let fit = LocalFit::fit(
            &y,
            2,
            &t,
            1,
            RegressionSpec {
                degree: 2,
                ridge: 0.0,
            },
        )
        .unwrap();
        for (a, b) in fit.fitted(&y).iter().zip(&t) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_inputs_give_mean() {
        let y = vec![0.7; 10];
        let t: Vec<f64> = (0..10).map(|s| s as f64).collect();
        let fit = LocalFit::fit(&y, 1, &t, 1, RegressionSpec::default()).unwrap();
        assert_eq!(fit.ncols(), 1);
        for v in fit.fitted(&y) {
            assert!((v - 4.5).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_mean_is_zero() {
        let y = cloud(40, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fit = LocalFit::fit(&y, 1, &t, 1, RegressionSpec::default()).unwrap();
        let f = fit.fitted(&y);
        let d: f64 = f.iter().zip(&t).map(|(a, b)| a - b).sum();
        assert!(d.abs() < 1e-12);
    }

    fn refit(y: &[f64], t: &[f64], n: usize, m: usize) -> Vec<f64> {
        LocalFit::fit(y, n, t, m, RegressionSpec::default())
            .unwrap()
            .fitted(y)
    }

    #[test]
    fn tangent_matches_refit() {
        let (k, n, m) = (50, 2, 2);
        let y = cloud(k, n, 4);
        let t = cloud(k, m, 5);
        let g = cloud(k, n, 6);
        let q = cloud(k, m, 7);
        let fit = LocalFit::fit(&y, n, &t, m, RegressionSpec::default()).unwrap();
        let d = fit.tangent(&y, &q, &g);
        let e = 1e-6;
        let shift = |s: f64| {
            let ys: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a + s * b).collect();
            let ts: Vec<f64> = t.iter().zip(&q).map(|(a, b)| a + s * b).collect();
            refit(&ys, &ts, n, m)
        };
        let (fp, fm) = (shift(e), shift(-e));
        for i in 0..d.len() {
            let fd = (fp[i] - fm[i]) / (2.0 * e);
            assert!(
                (fd - d[i]).abs() < 1e-5 * (1.0 + d[i].abs()),
                "{i}: {fd} vs {}",
                d[i]
            );
        }
    }

    #[test]
    fn second_matches_tangent_difference() {
        let (k, n, m) = (40, 1, 1);
        let y = cloud(k, n, 8);
        let t = cloud(k, m, 9);
        let (g, q, dy, dp) = (
            cloud(k, n, 10),
            cloud(k, m, 11),
            cloud(k, n, 12),
            cloud(k, m, 13),
        );
        let fit = LocalFit::fit(&y, n, &t, m, RegressionSpec::default()).unwrap();
        let dd = fit.second(&y, &q, &g, &dp, &dy);
        let e = 1e-6;
        let at = |s: f64| {
            let ys: Vec<f64> = y.iter().zip(&dy).map(|(a, b)| a + s * b).collect();
            let ts: Vec<f64> = t.iter().zip(&dp).map(|(a, b)| a + s * b).collect();
            let f = LocalFit::fit(&ys, n, &ts, m, RegressionSpec::default()).unwrap();
            f.tangent(&ys, &q, &g)
        };
        let (fp, fm) = (at(e), at(-e));
        for i in 0..dd.len() {
            let fd = (fp[i] - fm[i]) / (2.0 * e);
            assert!(
                (fd - dd[i]).abs() < 1e-4 * (1.0 + dd[i].abs()),
                "{i}: {fd} vs {}",
                dd[i]
            );
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn projection_is_linear_and_idempotent(seed in 0u64..1000, a in -3.0..3.0f64, b in -3.0..3.0f64) {
                let (k, n) = (40, 2);
                let x = cloud(k, n, seed);
                let t1 = cloud(k, 1, seed + 1);
                let t2 = cloud(k, 1, seed + 2);
                let fit = LocalFit::fit(&x, n, &t1, 1, RegressionSpec::default()).unwrap();
                let p1 = fit.project(&x, &t1);
                let p2 = fit.project(&x, &t2);
                let mix: Vec<f64> = t1.iter().zip(&t2).map(|(u, v)| a * u + b * v).collect();
                let pm = fit.project(&x, &mix);
                for i in 0..k {
                    prop_assert!((pm[i] - a * p1[i] - b * p2[i]).abs() < 1e-6);
                }
                let again = fit.project(&x, &p1);
                for i in 0..k {
                    prop_assert!((again[i] - p1[i]).abs() < 1e-6);
                }
            }

            #[test]
            fn residuals_are_orthogonal_to_inputs(seed in 0u64..1000) {
                let (k, n) = (30, 1);
                let x = cloud(k, n, seed);
                let t = cloud(k, 1, seed + 7);
                let fit = LocalFit::fit(&x, n, &t, 1, RegressionSpec::default()).unwrap();
                let r = fit.residuals();
                let dot: f64 = r.iter().zip(&x).map(|(a, b)| a * b).sum();
                prop_assert!(dot.abs() < 1e-6);
            }
        }
    }
}
