//! The quadratic-plus-Gaussian family used by every builtin.
//!
//! ```text
//! l(x, v)  = r/2 |v|^2 + q/2 |x|^2
//! h(x)     = q_T/2 |x|^2
//! F(mu)    = lam/2 ∫|x|^2 + s/2 |∫x|^2 + w ∫(|x|^2 + exp(-|x|^2))
//! F_T(mu)  = lam_T/2 ∫|x|^2 + s_T/2 |∫x|^2
//! ```

use serde::{Deserialize, Serialize};

use super::{Constants, CostModel, Measure, Stage};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StandardParams {
    pub r: f64,
    pub q: f64,
    pub q_t: f64,
    pub lam: f64,
    pub s: f64,
    pub w: f64,
    pub lam_t: f64,
    pub s_t: f64,
}

/// Peak of `d^2/dy^2 (y^2 + exp(-y^2))` over the real line, reached at `y^2 = 3/2`.
fn gaussian_curvature_peak() -> f64 {
    2.0 + 4.0 * (-1.5f64).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StandardModel {
    pub name: String,
    pub dim: usize,
    pub p: StandardParams,
}

impl StandardModel {
    pub fn new(name: impl Into<String>, dim: usize, p: StandardParams) -> Self {
        Self {
            name: name.into(),
            dim,
            p,
        }
    }

    /// Builtin by catalog name.
    pub fn builtin(name: &str, dim: usize) -> Option<Self> {
        let p = match name {
            "lq_scalar" => StandardParams {
                r: 1.0,
                q: 1.0,
                q_t: 1.0,
                lam: 0.5,
                ..Default::default()
            },
            "mean_interaction" => StandardParams {
                r: 1.0,
                q: 1.0,
                q_t: 1.0,
                s: 0.5,
                s_t: 0.2,
                ..Default::default()
            },
            "nonquadratic" => StandardParams {
                r: 1.0,
                q_t: 1.0,
                w: 1.0,
                ..Default::default()
            },
            "coupled" => StandardParams {
                r: 2.0,
                q_t: 1.0,
                w: 0.25,
                s: 0.5,
                s_t: 0.2,
                ..Default::default()
            },
            "zero_cost" => StandardParams::default(),
            _ => return None,
        };
        Some(Self::new(name, dim, p))
    }

    fn split(&self, stage: Stage) -> (f64, f64, f64) {
        match stage {
            Stage::Running => (self.p.lam, self.p.s, self.p.w),
            Stage::Terminal => (self.p.lam_t, self.p.s_t, 0.0),
        }
    }
}

/// Catalog names accepted by [`StandardModel::builtin`].
pub fn builtin_models() -> Vec<&'static str> {
    vec![
        "lq_scalar",
        "mean_interaction",
        "nonquadratic",
        "coupled",
        "zero_cost",
    ]
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum()
}

fn diag(out: &mut [f64], n: usize, d: f64) {
    out.fill(0.0);
    for i in 0..n {
        out[i * n + i] = d;
    }
}

impl CostModel for StandardModel {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn constants(&self) -> Constants {
        let p = &self.p;
        Constants {
            lambda: p.r,
            c_l: p.r.max(p.q.abs()),
            c_h: p.q_t.abs(),
            c: (2.0 * (p.lam.abs() + gaussian_curvature_peak() * p.w.abs())).max(2.0 * p.s.abs()),
            c_t: 2.0 * p.lam_t.abs().max(p.s_t.abs()),
            // concave parts only
            c_prime_l: (-p.q).max(0.0),
            c_prime_h: (-p.q_t).max(0.0),
            c_prime: (-p.lam).max(0.0)
                + (-p.s).max(0.0)
                + (-p.w).max(0.0) * gaussian_curvature_peak(),
            c_prime_t: (-p.lam_t).max(0.0) + (-p.s_t).max(0.0),
            ..Default::default()
        }
    }

    fn is_trivial(&self) -> bool {
        self.p == StandardParams::default()
    }

    fn l(&self, x: &[f64], v: &[f64]) -> f64 {
        0.5 * self.p.r * norm2(v) + 0.5 * self.p.q * norm2(x)
    }

    fn l_x(&self, x: &[f64], _v: &[f64], out: &mut [f64]) {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = self.p.q * xi;
        }
    }

    fn l_v(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        for (o, vi) in out.iter_mut().zip(v) {
            *o = self.p.r * vi;
        }
    }

    fn l_xx(&self, _x: &[f64], _v: &[f64], out: &mut [f64]) {
        diag(out, self.dim, self.p.q);
    }

    fn l_xv(&self, _x: &[f64], _v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn l_vv(&self, _x: &[f64], _v: &[f64], out: &mut [f64]) {
        diag(out, self.dim, self.p.r);
    }

    fn h(&self, x: &[f64]) -> f64 {
        0.5 * self.p.q_t * norm2(x)
    }

    fn h_x(&self, x: &[f64], out: &mut [f64]) {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = self.p.q_t * xi;
        }
    }

    fn h_xx(&self, _x: &[f64], out: &mut [f64]) {
        diag(out, self.dim, self.p.q_t);
    }

    fn summarize(&self, points: &[f64], weights: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut m = vec![0.0; n];
        for (i, w) in weights.iter().enumerate() {
            for j in 0..n {
                m[j] += w * points[i * n + j];
            }
        }
        m
    }

    fn mf(&self, stage: Stage, mu: &Measure) -> f64 {
        let (lam, s, w) = self.split(stage);
        let mut second = 0.0;
        let mut gauss = 0.0;
        for i in 0..mu.len() {
            let r2 = norm2(mu.point(i));
            second += mu.weights[i] * r2;
            gauss += mu.weights[i] * (-r2).exp();
        }
        0.5 * lam * second + 0.5 * s * norm2(mu.summary) + w * (second + gauss)
    }

    fn mf_lfd(&self, stage: Stage, mu: &Measure, x: &[f64]) -> f64 {
        let (lam, s, w) = self.split(stage);
        let r2 = norm2(x);
        let mx: f64 = mu.summary.iter().zip(x).map(|(a, b)| a * b).sum();
        0.5 * lam * r2 + s * mx + w * (r2 + (-r2).exp())
    }

    fn mf_grad(&self, stage: Stage, mu: &Measure, x: &[f64], out: &mut [f64]) {
        let (lam, s, w) = self.split(stage);
        let g = 2.0 * w * (1.0 - (-norm2(x)).exp());
        for i in 0..self.dim {
            out[i] = (lam + g) * x[i] + s * mu.summary[i];
        }
    }

    fn mf_hess(&self, stage: Stage, _mu: &Measure, x: &[f64], out: &mut [f64]) {
        let (lam, _, w) = self.split(stage);
        let n = self.dim;
        let e = (-norm2(x)).exp();
        diag(out, n, lam + 2.0 * w * (1.0 - e));
        for a in 0..n {
            for b in 0..n {
                out[a * n + b] += 4.0 * w * e * x[a] * x[b];
            }
        }
    }

    fn mf_second_grad(&self, stage: Stage, _mu: &Measure, _x: &[f64], y: &[f64], out: &mut [f64]) {
        let (_, s, _) = self.split(stage);
        for (o, yi) in out.iter_mut().zip(y) {
            *o = s * yi;
        }
    }

    fn mf_kernel(&self, stage: Stage, _mu: &Measure, _x: &[f64], _y: &[f64], out: &mut [f64]) {
        let (_, s, _) = self.split(stage);
        diag(out, self.dim, s);
    }

    fn mf_pooled(&self, stage: Stage, mu: &Measure, _x: &[f64], delta: &[f64], out: &mut [f64]) {
        let (_, s, _) = self.split(stage);
        let n = self.dim;
        if s == 0.0 {
            out.fill(0.0);
            return;
        }
        let mean = self.summarize(delta, mu.weights);
        for chunk in out.chunks_mut(n) {
            for (o, m) in chunk.iter_mut().zip(&mean) {
                *o = s * m;
            }
        }
    }

    fn mf_second_grad_mean(
        &self,
        stage: Stage,
        _mu: &Measure,
        _x: &[f64],
        ys: &[f64],
        yw: &[f64],
        out: &mut [f64],
    ) {
        let (_, s, _) = self.split(stage);
        let n = self.dim;
        let mean = self.summarize(ys, yw);
        for chunk in out.chunks_mut(n) {
            for (o, m) in chunk.iter_mut().zip(&mean) {
                *o = s * m;
            }
        }
    }

    fn has_third_order(&self) -> bool {
        true
    }

    fn mf_hess_dir(&self, stage: Stage, _mu: &Measure, x: &[f64], dx: &[f64], out: &mut [f64]) {
        let (_, _, w) = self.split(stage);
        let n = self.dim;
        out.fill(0.0);
        if w == 0.0 {
            return;
        }
        let e = (-norm2(x)).exp();
        let xd: f64 = x.iter().zip(dx).map(|(a, b)| a * b).sum();
        for a in 0..n {
            out[a * n + a] += 4.0 * w * e * xd;
            for b in 0..n {
                out[a * n + b] +=
                    4.0 * w * e * (dx[a] * x[b] + x[a] * dx[b] - 2.0 * xd * x[a] * x[b]);
            }
        }
    }

    fn mf_pooled_dir(
        &self,
        _stage: Stage,
        _mu: &Measure,
        _x: &[f64],
        _dx: &[f64],
        _delta: &[f64],
        out: &mut [f64],
    ) {
        out.fill(0.0);
    }

    fn mf_second_hess_mean(
        &self,
        _stage: Stage,
        _mu: &Measure,
        _x: &[f64],
        _dx: &[f64],
        _ys: &[f64],
        _yw: &[f64],
        out: &mut [f64],
    ) {
        out.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn measure_of<'a>(
        m: &StandardModel,
        pts: &'a [f64],
        w: &'a [f64],
        summary: &'a [f64],
    ) -> Measure<'a> {
        Measure {
            dim: m.dim,
            points: pts,
            weights: w,
            summary,
        }
    }

    #[test]
    fn catalog_resolves() {
        for name in builtin_models() {
            assert!(StandardModel::builtin(name, 1).is_some());
        }
        assert!(StandardModel::builtin("nope", 1).is_none());
        assert!(StandardModel::builtin("zero_cost", 2).unwrap().is_trivial());
    }

    #[test]
    fn kernel_values() {
        let pts = [0.3, -1.0, 2.0];
        let w = [0.2, 0.5, 0.3];
        let a = StandardModel::builtin("lq_scalar", 1).unwrap();
        let b = StandardModel::builtin("mean_interaction", 1).unwrap();
        let c = StandardModel::builtin("nonquadratic", 1).unwrap();
        let mut k = [0.0];
        let sa = a.summarize(&pts, &w);
        a.mf_kernel(
            Stage::Running,
            &measure_of(&a, &pts, &w, &sa),
            &[0.1],
            &[0.7],
            &mut k,
        );
        assert_eq!(k[0], 0.0);
        let sb = b.summarize(&pts, &w);
        b.mf_kernel(
            Stage::Running,
            &measure_of(&b, &pts, &w, &sb),
            &[0.1],
            &[0.7],
            &mut k,
        );
        assert_eq!(k[0], 0.5);
        // dF/dν(x) = x^2 + exp(-x^2) for the non-quadratic example.
        let sc = c.summarize(&pts, &w);
        let mu = measure_of(&c, &pts, &w, &sc);
        for x in [-2.0, 0.0, 0.4, 3.0] {
            let want = x * x + f64::exp(-x * x);
            assert!((c.mf_lfd(Stage::Running, &mu, &[x]) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn nonquadratic_constant_covers_curvature() {
        let c = StandardModel::builtin("nonquadratic", 1).unwrap();
        let k = c.constants();
        let pts = [0.0];
        let w = [1.0];
        let s = c.summarize(&pts, &w);
        let mu = measure_of(&c, &pts, &w, &s);
        let mut h = [0.0];
        let mut worst: f64 = 0.0;
        for i in 0..=4000 {
            let x = -10.0 + i as f64 * 0.005;
            c.mf_hess(Stage::Running, &mu, &[x], &mut h);
            let bound = 2.0 + (4.0 * x * x - 2.0).abs() * f64::exp(-x * x);
            assert!(h[0].abs() <= bound + 1e-12);
            worst = worst.max(h[0].abs());
        }
        assert!(worst <= k.c / 2.0 + 1e-12);
        assert!((k.c / 2.0 - worst).abs() < 1e-4);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn names() -> impl Strategy<Value = &'static str> {
            prop::sample::select(vec![
                "lq_scalar",
                "mean_interaction",
                "nonquadratic",
                "coupled",
            ])
        }

        fn stages() -> impl Strategy<Value = Stage> {
            prop::sample::select(vec![Stage::Running, Stage::Terminal])
        }

        proptest! {
            #[test]
            fn functionals_depend_only_on_the_law(name in names(), stage in stages(),
                                                  pts in prop::collection::vec(-3.0..3.0f64, 5), y in -3.0..3.0f64) {
                let m = StandardModel::builtin(name, 1).unwrap();
                let w = [0.1, 0.3, 0.2, 0.25, 0.15];
                let mut rp = pts.clone();
                rp.reverse();
                let mut rw = w;
                rw.reverse();
                let (s1, s2) = (m.summarize(&pts, &w), m.summarize(&rp, &rw));
                let (a, b) = (measure_of(&m, &pts, &w, &s1), measure_of(&m, &rp, &rw, &s2));
                prop_assert!((m.mf(stage, &a) - m.mf(stage, &b)).abs() < 1e-12);
                prop_assert!((m.mf_lfd(stage, &a, &[y]) - m.mf_lfd(stage, &b, &[y])).abs() < 1e-12);
            }

            #[test]
            fn running_cost_is_strongly_convex(name in names(), x in -3.0..3.0f64, v1 in -5.0..5.0f64, v2 in -5.0..5.0f64) {
                let m = StandardModel::builtin(name, 1).unwrap();
                let lam = m.constants().lambda;
                let mid = m.l(&[x], &[0.5 * (v1 + v2)]);
                let avg = 0.5 * (m.l(&[x], &[v1]) + m.l(&[x], &[v2]));
                prop_assert!(mid <= avg - lam / 8.0 * (v1 - v2).powi(2) + 1e-9);
            }

            #[test]
            fn lfd_is_the_first_variation(name in names(), stage in stages(),
                                          pts in prop::collection::vec(-2.0..2.0f64, 4), y in -2.0..2.0f64) {
                let m = StandardModel::builtin(name, 1).unwrap();
                let w = [0.25; 4];
                let s = m.summarize(&pts, &w);
                let mu = measure_of(&m, &pts, &w, &s);
                let mixed = |e: f64| {
                    let mut p = pts.clone();
                    p.push(y);
                    let mut q: Vec<f64> = w.iter().map(|v| (1.0 - e) * v).collect();
                    q.push(e);
                    let s = m.summarize(&p, &q);
                    m.mf(stage, &measure_of(&m, &p, &q, &s))
                };
                let e = 1e-5;
                let fd = (mixed(e) - mixed(-e)) / (2.0 * e);
                let mean: f64 = pts.iter().map(|x| 0.25 * m.mf_lfd(stage, &mu, &[*x])).sum();
                let want = m.mf_lfd(stage, &mu, &[y]) - mean;
                prop_assert!((fd - want).abs() < 1e-5 * (1.0 + want.abs()));
            }

            #[test]
            fn gradient_differentiates_lfd(name in names(), stage in stages(),
                                           pts in prop::collection::vec(-2.0..2.0f64, 3), y in -2.0..2.0f64) {
                let m = StandardModel::builtin(name, 1).unwrap();
                let w = [0.2, 0.3, 0.5];
                let s = m.summarize(&pts, &w);
                let mu = measure_of(&m, &pts, &w, &s);
                let e = 1e-5;
                let fd = (m.mf_lfd(stage, &mu, &[y + e]) - m.mf_lfd(stage, &mu, &[y - e])) / (2.0 * e);
                let mut g = [0.0];
                m.mf_grad(stage, &mu, &[y], &mut g);
                prop_assert!((fd - g[0]).abs() < 1e-6 * (1.0 + g[0].abs()));
            }
        }
    }
}
