//! Time grid, Brownian scenarios, discretized random fields and empirical measures.
//!
//! A field is stored as `M` atoms (samples of the spatial measure) times `K`
//! noise scenarios times `dim` components, flattened as
//! `[(atom * K + scenario) * dim + component]`. All `M` atoms share the same
//! `K` Brownian scenarios.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !(t0 < t_end) || !t0.is_finite() || !t_end.is_finite() {
            return Err(Error::Invalid(format!(
                "time grid needs t0 < T, got [{t0}, {t_end}]"
            )));
        }
        if steps == 0 {
            return Err(Error::Invalid("time grid needs at least one step".into()));
        }
        Ok(Self { t0, t_end, steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }

    pub fn horizon(&self) -> f64 {
        self.t_end - self.t0
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_end
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    /// Grid on `[t, t_end]` whose step is as close as possible to `dt`.
    pub fn starting_at(t: f64, t_end: f64, dt: f64) -> Result<Self> {
        let steps = ((t_end - t) / dt).round().max(1.0) as usize;
        Self::new(t, t_end, steps)
    }
}

/// Serializable description of a noise bundle; the increments are regenerated from it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub seed: u64,
    #[serde(rename = "K")]
    pub scenarios: usize,
    pub n: usize,
    #[serde(rename = "N")]
    pub steps: usize,
    pub dt: f64,
}

/// Gaussian increments with variance `dt` per component, indexed `[(step * K + scenario) * n + i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBundle {
    pub seed: u64,
    pub scenarios: usize,
    pub n: usize,
    pub steps: usize,
    pub dt: f64,
    pub increments: Vec<f64>,
}

pub fn brownian_paths(
    grid: &TimeGrid,
    seed: u64,
    scenarios: usize,
    n: usize,
) -> Result<NoiseBundle> {
    NoiseBundle::generate(NoiseSpec {
        seed,
        scenarios,
        n,
        steps: grid.steps,
        dt: grid.dt(),
    })
}

impl NoiseBundle {
    pub fn generate(spec: NoiseSpec) -> Result<Self> {
        if spec.scenarios == 0 {
            return Err(Error::Invalid("noise bundle needs K >= 1".into()));
        }
        if spec.n == 0 {
            return Err(Error::Invalid("noise bundle needs n >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let sd = spec.dt.sqrt();
        let len = spec.steps * spec.scenarios * spec.n;
        let increments = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sd * z
            })
            .collect();
        Ok(Self {
            seed: spec.seed,
            scenarios: spec.scenarios,
            n: spec.n,
            steps: spec.steps,
            dt: spec.dt,
            increments,
        })
    }

    pub fn spec(&self) -> NoiseSpec {
        NoiseSpec {
            seed: self.seed,
            scenarios: self.scenarios,
            n: self.n,
            steps: self.steps,
            dt: self.dt,
        }
    }

    pub fn step(&self, k: usize) -> &[f64] {
        let w = self.scenarios * self.n;
        &self.increments[k * w..(k + 1) * w]
    }

    pub fn increment(&self, k: usize, scenario: usize) -> &[f64] {
        let o = (k * self.scenarios + scenario) * self.n;
        &self.increments[o..o + self.n]
    }

    /// Steps `start..start + len`, rescaled to variance `dt`. Same underlying normals.
    pub fn window(&self, start: usize, len: usize, dt: f64) -> Result<Self> {
        if start + len > self.steps {
            return Err(Error::Invalid(format!(
                "noise window {start}..{} exceeds {} steps",
                start + len,
                self.steps
            )));
        }
        let w = self.scenarios * self.n;
        let ratio = dt / self.dt;
        let scale = if (ratio - 1.0).abs() < 1e-12 {
            1.0
        } else {
            ratio.sqrt()
        };
        let increments = self.increments[start * w..(start + len) * w]
            .iter()
            .map(|x| x * scale)
            .collect();
        Ok(Self {
            seed: self.seed,
            scenarios: self.scenarios,
            n: self.n,
            steps: len,
            dt,
            increments,
        })
    }

    /// Same paths on a grid `factor` times coarser: consecutive blocks of increments are summed.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.steps % factor != 0 {
            return Err(Error::Invalid(format!(
                "cannot coarsen {} steps by {factor}",
                self.steps
            )));
        }
        let w = self.scenarios * self.n;
        let steps = self.steps / factor;
        let mut increments = vec![0.0; steps * w];
        for (k, block) in increments.chunks_mut(w).enumerate() {
            for j in k * factor..(k + 1) * factor {
                block
                    .iter_mut()
                    .zip(self.step(j))
                    .for_each(|(o, d)| *o += d);
            }
        }
        Ok(Self {
            seed: self.seed,
            scenarios: self.scenarios,
            n: self.n,
            steps,
            dt: self.dt * factor as f64,
            increments,
        })
    }

    /// Brownian motion at node `k` (sum of the first `k` increments) for every scenario.
    pub fn cumulative(&self, k: usize) -> Vec<f64> {
        let w = self.scenarios * self.n;
        let mut out = vec![0.0; w];
        for j in 0..k {
            for (o, d) in out.iter_mut().zip(self.step(j)) {
                *o += d;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomField {
    pub atoms: usize,
    pub scenarios: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    /// Last step whose increments this field may depend on.
    pub adapted_to: usize,
}

impl RandomField {
    pub fn zeros(atoms: usize, scenarios: usize, dim: usize, adapted_to: usize) -> Self {
        Self {
            atoms,
            scenarios,
            dim,
            values: vec![0.0; atoms * scenarios * dim],
            adapted_to,
        }
    }

    pub fn from_values(
        atoms: usize,
        scenarios: usize,
        dim: usize,
        values: Vec<f64>,
        adapted_to: usize,
    ) -> Result<Self> {
        if values.len() != atoms * scenarios * dim {
            return Err(Error::Shape(format!(
                "{} values for a {atoms}x{scenarios}x{dim} field",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("random field has non-finite entries".into()));
        }
        Ok(Self {
            atoms,
            scenarios,
            dim,
            values,
            adapted_to,
        })
    }

    /// Initial field constant across scenarios: atom `a` sits at `points[a]`.
    pub fn from_atoms(points: &[f64], dim: usize, scenarios: usize) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} coordinates do not split into dim {dim}",
                points.len()
            )));
        }
        let atoms = points.len() / dim;
        let mut values = Vec::with_capacity(atoms * scenarios * dim);
        for a in 0..atoms {
            for _ in 0..scenarios {
                values.extend_from_slice(&points[a * dim..(a + 1) * dim]);
            }
        }
        Self::from_values(atoms, scenarios, dim, values, 0)
    }

    pub fn points(&self) -> usize {
        self.atoms * self.scenarios
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.atoms == other.atoms && self.scenarios == other.scenarios && self.dim == other.dim
    }

    pub fn check_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.atoms, self.scenarios, self.dim, other.atoms, other.scenarios, other.dim
            )))
        }
    }

    pub fn at(&self, atom: usize, scenario: usize) -> &[f64] {
        let o = (atom * self.scenarios + scenario) * self.dim;
        &self.values[o..o + self.dim]
    }

    pub fn atom_block(&self, atom: usize) -> &[f64] {
        let w = self.scenarios * self.dim;
        &self.values[atom * w..(atom + 1) * w]
    }

    pub fn atom_block_mut(&mut self, atom: usize) -> &mut [f64] {
        let w = self.scenarios * self.dim;
        &mut self.values[atom * w..(atom + 1) * w]
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn norm(&self) -> f64 {
        hm_inner(self, self).map(f64::sqrt).unwrap_or(f64::NAN)
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: f64, other: &Self) -> Result<Self> {
        self.check_shape(other)?;
        let mut out = self.clone();
        for (o, x) in out.values.iter_mut().zip(&other.values) {
            *o += c * x;
        }
        out.adapted_to = self.adapted_to.max(other.adapted_to);
        Ok(out)
    }

    /// Per-atom scenario average, broadcast back over scenarios.
    pub fn scenario_mean(&self) -> Self {
        let mut out = self.clone();
        let (k, d) = (self.scenarios, self.dim);
        for a in 0..self.atoms {
            let block = out.atom_block_mut(a);
            let mut mean = vec![0.0; d];
            for s in 0..k {
                for i in 0..d {
                    mean[i] += block[s * d + i];
                }
            }
            mean.iter_mut().for_each(|m| *m /= k as f64);
            for s in 0..k {
                block[s * d..(s + 1) * d].copy_from_slice(&mean);
            }
        }
        out
    }

    /// CSV with columns `atom,scenario,dim,value`, floats at 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["atom", "scenario", "dim", "value"])?;
        for a in 0..self.atoms {
            for s in 0..self.scenarios {
                for (i, v) in self.at(a, s).iter().enumerate() {
                    w.write_record([a.to_string(), s.to_string(), i.to_string(), fmt17(*v)])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Float with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// H_m inner product: average over atoms and scenarios of the pointwise dot product.
pub fn hm_inner(x: &RandomField, y: &RandomField) -> Result<f64> {
    x.check_shape(y)?;
    let p = x.points();
    if p == 0 {
        return Ok(0.0);
    }
    Ok(dot(&x.values, &y.values) / p as f64)
}

/// Weighted variant: atom `a` carries mass `weights[a]`, scenarios share it equally.
pub fn hm_inner_weighted(x: &RandomField, y: &RandomField, weights: &[f64]) -> Result<f64> {
    x.check_shape(y)?;
    if weights.len() != x.atoms {
        return Err(Error::Shape(format!(
            "{} weights for {} atoms",
            weights.len(),
            x.atoms
        )));
    }
    let w = x.scenarios * x.dim;
    let mut acc = 0.0;
    for (a, wa) in weights.iter().enumerate() {
        acc += wa * dot(&x.values[a * w..(a + 1) * w], &y.values[a * w..(a + 1) * w]);
    }
    Ok(acc / x.scenarios as f64)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldProcess {
    pub nodes: Vec<RandomField>,
}

impl FieldProcess {
    pub fn constant(template: &RandomField, len: usize) -> Self {
        Self {
            nodes: (0..len)
                .map(|k| {
                    let mut f = template.clone();
                    f.adapted_to = k;
                    f
                })
                .collect(),
        }
    }

    pub fn zeros(len: usize, atoms: usize, scenarios: usize, dim: usize) -> Self {
        Self {
            nodes: (0..len)
                .map(|k| RandomField::zeros(atoms, scenarios, dim, k))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adaptedness tags are non-decreasing and never exceed the node index.
    pub fn is_adapted(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(k, f)| f.adapted_to <= k)
            && self
                .nodes
                .windows(2)
                .all(|w| w[0].adapted_to <= w[1].adapted_to)
    }

    /// `sqrt(dt * sum_k |X_k|^2)`.
    pub fn l2_norm(&self, dt: f64) -> f64 {
        (dt * self
            .nodes
            .iter()
            .map(|f| hm_inner(f, f).unwrap_or(0.0))
            .sum::<f64>())
        .sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        self.nodes.iter().map(RandomField::norm).fold(0.0, f64::max)
    }

    /// Time-integrated inner product `dt * sum_k <X_k, Y_k>`.
    pub fn inner(&self, other: &Self, dt: f64) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "{} vs {} nodes",
                self.len(),
                other.len()
            )));
        }
        let mut acc = 0.0;
        for (a, b) in self.nodes.iter().zip(&other.nodes) {
            acc += hm_inner(a, b)?;
        }
        Ok(dt * acc)
    }

    pub fn axpy(&self, c: f64, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "{} vs {} nodes",
                self.len(),
                other.len()
            )));
        }
        let nodes = self
            .nodes
            .iter()
            .zip(&other.nodes)
            .map(|(a, b)| a.axpy(c, b))
            .collect::<Result<_>>()?;
        Ok(Self { nodes })
    }

    /// Sup over nodes of `|X_k - Y_k|`.
    pub fn sup_distance(&self, other: &Self) -> Result<f64> {
        let d = self.axpy(-1.0, other)?;
        Ok(d.sup_norm())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    pub dim: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() != weights.len() * dim {
            return Err(Error::Shape(format!(
                "{} coordinates for {} weights",
                points.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Invalid("negative or non-finite weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("weights sum to {total}")));
        }
        Ok(Self {
            dim,
            points,
            weights,
        })
    }

    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        let n = points.len() / dim.max(1);
        Self::new(dim, points, vec![1.0 / n as f64; n])
    }

    pub fn dirac(x: &[f64]) -> Self {
        Self {
            dim: x.len(),
            points: x.to_vec(),
            weights: vec![1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        (0..self.len())
            .map(|i| self.weights[i] * f(self.point(i)))
            .sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for i in 0..self.len() {
            for (mj, xj) in m.iter_mut().zip(self.point(i)) {
                *mj += self.weights[i] * xj;
            }
        }
        m
    }

    pub fn second_moment(&self) -> f64 {
        self.integrate(|x| dot(x, x))
    }

    /// Merge coincident support points (exact equality).
    pub fn merged(&self) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            self.point(a)
                .partial_cmp(self.point(b))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut points = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for i in idx {
            let p = self.point(i);
            if !weights.is_empty() && &points[points.len() - self.dim..] == p {
                *weights.last_mut().unwrap() += self.weights[i];
            } else {
                points.extend_from_slice(p);
                weights.push(self.weights[i]);
            }
        }
        Self {
            dim: self.dim,
            points,
            weights,
        }
    }
}

/// Law of the field under atoms x scenarios, every pair equally weighted.
pub fn pushforward(x: &RandomField) -> EmpiricalMeasure {
    let p = x.points();
    EmpiricalMeasure {
        dim: x.dim,
        points: x.values.clone(),
        weights: vec![1.0 / p as f64; p],
    }
}

/// Exact quadratic Wasserstein distance between one-dimensional empirical measures.
pub fn w2_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim != 1 || nu.dim != 1 {
        return Err(Error::Invalid("w2_1d only handles dimension 1".into()));
    }
    let sorted = |m: &EmpiricalMeasure| {
        let mut v: Vec<(f64, f64)> = m
            .points
            .iter()
            .copied()
            .zip(m.weights.iter().copied())
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    let (a, b) = (sorted(mu), sorted(nu));
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (
        a.first().map_or(0.0, |p| p.1),
        b.first().map_or(0.0, |p| p.1),
    );
    let mut cost = 0.0;
    while i < a.len() && j < b.len() {
        let m = ra.min(rb);
        cost += m * (a[i].0 - b[j].0).powi(2);
        ra -= m;
        rb -= m;
        if ra <= 1e-15 {
            i += 1;
            if i < a.len() {
                ra = a[i].1;
            }
        }
        if rb <= 1e-15 {
            j += 1;
            if j < b.len() {
                rb = b[j].1;
            }
        }
    }
    Ok(cost.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(values: &[f64]) -> RandomField {
        RandomField::from_values(values.len(), 1, 1, values.to_vec(), 0).unwrap()
    }

    #[test]
    fn inner_examples() {
        let z = line(&[0.0, 0.0, 0.0]);
        assert_eq!(hm_inner(&z, &z).unwrap(), 0.0);
        let one = line(&[1.0, 1.0, 1.0]);
        assert_eq!(hm_inner(&one, &one).unwrap(), 1.0);
        let idx = line(&[0.0, 1.0, 2.0]);
        assert!((hm_inner(&idx, &one).unwrap() - 1.0).abs() < 1e-15);
        assert!(hm_inner(&idx, &line(&[1.0])).is_err());
    }

    #[test]
    fn pushforward_examples() {
        let c = RandomField::from_values(2, 3, 1, vec![4.0; 6], 0).unwrap();
        let m = pushforward(&c).merged();
        assert_eq!(m.points, vec![4.0]);
        assert!((m.weights[0] - 1.0).abs() < 1e-15);
        let id = line(&[-1.0, 1.0]);
        let m = pushforward(&id);
        assert_eq!(m.weights, vec![0.5, 0.5]);
        let m = pushforward(&line(&[0.0, 1.0, 2.0]));
        assert!((m.second_moment() - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn w2_examples() {
        let mu = EmpiricalMeasure::uniform(1, vec![0.0, 2.0]).unwrap();
        assert_eq!(w2_1d(&mu, &mu).unwrap(), 0.0);
        let a = EmpiricalMeasure::dirac(&[1.5]);
        let b = EmpiricalMeasure::dirac(&[-0.5]);
        assert!((w2_1d(&a, &b).unwrap() - 2.0).abs() < 1e-15);
        let nu = EmpiricalMeasure::uniform(1, vec![1.0, 3.0]).unwrap();
        assert!((w2_1d(&mu, &nu).unwrap() - 1.0).abs() < 1e-15);
        assert!(w2_1d(&EmpiricalMeasure::dirac(&[0.0, 0.0]), &mu).is_err());
    }

    #[test]
    fn w2_unequal_weights() {
        let mu = EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![0.25, 0.75]).unwrap();
        let nu = EmpiricalMeasure::dirac(&[1.0]);
        assert!((w2_1d(&mu, &nu).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn noise_is_reproducible_and_calibrated() {
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let a = brownian_paths(&grid, 7, 4, 2).unwrap();
        let b = brownian_paths(&grid, 7, 4, 2).unwrap();
        assert_eq!(a, b);
        assert!(brownian_paths(&grid, 7, 0, 1).is_err());

        let k = 100_000;
        let big = NoiseBundle::generate(NoiseSpec {
            seed: 3,
            scenarios: k,
            n: 1,
            steps: 1,
            dt: 0.01,
        })
        .unwrap();
        let inc = big.step(0);
        let mean = inc.iter().sum::<f64>() / k as f64;
        let var = inc.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
        assert!((var - 0.01).abs() < 0.03 * 0.01, "variance {var}");
        assert!(mean.abs() <= 4.0 * (0.01 / k as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn window_reuses_normals() {
        let spec = NoiseSpec {
            seed: 1,
            scenarios: 3,
            n: 1,
            steps: 5,
            dt: 0.04,
        };
        let b = NoiseBundle::generate(spec).unwrap();
        let w = b.window(1, 3, 0.01).unwrap();
        assert!((w.step(0)[2] - 0.5 * b.step(1)[2]).abs() < 1e-15);
        assert!(b.window(3, 3, 0.01).is_err());
    }

    #[test]
    fn coarsening_keeps_the_paths() {
        let spec = NoiseSpec {
            seed: 2,
            scenarios: 4,
            n: 2,
            steps: 6,
            dt: 0.1,
        };
        let b = NoiseBundle::generate(spec).unwrap();
        let c = b.coarsened(3).unwrap();
        assert_eq!(c.steps, 2);
        assert!((c.dt - 0.3).abs() < 1e-15);
        for (x, y) in c.cumulative(2).iter().zip(b.cumulative(6)) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!(b.coarsened(4).is_err());
    }

    #[test]
    fn csv_has_fixed_columns() {
        let f = RandomField::from_values(1, 2, 1, vec![0.1, -2.0], 0).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("atom,scenario,dim,value"));
        assert_eq!(lines.next(), Some("0,0,0,1.0000000000000001e-1"));
    }

    #[test]
    fn grid_nodes() {
        let g = TimeGrid::new(0.5, 1.5, 4).unwrap();
        assert_eq!(g.dt(), 0.25);
        assert_eq!(g.node(4), 1.5);
        assert!(TimeGrid::new(1.0, 1.0, 3).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        let s = TimeGrid::starting_at(0.25, 1.0, 0.02).unwrap();
        assert_eq!(s.steps, 38);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn points(len: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-10.0..10.0f64, len)
        }

        proptest! {
            #[test]
            fn cauchy_schwarz(x in points(12), y in points(12)) {
                let (a, b) = (line(&x), line(&y));
                let lhs = hm_inner(&a, &b).unwrap().abs();
                prop_assert!(lhs <= a.norm() * b.norm() * (1.0 + 1e-12) + 1e-12);
            }

            #[test]
            fn w2_is_a_metric(x in points(6), y in points(6), z in points(6)) {
                let m = |v: &Vec<f64>| EmpiricalMeasure::uniform(1, v.clone()).unwrap();
                let (a, b, c) = (m(&x), m(&y), m(&z));
                let ab = w2_1d(&a, &b).unwrap();
                prop_assert!((ab - w2_1d(&b, &a).unwrap()).abs() < 1e-9);
                prop_assert!(ab <= w2_1d(&a, &c).unwrap() + w2_1d(&c, &b).unwrap() + 1e-9);
            }

            #[test]
            fn w2_ignores_atom_order(x in points(8), shift in -3.0..3.0f64) {
                let mut rev = x.clone();
                rev.reverse();
                let a = EmpiricalMeasure::uniform(1, x.clone()).unwrap();
                let b = EmpiricalMeasure::uniform(1, rev).unwrap();
                prop_assert!(w2_1d(&a, &b).unwrap() < 1e-12);
                let moved = EmpiricalMeasure::uniform(1, x.iter().map(|v| v + shift).collect()).unwrap();
                prop_assert!((w2_1d(&a, &moved).unwrap() - shift.abs()).abs() < 1e-9);
            }

            #[test]
            fn merging_keeps_integrals(x in prop::collection::vec(-3i32..3, 1..10)) {
                let v: Vec<f64> = x.iter().map(|&i| i as f64).collect();
                let m = EmpiricalMeasure::uniform(1, v).unwrap();
                let merged = m.merged();
                prop_assert!((merged.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!((merged.second_moment() - m.second_moment()).abs() < 1e-12);
                prop_assert!((merged.mean()[0] - m.mean()[0]).abs() < 1e-12);
            }

            #[test]
            fn grid_is_uniform(t0 in -2.0..2.0f64, len in 0.1..5.0f64, steps in 1usize..200) {
                let g = TimeGrid::new(t0, t0 + len, steps).unwrap();
                prop_assert!((g.node(steps) - (t0 + len)).abs() < 1e-12);
                prop_assert!((g.node(1) - g.node(0) - g.dt()).abs() < 1e-12);
            }
        }
    }
}
