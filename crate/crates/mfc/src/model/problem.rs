use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::ContinuousCDF;

use super::{c0, CostModel};
use crate::ensemble::{NoiseBundle, RandomField, TimeGrid};
use crate::error::{Error, Result};

/// A model together with volatility, horizon, initial field and the shared noise.
#[derive(Clone)]
pub struct ControlProblem {
    pub model: Arc<dyn CostModel>,
    /// Row-major `n x n` volatility matrix.
    pub eta: Vec<f64>,
    pub grid: TimeGrid,
    pub x0: RandomField,
    /// Weight of each atom; defaults to `1/M`.
    pub atom_weights: Vec<f64>,
    pub noise: NoiseBundle,
}

impl std::fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlProblem")
            .field("model", &self.model.name())
            .field("eta", &self.eta)
            .field("grid", &self.grid)
            .field("atoms", &self.x0.atoms)
            .field("scenarios", &self.x0.scenarios)
            .finish()
    }
}

impl ControlProblem {
    pub fn new(
        model: Arc<dyn CostModel>,
        eta: Vec<f64>,
        grid: TimeGrid,
        x0: RandomField,
        noise: NoiseBundle,
    ) -> Result<Self> {
        let n = model.dim();
        if x0.dim != n {
            return Err(Error::Shape(format!(
                "initial field has dim {} but model has {n}",
                x0.dim
            )));
        }
        if eta.len() != n * n || eta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "eta must be a finite {n}x{n} matrix"
            )));
        }
        if x0.adapted_to != 0 {
            return Err(Error::Invalid(
                "initial field must not depend on the noise".into(),
            ));
        }
        if noise.scenarios != x0.scenarios || noise.n != n {
            return Err(Error::Shape(format!(
                "noise has K={}, n={} but field has K={}, n={n}",
                noise.scenarios, noise.n, x0.scenarios
            )));
        }
        if noise.steps < grid.steps || (noise.dt - grid.dt()).abs() > 1e-12 * grid.dt() {
            return Err(Error::Shape(format!(
                "noise has {} steps of {} but grid needs {} steps of {}",
                noise.steps,
                noise.dt,
                grid.steps,
                grid.dt()
            )));
        }
        let atom_weights = vec![1.0 / x0.atoms as f64; x0.atoms];
        Ok(Self {
            model,
            eta,
            grid,
            x0,
            atom_weights,
            noise,
        })
    }

    /// Replace the atom weights (nonnegative, summing to one).
    pub fn with_atom_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.x0.atoms || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Invalid(
                "atom weights must be M nonnegative numbers".into(),
            ));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!(
                "atom weights sum to {s}, expected 1"
            )));
        }
        self.atom_weights = weights;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.x0.dim
    }

    pub fn atoms(&self) -> usize {
        self.x0.atoms
    }

    pub fn scenarios(&self) -> usize {
        self.x0.scenarios
    }

    /// Weight of every (atom, scenario) point.
    pub fn point_weights(&self) -> Vec<f64> {
        let k = self.scenarios();
        self.atom_weights
            .iter()
            .flat_map(|w| std::iter::repeat_n(w / k as f64, k))
            .collect()
    }

    pub fn c0(&self) -> f64 {
        c0(&self.model.constants(), self.grid.horizon())
    }

    /// Same problem with a different initial field (same atom weights).
    pub fn with_initial(&self, x0: RandomField) -> Result<Self> {
        let mut p = Self::new(
            self.model.clone(),
            self.eta.clone(),
            self.grid,
            x0,
            self.noise.clone(),
        )?;
        p.atom_weights = self.atom_weights.clone();
        Ok(p)
    }

    /// Problem on the grid tail starting at node `k`, reusing the tail of the noise.
    pub fn restarted(&self, k: usize, x0: RandomField) -> Result<Self> {
        if k >= self.grid.steps {
            return Err(Error::Invalid(format!(
                "restart node {k} must be before the last node"
            )));
        }
        let grid = TimeGrid::new(self.grid.node(k), self.grid.t_end, self.grid.steps - k)?;
        let noise = self.noise.window(k, self.grid.steps - k, grid.dt())?;
        let mut p = Self::new(self.model.clone(), self.eta.clone(), grid, x0, noise)?;
        p.atom_weights = self.atom_weights.clone();
        Ok(p)
    }

    /// Problem on `[t, T]` with `steps` steps driven by the last `steps` normals of the current
    /// noise, rescaled to the new step. Nearby start times then see the same normals.
    pub fn rescaled(&self, t: f64, steps: usize) -> Result<Self> {
        if steps > self.grid.steps {
            return Err(Error::Invalid(format!(
                "{steps} steps exceed the {} available",
                self.grid.steps
            )));
        }
        let grid = TimeGrid::new(t, self.grid.t_end, steps)?;
        let noise = self
            .noise
            .window(self.grid.steps - steps, steps, grid.dt())?;
        let mut p = Self::new(
            self.model.clone(),
            self.eta.clone(),
            grid,
            self.x0.clone(),
            noise,
        )?;
        p.atom_weights = self.atom_weights.clone();
        Ok(p)
    }

    /// Same problem and Brownian paths on a grid `factor` times coarser.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        let noise = self.noise.coarsened(factor)?;
        let grid = TimeGrid::new(self.grid.t0, self.grid.t_end, noise.steps)?;
        let mut p = Self::new(
            self.model.clone(),
            self.eta.clone(),
            grid,
            self.x0.clone(),
            noise,
        )?;
        p.atom_weights = self.atom_weights.clone();
        Ok(p)
    }

    /// Problem started at time `t` with step close to the current one. The noise is the
    /// tail of the current one, so starts at different times share increments near `T`.
    pub fn starting_at(&self, t: f64) -> Result<Self> {
        let grid = TimeGrid::starting_at(t, self.grid.t_end, self.grid.dt())?;
        if grid.steps > self.grid.steps {
            return Err(Error::Invalid(format!(
                "start {t} lies before the grid start {}",
                self.grid.t0
            )));
        }
        let noise = self
            .noise
            .window(self.grid.steps - grid.steps, grid.steps, grid.dt())?;
        let mut p = Self::new(
            self.model.clone(),
            self.eta.clone(),
            grid,
            self.x0.clone(),
            noise,
        )?;
        p.atom_weights = self.atom_weights.clone();
        Ok(p)
    }
}

/// `M` atoms drawn i.i.d. from `N(mean, sd^2)` per component.
pub fn gaussian_atoms(atoms: usize, dim: usize, mean: f64, sd: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(mean, sd).expect("finite normal parameters");
    (0..atoms * dim).map(|_| normal.sample(&mut rng)).collect()
}

/// `M` midpoint-quantile nodes of `N(mean, sd^2)` in one dimension.
pub fn quadrature_atoms(atoms: usize, mean: f64, sd: f64) -> Vec<f64> {
    let normal = statrs::distribution::Normal::new(mean, sd).expect("finite normal parameters");
    (0..atoms)
        .map(|i| normal.inverse_cdf((i as f64 + 0.5) / atoms as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::brownian_paths;
    use crate::model::StandardModel;

    fn problem() -> ControlProblem {
        let model = Arc::new(StandardModel::builtin("lq_scalar", 1).unwrap());
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let x0 = RandomField::from_atoms(&[0.0, 1.0, 2.0], 1, 4).unwrap();
        let noise = brownian_paths(&grid, 7, 4, 1).unwrap();
        ControlProblem::new(model, vec![0.3], grid, x0, noise).unwrap()
    }

    #[test]
    fn weights_and_restart() {
        let p = problem();
        let w = p.point_weights();
        assert_eq!(w.len(), 12);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let r = p.restarted(4, p.x0.clone()).unwrap();
        assert_eq!(r.grid.steps, 6);
        assert_eq!(r.noise.step(0), p.noise.step(4));
        assert!(p.clone().with_atom_weights(vec![0.5, 0.5, 0.1]).is_err());
        let s = p.starting_at(0.25).unwrap();
        assert_eq!(s.grid.steps, 8);
        let scale = (s.grid.dt() / p.grid.dt()).sqrt();
        for (a, b) in s.noise.step(0).iter().zip(p.noise.step(2)) {
            assert!((a - b * scale).abs() < 1e-15);
        }
        let c = p.coarsened(2).unwrap();
        assert_eq!(c.grid.steps, 5);
        for (a, b) in c.noise.cumulative(5).iter().zip(p.noise.cumulative(10)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn quadrature_is_symmetric() {
        let q = quadrature_atoms(5, 0.0, 1.0);
        assert!(q[2].abs() < 1e-6);
        assert!((q[0] + q[4]).abs() < 1e-6);
        assert!((q[4] - 1.2815515655).abs() < 1e-5);
    }
}
