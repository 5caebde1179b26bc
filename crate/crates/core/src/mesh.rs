//! Time mesh and depth-varying parameter trajectories.
//!
//! A trajectory stores one parameter vector per mesh node and is read as the
//! piecewise-linear interpolant of those values. The parameter vector packs
//! `W` column-major followed by `b`, so for `N = 2` it is
//! `(W11, W21, W12, W22, b1, b2)`.

use std::ops::Deref;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_FINAL_TIME: f64 = 5.0;
pub const DEFAULT_INTERVALS: usize = 250;
/// Half-width of the uniform initialization interval.
pub const INIT_HALF_WIDTH: f64 = 0.1;

/// Strictly increasing nodes `0 = t_0 < ... < t_n = T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeMesh {
    nodes: Vec<f64>,
}

/// Largest `i <= len - 2` with `grid[i] <= t`, for an ascending grid and
/// `grid[0] <= t`. Tries the proportional guess first, which is exact for
/// uniform grids.
#[inline]
pub(crate) fn segment_index(grid: &[f64], t: f64) -> usize {
    let last = grid.len() - 2;
    let ok = |i: usize| grid[i] <= t && (i == last || t < grid[i + 1]);
    let span = grid[last + 1] - grid[0];
    let guess = (((t - grid[0]) / span) * (last + 1) as f64) as usize;
    let guess = guess.min(last);
    if ok(guess) {
        return guess;
    }
    if guess < last && ok(guess + 1) {
        return guess + 1;
    }
    if guess > 0 && ok(guess - 1) {
        return guess - 1;
    }
    (grid.partition_point(|&x| x <= t) - 1).min(last)
}

impl TimeMesh {
    pub fn uniform(t_final: f64, intervals: usize) -> Result<Self> {
        if intervals == 0 {
            return Err(Error::invalid("mesh needs at least one interval"));
        }
        if !(t_final.is_finite() && t_final > 0.0) {
            return Err(Error::invalid(format!("final time must be positive, got {t_final}")));
        }
        let n = intervals as f64;
        let mut nodes: Vec<f64> = (0..=intervals).map(|i| t_final * (i as f64) / n).collect();
        nodes[intervals] = t_final;
        Ok(Self { nodes })
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::invalid("mesh needs at least two nodes"));
        }
        if nodes[0] != 0.0 {
            return Err(Error::invalid("mesh must start at t = 0"));
        }
        if nodes.iter().any(|t| !t.is_finite()) || nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("mesh nodes must be finite and strictly increasing"));
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn intervals(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn t_final(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn contains(&self, t: f64) -> bool {
        (0.0..=self.t_final()).contains(&t)
    }

    /// Segment index `i` and local coordinate `s in [0, 1]` with
    /// `t = t_i + s (t_{i+1} - t_i)`. Interior nodes map to the segment on
    /// their right; `T` maps to the last segment with `s = 1`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        if !self.contains(t) {
            return Err(Error::Domain { t, lo: 0.0, hi: self.t_final() });
        }
        let i = segment_index(&self.nodes, t);
        let (a, b) = (self.nodes[i], self.nodes[i + 1]);
        Ok((i, (t - a) / (b - a)))
    }

        /// Composite trapezoid weights, `sum_i w_i f(t_i) ~ int_0^T f`.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.nodes.len()];
        for (i, seg) in self.nodes.windows(2).enumerate() {
            let h = seg[1] - seg[0];
            w[i] += 0.5 * h;
            w[i + 1] += 0.5 * h;
        }
        w
    }

    pub fn step(&self, i: usize) -> f64 {
        self.nodes[i + 1] - self.nodes[i]
    }
}

/// Position of `W[row, col]` in the packed parameter vector.
#[inline]
pub fn weight_index(n_state: usize, row: usize, col: usize) -> usize {
    col * n_state + row
}

/// Position of `b[row]` in the packed parameter vector.
#[inline]
pub fn bias_index(n_state: usize, row: usize) -> usize {
    n_state * n_state + row
}

#[inline]
pub fn param_len(n_state: usize) -> usize {
    n_state * n_state + n_state
}

/// Vector-valued function on a mesh, stored node by node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodalField {
    mesh: Arc<TimeMesh>,
    n_state: usize,
    values: Vec<f64>,
}

impl NodalField {
    pub fn zeros(mesh: Arc<TimeMesh>, n_state: usize) -> Self {
        let len = mesh.node_count() * param_len(n_state);
        Self { mesh, n_state, values: vec![0.0; len] }
    }

    pub fn from_values(mesh: Arc<TimeMesh>, n_state: usize, values: Vec<f64>) -> Result<Self> {
        if n_state == 0 {
            return Err(Error::invalid("state dimension must be at least 1"));
        }
        let expected = mesh.node_count() * param_len(n_state);
        if values.len() != expected {
            return Err(Error::shape(format!(
                "expected {expected} values ({} nodes x {}), got {}",
                mesh.node_count(),
                param_len(n_state),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("trajectory values must be finite"));
        }
        Ok(Self { mesh, n_state, values })
    }

    /// Same value vector at every node.
    pub fn constant(mesh: Arc<TimeMesh>, n_state: usize, value: &[f64]) -> Result<Self> {
        if value.len() != param_len(n_state) {
            return Err(Error::shape(format!(
                "constant value has length {}, expected {}",
                value.len(),
                param_len(n_state)
            )));
        }
        let values = value.repeat(mesh.node_count());
        Self::from_values(mesh, n_state, values)
    }

    /// Build from a closure `f(t, out)` sampled at every node.
    pub fn from_fn(mesh: Arc<TimeMesh>, n_state: usize, mut f: impl FnMut(f64, &mut [f64])) -> Self {
        let m = param_len(n_state);
        let mut values = vec![0.0; mesh.node_count() * m];
        for (t, chunk) in mesh.nodes().iter().zip(values.chunks_exact_mut(m)) {
            f(*t, chunk);
        }
        Self { mesh, n_state, values }
    }

    pub fn mesh(&self) -> &Arc<TimeMesh> {
        &self.mesh
    }

    pub fn n_state(&self) -> usize {
        self.n_state
    }

    pub fn m_param(&self) -> usize {
        param_len(self.n_state)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn node(&self, i: usize) -> &[f64] {
        let m = self.m_param();
        &self.values[i * m..(i + 1) * m]
    }

    pub fn node_mut(&mut self, i: usize) -> &mut [f64] {
        let m = self.m_param();
        &mut self.values[i * m..(i + 1) * m]
    }

    /// Values of component `c` at all nodes.
    pub fn component(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.m_param()).copied().collect()
    }

    pub fn set_component(&mut self, c: usize, data: &[f64]) {
        let m = self.m_param();
        for (slot, v) in self.values.iter_mut().skip(c).step_by(m).zip(data) {
            *slot = *v;
        }
    }

    pub fn same_layout(&self, other: &NodalField) -> bool {
        self.n_state == other.n_state
            && (Arc::ptr_eq(&self.mesh, &other.mesh) || self.mesh == other.mesh)
    }

    fn check_layout(&self, other: &NodalField) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::shape("fields live on different meshes or dimensions"))
        }
    }

    /// Piecewise-linear value at `t`, written into `out`.
    pub fn interpolate_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let (i, s) = self.mesh.locate(t)?;
        let (a, b) = (self.node(i), self.node(i + 1));
        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
            *o = (1.0 - s) * x + s * y;
        }
        Ok(())
    }

    pub fn interpolate(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.m_param()];
        self.interpolate_into(t, &mut out)?;
        Ok(out)
    }

    /// Slope of the interpolant on segment `i`.
    pub fn segment_slope(&self, i: usize) -> Vec<f64> {
        let h = self.mesh.step(i);
        self.node(i + 1).iter().zip(self.node(i)).map(|(b, a)| (b - a) / h).collect()
    }

    /// Derivative of the interpolant: right limit at interior nodes, left
    /// limit at `T`.
    pub fn derivative_at(&self, t: f64) -> Result<Vec<f64>> {
        let (i, _) = self.mesh.locate(t)?;
        Ok(self.segment_slope(i))
    }

    /// `int_0^T <self, other> dt` by composite trapezoid.
    pub fn l2_inner(&self, other: &NodalField) -> Result<f64> {
        self.check_layout(other)?;
        let w = self.mesh.trapezoid_weights();
        let m = self.m_param();
        Ok(w.iter()
            .enumerate()
            .map(|(i, wi)| {
                let (a, b) = (&self.values[i * m..(i + 1) * m], &other.values[i * m..(i + 1) * m]);
                wi * dot(a, b)
            })
            .sum())
    }

    /// `int_0^T <self', other'> dt`, exact for piecewise-linear fields.
    pub fn derivative_inner(&self, other: &NodalField) -> Result<f64> {
        self.check_layout(other)?;
        let m = self.m_param();
        let mut acc = 0.0;
        for i in 0..self.mesh.intervals() {
            let h = self.mesh.step(i);
            let mut seg = 0.0;
            for c in 0..m {
                let da = self.values[(i + 1) * m + c] - self.values[i * m + c];
                let db = other.values[(i + 1) * m + c] - other.values[i * m + c];
                seg += da * db;
            }
            acc += seg / h;
        }
        Ok(acc)
    }

    pub fn w12_inner(&self, other: &NodalField) -> Result<f64> {
        Ok(self.l2_inner(other)? + self.derivative_inner(other)?)
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.l2_inner(self).expect("same layout")
    }

    pub fn w12_norm_sq(&self) -> f64 {
        self.w12_inner(self).expect("same layout")
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self += alpha * x` in place.
    pub fn add_scaled(&mut self, alpha: f64, x: &NodalField) -> Result<()> {
        self.check_layout(x)?;
        for (y, xv) in self.values.iter_mut().zip(&x.values) {
            *y += alpha * xv;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

macro_rules! nodal_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(NodalField);

        impl $name {
            pub fn zeros(mesh: Arc<TimeMesh>, n_state: usize) -> Self {
                Self(NodalField::zeros(mesh, n_state))
            }

            pub fn from_values(mesh: Arc<TimeMesh>, n_state: usize, values: Vec<f64>) -> Result<Self> {
                NodalField::from_values(mesh, n_state, values).map(Self)
            }

            pub fn constant(mesh: Arc<TimeMesh>, n_state: usize, value: &[f64]) -> Result<Self> {
                NodalField::constant(mesh, n_state, value).map(Self)
            }

            pub fn from_fn(mesh: Arc<TimeMesh>, n_state: usize, f: impl FnMut(f64, &mut [f64])) -> Self {
                Self(NodalField::from_fn(mesh, n_state, f))
            }

            pub fn field(&self) -> &NodalField {
                &self.0
            }

            pub fn field_mut(&mut self) -> &mut NodalField {
                &mut self.0
            }

            pub fn into_field(self) -> NodalField {
                self.0
            }
        }

        impl Deref for $name {
            type Target = NodalField;
            fn deref(&self) -> &NodalField {
                &self.0
            }
        }

        impl From<NodalField> for $name {
            fn from(f: NodalField) -> Self {
                Self(f)
            }
        }
    };
}

nodal_newtype!(
    /// Depth-varying parameters `theta(t) = vec(W(t), b(t))`.
    ParamTrajectory
);
nodal_newtype!(
    /// Gradient, descent direction or perturbation with the layout of a
    /// [`ParamTrajectory`].
    GradientField
);

impl ParamTrajectory {
    pub fn as_direction(&self) -> GradientField {
        GradientField(self.0.clone())
    }
}

impl GradientField {
    pub fn negated(&self) -> GradientField {
        let mut g = self.clone();
        g.0.scale(-1.0);
        g
    }

    pub fn as_params(&self) -> ParamTrajectory {
        ParamTrajectory(self.0.clone())
    }
}

/// `y + alpha * x`, node by node.
pub fn axpy(alpha: f64, x: &GradientField, y: &ParamTrajectory) -> Result<ParamTrajectory> {
    let mut out = y.clone();
    out.0.add_scaled(alpha, &x.0)?;
    Ok(out)
}

pub fn l2_norm_sq(x: &NodalField) -> f64 {
    x.l2_norm_sq()
}

pub fn w12_norm_sq(x: &NodalField) -> f64 {
    x.w12_norm_sq()
}

/// Constant-in-time parameters with components drawn uniformly from
/// `[-0.1, 0.1]`.
pub fn init_params(seed: u64, n_state: usize, mesh: Arc<TimeMesh>) -> ParamTrajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let value: Vec<f64> = (0..param_len(n_state))
        .map(|_| rng.random_range(-INIT_HALF_WIDTH..=INIT_HALF_WIDTH))
        .collect();
    ParamTrajectory::constant(mesh, n_state, &value).expect("length matches")
}

/// Weights of the cost functional.
///
/// `mu1` squared distance, `mu2` softmax cross-entropy, `mu3` output
/// magnitude, `mu4` L2 parameter penalty, `mu5` derivative penalty and
/// `mu_run` the running squared-distance loss along the trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostWeights {
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub mu4: f64,
    pub mu5: f64,
    pub mu_run: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self::moons()
    }
}

impl CostWeights {
    pub const ZERO: CostWeights =
        CostWeights { mu1: 0.0, mu2: 0.0, mu3: 0.0, mu4: 0.0, mu5: 0.0, mu_run: 0.0 };

    /// Squared-distance matching.
    pub fn moons() -> Self {
        Self { mu1: 1.0, ..Self::ZERO }
    }

    /// Cross-entropy matching with output-magnitude control.
    pub fn circles() -> Self {
        Self { mu2: 1.0, mu3: 0.1, ..Self::ZERO }
    }

    pub fn with_l2_penalty(self, mu4: f64) -> Self {
        Self { mu4, ..self }
    }

    pub fn with_w12_penalty(self, mu: f64) -> Self {
        Self { mu4: mu, mu5: mu, ..self }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.mu1, self.mu2, self.mu3, self.mu4, self.mu5, self.mu_run]
    }

    pub fn validate(&self) -> Result<()> {
        let names = ["mu1", "mu2", "mu3", "mu4", "mu5", "mu_run"];
        let bad: Vec<String> = names
            .iter()
            .zip(self.as_array())
            .filter(|(_, v)| !(v.is_finite() && *v >= 0.0))
            .map(|(n, v)| format!("{n} must be a nonnegative number, got {v}"))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}
