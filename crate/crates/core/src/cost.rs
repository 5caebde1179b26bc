//! Cost functional: terminal matching losses, optional running loss and
//! quadratic penalties on the parameters and their depth derivative.

use crate::error::{Error, Result};
use crate::mesh::{CostWeights, ParamTrajectory};
use crate::model::NodeModel;
use crate::ode::{DenseSolution, SolverOptions};

/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Inputs with one-hot targets. Class ids are 0-based: id `c` is encoded
/// as the unit vector `e_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    n_state: usize,
    inputs: Vec<Vec<f64>>,
    classes: Vec<usize>,
}

impl LabeledSet {
    pub fn new(n_state: usize, inputs: Vec<Vec<f64>>, classes: Vec<usize>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::invalid("a labeled set needs at least one sample"));
        }
        if inputs.len() != classes.len() {
            return Err(Error::shape("inputs and classes differ in length"));
        }
        if inputs.iter().any(|x| x.len() != n_state) {
            return Err(Error::shape(format!("every input must have length {n_state}")));
        }
        if inputs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("inputs must be finite"));
        }
        if let Some(c) = classes.iter().find(|c| **c >= n_state) {
            return Err(Error::invalid(format!("class id {c} has no one-hot code in dimension {n_state}")));
        }
        Ok(Self { n_state, inputs, classes })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn n_state(&self) -> usize {
        self.n_state
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn input(&self, k: usize) -> &[f64] {
        &self.inputs[k]
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn class(&self, k: usize) -> usize {
        self.classes[k]
    }

    pub fn target(&self, k: usize) -> Vec<f64> {
        one_hot(self.classes[k], self.n_state)
    }

    pub fn count_class(&self, c: usize) -> usize {
        self.classes.iter().filter(|k| **k == c).count()
    }

    /// Indices of all samples of class `c`, in order.
    pub fn indices_of_class(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|k| self.classes[*k] == c).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledSet> {
        let inputs = indices.iter().map(|&k| self.inputs[k].clone()).collect();
        let classes = indices.iter().map(|&k| self.classes[k]).collect();
        LabeledSet::new(self.n_state, inputs, classes)
    }
}

pub fn one_hot(class: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[class] = 1.0;
    v
}

/// Numerically shifted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    softmax_into(z, &mut out);
    out
}

pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v - zmax).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// `H(p, q) = -sum p_i log q_i` with `q_i` floored at [`LOG_FLOOR`].
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    -p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi != 0.0)
        .map(|(pi, qi)| pi * qi.max(LOG_FLOOR).ln())
        .sum::<f64>()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sq_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Terminal loss `L(x, y)`.
pub fn terminal_loss(x: &[f64], y: &[f64], w: &CostWeights) -> f64 {
    let mut l = 0.0;
    if w.mu1 != 0.0 {
        l += 0.5 * w.mu1 * sq_dist(x, y);
    }
    if w.mu2 != 0.0 {
        l += w.mu2 * cross_entropy(y, &softmax(x));
    }
    if w.mu3 != 0.0 {
        l += 0.5 * w.mu3 * sq_norm(x);
    }
    l
}

/// `D_x L(x, y)^T = mu1 (x - y) + mu2 (softmax(x) - y) + mu3 x`, using
/// that `y` is a probability vector.
pub fn terminal_loss_gradient(x: &[f64], y: &[f64], w: &CostWeights) -> Vec<f64> {
    let sm = if w.mu2 != 0.0 { softmax(x) } else { vec![0.0; x.len()] };
    (0..x.len())
        .map(|i| w.mu1 * (x[i] - y[i]) + w.mu2 * (sm[i] - y[i]) + w.mu3 * x[i])
        .collect()
}

/// `int_0^T (mu4/2)(|W|^2 + |b|^2) + (mu5/2)(|W'|^2 + |b'|^2) dt`.
pub fn penalty(params: &ParamTrajectory, w: &CostWeights) -> f64 {
    let mut p = 0.0;
    if w.mu4 != 0.0 {
        p += 0.5 * w.mu4 * params.l2_norm_sq();
    }
    if w.mu5 != 0.0 {
        p += 0.5 * w.mu5 * params.derivative_inner(params).expect("same layout");
    }
    p
}

/// `int_0^T (1/2)|x(t) - y|^2 dt` sampled at the mesh nodes.
pub fn running_loss(params: &ParamTrajectory, solution: &DenseSolution, y: &[f64]) -> Result<f64> {
    let mesh = params.mesh();
    let weights = mesh.trapezoid_weights();
    let mut x = vec![0.0; y.len()];
    let mut acc = 0.0;
    for (t, wt) in mesh.nodes().iter().zip(&weights) {
        solution.eval_into(*t, &mut x)?;
        acc += wt * 0.5 * sq_dist(&x, y);
    }
    Ok(acc)
}

/// Cost of `params` on `batch` given precomputed forward solutions.
pub fn cost_eval(
    params: &ParamTrajectory,
    batch: &LabeledSet,
    w: &CostWeights,
    solutions: &[DenseSolution],
) -> Result<f64> {
    if solutions.len() != batch.len() {
        return Err(Error::shape(format!("{} solutions for {} samples", solutions.len(), batch.len())));
    }
    let t_final = params.mesh().t_final();
    let mut data = 0.0;
    for (k, sol) in solutions.iter().enumerate() {
        if sol.dim() != batch.n_state() || sol.span() != (0.0, t_final) {
            return Err(Error::shape(format!("solution {k} does not match the batch or mesh")));
        }
        let y = batch.target(k);
        data += terminal_loss(sol.terminal(), &y, w);
        if w.mu_run != 0.0 {
            data += w.mu_run * running_loss(params, sol, &y)?;
        }
    }
    Ok(data / batch.len() as f64 + penalty(params, w))
}

/// Forward solutions of the NODE for every sample of `batch`.
pub fn forward_solve(
    params: &ParamTrajectory,
    batch: &LabeledSet,
    options: &SolverOptions,
) -> Result<Vec<DenseSolution>> {
    if params.n_state() != batch.n_state() {
        return Err(Error::shape("parameter and data dimensions differ"));
    }
    let model = NodeModel::new(params);
    batch.inputs().iter().map(|x0| model.solve(x0, options)).collect()
}

/// Solve and evaluate the cost in one call.
pub fn cost(params: &ParamTrajectory, batch: &LabeledSet, w: &CostWeights, options: &SolverOptions) -> Result<f64> {
    let sols = forward_solve(params, batch, options)?;
    cost_eval(params, batch, w, &sols)
}
