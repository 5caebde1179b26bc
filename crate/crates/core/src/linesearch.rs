//! Sensitivity solves and the exact line search along a search direction.
//!
//! Along `theta + beta * eta` the states are replaced by their first-order
//! expansion `x + beta * xi`, which turns the cost into a surrogate
//! `E~(beta)` whose derivative is cheap to evaluate once `xi` is known.

use crate::cost::{cross_entropy, softmax_into, LabeledSet};
use crate::error::{Error, Result};
use crate::mesh::{param_len, CostWeights, GradientField, ParamTrajectory};
use crate::model::{preactivation, Activation, Tanh, MAX_STATE};
use crate::ode::{solve_ivp, DenseSolution, IvpProblem, SolverOptions};

/// Upper end of the bracket for the learning rate.
pub const BETA_MAX: f64 = 10.0;
/// Stopping tolerance on `|E~'(beta)|` for the bisection.
pub const BETA_TOL: f64 = 1e-10;
pub const BETA_MAX_ITER: usize = 100;

/// Solve `xi' = sigma'(Wx+b) o (W xi + V x + a)`, `xi(0) = 0`, for each sample,
/// with `x` taken from the forward solutions and `(V, a)` from `direction`.
pub fn solve_sensitivity(
    params: &ParamTrajectory,
    direction: &GradientField,
    forward: &[DenseSolution],
    options: &SolverOptions,
) -> Result<Vec<DenseSolution>> {
    if !params.same_layout(direction) {
        return Err(Error::shape("direction does not match the parameter layout"));
    }
    let n = params.n_state();
    let m = param_len(n);
    let mesh = params.mesh();
    let mut out = Vec::with_capacity(forward.len());
    for fwd in forward {
        if fwd.dim() != n {
            return Err(Error::shape("forward solution has the wrong dimension"));
        }
        let rhs = |t: f64, xi: &[f64], dxi: &mut [f64]| {
            let mut x = [0.0; MAX_STATE];
            let mut theta = [0.0; MAX_STATE * (MAX_STATE + 1)];
            let mut eta = [0.0; MAX_STATE * (MAX_STATE + 1)];
            fwd.eval_into(t, &mut x[..n]).expect("time inside forward span");
            params.interpolate_into(t, &mut theta[..m]).expect("time inside mesh");
            direction.interpolate_into(t, &mut eta[..m]).expect("time inside mesh");
            let (mut z, mut forcing) = ([0.0; MAX_STATE], [0.0; MAX_STATE]);
            preactivation(&theta, &x[..n], &mut z);
            preactivation(&eta, &x[..n], &mut forcing);
            for row in 0..n {
                let mut acc = forcing[row];
                for col in 0..n {
                    acc += theta[col * n + row] * xi[col];
                }
                dxi[row] = Tanh.slope(z[row]) * acc;
            }
        };
        let problem = IvpProblem::new(rhs, 0.0, mesh.t_final(), vec![0.0; n])
            .with_stepping(options.stepping(mesh.nodes()));
        out.push(solve_ivp(&problem)?);
    }
    Ok(out)
}

/// Everything the surrogate needs, reduced from the forward and sensitivity
/// solutions so that `E~` and `E~'` cost O(K n) per evaluation.
#[derive(Clone, Debug)]
pub struct Surrogate {
    weights: CostWeights,
    n_state: usize,
    terminal: Vec<f64>,
    xi_terminal: Vec<f64>,
    targets: Vec<f64>,
    // running term: int |x-y|^2, int <x-y, xi>, int |xi|^2, summed over samples
    run: [f64; 3],
    // penalty term: |theta|^2, <theta, eta>, |eta|^2 in L2 and for the derivatives
    pen_l2: [f64; 3],
    pen_d: [f64; 3],
}

impl Surrogate {
    pub fn new(
        params: &ParamTrajectory,
        batch: &LabeledSet,
        w: &CostWeights,
        forward: &[DenseSolution],
        sensitivities: &[DenseSolution],
        direction: &GradientField,
    ) -> Result<Self> {
        if forward.len() != batch.len() || sensitivities.len() != batch.len() {
            return Err(Error::shape("one forward and one sensitivity solution per sample are required"));
        }
        let n = batch.n_state();
        let mut terminal = Vec::with_capacity(n * batch.len());
        let mut xi_terminal = Vec::with_capacity(n * batch.len());
        let mut targets = Vec::with_capacity(n * batch.len());
        let mut run = [0.0; 3];
        let mesh = params.mesh();
        let weights = mesh.trapezoid_weights();
        let (mut x, mut xi) = (vec![0.0; n], vec![0.0; n]);
        for k in 0..batch.len() {
            let y = batch.target(k);
            terminal.extend_from_slice(forward[k].terminal());
            xi_terminal.extend_from_slice(sensitivities[k].terminal());
            if w.mu_run != 0.0 {
                for (t, wt) in mesh.nodes().iter().zip(&weights) {
                    forward[k].eval_into(*t, &mut x)?;
                    sensitivities[k].eval_into(*t, &mut xi)?;
                    for i in 0..n {
                        let d = x[i] - y[i];
                        run[0] += wt * d * d;
                        run[1] += wt * d * xi[i];
                        run[2] += wt * xi[i] * xi[i];
                    }
                }
            }
            targets.extend(y);
        }
        let theta = params.field();
        let eta = direction.field();
        let pen_l2 = [theta.l2_norm_sq(), theta.l2_inner(eta)?, eta.l2_norm_sq()];
        let pen_d = [theta.derivative_inner(theta)?, theta.derivative_inner(eta)?, eta.derivative_inner(eta)?];
        Ok(Surrogate { weights: *w, n_state: n, terminal, xi_terminal, targets, run, pen_l2, pen_d })
    }

    pub fn sample_count(&self) -> usize {
        self.terminal.len() / self.n_state
    }

    /// `E~(beta)`, the cost with states replaced by `x + beta xi`.
    pub fn value(&self, beta: f64) -> f64 {
        let w = &self.weights;
        let n = self.n_state;
        let inv_k = 1.0 / self.sample_count() as f64;
        let mut data = 0.0;
        let (mut z, mut sm) = ([0.0; MAX_STATE], [0.0; MAX_STATE]);
        for k in 0..self.sample_count() {
            let y = &self.targets[k * n..(k + 1) * n];
            let (x, xi) = (&self.terminal[k * n..(k + 1) * n], &self.xi_terminal[k * n..(k + 1) * n]);
            for ((zi, a), d) in z.iter_mut().zip(x).zip(xi) {
                *zi = a + beta * d;
            }
            let z = &z[..n];
            if w.mu1 != 0.0 {
                data += 0.5 * w.mu1 * z.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            if w.mu2 != 0.0 {
                softmax_into(z, &mut sm[..n]);
                data += w.mu2 * cross_entropy(y, &sm[..n]);
            }
            if w.mu3 != 0.0 {
                data += 0.5 * w.mu3 * z.iter().map(|a| a * a).sum::<f64>();
            }
        }
        if w.mu_run != 0.0 {
            data += 0.5 * w.mu_run * quadratic(&self.run, beta);
        }
        data * inv_k + 0.5 * w.mu4 * quadratic(&self.pen_l2, beta) + 0.5 * w.mu5 * quadratic(&self.pen_d, beta)
    }

    /// `E~'(beta)`.
    pub fn derivative(&self, beta: f64) -> f64 {
        let w = &self.weights;
        let n = self.n_state;
        let inv_k = 1.0 / self.sample_count() as f64;
        let mut data = 0.0;
        let (mut z, mut sm) = ([0.0; MAX_STATE], [0.0; MAX_STATE]);
        for k in 0..self.sample_count() {
            let y = &self.targets[k * n..(k + 1) * n];
            let xi = &self.xi_terminal[k * n..(k + 1) * n];
            for i in 0..n {
                z[i] = self.terminal[k * n + i] + beta * xi[i];
            }
            if w.mu2 != 0.0 {
                softmax_into(&z[..n], &mut sm[..n]);
            }
            for i in 0..n {
                let g = w.mu1 * (z[i] - y[i]) + w.mu2 * (sm[i] - y[i]) + w.mu3 * z[i];
                data += g * xi[i];
            }
        }
        if w.mu_run != 0.0 {
            data += w.mu_run * (self.run[1] + beta * self.run[2]);
        }
        data * inv_k
            + w.mu4 * (self.pen_l2[1] + beta * self.pen_l2[2])
            + w.mu5 * (self.pen_d[1] + beta * self.pen_d[2])
    }

    /// True when `E~'` is affine in `beta`, which happens without the
    /// cross-entropy term.
    pub fn is_affine(&self) -> bool {
        self.weights.mu2 == 0.0
    }
}

// |p + beta q|^2 from (|p|^2, <p,q>, |q|^2)
fn quadratic(c: &[f64; 3], beta: f64) -> f64 {
    c[0] + 2.0 * beta * c[1] + beta * beta * c[2]
}

/// `E~'(beta)` straight from the solutions.
pub fn etilde_prime(
    beta: f64,
    params: &ParamTrajectory,
    batch: &LabeledSet,
    w: &CostWeights,
    forward: &[DenseSolution],
    sensitivities: &[DenseSolution],
    direction: &GradientField,
) -> Result<f64> {
    Ok(Surrogate::new(params, batch, w, forward, sensitivities, direction)?.derivative(beta))
}

/// Result of the exact line search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BetaOutcome {
    /// A root of `E~'` (or the closed form in the affine case).
    Step(f64),
    /// No sign change on `[0, BETA_MAX]`; the step is capped.
    Capped(f64),
    /// `E~'(0) > 0`: the direction is not a descent direction.
    NotDescent,
    /// `E~'(0) = 0`: nothing to gain along this direction.
    Stationary,
}

impl BetaOutcome {
    pub fn beta(&self) -> Option<f64> {
        match self {
            BetaOutcome::Step(b) | BetaOutcome::Capped(b) => Some(*b),
            _ => None,
        }
    }
}

/// Learning rate minimizing the surrogate along the direction.
pub fn optimal_beta(s: &Surrogate) -> Result<BetaOutcome> {
    let d0 = s.derivative(0.0);
    if !d0.is_finite() {
        return Err(Error::Diverged(format!("line search derivative is {d0}")));
    }
    if d0 > 0.0 {
        return Ok(BetaOutcome::NotDescent);
    }
    if d0 == 0.0 {
        return Ok(BetaOutcome::Stationary);
    }
    if s.is_affine() {
        // E~' = d0 + beta * slope, and the closed form is not capped
        let slope = s.derivative(1.0) - d0;
        if slope <= 0.0 || !slope.is_finite() {
            return Ok(BetaOutcome::Capped(BETA_MAX));
        }
        return Ok(BetaOutcome::Step(-d0 / slope));
    }
    let d_max = s.derivative(BETA_MAX);
    if d_max <= 0.0 {
        log::warn!("no sign change of the line-search derivative on [0, {BETA_MAX}]");
        return Ok(BetaOutcome::Capped(BETA_MAX));
    }
    let (mut lo, mut hi) = (0.0, BETA_MAX);
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..BETA_MAX_ITER {
        mid = 0.5 * (lo + hi);
        let d = s.derivative(mid);
        if d.abs() <= BETA_TOL {
            break;
        }
        if d < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(BetaOutcome::Step(mid))
}
