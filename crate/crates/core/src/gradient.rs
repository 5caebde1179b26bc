//! Adjoint solves, L2 gradient assembly and the Sobolev (W^{1,2})
//! representative transform.
//!
//! The 1/K batch normalization lives in the costate terminal condition, so
//! the gradient assembly sums costate contributions without rescaling.

use crate::cost::{forward_solve, cost_eval, LabeledSet, terminal_loss_gradient};
use crate::error::{Error, Result};
use crate::mesh::{CostWeights, GradientField, ParamTrajectory, TimeMesh};
use crate::model::{NodeModel, MAX_STATE};
use crate::ode::{solve_ivp, DenseSolution, IvpProblem, SolverOptions};

/// Per-sample costates `lambda_k(t)` on `[0, T]`.
#[derive(Clone, Debug)]
pub struct CostateTrajectory {
    pub costates: Vec<DenseSolution>,
}

impl CostateTrajectory {
    pub fn len(&self) -> usize {
        self.costates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costates.is_empty()
    }
}

/// Integrate the adjoint problem backward from `T` for every sample:
/// `lambda' = -W^T (sech^2(Wx+b) o lambda) - (mu_run/K)(x - y)` with
/// `lambda(T) = (1/K) D_x L(x(T), y)^T`.
pub fn solve_adjoint(
    params: &ParamTrajectory,
    batch: &LabeledSet,
    w: &CostWeights,
    forward: &[DenseSolution],
    options: &SolverOptions,
) -> Result<CostateTrajectory> {
    if forward.len() != batch.len() {
        return Err(Error::shape("one forward solution per sample is required"));
    }
    let model = NodeModel::new(params);
    let mesh = params.mesh();
    let t_final = mesh.t_final();
    let inv_k = 1.0 / batch.len() as f64;
    let n = batch.n_state();
    let mut costates = Vec::with_capacity(batch.len());
    for (k, fwd) in forward.iter().enumerate() {
        let y = batch.target(k);
        let lambda_t: Vec<f64> =
            terminal_loss_gradient(fwd.terminal(), &y, w).into_iter().map(|g| g * inv_k).collect();
        let run = w.mu_run * inv_k;
        let rhs = |t: f64, lambda: &[f64], out: &mut [f64]| {
            let mut x = [0.0; MAX_STATE];
            fwd.eval_into(t, &mut x[..n]).expect("adjoint time inside forward span");
            model.jac_state_transpose_apply_into(t, &x[..n], lambda, out);
            for i in 0..n {
                out[i] = -out[i];
                if run != 0.0 {
                    out[i] -= run * (x[i] - y[i]);
                }
            }
        };
        let problem =
            IvpProblem::new(rhs, t_final, 0.0, lambda_t).with_stepping(options.stepping(mesh.nodes()));
        costates.push(solve_ivp(&problem)?);
    }
    Ok(CostateTrajectory { costates })
}

/// L2 steepest-ascent direction at the mesh nodes:
/// `dW = sum_k (lambda_k o sech^2(Wx_k+b)) x_k^T + (mu4 - mu5) W`,
/// `db = sum_k lambda_k o sech^2(Wx_k+b) + (mu4 - mu5) b`.
pub fn l2_gradient(
    params: &ParamTrajectory,
    w: &CostWeights,
    forward: &[DenseSolution],
    costates: &CostateTrajectory,
) -> Result<GradientField> {
    if forward.len() != costates.len() {
        return Err(Error::shape("forward and costate counts differ"));
    }
    let n = params.n_state();
    let model = NodeModel::new(params);
    let mesh = params.mesh().clone();
    let mut grad = GradientField::zeros(mesh.clone(), n);
    let reg = w.mu4 - w.mu5;
    let mut x = [0.0; MAX_STATE];
    let mut lambda = [0.0; MAX_STATE];
    for (i, t) in mesh.nodes().iter().enumerate() {
        let node = grad.field_mut().node_mut(i);
        for (fwd, cst) in forward.iter().zip(&costates.costates) {
            fwd.eval_into(*t, &mut x[..n])?;
            cst.eval_into(*t, &mut lambda[..n])?;
            model.jac_params_accumulate_into(*t, &x[..n], &lambda[..n], 1.0, node);
        }
        if reg != 0.0 {
            for (g, p) in node.iter_mut().zip(params.node(i)) {
                *g += reg * p;
            }
        }
    }
    Ok(grad)
}

/// Directional derivative of the cost along `eta` from an L2 gradient
/// assembled with the `(mu4 - mu5)` convention: `<g, eta>_{L2} + mu5 <theta, eta>_{W12}`.
pub fn directional_derivative(
    l2grad: &GradientField,
    params: &ParamTrajectory,
    mu5: f64,
    eta: &GradientField,
) -> Result<f64> {
    let mut d = l2grad.l2_inner(eta)?;
    if mu5 != 0.0 {
        d += mu5 * params.w12_inner(eta)?;
    }
    Ok(d)
}

/// Directional derivative along a piecewise-linear `eta`, integrating
/// `sum_k <lambda_k, D_theta F eta>` with Simpson's rule on every mesh
/// segment instead of pairing nodal gradient values. The integrand is smooth
/// inside segments, so this is fourth order where the nodal pairing is
/// second order. Penalty terms use the same quadrature as the cost.
pub fn adjoint_directional_derivative(
    params: &ParamTrajectory,
    w: &CostWeights,
    forward: &[DenseSolution],
    costates: &CostateTrajectory,
    eta: &GradientField,
) -> Result<f64> {
    if forward.len() != costates.len() {
        return Err(Error::shape("forward and costate counts differ"));
    }
    if !params.same_layout(eta) {
        return Err(Error::shape("direction does not match the parameter layout"));
    }
    let n = params.n_state();
    let model = NodeModel::new(params);
    let mesh = params.mesh();
    let mut x = [0.0; MAX_STATE];
    let mut lambda = [0.0; MAX_STATE];
    let mut integrand = |t: f64| -> Result<f64> {
        let e = eta.interpolate(t)?;
        let mut acc = 0.0;
        for (fwd, cst) in forward.iter().zip(&costates.costates) {
            fwd.eval_into(t, &mut x[..n])?;
            cst.eval_into(t, &mut lambda[..n])?;
            let dir = model.jac_params_apply(t, &x[..n], &e)?;
            acc += dir.iter().zip(&lambda[..n]).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(acc)
    };
    let nodes = mesh.nodes();
    let mut left = integrand(nodes[0])?;
    let mut total = 0.0;
    for pair in nodes.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let mid = integrand(0.5 * (a + b))?;
        let right = integrand(b)?;
        total += (b - a) / 6.0 * (left + 4.0 * mid + right);
        left = right;
    }
    let reg = w.mu4 - w.mu5;
    if reg != 0.0 {
        total += reg * params.l2_inner(eta)?;
    }
    if w.mu5 != 0.0 {
        total += w.mu5 * params.w12_inner(eta)?;
    }
    Ok(total)
}

/// Forward solutions, costates, cost and L2 gradient for one batch.
#[derive(Clone, Debug)]
pub struct BatchEvaluation {
    pub forward: Vec<DenseSolution>,
    pub costates: CostateTrajectory,
    pub cost: f64,
    pub gradient: GradientField,
}

pub fn evaluate_batch(
    params: &ParamTrajectory,
    batch: &LabeledSet,
    w: &CostWeights,
    options: &SolverOptions,
) -> Result<BatchEvaluation> {
    let forward = forward_solve(params, batch, options)?;
    let cost = cost_eval(params, batch, w, &forward)?;
    let costates = solve_adjoint(params, batch, w, &forward, options)?;
    let gradient = l2_gradient(params, w, &forward, &costates)?;
    Ok(BatchEvaluation { forward, costates, cost, gradient })
}

/// Values and slopes at the mesh nodes of the W^{1,2} Riesz representative
/// of `u`, i.e. the solution of `v'' - v = -u`, `v'(0) = v'(T) = 0`, via the
/// cosh kernel. `u` is read as its piecewise-linear interpolant and the
/// kernel integrals are evaluated exactly on each segment. All factors are
/// exp-scaled so nothing overflows for large `T`.
pub fn sobolev_representative_with_slope(u: &[f64], mesh: &TimeMesh) -> Result<(Vec<f64>, Vec<f64>)> {
    let nodes = mesh.nodes();
    if u.len() != nodes.len() {
        return Err(Error::shape(format!("{} samples for {} mesh nodes", u.len(), nodes.len())));
    }
    let n = nodes.len();
    let t_final = mesh.t_final();

    // J+ = int_0^h u(t_i + s) e^{s} ds, J- = int_0^h u(t_i + s) e^{-s} ds
    let mut j_plus = vec![0.0; n - 1];
    let mut j_minus = vec![0.0; n - 1];
    for i in 0..n - 1 {
        let h = nodes[i + 1] - nodes[i];
        let (u0, u1) = (u[i], u[i + 1]);
        let a = h.exp_m1() / h;
        let eh = h.exp();
        j_plus[i] = u0 * (h * a - eh + a) + u1 * (eh - a);
        let am = -(-h).exp_m1() / h;
        let emh = (-h).exp();
        j_minus[i] = u0 * (h * am - am + emh) + u1 * (am - emh);
    }

    let mut left = vec![0.0; n]; // P + Q
    let (mut p, mut q) = (0.0, 0.0);
    for i in 0..n - 1 {
        let decay = (nodes[i] - nodes[i + 1]).exp();
        p = decay * (p + j_plus[i]);
        q = decay * q + (-(nodes[i] + nodes[i + 1])).exp() * j_minus[i];
        left[i + 1] = p + q;
    }
    let mut right = vec![0.0; n]; // R + Z
    let (mut r, mut z) = (0.0, 0.0);
    for i in (0..n - 1).rev() {
        let decay = (nodes[i] - nodes[i + 1]).exp();
        r = decay * r + j_minus[i];
        z = decay * z + (2.0 * (nodes[i] - t_final)).exp() * j_plus[i];
        right[i] = r + z;
    }

    let denom = 2.0 * (-(-2.0 * t_final).exp_m1());
    let mut v = vec![0.0; n];
    let mut dv = vec![0.0; n];
    for i in 0..n {
        let t = nodes[i];
        let e_right = (-2.0 * (t_final - t)).exp();
        let e_left = (-2.0 * t).exp();
        v[i] = ((1.0 + e_right) * left[i] + (1.0 + e_left) * right[i]) / denom;
        dv[i] = (-(1.0 - e_right) * left[i] + (1.0 - e_left) * right[i]) / denom;
    }
    Ok((v, dv))
}

/// The transform `S[u]` at the mesh nodes.
pub fn sobolev_representative(u: &[f64], mesh: &TimeMesh) -> Result<Vec<f64>> {
    sobolev_representative_with_slope(u, mesh).map(|(v, _)| v)
}

/// Apply `S` to every parameter component of a field.
pub fn sobolev_transform(field: &GradientField) -> Result<GradientField> {
    let mesh = field.mesh().clone();
    let mut out = GradientField::zeros(mesh.clone(), field.n_state());
    for c in 0..field.m_param() {
        let v = sobolev_representative(&field.component(c), &mesh)?;
        out.field_mut().set_component(c, &v);
    }
    Ok(out)
}

/// W^{1,2} steepest-ascent direction `delta = S[l2grad] + mu5 theta`, where
/// `l2grad` carries the `(mu4 - mu5) theta` term.
pub fn w12_gradient(l2grad: &GradientField, params: &ParamTrajectory, mu5: f64) -> Result<GradientField> {
    let mut delta = sobolev_transform(l2grad)?;
    if mu5 != 0.0 {
        delta.field_mut().add_scaled(mu5, params.field())?;
    }
    Ok(delta)
}
