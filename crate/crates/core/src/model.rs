//! The NODE right-hand side `F(t, x) = sigma(W(t) x + b(t))` and its
//! Jacobians with respect to the state and to the parameters.

use crate::error::{Error, Result};
use crate::mesh::{bias_index, param_len, ParamTrajectory};
use crate::ode::{solve_ivp, DenseSolution, IvpProblem, SolverOptions};

/// Largest supported state dimension; bounds the stack scratch buffers.
pub const MAX_STATE: usize = 8;
const MAX_PARAM: usize = MAX_STATE * MAX_STATE + MAX_STATE;

/// A continuously differentiable component-wise activation.
pub trait Activation: Send + Sync {
    fn value(&self, z: f64) -> f64;

    /// `(sigma(z), sigma'(z))`.
    fn value_and_slope(&self, z: f64) -> (f64, f64);

    fn slope(&self, z: f64) -> f64 {
        self.value_and_slope(z).1
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Tanh;

impl Activation for Tanh {
    #[inline]
    fn value(&self, z: f64) -> f64 {
        z.tanh()
    }

    /// sech^2 as `1 - tanh^2`, which stays finite for large `|z|`.
    #[inline]
    fn value_and_slope(&self, z: f64) -> (f64, f64) {
        let t = z.tanh();
        (t, 1.0 - t * t)
    }
}

/// `z = W x + b` for a packed parameter vector.
#[inline]
pub fn preactivation(theta: &[f64], x: &[f64], z: &mut [f64]) {
    let n = x.len();
    z[..n].copy_from_slice(&theta[n * n..n * n + n]);
    for (col, xc) in x.iter().enumerate() {
        let w = &theta[col * n..(col + 1) * n];
        for row in 0..n {
            z[row] += w[row] * xc;
        }
    }
}

/// `out = tanh(W x + b)`; shared by the NODE and the discrete residual net.
#[inline]
pub fn tanh_layer(theta: &[f64], x: &[f64], out: &mut [f64]) {
    preactivation(theta, x, out);
    for v in out[..x.len()].iter_mut() {
        *v = v.tanh();
    }
}

/// Parameter-dependent right-hand side bound to one trajectory.
pub struct NodeModel<'a, A = Tanh> {
    params: &'a ParamTrajectory,
    activation: A,
}

impl<'a> NodeModel<'a, Tanh> {
    pub fn new(params: &'a ParamTrajectory) -> Self {
        Self::with_activation(params, Tanh)
    }
}

impl<'a, A: Activation> NodeModel<'a, A> {
    pub fn with_activation(params: &'a ParamTrajectory, activation: A) -> Self {
        assert!(params.n_state() <= MAX_STATE, "state dimension above {MAX_STATE}");
        Self { params, activation }
    }

    pub fn params(&self) -> &ParamTrajectory {
        self.params
    }

    pub fn n_state(&self) -> usize {
        self.params.n_state()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_state() {
            return Err(Error::shape(format!("state has length {}, model expects {}", x.len(), self.n_state())));
        }
        Ok(())
    }

    /// Interpolated parameters and the activation slope `sigma'(Wx + b)`;
    /// optionally also `sigma(Wx + b)`.
    #[inline]
    fn local(&self, t: f64, x: &[f64], theta: &mut [f64], slope: &mut [f64], value: Option<&mut [f64]>) {
        let n = x.len();
        self.params
            .interpolate_into(t, &mut theta[..param_len(n)])
            .expect("time inside the parameter mesh");
        let mut z = [0.0; MAX_STATE];
        preactivation(theta, x, &mut z);
        match value {
            Some(v) => {
                for i in 0..n {
                    let (a, s) = self.activation.value_and_slope(z[i]);
                    v[i] = a;
                    slope[i] = s;
                }
            }
            None => {
                for i in 0..n {
                    slope[i] = self.activation.slope(z[i]);
                }
            }
        }
    }

    /// `F(t, x)` into `out`; `t` must lie in the mesh.
    #[inline]
    pub fn rhs_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        let mut theta = [0.0; MAX_PARAM];
        self.params
            .interpolate_into(t, &mut theta[..param_len(n)])
            .expect("time inside the parameter mesh");
        let mut z = [0.0; MAX_STATE];
        preactivation(&theta, x, &mut z);
        for i in 0..n {
            out[i] = self.activation.value(z[i]);
        }
    }

    pub fn rhs(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        if !self.params.mesh().contains(t) {
            return Err(Error::Domain { t, lo: 0.0, hi: self.params.mesh().t_final() });
        }
        let mut out = vec![0.0; x.len()];
        self.rhs_into(t, x, &mut out);
        Ok(out)
    }

    /// `D_x F v = sigma'(Wx+b) o (W v)`.
    pub fn jac_state_apply(&self, t: f64, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        self.check(v)?;
        let mut out = vec![0.0; x.len()];
        self.jac_state_apply_into(t, x, v, &mut out);
        Ok(out)
    }

    #[inline]
    pub fn jac_state_apply_into(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]) {
        let n = x.len();
        let (mut theta, mut s) = ([0.0; MAX_PARAM], [0.0; MAX_STATE]);
        self.local(t, x, &mut theta, &mut s, None);
        for row in 0..n {
            let mut acc = 0.0;
            for col in 0..n {
                acc += theta[col * n + row] * v[col];
            }
            out[row] = s[row] * acc;
        }
    }

    /// `D_x F^T w = W^T (sigma'(Wx+b) o w)`.
    pub fn jac_state_transpose_apply(&self, t: f64, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        self.check(w)?;
        let mut out = vec![0.0; x.len()];
        self.jac_state_transpose_apply_into(t, x, w, &mut out);
        Ok(out)
    }

    #[inline]
    pub fn jac_state_transpose_apply_into(&self, t: f64, x: &[f64], w: &[f64], out: &mut [f64]) {
        let n = x.len();
        let (mut theta, mut s) = ([0.0; MAX_PARAM], [0.0; MAX_STATE]);
        self.local(t, x, &mut theta, &mut s, None);
        for col in 0..n {
            let wc = &theta[col * n..(col + 1) * n];
            out[col] = (0..n).map(|row| wc[row] * s[row] * w[row]).sum();
        }
    }

    /// `D_theta F^T lambda` as a packed parameter vector: the `W` block is
    /// `(lambda o sigma'(Wx+b)) x^T` and the `b` block `lambda o sigma'(Wx+b)`.
    pub fn jac_params_accumulate(&self, t: f64, x: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        self.check(lambda)?;
        let mut out = vec![0.0; param_len(x.len())];
        self.jac_params_accumulate_into(t, x, lambda, 1.0, &mut out);
        Ok(out)
    }

    /// `acc += scale * D_theta F^T lambda`.
    #[inline]
    pub fn jac_params_accumulate_into(&self, t: f64, x: &[f64], lambda: &[f64], scale: f64, acc: &mut [f64]) {
        let n = x.len();
        let (mut theta, mut s) = ([0.0; MAX_PARAM], [0.0; MAX_STATE]);
        self.local(t, x, &mut theta, &mut s, None);
        let mut g = [0.0; MAX_STATE];
        for i in 0..n {
            g[i] = scale * lambda[i] * s[i];
        }
        for (col, xc) in x.iter().enumerate() {
            for row in 0..n {
                acc[col * n + row] += g[row] * xc;
            }
        }
        for row in 0..n {
            acc[bias_index(n, row)] += g[row];
        }
    }

    /// `D_theta F eta = sigma'(Wx+b) o (V x + a)` for a packed direction
    /// `eta = vec(V, a)`.
    pub fn jac_params_apply(&self, t: f64, x: &[f64], eta: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        if eta.len() != param_len(x.len()) {
            return Err(Error::shape("direction has the wrong length"));
        }
        let n = x.len();
        let (mut theta, mut s) = ([0.0; MAX_PARAM], [0.0; MAX_STATE]);
        self.local(t, x, &mut theta, &mut s, None);
        let mut z = vec![0.0; n];
        preactivation(eta, x, &mut z);
        Ok(z.iter().zip(&s[..n]).map(|(a, b)| a * b).collect())
    }

    /// Solve the NODE from `x0` over `[0, T]`.
    pub fn solve(&self, x0: &[f64], options: &SolverOptions) -> Result<DenseSolution> {
        self.check(x0)?;
        let mesh = self.params.mesh();
        let problem = IvpProblem::new(
            |t: f64, x: &[f64], out: &mut [f64]| self.rhs_into(t, x, out),
            0.0,
            mesh.t_final(),
            x0.to_vec(),
        )
        .with_stepping(options.stepping(mesh.nodes()));
        solve_ivp(&problem)
    }

    /// `x(T)` for each input.
    pub fn predict(&self, inputs: &[Vec<f64>], options: &SolverOptions) -> Result<Vec<Vec<f64>>> {
        inputs.iter().map(|x0| self.solve(x0, options).map(|s| s.terminal().to_vec())).collect()
    }
}

/// `x(T)` of the NODE for one input.
pub fn node_output(params: &ParamTrajectory, x0: &[f64], options: &SolverOptions) -> Result<Vec<f64>> {
    Ok(NodeModel::new(params).solve(x0, options)?.terminal().to_vec())
}
