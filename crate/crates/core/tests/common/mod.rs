#![allow(dead_code)]

use std::f64::consts::PI;
use std::sync::Arc;

use nodecg::cost::LabeledSet;
use nodecg::mesh::{param_len, GradientField, ParamTrajectory, TimeMesh};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn mesh(intervals: usize) -> Arc<TimeMesh> {
    Arc::new(TimeMesh::uniform(5.0, intervals).unwrap())
}

/// Low-frequency random function on `[0, t_final]`: a few cosines and sines
/// with at most `modes` half-periods over the interval.
pub fn smooth_fn(rng: &mut ChaCha8Rng, modes: usize, amp: f64, t_final: f64) -> impl Fn(f64) -> f64 + use<> {
    let coef: Vec<(f64, f64)> =
        (0..=modes).map(|_| (rng.random_range(-amp..amp), rng.random_range(-amp..amp))).collect();
    move |t| {
        coef.iter()
            .enumerate()
            .map(|(j, (a, b))| {
                let w = j as f64 * PI / t_final;
                a * (w * t).cos() + b * (w * t).sin()
            })
            .sum()
    }
}

pub fn smooth_field(rng: &mut ChaCha8Rng, mesh: Arc<TimeMesh>, n_state: usize, amp: f64) -> GradientField {
    let t_final = mesh.t_final();
    let fs: Vec<_> = (0..param_len(n_state)).map(|_| smooth_fn(rng, 3, amp, t_final)).collect();
    GradientField::from_fn(mesh, n_state, |t, out| {
        for (o, f) in out.iter_mut().zip(&fs) {
            *o = f(t);
        }
    })
}

pub fn smooth_params(rng: &mut ChaCha8Rng, mesh: Arc<TimeMesh>, n_state: usize, amp: f64) -> ParamTrajectory {
    smooth_field(rng, mesh, n_state, amp).as_params()
}

pub fn random_batch(rng: &mut ChaCha8Rng, n_state: usize, count: usize) -> LabeledSet {
    let inputs = (0..count).map(|_| (0..n_state).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
    let classes = (0..count).map(|k| k % 2).collect();
    LabeledSet::new(n_state, inputs, classes).unwrap()
}

/// Second-order finite-difference solve of `v'' - v = -u` with
/// `v'(0) = v'(T) = 0` (ghost-node reflection), by the Thomas algorithm.
pub fn neumann_fd_solve(u: &[f64], t_final: f64) -> Vec<f64> {
    let n = u.len();
    let h = t_final / (n - 1) as f64;
    let h2 = h * h;
    // row i: lo v_{i-1} + diag v_i + hi v_{i+1} = rhs
    let diag = vec![2.0 / h2 + 1.0; n];
    let mut lo = vec![-1.0 / h2; n];
    let mut hi = vec![-1.0 / h2; n];
    hi[0] = -2.0 / h2;
    lo[n - 1] = -2.0 / h2;
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = hi[0] / diag[0];
    d[0] = u[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - lo[i] * c[i - 1];
        c[i] = hi[i] / m;
        d[i] = (u[i] - lo[i] * d[i - 1]) / m;
    }
    let mut v = vec![0.0; n];
    v[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        v[i] = d[i] - c[i] * v[i + 1];
    }
    v
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
