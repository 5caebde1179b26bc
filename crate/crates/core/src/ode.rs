//! First-order IVP solver with dense output.
//!
//! Adaptive integration uses the Dormand-Prince 5(4) pair with a PI step
//! controller; the fixed-step modes march over a caller-supplied grid. Both
//! directions of integration are supported, `t_start > t_end` runs backward.
//! Dense output is cubic Hermite on each accepted step.

use crate::error::{Error, Result};

pub const DEFAULT_ABS_TOL: f64 = 1e-8;
pub const DEFAULT_REL_TOL: f64 = 1e-6;

const MAX_STEPS: usize = 1_000_000;

#[derive(Clone, Copy, Debug)]
pub enum Stepping<'a> {
    /// Embedded RK 4(5) with local error `<= abs_tol + rel_tol |x|`. No step
    /// crosses a time in `stops` (ascending); pass the points where the
    /// right-hand side is not smooth.
    Adaptive { abs_tol: f64, rel_tol: f64, stops: &'a [f64] },
    /// Classical RK4 with one step per grid interval.
    Rk4(&'a [f64]),
    /// Explicit Euler with one step per grid interval.
    Euler(&'a [f64]),
}

impl Default for Stepping<'_> {
    fn default() -> Self {
        Stepping::Adaptive { abs_tol: DEFAULT_ABS_TOL, rel_tol: DEFAULT_REL_TOL, stops: &[] }
    }
}

/// Solver selection for the NODE, adjoint and sensitivity solves. The fixed
/// modes step over the parameter mesh.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SolverMode {
    Adaptive,
    FixedRk4,
    Euler,
}

impl std::str::FromStr for SolverMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" | "rk45" => Ok(SolverMode::Adaptive),
            "fixed" | "rk4" => Ok(SolverMode::FixedRk4),
            "euler" => Ok(SolverMode::Euler),
            other => Err(Error::invalid(format!("unknown solver mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for SolverMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolverMode::Adaptive => "adaptive",
            SolverMode::FixedRk4 => "fixed",
            SolverMode::Euler => "euler",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub mode: SolverMode,
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { mode: SolverMode::Adaptive, abs_tol: DEFAULT_ABS_TOL, rel_tol: DEFAULT_REL_TOL }
    }
}

impl SolverOptions {
    pub fn fixed() -> Self {
        Self { mode: SolverMode::FixedRk4, ..Self::default() }
    }

    pub fn adaptive(abs_tol: f64, rel_tol: f64) -> Self {
        Self { mode: SolverMode::Adaptive, abs_tol, rel_tol }
    }

    pub fn stepping<'a>(&self, grid: &'a [f64]) -> Stepping<'a> {
        match self.mode {
            SolverMode::Adaptive => Stepping::Adaptive { abs_tol: self.abs_tol, rel_tol: self.rel_tol, stops: grid },
            SolverMode::FixedRk4 => Stepping::Rk4(grid),
            SolverMode::Euler => Stepping::Euler(grid),
        }
    }
}

/// `x' = rhs(t, x)`, `x(t_start) = x_init`, integrated to `t_end`.
pub struct IvpProblem<'a, F> {
    pub rhs: F,
    pub t_start: f64,
    pub t_end: f64,
    pub x_init: Vec<f64>,
    pub stepping: Stepping<'a>,
}

impl<'a, F> IvpProblem<'a, F>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    pub fn new(rhs: F, t_start: f64, t_end: f64, x_init: Vec<f64>) -> Self {
        Self { rhs, t_start, t_end, x_init, stepping: Stepping::default() }
    }

    pub fn with_stepping(mut self, stepping: Stepping<'a>) -> Self {
        self.stepping = stepping;
        self
    }

    pub fn dim(&self) -> usize {
        self.x_init.len()
    }

    fn validate(&self) -> Result<()> {
        if self.x_init.is_empty() {
            return Err(Error::invalid("IVP dimension must be at least 1"));
        }
        if self.x_init.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("initial state must be finite"));
        }
        if !(self.t_start.is_finite() && self.t_end.is_finite()) || self.t_start == self.t_end {
            return Err(Error::invalid("time span must be finite and nondegenerate"));
        }
        match self.stepping {
            Stepping::Adaptive { abs_tol, rel_tol, .. } => {
                if !(abs_tol > 0.0 && rel_tol > 0.0) {
                    return Err(Error::invalid("tolerances must be positive"));
                }
            }
            Stepping::Rk4(grid) | Stepping::Euler(grid) => {
                let (lo, hi) = span_bounds(self.t_start, self.t_end);
                if grid.len() < 2 || grid[0] != lo || grid[grid.len() - 1] != hi {
                    return Err(Error::invalid("step grid must start and end at the span endpoints"));
                }
                if grid.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::invalid("step grid must be strictly increasing"));
                }
            }
        }
        Ok(())
    }
}

fn span_bounds(a: f64, b: f64) -> (f64, f64) {
    if a < b { (a, b) } else { (b, a) }
}

/// Piecewise cubic Hermite solution over the integration span.
#[derive(Clone, Debug)]
pub struct DenseSolution {
    dim: usize,
    /// Ascending step times, regardless of integration direction.
    times: Vec<f64>,
    states: Vec<f64>,
    derivs: Vec<f64>,
    backward: bool,
}

impl DenseSolution {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn step_count(&self) -> usize {
        self.times.len() - 1
    }

    /// State stored at the `i`-th step time (ascending order).
    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn derivative(&self, i: usize) -> &[f64] {
        &self.derivs[i * self.dim..(i + 1) * self.dim]
    }

    /// State at the end of the integration (at `t_end`).
    pub fn terminal(&self) -> &[f64] {
        if self.backward { self.state(0) } else { self.state(self.times.len() - 1) }
    }

    pub fn initial(&self) -> &[f64] {
        if self.backward { self.state(self.times.len() - 1) } else { self.state(0) }
    }

    pub fn span(&self) -> (f64, f64) {
        (self.times[0], self.times[self.times.len() - 1])
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let (lo, hi) = self.span();
        if !(lo..=hi).contains(&t) {
            return Err(Error::Domain { t, lo, hi });
        }
        let i = crate::mesh::segment_index(&self.times, t);
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let d = self.dim;
        let (x0, x1) = (&self.states[i * d..(i + 1) * d], &self.states[(i + 1) * d..(i + 2) * d]);
        let (f0, f1) = (&self.derivs[i * d..(i + 1) * d], &self.derivs[(i + 1) * d..(i + 2) * d]);
        for j in 0..d {
            out[j] = h00 * x0[j] + h10 * h * f0[j] + h01 * x1[j] + h11 * h * f1[j];
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }
}

struct Recorder {
    dim: usize,
    times: Vec<f64>,
    states: Vec<f64>,
    derivs: Vec<f64>,
}

impl Recorder {
    fn new(dim: usize, capacity: usize) -> Self {
        Self {
            dim,
            times: Vec::with_capacity(capacity),
            states: Vec::with_capacity(capacity * dim),
            derivs: Vec::with_capacity(capacity * dim),
        }
    }

    fn push(&mut self, t: f64, x: &[f64], f: &[f64]) {
        self.times.push(t);
        self.states.extend_from_slice(x);
        self.derivs.extend_from_slice(f);
    }

    fn finish(mut self, backward: bool) -> DenseSolution {
        if backward {
            self.times.reverse();
            reverse_chunks(&mut self.states, self.dim);
            reverse_chunks(&mut self.derivs, self.dim);
        }
        DenseSolution {
            dim: self.dim,
            times: self.times,
            states: self.states,
            derivs: self.derivs,
            backward,
        }
    }
}

fn reverse_chunks(v: &mut [f64], dim: usize) {
    let n = v.len() / dim;
    for i in 0..n / 2 {
        for j in 0..dim {
            v.swap(i * dim + j, (n - 1 - i) * dim + j);
        }
    }
}

fn eval_rhs<F: Fn(f64, &[f64], &mut [f64])>(rhs: &F, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
    rhs(t, x, out);
    if out.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { t })
    }
}

pub fn solve_ivp<F>(problem: &IvpProblem<'_, F>) -> Result<DenseSolution>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    problem.validate()?;
    match problem.stepping {
        Stepping::Adaptive { abs_tol, rel_tol, stops } => solve_adaptive(problem, abs_tol, rel_tol, stops),
        Stepping::Rk4(grid) => solve_fixed(problem, grid, FixedScheme::Rk4),
        Stepping::Euler(grid) => solve_fixed(problem, grid, FixedScheme::Euler),
    }
}

#[derive(Clone, Copy)]
enum FixedScheme {
    Rk4,
    Euler,
}

fn solve_fixed<F>(problem: &IvpProblem<'_, F>, grid: &[f64], scheme: FixedScheme) -> Result<DenseSolution>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let dim = problem.dim();
    let backward = problem.t_start > problem.t_end;
    let n = grid.len();
    let node = |i: usize| if backward { grid[n - 1 - i] } else { grid[i] };

    let mut rec = Recorder::new(dim, n);
    let mut x = problem.x_init.clone();
    let mut f = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    eval_rhs(&problem.rhs, node(0), &x, &mut f)?;
    rec.push(node(0), &x, &f);

    for i in 0..n - 1 {
        let (t0, t1) = (node(i), node(i + 1));
        let h = t1 - t0;
        match scheme {
            FixedScheme::Euler => {
                for j in 0..dim {
                    x[j] += h * f[j];
                }
            }
            FixedScheme::Rk4 => {
                let tm = 0.5 * (t0 + t1);
                for j in 0..dim {
                    tmp[j] = x[j] + 0.5 * h * f[j];
                }
                eval_rhs(&problem.rhs, tm, &tmp, &mut k2)?;
                for j in 0..dim {
                    tmp[j] = x[j] + 0.5 * h * k2[j];
                }
                eval_rhs(&problem.rhs, tm, &tmp, &mut k3)?;
                for j in 0..dim {
                    tmp[j] = x[j] + h * k3[j];
                }
                eval_rhs(&problem.rhs, t1, &tmp, &mut k4)?;
                for j in 0..dim {
                    x[j] += h / 6.0 * (f[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t: t1 });
        }
        eval_rhs(&problem.rhs, t1, &x, &mut f)?;
        rec.push(t1, &x, &f);
    }
    Ok(rec.finish(backward))
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// PI controller constants (Hairer & Wanner's DOPRI5 defaults).
const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;

fn solve_adaptive<F>(problem: &IvpProblem<'_, F>, abs_tol: f64, rel_tol: f64, stops: &[f64]) -> Result<DenseSolution>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let rhs = &problem.rhs;
    let dim = problem.dim();
    let (t_start, t_end) = (problem.t_start, problem.t_end);
    let dir = (t_end - t_start).signum();
    let span = (t_end - t_start).abs();

    let mut rec = Recorder::new(dim, 64);
    let mut t = t_start;
    let mut x = problem.x_init.clone();
    let mut k1 = vec![0.0; dim];
    let (mut k2, mut k3, mut k4, mut k5, mut k6, mut k7) =
        (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    let mut y = vec![0.0; dim];
    let mut x_new = vec![0.0; dim];
    eval_rhs(rhs, t, &x, &mut k1)?;
    rec.push(t, &x, &k1);

    let scale = |xa: &[f64], xb: &[f64], j: usize| abs_tol + rel_tol * xa[j].abs().max(xb[j].abs());
    let mut h = initial_step(rhs, t, &x, &k1, dir, span, abs_tol, rel_tol)?;
    let expo = 0.2 - BETA * 0.75;
    let mut fac_old: f64 = 1e-4;
    let mut last_rejected = false;

    // interior stops strictly inside the span, in the order they are reached
    let lo = t_start.min(t_end);
    let hi = t_start.max(t_end);
    let mut interior: Vec<f64> = stops.iter().copied().filter(|s| *s > lo && *s < hi).collect();
    if dir < 0.0 {
        interior.reverse();
    }
    let mut next_stop = 0;

    for _ in 0..MAX_STEPS {
        let target = interior.get(next_stop).copied().unwrap_or(t_end);
        let remaining = (target - t).abs();
        let h_free = h;
        let mut at_target = false;
        if h.abs() >= remaining {
            h = target - t;
            at_target = true;
        }
        let final_step = at_target && next_stop >= interior.len();
        if h.abs() <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(Error::StepUnderflow { t });
        }

        for j in 0..dim {
            y[j] = x[j] + h * A21 * k1[j];
        }
        eval_rhs(rhs, t + C2 * h, &y, &mut k2)?;
        for j in 0..dim {
            y[j] = x[j] + h * (A31 * k1[j] + A32 * k2[j]);
        }
        eval_rhs(rhs, t + C3 * h, &y, &mut k3)?;
        for j in 0..dim {
            y[j] = x[j] + h * (A41 * k1[j] + A42 * k2[j] + A43 * k3[j]);
        }
        eval_rhs(rhs, t + C4 * h, &y, &mut k4)?;
        for j in 0..dim {
            y[j] = x[j] + h * (A51 * k1[j] + A52 * k2[j] + A53 * k3[j] + A54 * k4[j]);
        }
        eval_rhs(rhs, t + C5 * h, &y, &mut k5)?;
        for j in 0..dim {
            y[j] = x[j] + h * (A61 * k1[j] + A62 * k2[j] + A63 * k3[j] + A64 * k4[j] + A65 * k5[j]);
        }
        let t_next = if at_target { target } else { t + h };
        eval_rhs(rhs, t_next, &y, &mut k6)?;
        for j in 0..dim {
            x_new[j] = x[j] + h * (A71 * k1[j] + A73 * k3[j] + A74 * k4[j] + A75 * k5[j] + A76 * k6[j]);
        }
        eval_rhs(rhs, t_next, &x_new, &mut k7)?;

        let mut err = 0.0;
        for j in 0..dim {
            let e = h * (E1 * k1[j] + E3 * k3[j] + E4 * k4[j] + E5 * k5[j] + E6 * k6[j] + E7 * k7[j]);
            let r = e / scale(&x, &x_new, j);
            err += r * r;
        }
        let err = (err / dim as f64).sqrt();
        if !err.is_finite() {
            h *= FAC_MIN;
            last_rejected = true;
            continue;
        }

        let fac11 = err.powf(expo);
        if err <= 1.0 {
            // PI step acceptance
            let mut fac = fac11 / fac_old.powf(BETA);
            fac = (fac / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            let mut h_new = h / fac;
            fac_old = err.max(1e-4);
            if last_rejected && h_new.abs() > h.abs() {
                h_new = h;
            }
            last_rejected = false;
            t = t_next;
            std::mem::swap(&mut x, &mut x_new);
            std::mem::swap(&mut k1, &mut k7);
            rec.push(t, &x, &k1);
            if final_step {
                return Ok(rec.finish(dir < 0.0));
            }
            if at_target {
                next_stop += 1;
                // a clipped step says nothing about the admissible size
                if h_new.abs() < h_free.abs() {
                    h_new = h_free;
                }
            }
            h = h_new;
        } else {
            h /= (fac11 / SAFETY).min(1.0 / FAC_MIN);
            last_rejected = true;
        }
    }
    Err(Error::StepUnderflow { t })
}

#[allow(clippy::too_many_arguments)]
fn initial_step<F>(
    rhs: &F,
    t: f64,
    x: &[f64],
    f0: &[f64],
    dir: f64,
    span: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<f64>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let dim = x.len();
    let sk: Vec<f64> = x.iter().map(|v| abs_tol + rel_tol * v.abs()).collect();
    let rms = |v: &dyn Fn(usize) -> f64| ((0..dim).map(|j| v(j).powi(2)).sum::<f64>() / dim as f64).sqrt();
    let d0 = rms(&|j| x[j] / sk[j]);
    let d1 = rms(&|j| f0[j] / sk[j]);
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h0 = h0.min(span);
    let x1: Vec<f64> = (0..dim).map(|j| x[j] + dir * h0 * f0[j]).collect();
    let mut f1 = vec![0.0; dim];
    eval_rhs(rhs, t + dir * h0, &x1, &mut f1)?;
    let d2 = rms(&|j| (f1[j] - f0[j]) / sk[j]) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok(dir * (100.0 * h0).min(h1).min(span))
}
