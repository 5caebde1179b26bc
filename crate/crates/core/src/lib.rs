//! Neural ODE classifiers trained with a nonlinear conjugate gradient method.
//!
//! The network is the flow of `x' = tanh(W(t) x + b(t))` on `[0, T]` with
//! depth-varying parameters. Gradients come from the adjoint problem, in
//! either the L2 or the Sobolev W^{1,2} geometry, and each step length is the
//! exact minimizer of a first-order surrogate built from the sensitivity
//! problem. A discrete Euler residual network trained with RMSProp is
//! included as a baseline.

pub mod baseline;
pub mod config;
pub mod cost;
pub mod datasets;
pub mod error;
pub mod gradient;
pub mod io;
pub mod linesearch;
pub mod mesh;
pub mod ncg;
pub mod model;
pub mod ode;

pub use error::{Error, Result};
