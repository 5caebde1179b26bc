//! Two-moons and two-circles generators, zero-padding augmentation and the
//! nearest-code classification rule.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cost::LabeledSet;
use crate::error::{Error, Result};
use crate::mesh::ParamTrajectory;
use crate::model::NodeModel;
use crate::ode::SolverOptions;

pub const TRAIN_COUNT: usize = 1000;
pub const TRAIN_SIGMA: f64 = 0.07;
pub const CLEAN_TEST_COUNT: usize = 100;
pub const NOISY_TEST_COUNT: usize = 1000;
pub const NOISY_TEST_SIGMA: f64 = 0.06;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Moons,
    Circles,
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moons" => Ok(DatasetKind::Moons),
            "circles" => Ok(DatasetKind::Circles),
            other => Err(Error::invalid(format!("unknown dataset kind '{other}' (expected moons or circles)"))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::Moons => "moons",
            DatasetKind::Circles => "circles",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub count: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub augmented: bool,
}

impl DatasetSpec {
    pub fn train(kind: DatasetKind, seed: u64) -> Self {
        Self { kind, count: TRAIN_COUNT, noise_sigma: TRAIN_SIGMA, seed, augmented: false }
    }

    pub fn clean_test(kind: DatasetKind, seed: u64) -> Self {
        Self { kind, count: CLEAN_TEST_COUNT, noise_sigma: 0.0, seed, augmented: false }
    }

    pub fn noisy_test(kind: DatasetKind, seed: u64) -> Self {
        Self { kind, count: NOISY_TEST_COUNT, noise_sigma: NOISY_TEST_SIGMA, seed, augmented: false }
    }

    pub fn augmented(self, augmented: bool) -> Self {
        Self { augmented, ..self }
    }

    pub fn generate(&self) -> Result<LabeledSet> {
        let set = match self.kind {
            DatasetKind::Moons => gen_moons(self.count, self.noise_sigma, self.seed)?,
            DatasetKind::Circles => gen_circles(self.count, self.noise_sigma, self.seed)?,
        };
        if self.augmented { augment_to_3d(&set) } else { Ok(set) }
    }
}

/// Point on the first moon (upper unit semicircle about the origin).
pub fn moon_upper(angle: f64) -> [f64; 2] {
    [angle.cos(), angle.sin()]
}

/// Point on the second moon (lower unit semicircle about `(1, 0.5)`).
pub fn moon_lower(angle: f64) -> [f64; 2] {
    [1.0 + angle.cos(), 0.5 + angle.sin()]
}

fn check_count(count: usize, noise_sigma: f64) -> Result<()> {
    if count == 0 || !count.is_multiple_of(2) {
        return Err(Error::invalid(format!("count must be a positive even number, got {count}")));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::invalid(format!("noise sigma must be nonnegative, got {noise_sigma}")));
    }
    Ok(())
}

fn generate_two_curves(
    count: usize,
    noise_sigma: f64,
    seed: u64,
    first: impl Fn(&mut ChaCha8Rng) -> [f64; 2],
    second: impl Fn(&mut ChaCha8Rng) -> [f64; 2],
) -> Result<LabeledSet> {
    check_count(count, noise_sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let half = count / 2;
    let mut inputs = Vec::with_capacity(count);
    let mut classes = Vec::with_capacity(count);
    for k in 0..count {
        let class = usize::from(k >= half);
        let p = if class == 0 { first(&mut rng) } else { second(&mut rng) };
        let (dx, dy) = if noise_sigma > 0.0 {
            (noise.sample(&mut rng), noise.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        inputs.push(vec![p[0] + dx, p[1] + dy]);
        classes.push(class);
    }
    LabeledSet::new(2, inputs, classes)
}

/// `count / 2` points per moon, angles uniform on each semicircle, plus
/// isotropic Gaussian noise.
pub fn gen_moons(count: usize, noise_sigma: f64, seed: u64) -> Result<LabeledSet> {
    generate_two_curves(
        count,
        noise_sigma,
        seed,
        |rng| moon_upper(rng.random_range(0.0..=PI)),
        |rng| moon_lower(rng.random_range(PI..=2.0 * PI)),
    )
}

/// Outer unit circle (first class) and inner circle of radius 0.5.
pub fn gen_circles(count: usize, noise_sigma: f64, seed: u64) -> Result<LabeledSet> {
    generate_two_curves(
        count,
        noise_sigma,
        seed,
        |rng| {
            let a: f64 = rng.random_range(0.0..2.0 * PI);
            [a.cos(), a.sin()]
        },
        |rng| {
            let a: f64 = rng.random_range(0.0..2.0 * PI);
            [0.5 * a.cos(), 0.5 * a.sin()]
        },
    )
}

/// Pad planar inputs (and their one-hot codes) with a zero third coordinate.
pub fn augment_to_3d(set: &LabeledSet) -> Result<LabeledSet> {
    if set.n_state() != 2 {
        return Err(Error::invalid(format!("augmentation expects planar data, got dimension {}", set.n_state())));
    }
    let inputs = set.inputs().iter().map(|x| vec![x[0], x[1], 0.0]).collect();
    LabeledSet::new(3, inputs, set.classes().to_vec())
}

/// Drop the padding coordinate again.
pub fn project_to_2d(set: &LabeledSet) -> Result<LabeledSet> {
    if set.n_state() != 3 {
        return Err(Error::invalid("projection expects 3D data"));
    }
    let inputs = set.inputs().iter().map(|x| vec![x[0], x[1]]).collect();
    LabeledSet::new(2, inputs, set.classes().to_vec())
}

/// First class iff the output is at least as close to `e_1` as to `e_2`,
/// i.e. `out[0] >= out[1]`; ties go to the first class.
pub fn classify(output: &[f64]) -> usize {
    usize::from(output[0] < output[1])
}

/// Fraction of `outputs` whose class matches `classes`.
pub fn accuracy_of_outputs(outputs: &[Vec<f64>], classes: &[usize]) -> f64 {
    let correct = outputs.iter().zip(classes).filter(|(o, c)| classify(o) == **c).count();
    correct as f64 / classes.len() as f64
}

/// Accuracy of the NODE with `params` on `set`.
pub fn accuracy(params: &ParamTrajectory, set: &LabeledSet, options: &SolverOptions) -> Result<f64> {
    if params.n_state() != set.n_state() {
        return Err(Error::shape("model and data dimensions differ"));
    }
    let outputs = NodeModel::new(params).predict(set.inputs(), options)?;
    Ok(accuracy_of_outputs(&outputs, set.classes()))
}
