//! Flat `key = value` run configuration shared by the config file and the
//! command-line flags. Later entries override earlier ones, and every
//! problem is reported at once.

use std::collections::BTreeMap;

use crate::baseline::SgdConfig;
use crate::datasets::DatasetKind;
use crate::error::{Error, Result};
use crate::mesh::CostWeights;
use crate::ncg::{DescentSpace, TrainConfig};
use crate::ode::{SolverMode, SolverOptions};

pub const KEYS: &[&str] = &[
    "dataset.kind",
    "dataset.seed",
    "dataset.augment",
    "train.method",
    "train.epochs",
    "train.descent",
    "cost.mu1",
    "cost.mu2",
    "cost.mu3",
    "cost.mu4",
    "cost.mu5",
    "cost.mu_run",
    "solver.mode",
    "solver.abs_tol",
    "solver.rel_tol",
    "run.seed",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Ncg,
    RmsProp,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ncg" => Ok(Method::Ncg),
            "rmsprop" | "sgd" => Ok(Method::RmsProp),
            other => Err(Error::invalid(format!("unknown method '{other}' (expected ncg or rmsprop)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub kind: DatasetKind,
    pub dataset_seed: u64,
    pub augment: bool,
    pub method: Method,
    pub epochs: usize,
    pub descent: DescentSpace,
    pub weights: CostWeights,
    pub solver: SolverOptions,
    pub run_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kind: DatasetKind::Moons,
            dataset_seed: 0,
            augment: false,
            method: Method::Ncg,
            epochs: 5,
            descent: DescentSpace::L2,
            weights: CostWeights::moons(),
            solver: SolverOptions::fixed(),
            run_seed: 0,
        }
    }
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut errs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => out.push((k.trim().to_string(), v.trim().to_string())),
            _ => errs.push(format!("line {}: expected key = value, found '{line}'", i + 1)),
        }
    }
    if errs.is_empty() { Ok(out) } else { Err(Error::Config(errs)) }
}

impl RunConfig {
    /// Build from entries; the dataset kind picks the default cost weights
    /// (squared distance for moons, cross-entropy for circles) before any
    /// `cost.*` override applies.
    pub fn from_entries(entries: &[(String, String)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut errs = Vec::new();
        for (k, v) in entries {
            if KEYS.contains(&k.as_str()) {
                map.insert(k.as_str(), v.as_str());
            } else {
                errs.push(format!("unknown key '{k}'"));
            }
        }
        let mut c = RunConfig::default();
        fn get<T: std::str::FromStr>(map: &BTreeMap<&str, &str>, key: &str, errs: &mut Vec<String>) -> Option<T>
        where
            T::Err: std::fmt::Display,
        {
            let v = map.get(key)?;
            match v.parse::<T>() {
                Ok(x) => Some(x),
                Err(e) => {
                    errs.push(format!("{key}: cannot parse '{v}': {e}"));
                    None
                }
            }
        }
        if let Some(k) = get(&map, "dataset.kind", &mut errs) {
            c.kind = k;
        }
        c.weights = match c.kind {
            DatasetKind::Moons => CostWeights::moons(),
            DatasetKind::Circles => CostWeights::circles(),
        };
        if let Some(s) = get(&map, "dataset.seed", &mut errs) {
            c.dataset_seed = s;
        }
        if let Some(a) = get(&map, "dataset.augment", &mut errs) {
            c.augment = a;
        }
        if let Some(m) = get(&map, "train.method", &mut errs) {
            c.method = m;
        }
        if c.method == Method::RmsProp {
            c.epochs = 15;
        }
        if let Some(e) = get(&map, "train.epochs", &mut errs) {
            c.epochs = e;
        }
        if let Some(d) = get(&map, "train.descent", &mut errs) {
            c.descent = d;
        }
        let w = &mut c.weights;
        for (key, slot) in [
            ("cost.mu1", &mut w.mu1),
            ("cost.mu2", &mut w.mu2),
            ("cost.mu3", &mut w.mu3),
            ("cost.mu4", &mut w.mu4),
            ("cost.mu5", &mut w.mu5),
            ("cost.mu_run", &mut w.mu_run),
        ] {
            if let Some(v) = get(&map, key, &mut errs) {
                *slot = v;
            }
        }
        if let Some(m) = get::<SolverMode>(&map, "solver.mode", &mut errs) {
            c.solver.mode = m;
        }
        if let Some(t) = get(&map, "solver.abs_tol", &mut errs) {
            c.solver.abs_tol = t;
        }
        if let Some(t) = get(&map, "solver.rel_tol", &mut errs) {
            c.solver.rel_tol = t;
        }
        if let Some(s) = get(&map, "run.seed", &mut errs) {
            c.run_seed = s;
        }

        for (name, tol) in [("solver.abs_tol", c.solver.abs_tol), ("solver.rel_tol", c.solver.rel_tol)] {
            if !(tol > 0.0 && tol.is_finite()) {
                errs.push(format!("{name} must be positive, got {tol}"));
            }
        }
        if c.epochs == 0 {
            errs.push("train.epochs must be at least 1".into());
        }
        if c.method == Method::Ncg {
            if let Err(Error::Config(list)) = c.train_config().validate() {
                errs.extend(list);
            }
        } else if let Err(Error::Config(list)) = c.weights.validate() {
            errs.extend(list);
        }
        if errs.is_empty() { Ok(c) } else { Err(Error::Config(errs)) }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_entries(&parse_entries(text)?)
    }

    pub fn n_state(&self) -> usize {
        if self.augment { 3 } else { 2 }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig::new(self.descent, self.weights, self.run_seed);
        t.epochs = self.epochs;
        t.solver = self.solver;
        t
    }

    pub fn sgd_config(&self) -> SgdConfig {
        SgdConfig::new(self.weights, self.epochs, self.run_seed)
    }

    /// Key/value form, suitable for writing back to a config file.
    pub fn to_entries(&self) -> Vec<(String, String)> {
        let w = &self.weights;
        [
            ("dataset.kind", self.kind.to_string()),
            ("dataset.seed", self.dataset_seed.to_string()),
            ("dataset.augment", self.augment.to_string()),
            ("train.method", if self.method == Method::Ncg { "ncg" } else { "rmsprop" }.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.descent", self.descent.to_string()),
            ("cost.mu1", w.mu1.to_string()),
            ("cost.mu2", w.mu2.to_string()),
            ("cost.mu3", w.mu3.to_string()),
            ("cost.mu4", w.mu4.to_string()),
            ("cost.mu5", w.mu5.to_string()),
            ("cost.mu_run", w.mu_run.to_string()),
            ("solver.mode", self.solver.mode.to_string()),
            ("solver.abs_tol", self.solver.abs_tol.to_string()),
            ("solver.rel_tol", self.solver.rel_tol.to_string()),
            ("run.seed", self.run_seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}
