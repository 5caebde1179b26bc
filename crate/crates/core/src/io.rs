//! Checkpoints and CSV exports.
//!
//! Checkpoints are plain text: a `NODECKPT/1` tag, a few `key value` header
//! lines, then one row `t theta_1 ... theta_M` per mesh node. Reals are
//! written with 17 significant digits so a round trip is exact.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::baseline::EpochRecord;
use crate::cost::LabeledSet;
use crate::error::{Error, Result};
use crate::mesh::{param_len, CostWeights, ParamTrajectory, TimeMesh};
use crate::model::NodeModel;
use crate::ncg::{Evaluation, IterationRecord, TrainState};
use crate::ode::SolverOptions;

pub const CHECKPOINT_TAG: &str = "NODECKPT/1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamTrajectory,
    pub weights: CostWeights,
    pub seed: u64,
    /// Next `(epoch, batch)` to train and iterations done so far.
    pub epoch: usize,
    pub batch: usize,
    pub iterations: usize,
}

impl Checkpoint {
    pub fn new(params: ParamTrajectory, weights: CostWeights, seed: u64) -> Self {
        Checkpoint { params, weights, seed, epoch: 0, batch: 0, iterations: 0 }
    }

    pub fn from_state(state: &TrainState, weights: CostWeights, seed: u64) -> Self {
        Checkpoint {
            params: state.params.clone(),
            weights,
            seed,
            epoch: state.epoch,
            batch: state.batch,
            iterations: state.iterations_done,
        }
    }

    /// Training state with the stored parameters and counters and empty logs.
    pub fn to_state(&self) -> TrainState {
        let mut s = TrainState::new(self.params.clone());
        s.epoch = self.epoch;
        s.batch = self.batch;
        s.iterations_done = self.iterations;
        s
    }

    pub fn n_state(&self) -> usize {
        self.params.n_state()
    }

    pub fn to_text(&self) -> String {
        let p = &self.params;
        let mesh = p.mesh();
        let w = self.weights.as_array();
        let mut s = String::new();
        writeln!(s, "{CHECKPOINT_TAG}").unwrap();
        writeln!(s, "T {}", real(mesh.t_final())).unwrap();
        writeln!(s, "n_state {}", p.n_state()).unwrap();
        writeln!(s, "m_param {}", p.m_param()).unwrap();
        writeln!(s, "nodes {}", mesh.node_count()).unwrap();
        writeln!(s, "weights {}", w.iter().map(|v| real(*v)).collect::<Vec<_>>().join(" ")).unwrap();
        writeln!(s, "seed {}", self.seed).unwrap();
        writeln!(s, "counters {} {} {}", self.epoch, self.batch, self.iterations).unwrap();
        for (i, t) in mesh.nodes().iter().enumerate() {
            s.push_str(&real(*t));
            for v in p.node(i) {
                s.push(' ');
                s.push_str(&real(*v));
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse { line: 0, msg: format!("missing {what}") })
        };
        let (ln, tag) = next("format tag")?;
        if tag.trim() != CHECKPOINT_TAG {
            return Err(perr(ln, format!("expected '{CHECKPOINT_TAG}', found '{}'", tag.trim())));
        }
        let t_final: f64 = header(next("T")?, "T")?[0];
        let n_state: usize = header(next("n_state")?, "n_state")?[0];
        let m_param: usize = header(next("m_param")?, "m_param")?[0];
        let nodes: usize = header(next("nodes")?, "nodes")?[0];
        let (wl, wline) = next("weights")?;
        let w: Vec<f64> = header((wl, wline), "weights")?;
        if w.len() != 6 {
            return Err(perr(wl, format!("expected 6 cost weights, found {}", w.len())));
        }
        let seed: u64 = header(next("seed")?, "seed")?[0];
        let (cl, cline) = next("counters")?;
        let c: Vec<usize> = header((cl, cline), "counters")?;
        if c.len() != 3 {
            return Err(perr(cl, "expected three counters".into()));
        }
        if n_state == 0 || m_param != param_len(n_state) {
            return Err(perr(ln, format!("m_param {m_param} does not match n_state {n_state}")));
        }
        if nodes < 2 {
            return Err(perr(ln, "need at least two mesh nodes".into()));
        }
        let mut times = Vec::with_capacity(nodes);
        let mut values = Vec::with_capacity(nodes * m_param);
        for row in 0..nodes {
            let (l, line) = next("parameter row")?;
            let nums: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| perr(l, format!("bad number '{t}'"))))
                .collect::<Result<_>>()?;
            if nums.len() != m_param + 1 {
                return Err(perr(l, format!("row {row} has {} values, expected {}", nums.len(), m_param + 1)));
            }
            times.push(nums[0]);
            values.extend_from_slice(&nums[1..]);
        }
        if let Some((l, _)) = lines.next() {
            return Err(perr(l, format!("more than {nodes} parameter rows")));
        }
        if times[nodes - 1] != t_final {
            return Err(perr(ln, format!("last node {} differs from T = {t_final}", times[nodes - 1])));
        }
        let mesh = Arc::new(TimeMesh::from_nodes(times)?);
        let params = ParamTrajectory::from_values(mesh, n_state, values)?;
        let weights = CostWeights { mu1: w[0], mu2: w[1], mu3: w[2], mu4: w[3], mu5: w[4], mu_run: w[5] };
        Ok(Checkpoint { params, weights, seed, epoch: c[0], batch: c[1], iterations: c[2] })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| with_path(e, path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| with_path(e, path))?)
    }
}

/// I/O error that names the file involved.
pub fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn perr(line: usize, msg: String) -> Error {
    Error::Parse { line: line + 1, msg }
}

fn header<T: std::str::FromStr>((ln, line): (usize, &str), key: &str) -> Result<Vec<T>> {
    let mut it = line.split_whitespace();
    if it.next() != Some(key) {
        return Err(perr(ln, format!("expected '{key}' line")));
    }
    let vals: Vec<T> = it
        .map(|t| t.parse().map_err(|_| perr(ln, format!("bad value '{t}' for {key}"))))
        .collect::<Result<_>>()?;
    if vals.is_empty() {
        return Err(perr(ln, format!("no value for {key}")));
    }
    Ok(vals)
}

/// 17 significant digits.
pub fn real(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(real).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse { line: 0, msg: format!("{other:?}") },
    }
}

const COORDS: [&str; 3] = ["x", "y", "z"];

/// `x,y[,z],class` with 0-based class ids.
pub fn write_dataset<W: Write>(set: &LabeledSet, out: W) -> Result<()> {
    let n = set.n_state();
    if n > COORDS.len() {
        return Err(Error::shape(format!("cannot write {n}-dimensional data")));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut head: Vec<&str> = COORDS[..n].to_vec();
    head.push("class");
    w.write_record(&head).map_err(csv_err)?;
    for k in 0..set.len() {
        let mut row: Vec<String> = set.input(k).iter().map(|v| real(*v)).collect();
        row.push(set.class(k).to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(input: R) -> Result<LabeledSet> {
    let mut r = csv::Reader::from_reader(input);
    let head = r.headers().map_err(csv_err)?.clone();
    let n = head.len().saturating_sub(1);
    let expected: Vec<&str> = COORDS.iter().take(n).copied().chain(["class"]).collect();
    if n == 0 || n > COORDS.len() || head.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Parse { line: 1, msg: format!("expected header {}", expected.join(",")) });
    }
    let (mut inputs, mut classes) = (Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        let x: Vec<f64> = rec
            .iter()
            .take(n)
            .map(|t| t.trim().parse().map_err(|_| Error::Parse { line, msg: format!("bad number '{t}'") }))
            .collect::<Result<_>>()?;
        let c: usize = rec[n]
            .trim()
            .parse()
            .map_err(|_| Error::Parse { line, msg: format!("bad class '{}'", &rec[n]) })?;
        if c >= n {
            return Err(Error::Parse { line, msg: format!("class {c} out of range") });
        }
        inputs.push(x);
        classes.push(c);
    }
    LabeledSet::new(n, inputs, classes)
}

pub const METRICS_HEADER: [&str; 11] = [
    "epoch", "batch", "iteration", "cost", "train_acc", "clean_acc", "noisy_acc", "l2_norm", "w12_norm", "beta", "gamma",
];

/// One row per NCG iteration; the test accuracies are filled in on the last
/// iteration of each batch.
pub fn write_metrics<W: Write>(records: &[IterationRecord], evaluations: &[Evaluation], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for (i, r) in records.iter().enumerate() {
        let last_of_batch = records.get(i + 1).is_none_or(|n| (n.epoch, n.batch) != (r.epoch, r.batch));
        let eval = if last_of_batch {
            evaluations.iter().find(|e| (e.epoch, e.batch) == (r.epoch, r.batch))
        } else {
            None
        };
        w.write_record([
            r.epoch.to_string(),
            r.batch.to_string(),
            r.iteration.to_string(),
            real(r.cost),
            real(r.train_acc),
            opt(eval.and_then(|e| e.clean_acc)),
            opt(eval.and_then(|e| e.noisy_acc)),
            real(r.l2_norm),
            real(r.w12_norm),
            opt(r.beta),
            opt(r.gamma),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-epoch rows of the baseline in the same schema; the NODE-only columns stay empty.
pub fn write_sgd_metrics<W: Write>(records: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            String::new(),
            String::new(),
            real(r.loss),
            real(r.train_acc),
            opt(r.clean_acc),
            opt(r.noisy_acc),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Rectangle `[x0, x1] x [y0, y1]` of the input plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extent {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Extent {
    /// Bounding box of the planar coordinates, padded by `margin`.
    pub fn around(set: &LabeledSet, margin: f64) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::invalid("cannot take the extent of an empty set"));
        }
        let mut e = Extent { x0: f64::INFINITY, x1: f64::NEG_INFINITY, y0: f64::INFINITY, y1: f64::NEG_INFINITY };
        for x in set.inputs() {
            e.x0 = e.x0.min(x[0]);
            e.x1 = e.x1.max(x[0]);
            e.y0 = e.y0.min(x[1]);
            e.y1 = e.y1.max(x[1]);
        }
        Ok(Extent { x0: e.x0 - margin, x1: e.x1 + margin, y0: e.y0 - margin, y1: e.y1 + margin })
    }

    pub fn validate(&self) -> Result<()> {
        if self.x0.is_finite() && self.x1.is_finite() && self.y0.is_finite() && self.y1.is_finite()
            && self.x1 > self.x0
            && self.y1 > self.y0
        {
            Ok(())
        } else {
            Err(Error::invalid(format!("empty or non-finite extent {self:?}")))
        }
    }
}

/// Cell-centred grid with `per_unit` points per unit length in each direction.
pub fn grid_points(extent: &Extent, per_unit: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    extent.validate()?;
    if !(per_unit > 0.0 && per_unit.is_finite()) {
        return Err(Error::invalid(format!("resolution must be positive, got {per_unit}")));
    }
    let axis = |a: f64, b: f64| {
        let n = (((b - a) * per_unit).round() as usize).max(1);
        let h = (b - a) / n as f64;
        (0..n).map(|i| a + (i as f64 + 0.5) * h).collect::<Vec<_>>()
    };
    Ok((axis(extent.x0, extent.x1), axis(extent.y0, extent.y1)))
}

/// `(x, y, x_2(T) - x_1(T))` on the grid; inputs are zero-padded for 3D models.
pub fn boundary_scores(
    params: &ParamTrajectory,
    extent: &Extent,
    per_unit: f64,
    options: &SolverOptions,
) -> Result<Vec<[f64; 3]>> {
    let (xs, ys) = grid_points(extent, per_unit)?;
    let model = NodeModel::new(params);
    let n = params.n_state();
    let mut rows = Vec::with_capacity(xs.len() * ys.len());
    let mut x0 = vec![0.0; n];
    for &y in &ys {
        for &x in &xs {
            x0[0] = x;
            x0[1] = y;
            let out = model.solve(&x0, options)?;
            let z = out.terminal();
            rows.push([x, y, z[1] - z[0]]);
        }
    }
    Ok(rows)
}

pub fn write_boundary<W: Write>(rows: &[[f64; 3]], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "score"]).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.iter().map(|v| real(*v))).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Trajectories of every sample in `set`, sampled at `samples` uniform times.
pub fn write_trajectories<W: Write>(
    params: &ParamTrajectory,
    set: &LabeledSet,
    samples: usize,
    options: &SolverOptions,
    out: W,
) -> Result<()> {
    if samples < 2 {
        return Err(Error::invalid("need at least two time samples"));
    }
    let n = params.n_state();
    if set.n_state() != n {
        return Err(Error::shape("data and model dimensions differ"));
    }
    let model = NodeModel::new(params);
    let t_final = params.mesh().t_final();
    let mut w = csv::Writer::from_writer(out);
    let mut head = vec!["sample_id".to_string(), "class".into(), "t".into()];
    head.extend((1..=n).map(|i| format!("x{i}")));
    w.write_record(&head).map_err(csv_err)?;
    let mut x = vec![0.0; n];
    for k in 0..set.len() {
        let sol = model.solve(set.input(k), options)?;
        for j in 0..samples {
            let t = if j + 1 == samples { t_final } else { t_final * j as f64 / (samples - 1) as f64 };
            sol.eval_into(t, &mut x)?;
            let mut row = vec![k.to_string(), set.class(k).to_string(), real(t)];
            row.extend(x.iter().map(|v| real(*v)));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Column names of the packed parameter vector, e.g. `W11,W21,W12,W22,b1,b2`.
pub fn param_names(n: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(param_len(n));
    for col in 1..=n {
        for row in 1..=n {
            names.push(format!("W{row}{col}"));
        }
    }
    names.extend((1..=n).map(|i| format!("b{i}")));
    names
}

pub fn write_params<W: Write>(params: &ParamTrajectory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut head = vec!["t".to_string()];
    head.extend(param_names(params.n_state()));
    w.write_record(&head).map_err(csv_err)?;
    for (i, t) in params.mesh().nodes().iter().enumerate() {
        let mut row = vec![real(*t)];
        row.extend(params.node(i).iter().map(|v| real(*v)));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
