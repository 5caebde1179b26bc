//! Fletcher–Reeves nonlinear conjugate gradient training of the NODE.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cost::LabeledSet;
use crate::datasets::{accuracy, accuracy_of_outputs, classify};
use crate::error::{Error, Result};
use crate::gradient::{evaluate_batch, w12_gradient};
use crate::linesearch::{optimal_beta, solve_sensitivity, BetaOutcome, Surrogate};
use crate::mesh::{
    axpy, init_params, CostWeights, GradientField, ParamTrajectory, TimeMesh, DEFAULT_FINAL_TIME, DEFAULT_INTERVALS,
};
use crate::ode::SolverOptions;

/// Geometry in which the steepest-descent direction is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DescentSpace {
    L2,
    W12,
}

impl FromStr for DescentSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(DescentSpace::L2),
            "w12" | "sobolev" => Ok(DescentSpace::W12),
            other => Err(Error::invalid(format!("unknown descent space '{other}' (expected l2 or w12)"))),
        }
    }
}

impl fmt::Display for DescentSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DescentSpace::L2 => "l2",
            DescentSpace::W12 => "w12",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub iterations_per_batch: usize,
    pub descent: DescentSpace,
    pub weights: CostWeights,
    pub seed: u64,
    pub solver: SolverOptions,
    pub t_final: f64,
    pub intervals: usize,
}

impl TrainConfig {
    pub fn new(descent: DescentSpace, weights: CostWeights, seed: u64) -> Self {
        TrainConfig {
            epochs: 5,
            batches_per_epoch: 10,
            iterations_per_batch: 15,
            descent,
            weights,
            seed,
            solver: SolverOptions::fixed(),
            t_final: DEFAULT_FINAL_TIME,
            intervals: DEFAULT_INTERVALS,
        }
    }

    /// All problems with the configuration, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = match self.weights.validate() {
            Err(Error::Config(list)) => list,
            Err(e) => vec![e.to_string()],
            Ok(()) => Vec::new(),
        };
        if self.weights.mu5 > 0.0 && self.descent == DescentSpace::L2 {
            errs.push("cost.mu5 > 0 requires W12 descent".into());
        }
        if self.batches_per_epoch == 0 {
            errs.push("batches per epoch must be positive".into());
        }
        if self.iterations_per_batch == 0 {
            errs.push("iterations per batch must be positive".into());
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            errs.push(format!("final time must be positive, got {}", self.t_final));
        }
        if self.intervals == 0 {
            errs.push("mesh needs at least one interval".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn mesh(&self) -> Result<Arc<TimeMesh>> {
        Ok(Arc::new(TimeMesh::uniform(self.t_final, self.intervals)?))
    }
}

/// One NCG iteration as logged.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub epoch: usize,
    pub batch: usize,
    pub iteration: usize,
    /// Batch cost before the step.
    pub cost: f64,
    /// Batch accuracy before the step.
    pub train_acc: f64,
    /// Parameter norms after the step (not squared).
    pub l2_norm: f64,
    pub w12_norm: f64,
    /// `None` when the step was skipped.
    pub beta: Option<f64>,
    /// `None` on steepest-descent iterations.
    pub gamma: Option<f64>,
    pub capped: bool,
}

/// Test accuracies after a batch; `epoch_count` is `epoch + (batch + 1) / batches`.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub epoch: usize,
    pub batch: usize,
    pub epoch_count: f64,
    pub clean_acc: Option<f64>,
    pub noisy_acc: Option<f64>,
}

/// Held-out sets scored after every batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct EvalSets<'a> {
    pub clean: Option<&'a LabeledSet>,
    pub noisy: Option<&'a LabeledSet>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamTrajectory,
    /// Next batch to run is `(epoch, batch)`.
    pub epoch: usize,
    pub batch: usize,
    pub iterations_done: usize,
    /// Direction and squared gradient norm of the last iteration within the
    /// current batch; cleared at every batch start.
    pub prev_direction: Option<GradientField>,
    pub prev_grad_norm_sq: Option<f64>,
    pub records: Vec<IterationRecord>,
    pub evaluations: Vec<Evaluation>,
}

impl TrainState {
    pub fn new(params: ParamTrajectory) -> Self {
        TrainState {
            params,
            epoch: 0,
            batch: 0,
            iterations_done: 0,
            prev_direction: None,
            prev_grad_norm_sq: None,
            records: Vec::new(),
            evaluations: Vec::new(),
        }
    }

    pub fn initial(config: &TrainConfig, n_state: usize) -> Result<Self> {
        Ok(TrainState::new(init_params(config.seed, n_state, config.mesh()?)))
    }

    /// First epoch count at which the clean test accuracy reached 1.
    pub fn first_perfect_clean(&self) -> Option<f64> {
        self.evaluations.iter().find(|e| e.clean_acc == Some(1.0)).map(|e| e.epoch_count)
    }

    pub fn best_clean(&self) -> Option<f64> {
        self.evaluations.iter().filter_map(|e| e.clean_acc).reduce(f64::max)
    }

    pub fn best_noisy(&self) -> Option<f64> {
        self.evaluations.iter().filter_map(|e| e.noisy_acc).reduce(f64::max)
    }

    /// Epoch count at which the best clean accuracy was first reached.
    pub fn best_clean_epoch(&self) -> Option<f64> {
        let best = self.best_clean()?;
        self.evaluations.iter().find(|e| e.clean_acc == Some(best)).map(|e| e.epoch_count)
    }
}

/// Training aborted; `state` holds the last good parameters when training had started.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub state: Option<Box<TrainState>>,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.state {
            Some(s) => write!(
                f,
                "training stopped at epoch {} batch {} after {} iterations: {}",
                s.epoch, s.batch, s.iterations_done, self.error
            ),
            None => write!(f, "training could not start: {}", self.error),
        }
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// `curr / prev`, or `None` (restart with steepest descent) when `prev` is zero.
pub fn fletcher_reeves_gamma(curr_norm_sq: f64, prev_norm_sq: f64) -> Option<f64> {
    if prev_norm_sq > 0.0 && prev_norm_sq.is_finite() && curr_norm_sq.is_finite() {
        Some(curr_norm_sq / prev_norm_sq)
    } else {
        None
    }
}

/// Balanced batches for one epoch: each class is shuffled with a seed derived
/// from `(seed, epoch)` and dealt out in equal blocks.
pub fn epoch_batches(set: &LabeledSet, batches: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    let n_classes = set.classes().iter().max().map_or(0, |c| c + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut per_class = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let mut idx = set.indices_of_class(c);
        if !idx.len().is_multiple_of(batches) || idx.is_empty() {
            return Err(Error::invalid(format!(
                "class {c} has {} samples, not divisible into {batches} batches",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        per_class.push(idx);
    }
    Ok((0..batches)
        .map(|b| {
            per_class
                .iter()
                .flat_map(|idx| {
                    let per = idx.len() / batches;
                    idx[b * per..(b + 1) * per].iter().copied()
                })
                .collect()
        })
        .collect())
}

fn descent_gradient(
    space: DescentSpace,
    l2grad: &GradientField,
    params: &ParamTrajectory,
    mu5: f64,
) -> Result<(GradientField, f64)> {
    match space {
        DescentSpace::L2 => Ok((l2grad.clone(), l2grad.l2_norm_sq())),
        DescentSpace::W12 => {
            let g = w12_gradient(l2grad, params, mu5)?;
            let n = g.w12_norm_sq();
            Ok((g, n))
        }
    }
}

/// One NCG iteration on `batch`; updates `state` in place.
pub fn ncg_iteration(config: &TrainConfig, state: &mut TrainState, batch: &LabeledSet, iteration: usize) -> Result<()> {
    let w = &config.weights;
    let eval = evaluate_batch(&state.params, batch, w, &config.solver)?;
    if !eval.cost.is_finite() {
        return Err(Error::Diverged(format!("batch cost is {}", eval.cost)));
    }
    let outputs: Vec<Vec<f64>> = eval.forward.iter().map(|s| s.terminal().to_vec()).collect();
    let train_acc = accuracy_of_outputs(&outputs, batch.classes());
    let (grad, norm_sq) = descent_gradient(config.descent, &eval.gradient, &state.params, w.mu5)?;

    let steepest = grad.negated();
    let mut gamma = None;
    let mut direction = steepest.clone();
    if let (Some(prev_dir), Some(prev_sq)) = (&state.prev_direction, state.prev_grad_norm_sq) {
        if let Some(g) = fletcher_reeves_gamma(norm_sq, prev_sq) {
            direction.field_mut().add_scaled(g, prev_dir.field())?;
            gamma = Some(g);
        }
    }

    let mut outcome = line_search(config, state, batch, &eval.forward, &direction)?;
    if outcome == BetaOutcome::NotDescent && gamma.is_some() {
        log::debug!("conjugate direction is not a descent direction, restarting");
        gamma = None;
        direction = steepest;
        outcome = line_search(config, state, batch, &eval.forward, &direction)?;
    }
    let beta = outcome.beta();
    if let Some(b) = beta {
        let next = axpy(b, &direction, &state.params)?;
        if !next.is_finite() {
            return Err(Error::Diverged("parameters became non-finite".into()));
        }
        state.params = next;
    } else {
        log::debug!("step skipped: {outcome:?}");
    }
    state.prev_direction = Some(direction);
    state.prev_grad_norm_sq = Some(norm_sq);
    state.iterations_done += 1;
    let rec = IterationRecord {
        epoch: state.epoch,
        batch: state.batch,
        iteration,
        cost: eval.cost,
        train_acc,
        l2_norm: state.params.l2_norm_sq().sqrt(),
        w12_norm: state.params.w12_norm_sq().sqrt(),
        beta,
        gamma,
        capped: matches!(outcome, BetaOutcome::Capped(_)),
    };
    log::trace!("{rec:?}");
    state.records.push(rec);
    Ok(())
}

fn line_search(
    config: &TrainConfig,
    state: &TrainState,
    batch: &LabeledSet,
    forward: &[crate::ode::DenseSolution],
    direction: &GradientField,
) -> Result<BetaOutcome> {
    let sens = solve_sensitivity(&state.params, direction, forward, &config.solver)?;
    let s = Surrogate::new(&state.params, batch, &config.weights, forward, &sens, direction)?;
    optimal_beta(&s)
}

/// Run one batch of `iterations_per_batch` iterations from the steepest direction.
pub fn train_batch(config: &TrainConfig, state: &mut TrainState, batch: &LabeledSet) -> Result<()> {
    state.prev_direction = None;
    state.prev_grad_norm_sq = None;
    for j in 0..config.iterations_per_batch {
        ncg_iteration(config, state, batch, j)?;
    }
    Ok(())
}

/// Score the held-out sets with the current parameters.
pub fn evaluate(params: &ParamTrajectory, sets: &EvalSets<'_>, options: &SolverOptions) -> Result<(Option<f64>, Option<f64>)> {
    let clean = sets.clean.map(|s| accuracy(params, s, options)).transpose()?;
    let noisy = sets.noisy.map(|s| accuracy(params, s, options)).transpose()?;
    Ok((clean, noisy))
}

/// Continue training from `state` until `config.epochs` epochs are complete,
/// scoring `sets` after every batch.
pub fn ncg_resume(
    config: &TrainConfig,
    mut state: TrainState,
    train: &LabeledSet,
    sets: &EvalSets<'_>,
) -> std::result::Result<TrainState, TrainFailure> {
    let fail = |error: Error, state: TrainState| TrainFailure { error, state: Some(Box::new(state)) };
    if let Err(e) = config.validate() {
        return Err(fail(e, state));
    }
    if train.n_state() != state.params.n_state() {
        return Err(fail(Error::shape("training data and parameters differ in dimension"), state));
    }
    while state.epoch < config.epochs {
        let batches = match epoch_batches(train, config.batches_per_epoch, config.seed, state.epoch) {
            Ok(b) => b,
            Err(e) => return Err(fail(e, state)),
        };
        while state.batch < config.batches_per_epoch {
            let batch = match train.subset(&batches[state.batch]) {
                Ok(b) => b,
                Err(e) => return Err(fail(e, state)),
            };
            let snapshot = state.clone();
            if let Err(e) = train_batch(config, &mut state, &batch) {
                let mut snap = snapshot;
                snap.records = state.records;
                return Err(fail(e, snap));
            }
            let (clean, noisy) = match evaluate(&state.params, sets, &config.solver) {
                Ok(v) => v,
                Err(e) => return Err(fail(e, state)),
            };
            let eval = Evaluation {
                epoch: state.epoch,
                batch: state.batch,
                epoch_count: state.epoch as f64 + (state.batch + 1) as f64 / config.batches_per_epoch as f64,
                clean_acc: clean,
                noisy_acc: noisy,
            };
            log::info!(
                "epoch {:.1}: cost {:.6e} clean {:?} noisy {:?}",
                eval.epoch_count,
                state.records.last().map_or(f64::NAN, |r| r.cost),
                clean,
                noisy
            );
            state.evaluations.push(eval);
            state.batch += 1;
        }
        state.batch = 0;
        state.epoch += 1;
    }
    state.prev_direction = None;
    state.prev_grad_norm_sq = None;
    Ok(state)
}

/// Train from the seeded initial parameters.
pub fn ncg_train(
    config: &TrainConfig,
    train: &LabeledSet,
    sets: &EvalSets<'_>,
) -> std::result::Result<TrainState, TrainFailure> {
    let state = config
        .validate()
        .and_then(|_| TrainState::initial(config, train.n_state()))
        .map_err(|error| TrainFailure { error, state: None })?;
    ncg_resume(config, state, train, sets)
}

/// Predicted classes for a set.
pub fn predict_classes(params: &ParamTrajectory, set: &LabeledSet, options: &SolverOptions) -> Result<Vec<usize>> {
    let model = crate::model::NodeModel::new(params);
    Ok(model.predict(set.inputs(), options)?.iter().map(|o| classify(o)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{DatasetKind, DatasetSpec};

    #[test]
    fn gamma_contract() {
        assert_eq!(fletcher_reeves_gamma(2.0, 2.0), Some(1.0));
        assert_eq!(fletcher_reeves_gamma(4.0, 1.0), Some(4.0));
        assert_eq!(fletcher_reeves_gamma(4.0, 0.0), None);
    }

    #[test]
    fn batches_are_balanced_and_cover_the_set() {
        let set = DatasetSpec::train(DatasetKind::Moons, 3).generate().unwrap();
        let b = epoch_batches(&set, 10, 11, 0).unwrap();
        let mut all: Vec<usize> = b.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        for batch in &b {
            assert_eq!(batch.len(), 100);
            assert_eq!(batch.iter().filter(|k| set.class(**k) == 0).count(), 50);
        }
        assert_eq!(b, epoch_batches(&set, 10, 11, 0).unwrap());
        assert_ne!(b, epoch_batches(&set, 10, 11, 1).unwrap());
        assert!(epoch_batches(&set, 7, 11, 0).is_err());
    }

    #[test]
    fn config_rejects_penalty_mismatch() {
        let c = TrainConfig::new(DescentSpace::L2, CostWeights::moons().with_w12_penalty(1e-5), 0);
        match c.validate() {
            Err(Error::Config(list)) => assert!(list.iter().any(|m| m.contains("mu5"))),
            other => panic!("{other:?}"),
        }
        assert!(TrainConfig::new(DescentSpace::W12, CostWeights::moons().with_w12_penalty(1e-5), 0).validate().is_ok());
    }

    #[test]
    fn first_iteration_of_a_batch_is_steepest_descent() {
        let mut config = TrainConfig::new(DescentSpace::L2, CostWeights::moons(), 1);
        config.intervals = 25;
        config.iterations_per_batch = 3;
        let set = DatasetSpec::train(DatasetKind::Moons, 1).generate().unwrap();
        let batch = set.subset(&epoch_batches(&set, 10, 1, 0).unwrap()[0]).unwrap();
        let mut state = TrainState::initial(&config, 2).unwrap();
        train_batch(&config, &mut state, &batch).unwrap();
        assert_eq!(state.records[0].gamma, None);
        assert!(state.records[1..].iter().all(|r| r.beta.is_some()));
        // the cost decreases over the batch
        assert!(state.records[2].cost < state.records[0].cost);
    }
}
