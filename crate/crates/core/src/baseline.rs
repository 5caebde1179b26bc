//! Discrete Euler residual network trained with RMSProp, the comparison
//! baseline for the NODE optimizer.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cost::{terminal_loss, terminal_loss_gradient, LabeledSet};
use crate::datasets::{accuracy_of_outputs, classify};
use crate::error::{Error, Result};
use crate::mesh::{init_params, param_len, CostWeights, ParamTrajectory, TimeMesh};
use crate::model::{preactivation, tanh_layer, MAX_STATE};

pub const DEFAULT_LAYERS: usize = 250;
pub const DEFAULT_STEP: f64 = 1.0 / 50.0;

/// `x_{n+1} = x_n + h_n tanh(W_n x_n + b_n)`; each layer is a packed `(W, b)`
/// in the same column-major layout as the NODE parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteNet {
    n_state: usize,
    layers: Vec<Vec<f64>>,
    steps: Vec<f64>,
}

impl DiscreteNet {
    pub fn new(n_state: usize, layers: Vec<Vec<f64>>, step: f64) -> Result<Self> {
        let steps = vec![step; layers.len()];
        Self::with_steps(n_state, layers, steps)
    }

    pub fn with_steps(n_state: usize, layers: Vec<Vec<f64>>, steps: Vec<f64>) -> Result<Self> {
        if n_state == 0 || n_state > MAX_STATE {
            return Err(Error::shape(format!("unsupported state dimension {n_state}")));
        }
        if layers.is_empty() || layers.len() != steps.len() {
            return Err(Error::shape("need one step per layer and at least one layer"));
        }
        if let Some(l) = layers.iter().find(|l| l.len() != param_len(n_state)) {
            return Err(Error::shape(format!("layer has {} parameters, expected {}", l.len(), param_len(n_state))));
        }
        Ok(DiscreteNet { n_state, layers, steps })
    }

    /// Every layer starts from the same draw as [`init_params`] with this
    /// seed, so the baseline and the NODE begin from the same constant
    /// parameters.
    pub fn constant(n_state: usize, layers: usize, step: f64, seed: u64) -> Result<Self> {
        let mesh = Arc::new(TimeMesh::uniform(layers as f64 * step, layers)?);
        let value = init_params(seed, n_state, mesh).node(0).to_vec();
        Self::new(n_state, vec![value; layers], step)
    }

    /// Layer `n` takes the parameters at mesh node `t_n` and step
    /// `t_{n+1} - t_n`, so the net reproduces forward Euler on the mesh.
    pub fn from_trajectory(params: &ParamTrajectory) -> Result<Self> {
        let mesh = params.mesh();
        let layers = (0..mesh.intervals()).map(|i| params.node(i).to_vec()).collect();
        let steps = (0..mesh.intervals()).map(|i| mesh.step(i)).collect();
        Self::with_steps(params.n_state(), layers, steps)
    }

    /// Layers as nodal parameters on the uniform mesh of the layer steps; the
    /// last node repeats the last layer. Forward Euler on this trajectory is
    /// the net itself when all steps are equal.
    pub fn to_trajectory(&self) -> Result<ParamTrajectory> {
        let mesh = Arc::new(TimeMesh::uniform(self.depth(), self.layers.len())?);
        let mut values: Vec<f64> = self.layers.iter().flatten().copied().collect();
        values.extend_from_slice(self.layers.last().expect("at least one layer"));
        ParamTrajectory::from_values(mesh, self.n_state, values)
    }

    pub fn n_state(&self) -> usize {
        self.n_state
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn depth(&self) -> f64 {
        self.steps.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|v| v.is_finite())
    }

    pub fn output(&self, x0: &[f64]) -> Vec<f64> {
        forward_discrete(self, x0).0
    }
}

/// Output and the states `x_0, ..., x_L` visited.
pub fn forward_discrete(net: &DiscreteNet, x0: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = net.n_state;
    assert_eq!(x0.len(), n, "input dimension");
    let mut cache = Vec::with_capacity(net.layers.len() + 1);
    let mut x = x0.to_vec();
    let mut f = [0.0; MAX_STATE];
    cache.push(x.clone());
    for (theta, h) in net.layers.iter().zip(&net.steps) {
        tanh_layer(theta, &x, &mut f);
        for j in 0..n {
            x[j] += h * f[j];
        }
        cache.push(x.clone());
    }
    (x, cache)
}

/// Batch loss `(1/K) sum_k L(x_k^L, y_k)` (no penalties) and its gradient
/// with respect to every layer.
pub fn backprop_discrete(net: &DiscreteNet, batch: &LabeledSet, w: &CostWeights) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.n_state() != net.n_state {
        return Err(Error::shape("batch and network dimensions differ"));
    }
    let n = net.n_state;
    let inv_k = 1.0 / batch.len() as f64;
    let mut grads = vec![vec![0.0; param_len(n)]; net.layers.len()];
    let mut loss = 0.0;
    let mut z = [0.0; MAX_STATE];
    let mut u = [0.0; MAX_STATE];
    for k in 0..batch.len() {
        let (out, cache) = forward_discrete(net, batch.input(k));
        let y = batch.target(k);
        loss += terminal_loss(&out, &y, w);
        let mut g: Vec<f64> = terminal_loss_gradient(&out, &y, w).into_iter().map(|v| v * inv_k).collect();
        for l in (0..net.layers.len()).rev() {
            let theta = &net.layers[l];
            let x = &cache[l];
            preactivation(theta, x, &mut z);
            for i in 0..n {
                let t = z[i].tanh();
                u[i] = net.steps[l] * (1.0 - t * t) * g[i];
            }
            let gl = &mut grads[l];
            for col in 0..n {
                for row in 0..n {
                    gl[col * n + row] += u[row] * x[col];
                }
            }
            for row in 0..n {
                gl[n * n + row] += u[row];
            }
            for col in 0..n {
                g[col] += (0..n).map(|row| theta[col * n + row] * u[row]).sum::<f64>();
            }
        }
    }
    Ok((loss * inv_k, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RmsPropState {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub r: Vec<Vec<f64>>,
}

impl RmsPropState {
    pub fn new(net: &DiscreteNet, lr: f64, rho: f64, eps: f64) -> Self {
        RmsPropState { lr, rho, eps, r: vec![vec![0.0; param_len(net.n_state)]; net.layers.len()] }
    }

    pub fn with_defaults(net: &DiscreteNet) -> Self {
        Self::new(net, 0.1, 0.9, 1e-7)
    }
}

/// `r <- rho r + (1 - rho) g^2`, `w <- w - lr g / (sqrt(r) + eps)`.
pub fn rmsprop_step(state: &mut RmsPropState, net: &mut DiscreteNet, grads: &[Vec<f64>]) -> Result<()> {
    if grads.len() != net.layers.len() || state.r.len() != net.layers.len() {
        return Err(Error::shape("gradient and network layer counts differ"));
    }
    for ((layer, g), r) in net.layers.iter_mut().zip(grads).zip(state.r.iter_mut()) {
        for ((w, gi), ri) in layer.iter_mut().zip(g).zip(r.iter_mut()) {
            *ri = state.rho * *ri + (1.0 - state.rho) * gi * gi;
            *w -= state.lr * gi / (ri.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub layers: usize,
    pub step: f64,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub weights: CostWeights,
    pub seed: u64,
}

impl SgdConfig {
    pub fn new(weights: CostWeights, epochs: usize, seed: u64) -> Self {
        SgdConfig {
            epochs,
            batch_size: 100,
            layers: DEFAULT_LAYERS,
            step: DEFAULT_STEP,
            lr: 0.1,
            rho: 0.9,
            eps: 1e-7,
            weights,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub clean_acc: Option<f64>,
    pub noisy_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SgdRun {
    pub net: DiscreteNet,
    pub records: Vec<EpochRecord>,
}

/// Fraction of `set` classified correctly by the net.
pub fn net_accuracy(net: &DiscreteNet, set: &LabeledSet) -> f64 {
    let outs: Vec<Vec<f64>> = set.inputs().iter().map(|x| net.output(x)).collect();
    accuracy_of_outputs(&outs, set.classes())
}

pub fn net_classify(net: &DiscreteNet, x: &[f64]) -> usize {
    classify(&net.output(x))
}

/// Mini-batch RMSProp; the training set is reshuffled every epoch. On a
/// non-finite loss the error carries the epoch reached.
pub fn sgd_train(
    config: &SgdConfig,
    train: &LabeledSet,
    clean: Option<&LabeledSet>,
    noisy: Option<&LabeledSet>,
) -> Result<SgdRun> {
    config.weights.validate()?;
    if config.batch_size == 0 || config.layers == 0 {
        return Err(Error::invalid("batch size and layer count must be positive"));
    }
    let net = DiscreteNet::constant(train.n_state(), config.layers, config.step, config.seed)?;
    sgd_train_from(config, net, train, clean, noisy)
}

/// [`sgd_train`] from a given initial net; `config.layers` and `config.step`
/// are ignored.
pub fn sgd_train_from(
    config: &SgdConfig,
    mut net: DiscreteNet,
    train: &LabeledSet,
    clean: Option<&LabeledSet>,
    noisy: Option<&LabeledSet>,
) -> Result<SgdRun> {
    config.weights.validate()?;
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if net.n_state() != train.n_state() {
        return Err(Error::shape("net and data dimensions differ"));
    }
    let mut opt = RmsPropState::new(&net, config.lr, config.rho, config.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch = train.subset(chunk)?;
            let (loss, grads) = backprop_discrete(&net, &batch, &config.weights)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("loss is {loss} in epoch {epoch}")));
            }
            rmsprop_step(&mut opt, &mut net, &grads)?;
            loss_sum += loss;
            batches += 1;
        }
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            train_acc: net_accuracy(&net, train),
            clean_acc: clean.map(|s| net_accuracy(&net, s)),
            noisy_acc: noisy.map(|s| net_accuracy(&net, s)),
        };
        log::info!("sgd epoch {}: loss {:.6e} train {:.3}", epoch + 1, rec.loss, rec.train_acc);
        records.push(rec);
    }
    Ok(SgdRun { net, records })
}
