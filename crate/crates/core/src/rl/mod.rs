//! Deep Q-learning for the scheduler: replay memory, a target network that is
//! synced every few steps, and ε-greedy rollouts whose ε is certified.

pub mod network;

use std::collections::VecDeque;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{AugmentedState, Switch};
use crate::sim::{self, explore, CostWeights, Decision, Dynamics, InitialBox, NetworkConfig, RngStreams, SchedulingPolicy};
use crate::stability::StabilityCertificate;

pub use network::{
    action_index, greedy_action, load_weights, save_weights, Dense, Gradient, InputMode, QNetwork, WeightsDocument,
    WeightsMeta, ACTIONS,
};

/// One transition `(σₖ, sₖ, rₖ, sₖ₊₁)`, where `s` are the network features.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub sigma: Switch,
    pub state: DVector<f64>,
    pub reward: f64,
    pub next_state: DVector<f64>,
}

/// Bounded FIFO; pushing past capacity drops the oldest entry.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    buffer: VecDeque<Experience>,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Domain("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            buffer: VecDeque::with_capacity(capacity),
        })
    }

    pub fn push(&mut self, e: Experience) {
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(e);
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.buffer.iter()
    }

    /// Slot indices drawn uniformly with replacement.
    pub fn sample_indices(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..count).map(|_| rng.gen_range(0..self.buffer.len())).collect()
    }

    pub fn sample(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<&Experience> {
        if self.buffer.is_empty() {
            return Vec::new();
        }
        self.sample_indices(count, rng)
            .into_iter()
            .map(|i| &self.buffer[i])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum OptimizerKind {
    /// Plain gradient descent.
    #[default]
    Sgd,
    /// Adaptive moments with the usual β₁ = 0.9, β₂ = 0.999.
    Adam,
}

/// Optimizer plus its per-parameter state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    clip_norm: Option<f64>,
    steps: u64,
    moments: Option<(Gradient, Gradient)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, clip_norm: Option<f64>) -> Self {
        Self {
            kind,
            learning_rate,
            clip_norm,
            steps: 0,
            moments: None,
        }
    }

    pub fn apply(&mut self, net: &mut QNetwork, mut grad: Gradient) {
        if let Some(limit) = self.clip_norm {
            let norm = gradient_norm(&grad);
            if norm > limit {
                let s = limit / norm;
                for g in &mut grad {
                    g.w *= s;
                    g.b *= s;
                }
            }
        }
        self.steps += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (layer, g) in net.layers_mut().iter_mut().zip(&grad) {
                    layer.w.zip_apply(&g.w, |p, d| *p -= lr * d);
                    layer.b.axpy(-lr, &g.b, 1.0);
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let (m, v) = self.moments.get_or_insert_with(|| {
                    let zero: Gradient = grad
                        .iter()
                        .map(|g| Dense {
                            w: DMatrix::zeros(g.w.nrows(), g.w.ncols()),
                            b: DVector::zeros(g.b.len()),
                        })
                        .collect();
                    (zero.clone(), zero)
                });
                let t = self.steps as i32;
                let step = lr * (1.0 - B2.powi(t)).sqrt() / (1.0 - B1.powi(t));
                let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                    *m = B1 * *m + (1.0 - B1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    *p -= step * *m / (v.sqrt() + EPS);
                };
                for (i, layer) in net.layers_mut().iter_mut().enumerate() {
                    let (g, mi, vi) = (&grad[i], &mut m[i], &mut v[i]);
                    for j in 0..layer.w.len() {
                        update(&mut layer.w[j], g.w[j], &mut mi.w[j], &mut vi.w[j]);
                    }
                    for j in 0..layer.b.len() {
                        update(&mut layer.b[j], g.b[j], &mut mi.b[j], &mut vi.b[j]);
                    }
                }
            }
        }
    }
}

pub fn gradient_norm(grad: &Gradient) -> f64 {
    grad.iter()
        .map(|g| g.w.norm_squared() + g.b.norm_squared())
        .sum::<f64>()
        .sqrt()
}

/// Exploration rate handed to training, tied to the certificate that
/// justifies it unless explicitly overridden.
#[derive(Debug, Clone)]
pub struct CertifiedEpsilon {
    epsilon: f64,
    certificate: Option<StabilityCertificate>,
}

impl CertifiedEpsilon {
    pub fn from_certificate(certificate: StabilityCertificate) -> Self {
        Self {
            epsilon: certificate.epsilon,
            certificate: Some(certificate),
        }
    }

    /// Runs with an ε no certificate backs. Callers must opt in explicitly.
    pub fn uncertified(epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Domain(format!("epsilon {epsilon} outside [0, 1]")));
        }
        Ok(Self {
            epsilon,
            certificate: None,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn certificate(&self) -> Option<&StabilityCertificate> {
        self.certificate.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub episodes: usize,
    /// Steps between target syncs.
    pub target_sync_period: usize,
    pub replay_capacity: usize,
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    /// Rescale gradients whose global norm exceeds this.
    pub clip_norm: Option<f64>,
    pub input: InputMode,
    pub initial: InitialBox,
    pub exploration: CertifiedEpsilon,
}

/// Unclipped SGD at rate 0.001 blows up within a few hundred updates on the
/// reference plant, since early TD targets are in the hundreds.
pub const DEFAULT_CLIP_NORM: f64 = 1.0;

impl TrainConfig {
    /// Batch 32, rate 0.001, 800 episodes, sync every 100 steps, replay 1000,
    /// hidden layers 1024 and 256, plain SGD with gradients clipped to norm 1,
    /// augmented-state input.
    pub fn new(exploration: CertifiedEpsilon) -> Self {
        Self {
            batch_size: 32,
            learning_rate: 0.001,
            episodes: 800,
            target_sync_period: 100,
            replay_capacity: 1000,
            hidden: vec![1024, 256],
            optimizer: OptimizerKind::Sgd,
            clip_norm: Some(DEFAULT_CLIP_NORM),
            input: InputMode::Augmented,
            initial: InitialBox::default(),
            exploration,
        }
    }

    pub fn arch(&self, feature_dim: usize) -> Vec<usize> {
        let mut arch = vec![feature_dim];
        arch.extend(&self.hidden);
        arch.push(ACTIONS.len());
        arch
    }

    fn validate(&self, network: &NetworkConfig) -> Result<()> {
        if self.batch_size == 0 || self.target_sync_period == 0 || self.replay_capacity == 0 {
            return Err(Error::Domain("batch size, sync period and replay capacity must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Domain(format!("clip norm {c} must be positive")));
            }
        }
        if let Some(cert) = self.exploration.certificate() {
            if (cert.delta - network.delta()).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "certificate is for delta = {}, training runs at delta = {}",
                    cert.delta,
                    network.delta()
                )));
            }
        }
        Ok(())
    }
}

/// Mean squared TD error of `net` on `batch` against
/// `r + β max_σ' target(s', σ')`, and its gradient.
pub fn td_gradient(net: &QNetwork, target: &QNetwork, batch: &[&Experience], beta: f64) -> Result<(f64, Gradient)> {
    if batch.is_empty() {
        return Err(Error::Domain("TD batch must not be empty".into()));
    }
    if net.arch() != target.arch() {
        return Err(Error::Config(format!(
            "policy network {:?} and target network {:?} differ",
            net.arch(),
            target.arch()
        )));
    }
    let dim = net.input_dim();
    let states = DMatrix::from_fn(dim, batch.len(), |r, c| batch[c].state[r]);
    let next = DMatrix::from_fn(dim, batch.len(), |r, c| batch[c].next_state[r]);
    let next_q = target.forward_batch(&next)?;
    let targets: Vec<f64> = batch
        .iter()
        .enumerate()
        .map(|(j, e)| e.reward + beta * next_q.column(j).max())
        .collect();
    let actions: Vec<usize> = batch.iter().map(|e| action_index(e.sigma)).collect();
    net.regression_gradient(&states, &actions, &targets)
}

/// One optimizer step on the TD loss. Returns the loss before the step.
pub fn td_update(
    net: &mut QNetwork,
    target: &QNetwork,
    batch: &[&Experience],
    beta: f64,
    optimizer: &mut Optimizer,
) -> Result<f64> {
    let (loss, grad) = td_gradient(net, target, batch, beta)?;
    optimizer.apply(net, grad);
    if !net.is_finite() {
        return Err(Error::Numerical(format!("Q-network weights became non-finite (loss {loss:e})")));
    }
    Ok(loss)
}

/// `θ⁻ ← θ`.
pub fn sync_target(net: &QNetwork, target: &mut QNetwork) -> Result<()> {
    if net.arch() != target.arch() {
        return Err(Error::Config("cannot sync networks of different architecture".into()));
    }
    target.clone_from(net);
    Ok(())
}

/// Greedy policy from a frozen Q-network.
#[derive(Debug, Clone)]
pub struct QNetworkGreedy {
    net: Arc<QNetwork>,
    input: InputMode,
    evaluations: Arc<AtomicU64>,
}

impl QNetworkGreedy {
    pub fn new(net: QNetwork, input: InputMode) -> Self {
        Self {
            net: Arc::new(net),
            input,
            evaluations: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Forward passes so far, shared by all clones of this policy.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn network(&self) -> &QNetwork {
        &self.net
    }
}

impl SchedulingPolicy for QNetworkGreedy {
    fn decide(&mut self, _k: usize, state: &AugmentedState, _rng: &mut ChaCha8Rng) -> Decision {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        // A frozen, finite network on a finite state cannot fail; fall back to
        // silence if it somehow does.
        let switch = self
            .net
            .forward(&self.input.features(state))
            .map_or(Switch::Silent, |q| greedy_action(&q));
        Decision::exploit(switch)
    }

    fn name(&self) -> String {
        "dqn".into()
    }

    fn boxed_clone(&self) -> Box<dyn SchedulingPolicy> {
        Box::new(self.clone())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: QNetwork,
    /// Total reward of every episode.
    pub episode_rewards: Vec<f64>,
    pub diverged: Vec<bool>,
    pub losses: Vec<f64>,
    /// More than half of the late episodes diverged.
    pub failed: bool,
}

/// Episodes looked at when deciding whether training failed.
pub const LATE_WINDOW: usize = 100;

/// Runs DQN training from `RngStreams::new(network.seed(), 0)`.
///
/// The initial stream first initializes the weights, then supplies every
/// episode's `x₀`. Per step: act ε-greedily, store the transition, and once
/// the memory holds a batch, sample one with replacement and take one
/// optimizer step; the target is synced every `target_sync_period` steps.
pub fn train<D: Dynamics + ?Sized>(
    dynamics: &D,
    network: &NetworkConfig,
    weights: &CostWeights,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate(network)?;
    let (n, m) = (dynamics.state_dim(), dynamics.input_dim());
    let mut streams = RngStreams::new(network.seed(), 0);
    let arch = cfg.arch(cfg.input.dim(n, m));
    let mut net = QNetwork::random(&arch, &mut streams.initial)?;
    let mut target = net.clone();
    let mut memory = ReplayMemory::new(cfg.replay_capacity)?;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.clip_norm);
    let epsilon = cfg.exploration.epsilon();

    let mut episode_rewards = Vec::with_capacity(cfg.episodes);
    let mut diverged = Vec::with_capacity(cfg.episodes);
    let mut losses = Vec::new();
    let mut steps = 0usize;
    for _ in 0..cfg.episodes {
        let x0 = cfg.initial.sample(n, &mut streams.initial);
        let mut state = AugmentedState::initial(x0, m);
        let mut features = cfg.input.features(&state);
        let mut total = sim::KahanSum::default();
        let mut blew_up = false;
        for _ in 0..network.horizon() {
            let switch = match explore(epsilon, &mut streams.exploration) {
                Some(s) => s,
                None => greedy_action(&net.forward(&features)?),
            };
            let delivered = streams.network.gen_bool(network.delta());
            let next = dynamics.step(&state, switch, delivered)?;
            let reward = -sim::stage_cost(weights, &state.x, &next.uhat_prev, switch)?;
            total.add(reward);
            let next_features = cfg.input.features(&next);
            let norm = next.norm_squared().sqrt();
            if !(norm.is_finite() && norm <= sim::DIVERGENCE_NORM) {
                blew_up = true;
                break;
            }
            memory.push(Experience {
                sigma: switch,
                state: features,
                reward,
                next_state: next_features.clone(),
            });
            if memory.len() >= cfg.batch_size {
                let batch = memory.sample(cfg.batch_size, &mut streams.replay);
                losses.push(td_update(&mut net, &target, &batch, weights.beta(), &mut optimizer)?);
            }
            steps += 1;
            if steps % cfg.target_sync_period == 0 {
                sync_target(&net, &mut target)?;
            }
            state = next;
            features = next_features;
        }
        episode_rewards.push(total.value());
        diverged.push(blew_up);
    }

    let late = &diverged[diverged.len().saturating_sub(LATE_WINDOW)..];
    let failed = !late.is_empty() && 2 * late.iter().filter(|d| **d).count() > late.len();
    Ok(TrainOutcome {
        network: net,
        episode_rewards,
        diverged,
        losses,
        failed,
    })
}

/// Trailing mean over up to `window` values ending at each index.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            sim::kahan_sum(values[lo..=i].iter().copied()) / (i + 1 - lo) as f64
        })
        .collect()
}

pub const CURVE_WINDOW: usize = 100;

pub fn write_reward_curve<W: Write>(episode_rewards: &[f64], out: W) -> Result<()> {
    let avg = moving_average(episode_rewards, CURVE_WINDOW);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode", "total_reward", "moving_avg_100"])
        .map_err(sim::csv_err)?;
    for (i, (r, a)) in episode_rewards.iter().zip(&avg).enumerate() {
        w.write_record([i.to_string(), r.to_string(), a.to_string()])
            .map_err(sim::csv_err)?;
    }
    w.flush().map_err(|e| Error::io("reward curve csv", e))
}
