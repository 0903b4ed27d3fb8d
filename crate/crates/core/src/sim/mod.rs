//! Closed-loop rollouts under a scheduling policy, stage costs and the
//! Monte-Carlo estimate of the second moment `E[ζₖᵀζₖ]`.
//!
//! A trace record at step `k` stores the decision `σₖ`, the drop outcome `γₖ`,
//! the post-step state `ζₖ₊₁ = (xₖ₊₁, x̂ₖ, ûₖ)` and the stage cost
//! `cₖ = xₖᵀQxₖ + ûₖᵀRûₖ + λσₖ²`, where `xₖ` is the state the scheduler saw.

pub mod policy;

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{mode_from_events, step_augmented, step_components, AugmentedState, Mode, ModeSet, PlantModel, Switch};

pub use policy::{explore, Always, Decision, EpsilonGreedy, RoundRobin, SchedulingPolicy, UniformRandom};

/// Rollouts stop once `‖ζ‖` exceeds this.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Cost weights for `xᵀQx + ûᵀRû + λσ²` and the discount factor.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    lambda: f64,
    beta: f64,
}

impl CostWeights {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, lambda: f64, beta: f64) -> Result<Self> {
        if !q.is_square() || !r.is_square() {
            return Err(Error::Config(format!(
                "Q is {}x{} and R is {}x{}; both must be square",
                q.nrows(),
                q.ncols(),
                r.nrows(),
                r.ncols()
            )));
        }
        if q.iter().chain(r.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("cost matrices contain non-finite entries".into()));
        }
        let sym_tol = |m: &DMatrix<f64>| 1e-12 * m.amax().max(1.0);
        if (&q - q.transpose()).amax() > sym_tol(&q) || (&r - r.transpose()).amax() > sym_tol(&r) {
            return Err(Error::Domain("Q and R must be symmetric".into()));
        }
        if q.nrows() > 0 && linalg::min_sym_eigenvalue(&q) < -sym_tol(&q) {
            return Err(Error::Domain("Q must be positive semidefinite".into()));
        }
        if r.nrows() == 0 || linalg::min_sym_eigenvalue(&r) <= 0.0 {
            return Err(Error::Domain("R must be positive definite".into()));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Domain(format!("transmission penalty {lambda} must be >= 0")));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::Domain(format!("discount factor {beta} must lie in (0, 1)")));
        }
        Ok(Self { q, r, lambda, beta })
    }

    /// `Q = Iₙ`, `R = Iₘ`, λ = 0.5, β = 0.95.
    pub fn identity(state_dim: usize, input_dim: usize) -> Self {
        Self {
            q: DMatrix::identity(state_dim, state_dim),
            r: DMatrix::identity(input_dim, input_dim),
            lambda: 0.5,
            beta: 0.95,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        self.lambda = lambda;
        Self::new(self.q, self.r, self.lambda, self.beta)
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }

    fn check_dims(&self, state_dim: usize, input_dim: usize) -> Result<()> {
        if self.q.nrows() != state_dim || self.r.nrows() != input_dim {
            return Err(Error::Config(format!(
                "cost weights are for n = {}, m = {} but the system has n = {state_dim}, m = {input_dim}",
                self.q.nrows(),
                self.r.nrows()
            )));
        }
        Ok(())
    }
}

/// Serialized form of [`CostWeights`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostSpec {
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    pub lambda: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    0.95
}

impl CostSpec {
    pub fn build(&self) -> Result<CostWeights> {
        CostWeights::new(
            linalg::from_rows(&self.q, "Q")?,
            linalg::from_rows(&self.r, "R")?,
            self.lambda,
            self.beta,
        )
    }
}

impl From<&CostWeights> for CostSpec {
    fn from(w: &CostWeights) -> Self {
        Self {
            q: linalg::to_rows(&w.q),
            r: linalg::to_rows(&w.r),
            lambda: w.lambda,
            beta: w.beta,
        }
    }
}

/// Channel and run length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    delta: f64,
    seed: u64,
    horizon: usize,
}

impl NetworkConfig {
    pub fn new(delta: f64, seed: u64, horizon: usize) -> Result<Self> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::Domain(format!("success probability {delta} must lie in (0, 1]")));
        }
        if horizon == 0 {
            return Err(Error::Domain("horizon must be at least one step".into()));
        }
        Ok(Self { delta, seed, horizon })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// The four random streams of one rollout.
///
/// Each is ChaCha8 keyed by the master seed on its own stream id, so
/// consuming one never shifts another.
#[derive(Debug, Clone)]
pub struct RngStreams {
    /// Packet drops.
    pub network: ChaCha8Rng,
    /// ε-coin and any policy randomness.
    pub exploration: ChaCha8Rng,
    /// Initial states and network weight initialization.
    pub initial: ChaCha8Rng,
    /// Replay-batch sampling.
    pub replay: ChaCha8Rng,
}

impl RngStreams {
    const KINDS: u64 = 4;

    /// Streams for rollout number `run` under `seed`.
    pub fn new(seed: u64, run: u64) -> Self {
        let base = run.wrapping_mul(Self::KINDS);
        Self {
            network: Self::stream(seed, base),
            exploration: Self::stream(seed, base + 1),
            initial: Self::stream(seed, base + 2),
            replay: Self::stream(seed, base + 3),
        }
    }

    fn stream(seed: u64, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id);
        rng
    }
}

/// Box from which initial plant states are drawn uniformly, per coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialBox {
    pub low: f64,
    pub high: f64,
}

impl Default for InitialBox {
    fn default() -> Self {
        Self { low: -10.0, high: 10.0 }
    }
}

impl InitialBox {
    pub fn sample(&self, dim: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(dim, |_, _| rng.gen_range(self.low..=self.high))
    }
}

/// Something that advances the augmented state given the network events.
pub trait Dynamics: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn step(&self, state: &AugmentedState, switch: Switch, delivered: bool) -> Result<AugmentedState>;
}

/// Component equations.
impl Dynamics for PlantModel {
    fn state_dim(&self) -> usize {
        PlantModel::state_dim(self)
    }
    fn input_dim(&self) -> usize {
        PlantModel::input_dim(self)
    }
    fn step(&self, state: &AugmentedState, switch: Switch, delivered: bool) -> Result<AugmentedState> {
        step_components(self, state, switch, delivered)
    }
}

/// Mode matrices; also covers synthetic families with no plant behind them.
impl Dynamics for ModeSet {
    fn state_dim(&self) -> usize {
        ModeSet::state_dim(self)
    }
    fn input_dim(&self) -> usize {
        ModeSet::input_dim(self)
    }
    fn step(&self, state: &AugmentedState, switch: Switch, delivered: bool) -> Result<AugmentedState> {
        step_augmented(self, state, mode_from_events(switch, delivered))
    }
}

/// `xᵀQx + ûᵀRû + λσ²`.
pub fn stage_cost(weights: &CostWeights, x: &DVector<f64>, uhat: &DVector<f64>, switch: Switch) -> Result<f64> {
    weights.check_dims(x.len(), uhat.len())?;
    Ok(quad(&weights.q, x) + quad(&weights.r, uhat) + weights.lambda * switch.transmissions())
}

fn quad(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    /// `ζₖ₊₁`.
    pub state: AugmentedState,
    pub switch: Switch,
    pub delivered: bool,
    pub explored: bool,
    pub mode: Mode,
    pub cost: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub initial: AugmentedState,
    pub records: Vec<StepRecord>,
    /// The rollout was cut short by the divergence guard.
    pub diverged: bool,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        kahan_sum(self.records.iter().map(|r| r.reward))
    }

    /// Mean reward per recorded step; zero for an empty trace.
    pub fn average_reward(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.total_reward() / self.records.len() as f64
        }
    }

    /// `ζᵀζ` of the last state, or of the initial state if nothing ran.
    pub fn final_norm_squared(&self) -> f64 {
        self.records
            .last()
            .map_or_else(|| self.initial.norm_squared(), |r| r.state.norm_squared())
    }

    /// `ζₖᵀζₖ` for k = 0..=len.
    pub fn norm_squared_series(&self) -> Vec<f64> {
        std::iter::once(self.initial.norm_squared())
            .chain(self.records.iter().map(|r| r.state.norm_squared()))
            .collect()
    }
}

/// Runs one episode with streams `RngStreams::new(network.seed(), 0)`.
pub fn simulate<D: Dynamics + ?Sized>(
    dynamics: &D,
    policy: &mut dyn SchedulingPolicy,
    network: &NetworkConfig,
    weights: &CostWeights,
    x0: &DVector<f64>,
) -> Result<Trace> {
    let mut streams = RngStreams::new(network.seed(), 0);
    simulate_with_streams(dynamics, policy, network, weights, x0, &mut streams)
}

/// Runs one episode of `network.horizon()` steps.
///
/// `γₖ` is drawn from the network stream every step, also when nothing is
/// sent, so drop sequences line up across policies.
pub fn simulate_with_streams<D: Dynamics + ?Sized>(
    dynamics: &D,
    policy: &mut dyn SchedulingPolicy,
    network: &NetworkConfig,
    weights: &CostWeights,
    x0: &DVector<f64>,
    streams: &mut RngStreams,
) -> Result<Trace> {
    let (n, m) = (dynamics.state_dim(), dynamics.input_dim());
    if x0.len() != n {
        return Err(Error::Config(format!("initial state has length {}, expected {n}", x0.len())));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("initial state must be finite".into()));
    }
    weights.check_dims(n, m)?;

    let initial = AugmentedState::initial(x0.clone(), m);
    let mut state = initial.clone();
    let mut records = Vec::with_capacity(network.horizon());
    let mut diverged = false;
    for k in 0..network.horizon() {
        let decision = policy.decide(k, &state, &mut streams.exploration);
        let delivered = streams.network.gen_bool(network.delta());
        let next = dynamics.step(&state, decision.switch, delivered)?;
        let cost = quad(&weights.q, &state.x) + quad(&weights.r, &next.uhat_prev) + weights.lambda * decision.switch.transmissions();
        let norm_sq = next.norm_squared();
        records.push(StepRecord {
            k,
            switch: decision.switch,
            delivered,
            explored: decision.explored,
            mode: mode_from_events(decision.switch, delivered),
            cost,
            reward: -cost,
            state: next,
        });
        if !(norm_sq.is_finite() && norm_sq.sqrt() <= DIVERGENCE_NORM) {
            diverged = true;
            break;
        }
        state = records.last().expect("just pushed").state.clone();
    }
    Ok(Trace {
        initial,
        records,
        diverged,
    })
}

/// `Σₖ βᵏ rₖ`.
pub fn discounted_return(trace: &Trace, beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Domain(format!("discount factor {beta} must lie in (0, 1)")));
    }
    let mut weight = 1.0;
    Ok(kahan_sum(trace.records.iter().map(|r| {
        let term = weight * r.reward;
        weight *= beta;
        term
    })))
}

pub fn trace_csv_header(state_dim: usize, input_dim: usize) -> Vec<String> {
    let mut h = vec!["k".to_string()];
    h.extend((1..=state_dim).map(|i| format!("x{i}")));
    h.extend((1..=state_dim).map(|i| format!("xhat{i}")));
    h.extend((1..=input_dim).map(|i| format!("uhat{i}")));
    h.extend(["sigma", "gamma", "mode", "cost", "reward"].map(String::from));
    h
}

/// One row per step, holding the post-step state.
pub fn write_trace_csv<W: Write>(trace: &Trace, out: W) -> Result<()> {
    let (n, m) = (trace.initial.x.len(), trace.initial.uhat_prev.len());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trace_csv_header(n, m)).map_err(csv_err)?;
    for r in &trace.records {
        let mut row = vec![r.k.to_string()];
        row.extend(r.state.x.iter().map(f64::to_string));
        row.extend(r.state.xhat_prev.iter().map(f64::to_string));
        row.extend(r.state.uhat_prev.iter().map(f64::to_string));
        row.push(r.switch.value().to_string());
        row.push(u8::from(r.delivered).to_string());
        row.push(r.mode.index().to_string());
        row.push(r.cost.to_string());
        row.push(r.reward.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("trace csv", e))
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

/// Least-squares fit `log(E[ζₖᵀζₖ] / ζ₀ᵀζ₀) ≈ log ζ̄ + k log ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayEstimate {
    pub zeta_const: f64,
    pub xi: f64,
    pub r_squared: f64,
    /// Sample mean of `ζₖᵀζₖ` for k = 0..=horizon over the runs still alive at k.
    pub mean_zeta_sq: Vec<f64>,
    pub runs: usize,
    pub diverged: usize,
}

impl DecayEstimate {
    pub fn all_diverged(&self) -> bool {
        self.diverged == self.runs
    }

    pub fn diverged_fraction(&self) -> f64 {
        self.diverged as f64 / self.runs as f64
    }
}

pub const MIN_DECAY_RUNS: usize = 100;

/// Estimates `E[ζₖᵀζₖ]` from `runs` independent rollouts sharing `x0`.
///
/// Run `i` uses `RngStreams::new(network.seed(), i)`. Diverged runs are
/// truncated, so late sample means are taken over the surviving runs only;
/// `diverged` counts the rest.
pub fn monte_carlo_decay<D: Dynamics + ?Sized>(
    dynamics: &D,
    policy: &dyn SchedulingPolicy,
    network: &NetworkConfig,
    x0: &DVector<f64>,
    runs: usize,
) -> Result<DecayEstimate> {
    if runs < MIN_DECAY_RUNS {
        return Err(Error::Domain(format!("need at least {MIN_DECAY_RUNS} runs, got {runs}")));
    }
    let weights = CostWeights::identity(dynamics.state_dim(), dynamics.input_dim());
    let series: Vec<(Vec<f64>, bool)> = (0..runs as u64)
        .into_par_iter()
        .map(|run| {
            let mut p = policy.boxed_clone();
            let mut streams = RngStreams::new(network.seed(), run);
            let trace = simulate_with_streams(dynamics, p.as_mut(), network, &weights, x0, &mut streams)?;
            Ok((trace.norm_squared_series(), trace.diverged))
        })
        .collect::<Result<_>>()?;

    let steps = network.horizon() + 1;
    let mut mean_zeta_sq = Vec::with_capacity(steps);
    for k in 0..steps {
        let mut sum = KahanSum::default();
        let mut count = 0usize;
        for (s, diverged) in &series {
            // The final sample of a diverged run is past the guard.
            let alive = if *diverged { s.len() - 1 } else { s.len() };
            if k < alive {
                sum.add(s[k]);
                count += 1;
            }
        }
        if count == 0 {
            break;
        }
        mean_zeta_sq.push(sum.value() / count as f64);
    }
    let diverged = series.iter().filter(|(_, d)| *d).count();

    let z0 = mean_zeta_sq[0];
    if !(z0 > 0.0) {
        return Err(Error::Domain("zero initial state carries no decay information".into()));
    }
    let points: Vec<(f64, f64)> = mean_zeta_sq
        .iter()
        .enumerate()
        .filter(|(_, e)| **e > 0.0 && e.is_finite())
        .map(|(k, e)| (k as f64, (e / z0).ln()))
        .collect();
    let (intercept, slope, r_squared) = linear_fit(&points)?;
    Ok(DecayEstimate {
        zeta_const: intercept.exp(),
        xi: slope.exp(),
        r_squared,
        mean_zeta_sq,
        runs,
        diverged,
    })
}

/// Ordinary least squares `y ≈ a + b t`. Returns `(a, b, R²)`.
fn linear_fit(points: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    if points.len() < 2 {
        return Err(Error::Numerical(format!(
            "need at least two positive second-moment samples to fit a rate, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let tm = kahan_sum(points.iter().map(|p| p.0)) / n;
    let ym = kahan_sum(points.iter().map(|p| p.1)) / n;
    let stt = kahan_sum(points.iter().map(|p| (p.0 - tm).powi(2)));
    let sty = kahan_sum(points.iter().map(|p| (p.0 - tm) * (p.1 - ym)));
    let syy = kahan_sum(points.iter().map(|p| (p.1 - ym).powi(2)));
    let slope = sty / stt;
    let intercept = ym - slope * tm;
    let sse = kahan_sum(points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)));
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Ok((intercept, slope, r_squared))
}

pub fn write_decay_csv<W: Write>(estimate: &DecayEstimate, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "mean_zeta_sq"]).map_err(csv_err)?;
    for (k, e) in estimate.mean_zeta_sq.iter().enumerate() {
        w.write_record([k.to_string(), e.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("decay csv", e))
}

/// Per-step average reward over independent episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSummary {
    pub mean: f64,
    /// Standard error of `mean` across episodes.
    pub stderr: f64,
    pub episodes: usize,
    pub diverged: usize,
    /// Per-episode mean reward, in episode order.
    pub per_episode: Vec<f64>,
}

/// Episode `e` draws `x₀` from `initial` and uses
/// `RngStreams::new(network.seed(), e)`, so two policies evaluated with the
/// same network config see the same initial states and drop sequences.
pub fn average_reward<D: Dynamics + ?Sized>(
    dynamics: &D,
    policy: &dyn SchedulingPolicy,
    network: &NetworkConfig,
    weights: &CostWeights,
    episodes: usize,
    initial: InitialBox,
) -> Result<RewardSummary> {
    if episodes == 0 {
        return Err(Error::Domain("need at least one episode".into()));
    }
    let n = dynamics.state_dim();
    let results: Vec<(f64, bool)> = (0..episodes as u64)
        .into_par_iter()
        .map(|e| {
            let mut p = policy.boxed_clone();
            let mut streams = RngStreams::new(network.seed(), e);
            let x0 = initial.sample(n, &mut streams.initial);
            let trace = simulate_with_streams(dynamics, p.as_mut(), network, weights, &x0, &mut streams)?;
            Ok((trace.average_reward(), trace.diverged))
        })
        .collect::<Result<_>>()?;

    let per_episode: Vec<f64> = results.iter().map(|r| r.0).collect();
    let count = per_episode.len() as f64;
    let mean = kahan_sum(per_episode.iter().copied()) / count;
    let stderr = if per_episode.len() > 1 {
        let var = kahan_sum(per_episode.iter().map(|r| (r - mean).powi(2))) / (count - 1.0);
        (var / count).sqrt()
    } else {
        0.0
    };
    Ok(RewardSummary {
        mean,
        stderr,
        episodes,
        diverged: results.iter().filter(|r| r.1).count(),
        per_episode,
    })
}

/// Compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = KahanSum::default();
    for v in values {
        s.add(v);
    }
    s.value()
}
