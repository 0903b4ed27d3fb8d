//! Scheduling policies: map the observed state at step `k` to a switch value.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::{AugmentedState, Switch};

/// One scheduler decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub switch: Switch,
    /// The choice came from the exploration branch of an ε-greedy policy.
    pub explored: bool,
}

impl Decision {
    pub fn exploit(switch: Switch) -> Self {
        Self {
            switch,
            explored: false,
        }
    }
}

/// A scheduler. Policies see the full augmented state; the ones shipped here
/// only read `state.x` unless documented otherwise.
///
/// Any randomness must come from `rng` (the exploration stream) so that runs
/// are reproducible.
pub trait SchedulingPolicy: Send + Sync {
    fn decide(&mut self, k: usize, state: &AugmentedState, rng: &mut ChaCha8Rng) -> Decision;

    /// Short name used in reports.
    fn name(&self) -> String;

    /// A fresh copy for an independent rollout.
    fn boxed_clone(&self) -> Box<dyn SchedulingPolicy>;
}

impl Clone for Box<dyn SchedulingPolicy> {
    fn clone(&self) -> Self {
        self.boxed_clone()
    }
}

/// Always returns the same switch value.
#[derive(Debug, Clone, Copy)]
pub struct Always(pub Switch);

impl SchedulingPolicy for Always {
    fn decide(&mut self, _k: usize, _state: &AugmentedState, _rng: &mut ChaCha8Rng) -> Decision {
        Decision::exploit(self.0)
    }

    fn name(&self) -> String {
        match self.0 {
            Switch::Control => "always:+1".into(),
            Switch::Silent => "always:0".into(),
            Switch::Observe => "always:-1".into(),
        }
    }

    fn boxed_clone(&self) -> Box<dyn SchedulingPolicy> {
        Box::new(*self)
    }
}

/// Cycles through a fixed sequence, indexed by `k`.
#[derive(Debug, Clone)]
pub struct RoundRobin {
    cycle: Vec<Switch>,
}

impl RoundRobin {
    /// Control then observation, transmitting every step.
    pub fn alternating() -> Self {
        Self {
            cycle: vec![Switch::Control, Switch::Observe],
        }
    }

    /// Control, silent, observation.
    pub fn three_phase() -> Self {
        Self {
            cycle: vec![Switch::Control, Switch::Silent, Switch::Observe],
        }
    }

    /// Panics on an empty cycle.
    pub fn new(cycle: Vec<Switch>) -> Self {
        assert!(!cycle.is_empty(), "round-robin cycle must not be empty");
        Self { cycle }
    }

    pub fn cycle(&self) -> &[Switch] {
        &self.cycle
    }
}

impl Default for RoundRobin {
    fn default() -> Self {
        Self::alternating()
    }
}

impl SchedulingPolicy for RoundRobin {
    fn decide(&mut self, k: usize, _state: &AugmentedState, _rng: &mut ChaCha8Rng) -> Decision {
        Decision::exploit(self.cycle[k % self.cycle.len()])
    }

    fn name(&self) -> String {
        if self.cycle == Self::alternating().cycle {
            "round-robin".into()
        } else {
            let parts: Vec<String> = self.cycle.iter().map(|s| s.value().to_string()).collect();
            format!("round-robin:{}", parts.join(","))
        }
    }

    fn boxed_clone(&self) -> Box<dyn SchedulingPolicy> {
        Box::new(self.clone())
    }
}

/// Uniform over {1, 0, -1}.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformRandom;

impl SchedulingPolicy for UniformRandom {
    fn decide(&mut self, _k: usize, _state: &AugmentedState, rng: &mut ChaCha8Rng) -> Decision {
        Decision::exploit(Switch::ALL[rng.gen_range(0..3)])
    }

    fn name(&self) -> String {
        "random".into()
    }

    fn boxed_clone(&self) -> Box<dyn SchedulingPolicy> {
        Box::new(*self)
    }
}

/// With probability ε picks σ = ±1 uniformly, otherwise asks `inner`.
///
/// The coin is flipped every step, and the inner policy is not consulted on
/// exploration steps.
#[derive(Clone)]
pub struct EpsilonGreedy {
    epsilon: f64,
    inner: Box<dyn SchedulingPolicy>,
}

impl EpsilonGreedy {
    /// Panics unless ε ∈ [0, 1].
    pub fn new(epsilon: f64, inner: Box<dyn SchedulingPolicy>) -> Self {
        assert!((0.0..=1.0).contains(&epsilon), "epsilon {epsilon} outside [0, 1]");
        Self { epsilon, inner }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn inner(&self) -> &dyn SchedulingPolicy {
        self.inner.as_ref()
    }
}

impl SchedulingPolicy for EpsilonGreedy {
    fn decide(&mut self, k: usize, state: &AugmentedState, rng: &mut ChaCha8Rng) -> Decision {
        match explore(self.epsilon, rng) {
            Some(switch) => Decision {
                switch,
                explored: true,
            },
            None => self.inner.decide(k, state, rng),
        }
    }

    fn name(&self) -> String {
        format!("egreedy({}, {})", self.epsilon, self.inner.name())
    }

    fn boxed_clone(&self) -> Box<dyn SchedulingPolicy> {
        Box::new(self.clone())
    }
}

/// The ε-coin: `Some(±1)` with probability ε, each sign equally likely.
pub fn explore(epsilon: f64, rng: &mut ChaCha8Rng) -> Option<Switch> {
    let coin: f64 = rng.gen();
    if coin < epsilon {
        Some(if rng.gen::<bool>() {
            Switch::Control
        } else {
            Switch::Observe
        })
    } else {
        None
    }
}
