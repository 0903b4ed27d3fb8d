//! Switching and mode probabilities of the epsilon-greedy scheduler.
//!
//! With probability ε the scheduler explores, picking σ = ±1 uniformly;
//! otherwise it exploits with `P(σ=1) = p`, `P(σ=-1) = q`. Packet success is
//! independent of the decision, so every mode distribution factors as a
//! switch distribution times a Bernoulli(δ) outcome, and the mode process is
//! i.i.d. across steps.

use crate::error::{Error, Result};
use crate::model::Mode;

/// Probabilities of σ = 1, 0, -1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchDistribution {
    pub prob_plus: f64,
    pub prob_zero: f64,
    pub prob_minus: f64,
}

impl SwitchDistribution {
    pub fn total(&self) -> f64 {
        self.prob_plus + self.prob_zero + self.prob_minus
    }
}

/// Exploitation probabilities of σ = 1 (`p`) and σ = -1 (`q`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExploitParams {
    p: f64,
    q: f64,
}

impl ExploitParams {
    pub fn new(p: f64, q: f64) -> Result<Self> {
        check_unit("p", p)?;
        check_unit("q", q)?;
        // Tolerate rounding on the simplex edge.
        if p + q > 1.0 + 1e-12 {
            return Err(Error::Domain(format!("p + q = {} exceeds 1", p + q)));
        }
        Ok(Self { p, q })
    }

    pub fn p(&self) -> f64 {
        self.p
    }
    pub fn q(&self) -> f64 {
        self.q
    }
    pub fn stay_silent(&self) -> f64 {
        (1.0 - self.p - self.q).max(0.0)
    }
}

/// The three extreme exploitation policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Corner {
    /// C1: exploitation only ever observes (p = 0, q = 1).
    ObserveOnly,
    /// C2: exploitation only ever sends control (p = 1, q = 0).
    ControlOnly,
    /// C3: exploitation never transmits (p = q = 0).
    Silent,
}

impl Corner {
    pub const ALL: [Corner; 3] = [Corner::ObserveOnly, Corner::ControlOnly, Corner::Silent];

    /// 1-based case number.
    pub fn number(self) -> usize {
        match self {
            Corner::ObserveOnly => 1,
            Corner::ControlOnly => 2,
            Corner::Silent => 3,
        }
    }

    pub fn from_number(c: usize) -> Result<Self> {
        Corner::ALL
            .get(c.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Domain(format!("corner case {c} not in 1..=3")))
    }

    pub fn exploit(self) -> ExploitParams {
        let (p, q) = match self {
            Corner::ObserveOnly => (0.0, 1.0),
            Corner::ControlOnly => (1.0, 0.0),
            Corner::Silent => (0.0, 0.0),
        };
        ExploitParams { p, q }
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {v} is outside [0, 1]")))
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("delta = {delta} is outside (0, 1]")))
    }
}

/// `ε (½, 0, ½) + (1-ε) (p, 1-p-q, q)`.
pub fn switch_distribution(epsilon: f64, exploit: ExploitParams) -> Result<SwitchDistribution> {
    check_unit("epsilon", epsilon)?;
    let keep = 1.0 - epsilon;
    Ok(SwitchDistribution {
        prob_plus: epsilon / 2.0 + keep * exploit.p,
        prob_zero: keep * exploit.stay_silent(),
        prob_minus: epsilon / 2.0 + keep * exploit.q,
    })
}

pub fn corner_case(corner: Corner, epsilon: f64) -> Result<SwitchDistribution> {
    switch_distribution(epsilon, corner.exploit())
}

/// Probabilities of modes 1..=5, stored 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeDistribution {
    probs: [f64; 5],
}

impl ModeDistribution {
    /// Any probability vector over the five modes; must be non-negative and
    /// sum to one within 1e-12.
    pub fn new(probs: [f64; 5]) -> Result<Self> {
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Domain(format!("mode probabilities {probs:?} outside [0, 1]")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("mode probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64; 5] {
        &self.probs
    }

    pub fn prob(&self, mode: Mode) -> f64 {
        self.probs[mode.index() - 1]
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

pub fn mode_distribution(delta: f64, switch: SwitchDistribution) -> Result<ModeDistribution> {
    check_delta(delta)?;
    let lost = 1.0 - delta;
    Ok(ModeDistribution {
        probs: [
            delta * switch.prob_plus,
            lost * switch.prob_plus,
            delta * switch.prob_minus,
            lost * switch.prob_minus,
            switch.prob_zero,
        ],
    })
}

/// Mode distribution of a corner case at `(δ, ε)`.
pub fn corner_mode_distribution(corner: Corner, delta: f64, epsilon: f64) -> Result<ModeDistribution> {
    mode_distribution(delta, corner_case(corner, epsilon)?)
}

/// `p_ij`; all rows equal because the mode process is i.i.d.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionMatrix {
    rows: [[f64; 5]; 5],
}

impl TransitionMatrix {
    pub fn rows(&self) -> &[[f64; 5]; 5] {
        &self.rows
    }

    pub fn get(&self, from: Mode, to: Mode) -> f64 {
        self.rows[from.index() - 1][to.index() - 1]
    }
}

pub fn transition_matrix(dist: ModeDistribution) -> TransitionMatrix {
    TransitionMatrix {
        rows: [dist.probs; 5],
    }
}

/// Default δ grid used by [`convex_combination_check`].
pub const CHECK_DELTAS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Largest deviation between the general-case mode distribution and
/// `q·C1 + p·C2 + (1-p-q)·C3` over [`CHECK_DELTAS`].
pub fn convex_combination_check(epsilon: f64, exploit: ExploitParams) -> Result<f64> {
    convex_combination_residual(epsilon, exploit, &CHECK_DELTAS)
}

pub fn convex_combination_residual(epsilon: f64, exploit: ExploitParams, deltas: &[f64]) -> Result<f64> {
    let weights = [exploit.q(), exploit.p(), exploit.stay_silent()];
    let mut worst = 0.0_f64;
    for &delta in deltas {
        let general = mode_distribution(delta, switch_distribution(epsilon, exploit)?)?;
        let mut mixed = [0.0; 5];
        for (corner, w) in Corner::ALL.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            let dist = corner_mode_distribution(*corner, delta, epsilon)?;
            for (acc, p) in mixed.iter_mut().zip(dist.probs) {
                *acc += w * p;
            }
        }
        for (g, m) in general.probs.iter().zip(mixed) {
            worst = worst.max((g - m).abs());
        }
    }
    Ok(worst)
}
