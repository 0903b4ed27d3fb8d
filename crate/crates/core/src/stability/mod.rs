//! Mean-square stability certification of the epsilon-greedy scheduler.
//!
//! A single matrix `V ≻ 0` with `Σⱼ Pᶜⱼ ΓⱼᵀVΓⱼ − V ≺ 0` for each of the three
//! corner cases certifies stability for every exploitation policy, because
//! any exploitation mixes the corner cases convexly. [`lmi_feasible`] searches
//! for such a `V`, [`find_epsilon_bar`] bisects on ε, and
//! [`spectral_radius_mss`] is the independent second-moment test used as a
//! necessary-condition oracle.
//!
//! The feasibility program is solved in the scale-free form
//!
//! ```text
//! maximize η   subject to   tr V = 1,   V ⪰ ηI,   −(Σⱼ Pᶜⱼ ΓⱼᵀVΓⱼ − V) ⪰ ηI  (c = 1, 2, 3)
//! ```
//!
//! which is feasible with `η > 0` exactly when the strict LMIs are. A positive
//! solution is rescaled so that `V ⪰ I`, and the returned margins are
//! recomputed from that `V` by a symmetric eigendecomposition.

mod barrier;

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::markov::{self, Corner, ExploitParams, ModeDistribution};
use crate::model::{Mode, ModeSet};

pub use barrier::{BarrierSettings, BarrierSolution, LmiBlock};

/// Margins must be below this for a certificate to count.
pub const STRICT_MARGIN: f64 = -1e-9;

/// Smallest normalized decrease rate accepted as strict feasibility.
const MIN_RELATIVE_MARGIN: f64 = 1e-10;

/// Coordinate refinements attempted before giving up on a near-boundary point.
const MAX_ROUNDS: usize = 4;

/// Number of points in the monotonicity pre-scan over ε ∈ [0, 1].
pub const PRESCAN_POINTS: usize = 21;

/// Spectral radius of `Σⱼ Pⱼ (Γⱼ ⊗ Γⱼ)`. Below one exactly when the i.i.d.
/// jump system driven by `dist` is mean-square stable.
pub fn spectral_radius_mss(dist: &ModeDistribution, modes: &ModeSet) -> Result<f64> {
    let d = modes.dim();
    let mut second_moment = DMatrix::zeros(d * d, d * d);
    for mode in Mode::ALL {
        let p = dist.prob(mode);
        if p > 0.0 {
            let g = modes.gamma(mode);
            second_moment += g.kronecker(g) * p;
        }
    }
    linalg::spectral_radius(&second_moment)
}

/// `Σⱼ Pⱼ ΓⱼᵀVΓⱼ − V`.
pub fn lyapunov_residual(dist: &ModeDistribution, modes: &ModeSet, v: &DMatrix<f64>) -> DMatrix<f64> {
    let mut acc = -v.clone();
    for mode in Mode::ALL {
        let p = dist.prob(mode);
        if p > 0.0 {
            let g = modes.gamma(mode);
            acc += g.transpose() * v * g * p;
        }
    }
    linalg::symmetrize(&acc)
}

/// Most positive eigenvalue of the Lyapunov residual.
pub fn lyapunov_margin(dist: &ModeDistribution, modes: &ModeSet, v: &DMatrix<f64>) -> f64 {
    linalg::max_sym_eigenvalue(&lyapunov_residual(dist, modes, v))
}

/// A common Lyapunov matrix for the three corner cases at `(δ, ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityCertificate {
    pub v: DMatrix<f64>,
    /// Largest eigenvalue of the residual for C1, C2, C3.
    pub margins: [f64; 3],
    pub epsilon: f64,
    pub delta: f64,
}

impl StabilityCertificate {
    /// Margin of the residual for an arbitrary exploitation policy at the
    /// certified `(δ, ε)`.
    pub fn general_margin(&self, modes: &ModeSet, exploit: ExploitParams) -> Result<f64> {
        let dist = markov::mode_distribution(self.delta, markov::switch_distribution(self.epsilon, exploit)?)?;
        Ok(lyapunov_margin(&dist, modes, &self.v))
    }

    pub fn worst_margin(&self) -> f64 {
        self.margins.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Recomputes the corner margins of `v` against `modes`, e.g. for a
    /// certificate read back from disk. Fails unless `V ≻ 0` and all three
    /// margins are below [`STRICT_MARGIN`].
    pub fn verify(&self, modes: &ModeSet) -> Result<[f64; 3]> {
        if self.v.nrows() != modes.dim() || !self.v.is_square() {
            return Err(Error::Config(format!(
                "certificate V is {}x{}, mode set has dimension {}",
                self.v.nrows(),
                self.v.ncols(),
                modes.dim()
            )));
        }
        if linalg::min_sym_eigenvalue(&self.v) <= 0.0 {
            return Err(Error::Domain("certificate V is not positive definite".into()));
        }
        let dists = corner_distributions(self.delta, self.epsilon)?;
        let margins = [0, 1, 2].map(|c| lyapunov_margin(&dists[c], modes, &self.v));
        if margins.iter().any(|m| !(*m < STRICT_MARGIN)) {
            return Err(Error::Domain(format!(
                "certificate does not verify for this plant: margins {margins:?}"
            )));
        }
        Ok(margins)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Feasibility {
    Certified(StabilityCertificate),
    /// No common `V` exists. `best_margin` is the negated optimal normalized
    /// decrease rate; non-negative by construction.
    Infeasible { best_margin: f64 },
}

impl Feasibility {
    pub fn is_certified(&self) -> bool {
        matches!(self, Feasibility::Certified(_))
    }

    pub fn certificate(&self) -> Option<&StabilityCertificate> {
        match self {
            Feasibility::Certified(c) => Some(c),
            Feasibility::Infeasible { .. } => None,
        }
    }
}

fn corner_distributions(delta: f64, epsilon: f64) -> Result<[ModeDistribution; 3]> {
    Ok([
        markov::corner_mode_distribution(Corner::ObserveOnly, delta, epsilon)?,
        markov::corner_mode_distribution(Corner::ControlOnly, delta, epsilon)?,
        markov::corner_mode_distribution(Corner::Silent, delta, epsilon)?,
    ])
}

/// Searches for a common `V` certifying all three corner cases at `(δ, ε)`.
pub fn lmi_feasible(delta: f64, epsilon: f64, modes: &ModeSet) -> Result<Feasibility> {
    let dists = corner_distributions(delta, epsilon)?;
    match common_lyapunov(&dists, modes)? {
        CommonLyapunov::Found(v) => {
            let margins = [0, 1, 2].map(|c| lyapunov_margin(&dists[c], modes, &v));
            if margins.iter().any(|m| *m >= STRICT_MARGIN) {
                return Err(Error::Numerical(format!(
                    "rescaled Lyapunov matrix failed re-verification with margins {margins:?}"
                )));
            }
            Ok(Feasibility::Certified(StabilityCertificate {
                v,
                margins,
                epsilon,
                delta,
            }))
        }
        CommonLyapunov::None { best_rate } => Ok(Feasibility::Infeasible {
            best_margin: (-best_rate).max(0.0),
        }),
    }
}

enum CommonLyapunov {
    Found(DMatrix<f64>),
    None { best_rate: f64 },
}

/// Solves the scale-free program, refining coordinates with the Cholesky
/// factor of the previous solution when the answer is too close to the
/// boundary to verify in the original coordinates.
fn common_lyapunov(dists: &[ModeDistribution; 3], modes: &ModeSet) -> Result<CommonLyapunov> {
    let d = modes.dim();
    let mut transform = DMatrix::<f64>::identity(d, d);
    let mut best_rate = f64::NEG_INFINITY;

    for _ in 0..MAX_ROUNDS {
        let inverse = transform
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("coordinate transform became singular".into()))?;
        let gammas: Vec<DMatrix<f64>> = modes.matrices().iter().map(|g| &transform * g * &inverse).collect();
        let solution = solve_normalized(dists, &gammas)?;
        best_rate = best_rate.max(solution.objective);
        if solution.upper_bound <= MIN_RELATIVE_MARGIN || (solution.stalled && solution.objective <= MIN_RELATIVE_MARGIN) {
            return Ok(CommonLyapunov::None {
                best_rate: solution.upper_bound.min(best_rate.max(solution.objective)),
            });
        }

        let v_local = normalized_v(&solution.y, d);
        let v = transform.transpose() * &v_local * &transform;
        if let Some(scaled) = rescale_if_strict(dists, modes, &v) {
            return Ok(CommonLyapunov::Found(scaled));
        }
        // The solution is strictly feasible in the working coordinates but not
        // verifiable in the original ones; work in coordinates where it is I.
        let chol = v_local
            .cholesky()
            .ok_or_else(|| Error::Numerical("working-coordinate Lyapunov matrix is not positive definite".into()))?;
        let factor = chol.l().transpose();
        transform = factor * transform;
    }
    Err(Error::Numerical(format!(
        "could not verify a common Lyapunov matrix after {MAX_ROUNDS} coordinate refinements (best normalized rate {best_rate:e})"
    )))
}

/// Returns `V / s` with `s` the smallest of `λmin(V)` and `λmin(−L_c(V))`,
/// if that normalized rate is strictly positive.
fn rescale_if_strict(dists: &[ModeDistribution; 3], modes: &ModeSet, v: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let v = linalg::symmetrize(v);
    let eig = v.symmetric_eigenvalues();
    let (vmin, vmax) = (eig.min(), eig.max());
    if !(vmin > 0.0) || !vmax.is_finite() {
        return None;
    }
    let decrease = dists
        .iter()
        .map(|dist| -lyapunov_margin(dist, modes, &v))
        .fold(f64::INFINITY, f64::min);
    let rate = decrease.min(vmin);
    if rate / vmax <= MIN_RELATIVE_MARGIN {
        return None;
    }
    Some(v / rate)
}

/// Index pairs of the traceless symmetric basis: `d - 1` diagonal directions
/// followed by the strict upper triangle.
fn basis(d: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(d * (d + 1) / 2 - 1);
    for i in 0..d - 1 {
        let mut e = DMatrix::zeros(d, d);
        e[(i, i)] = 1.0;
        e[(d - 1, d - 1)] = -1.0;
        out.push(e);
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..d {
        for j in i + 1..d {
            let mut e = DMatrix::zeros(d, d);
            e[(i, j)] = s;
            e[(j, i)] = s;
            out.push(e);
        }
    }
    out
}

fn normalized_v(y: &DVector<f64>, d: usize) -> DMatrix<f64> {
    let mut v = DMatrix::identity(d, d) / d as f64;
    for (e, yi) in basis(d).iter().zip(y.iter()) {
        v += e * *yi;
    }
    v
}

fn residual_of(dist: &ModeDistribution, gammas: &[DMatrix<f64>], v: &DMatrix<f64>) -> DMatrix<f64> {
    let mut acc = -v.clone();
    for (mode, g) in Mode::ALL.iter().zip(gammas) {
        let p = dist.prob(*mode);
        if p > 0.0 {
            acc += g.transpose() * v * g * p;
        }
    }
    acc
}

fn solve_normalized(dists: &[ModeDistribution; 3], gammas: &[DMatrix<f64>]) -> Result<BarrierSolution> {
    let d = gammas[0].nrows();
    let basis = basis(d);
    let nv = basis.len();
    let nvar = nv + 1;
    let identity = DMatrix::<f64>::identity(d, d);
    let v0 = &identity / d as f64;

    // Block 0: V - ηI.
    let mut v_coeffs = basis.clone();
    v_coeffs.push(-&identity);
    let mut blocks = vec![LmiBlock {
        constant: v0.clone(),
        coefficients: v_coeffs,
    }];
    // Blocks 1..=3: -L_c(V) - ηI.
    for dist in dists {
        let mut coeffs: Vec<DMatrix<f64>> = basis.iter().map(|e| -residual_of(dist, gammas, e)).collect();
        coeffs.push(-&identity);
        blocks.push(LmiBlock {
            constant: -residual_of(dist, gammas, &v0),
            coefficients: coeffs,
        });
    }

    // Any η below every block's smallest eigenvalue at V = I/d is strictly
    // feasible.
    let floor = blocks
        .iter()
        .map(|b| linalg::min_sym_eigenvalue(&b.constant))
        .fold(f64::INFINITY, f64::min);
    let mut y0 = DVector::zeros(nvar);
    y0[nv] = floor - 1.0;

    let mut c = DVector::zeros(nvar);
    c[nv] = 1.0;
    let settings = BarrierSettings {
        stop_below: Some(MIN_RELATIVE_MARGIN),
        ..BarrierSettings::default()
    };
    barrier::maximize(&c, &blocks, y0, &settings)
}

/// Result of the ε search at one δ.
#[derive(Debug, Clone, PartialEq)]
pub enum EpsilonSearch {
    Certified {
        epsilon_bar: f64,
        certificate: StabilityCertificate,
    },
    /// Even ε = 1 admits no common `V`.
    NoFeasibleEpsilon { best_margin: f64 },
}

impl EpsilonSearch {
    pub fn epsilon_bar(&self) -> Option<f64> {
        match self {
            EpsilonSearch::Certified { epsilon_bar, .. } => Some(*epsilon_bar),
            EpsilonSearch::NoFeasibleEpsilon { .. } => None,
        }
    }

    pub fn certificate(&self) -> Option<&StabilityCertificate> {
        match self {
            EpsilonSearch::Certified { certificate, .. } => Some(certificate),
            EpsilonSearch::NoFeasibleEpsilon { .. } => None,
        }
    }
}

/// Smallest certifiable ε in [0, 1], to within `tol`.
///
/// Feasibility is first evaluated on a 21-point grid; a feasible point
/// followed by an infeasible one is reported as [`Error::NonMonotone`]
/// rather than bisected.
pub fn find_epsilon_bar(delta: f64, modes: &ModeSet, tol: f64) -> Result<EpsilonSearch> {
    search_threshold(|eps| lmi_feasible(delta, eps, modes), tol)
}

/// Pre-scan plus bisection over any feasibility oracle on [0, 1].
fn search_threshold<F>(mut feasible: F, tol: f64) -> Result<EpsilonSearch>
where
    F: FnMut(f64) -> Result<Feasibility>,
{
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("bisection tolerance {tol} must be positive")));
    }
    let mut scan = Vec::with_capacity(PRESCAN_POINTS);
    for i in 0..PRESCAN_POINTS {
        let eps = i as f64 / (PRESCAN_POINTS - 1) as f64;
        scan.push((eps, feasible(eps)?));
    }
    let flags: Vec<(f64, bool)> = scan.iter().map(|(e, f)| (*e, f.is_certified())).collect();
    let Some(first) = flags.iter().position(|(_, ok)| *ok) else {
        let best_margin = match &scan[PRESCAN_POINTS - 1].1 {
            Feasibility::Infeasible { best_margin } => *best_margin,
            Feasibility::Certified(_) => unreachable!(),
        };
        return Ok(EpsilonSearch::NoFeasibleEpsilon { best_margin });
    };
    if flags[first..].iter().any(|(_, ok)| !ok) {
        return Err(Error::NonMonotone { grid: flags });
    }
    let Feasibility::Certified(mut best) = scan.swap_remove(first).1 else {
        unreachable!()
    };
    if first == 0 {
        return Ok(EpsilonSearch::Certified {
            epsilon_bar: 0.0,
            certificate: best,
        });
    }

    let mut lo = flags[first - 1].0;
    let mut hi = flags[first].0;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        match feasible(mid)? {
            Feasibility::Certified(cert) => {
                hi = mid;
                best = cert;
            }
            Feasibility::Infeasible { .. } => lo = mid,
        }
    }
    Ok(EpsilonSearch::Certified {
        epsilon_bar: hi,
        certificate: best,
    })
}

#[derive(Debug)]
pub struct SweepRow {
    pub delta: f64,
    pub outcome: Result<EpsilonSearch>,
}

impl SweepRow {
    pub fn epsilon_bar(&self) -> Option<f64> {
        self.outcome.as_ref().ok().and_then(EpsilonSearch::epsilon_bar)
    }

    pub fn status(&self) -> String {
        match &self.outcome {
            Ok(EpsilonSearch::Certified { .. }) => "certified".into(),
            Ok(EpsilonSearch::NoFeasibleEpsilon { .. }) => "no_feasible_epsilon".into(),
            Err(Error::NonMonotone { .. }) => "non_monotone".into(),
            Err(_) => "solver_error".into(),
        }
    }
}

/// [`find_epsilon_bar`] at each δ; per-point failures are kept in the row.
pub fn sweep_delta(grid: &[f64], modes: &ModeSet, tol: f64) -> Vec<SweepRow> {
    grid.par_iter()
        .map(|&delta| SweepRow {
            delta,
            outcome: find_epsilon_bar(delta, modes, tol),
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: [&str; 6] = ["delta", "epsilon_bar", "margin_c1", "margin_c2", "margin_c3", "status"];

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Parse(format!("csv: {e}"));
    w.write_record(SWEEP_CSV_HEADER).map_err(csv_err)?;
    for row in rows {
        let (eps, margins) = match &row.outcome {
            Ok(EpsilonSearch::Certified {
                epsilon_bar,
                certificate,
            }) => (
                epsilon_bar.to_string(),
                certificate.margins.map(|m| m.to_string()),
            ),
            _ => (String::new(), [String::new(), String::new(), String::new()]),
        };
        w.write_record([
            row.delta.to_string(),
            eps,
            margins[0].clone(),
            margins[1].clone(),
            margins[2].clone(),
            row.status(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}
