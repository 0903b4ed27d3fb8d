//! Log-determinant barrier method for small linear matrix inequality programs
//!
//! ```text
//! maximize  cᵀy   subject to   F_b(y) = G_b0 + Σᵢ yᵢ G_bi ≻ 0   for every block b
//! ```
//!
//! Each outer iteration minimizes `-s·cᵀy - Σ_b log det F_b(y)` by damped
//! Newton steps and then increases `s`. On the central path the duality gap
//! is exactly `(Σ_b dim F_b) / s`, which gives both a lower and an upper bound
//! on the optimum.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LmiBlock {
    pub constant: DMatrix<f64>,
    pub coefficients: Vec<DMatrix<f64>>,
}

impl LmiBlock {
    fn eval(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let mut f = self.constant.clone();
        for (g, &yi) in self.coefficients.iter().zip(y.iter()) {
            if yi != 0.0 {
                f += g * yi;
            }
        }
        // Keep exact symmetry; Cholesky only reads one triangle.
        (&f + f.transpose()) * 0.5
    }

    fn dim(&self) -> usize {
        self.constant.nrows()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BarrierSettings {
    pub initial_weight: f64,
    pub weight_growth: f64,
    /// Stop once the duality gap falls below this value.
    pub gap_tolerance: f64,
    /// Or once the gap is below this fraction of `|cᵀy|`.
    pub relative_gap: f64,
    /// Newton step budget per centering.
    pub max_newton_steps: usize,
    /// Stop early once the objective is proven above this value.
    pub stop_above: Option<f64>,
    /// Stop early once the objective is proven below this value.
    pub stop_below: Option<f64>,
}

impl Default for BarrierSettings {
    fn default() -> Self {
        Self {
            initial_weight: 1.0,
            weight_growth: 8.0,
            gap_tolerance: 1e-13,
            relative_gap: 1e-6,
            max_newton_steps: 200,
            stop_above: None,
            stop_below: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BarrierSolution {
    pub y: DVector<f64>,
    pub objective: f64,
    /// Upper bound on the optimum, `objective + gap`.
    pub upper_bound: f64,
    pub newton_steps: usize,
    /// Centering failed at a larger weight; this is the last centered point.
    pub stalled: bool,
}

/// Solves the program from a strictly feasible `y0`.
pub fn maximize(
    c: &DVector<f64>,
    blocks: &[LmiBlock],
    y0: DVector<f64>,
    settings: &BarrierSettings,
) -> Result<BarrierSolution> {
    let nvar = c.len();
    if blocks.iter().any(|b| b.coefficients.len() != nvar) {
        return Err(Error::Config("LMI block coefficient count differs from variable count".into()));
    }
    let barrier_dim: usize = blocks.iter().map(LmiBlock::dim).sum();
    let mut y = y0;
    if barrier_value(blocks, &y).is_none() {
        return Err(Error::Numerical("barrier start point is not strictly feasible".into()));
    }

    let mut weight = settings.initial_weight;
    let mut steps = 0;
    let mut last: Option<BarrierSolution> = None;
    loop {
        let used = match center(c, blocks, &mut y, weight, settings.max_newton_steps) {
            Ok(used) => used,
            // Past the first few weights the barrier becomes too ill-conditioned
            // to center further; the last centered point still carries a valid
            // bound.
            Err(Error::Numerical(_)) if last.is_some() => {
                let mut sol = last.take().expect("checked above");
                sol.stalled = true;
                return Ok(sol);
            }
            Err(e) => return Err(e),
        };
        steps += used;
        let objective = c.dot(&y);
        let gap = barrier_dim as f64 / weight;
        let sol = BarrierSolution {
            objective,
            upper_bound: objective + gap,
            y: y.clone(),
            newton_steps: steps,
            stalled: false,
        };
        let done = gap < settings.gap_tolerance
            || gap < settings.relative_gap * objective.abs()
            || settings.stop_above.is_some_and(|t| objective > t)
            || settings.stop_below.is_some_and(|t| objective + gap < t);
        if done {
            return Ok(sol);
        }
        last = Some(sol);
        weight *= settings.weight_growth;
    }
}

/// `-Σ log det F_b(y)`, or `None` outside the interior.
fn barrier_value(blocks: &[LmiBlock], y: &DVector<f64>) -> Option<f64> {
    let mut total = 0.0;
    for block in blocks {
        let chol = block.eval(y).cholesky()?;
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        if !log_det.is_finite() {
            return None;
        }
        total -= log_det;
    }
    Some(total)
}

/// Newton's method on `-w·cᵀy + barrier(y)`. Returns the number of steps.
fn center(c: &DVector<f64>, blocks: &[LmiBlock], y: &mut DVector<f64>, weight: f64, budget: usize) -> Result<usize> {
    let nvar = c.len();
    let objective = |y: &DVector<f64>| barrier_value(blocks, y).map(|b| b - weight * c.dot(y));
    let mut current = objective(y).ok_or_else(|| Error::Numerical("iterate left the interior".into()))?;

    for step in 0..budget {
        let mut grad = -c * weight;
        let mut hess = DMatrix::<f64>::zeros(nvar, nvar);
        for block in blocks {
            let f = block.eval(y);
            let chol = f
                .cholesky()
                .ok_or_else(|| Error::Numerical("block lost definiteness during centering".into()))?;
            let w: Vec<DMatrix<f64>> = block.coefficients.iter().map(|g| chol.solve(g)).collect();
            for i in 0..nvar {
                grad[i] -= w[i].trace();
                for j in 0..=i {
                    // tr(W_i W_j) without forming the product.
                    let h = w[i].component_mul(&w[j].transpose()).sum();
                    hess[(i, j)] += h;
                    if i != j {
                        hess[(j, i)] += h;
                    }
                }
            }
        }

        let direction = solve_spd(&hess, &(-&grad))?;
        let decrement_sq = -grad.dot(&direction);
        if !decrement_sq.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite Newton decrement at barrier weight {weight:e}"
            )));
        }
        if decrement_sq / 2.0 < 1e-10 {
            return Ok(step);
        }

        // Damped phase step length keeps the full step inside the Dikin ellipsoid.
        let mut t = if decrement_sq.sqrt() > 0.25 {
            1.0 / (1.0 + decrement_sq.sqrt())
        } else {
            1.0
        };
        let slope = grad.dot(&direction);
        let accepted = loop {
            let trial = &*y + &direction * t;
            if let Some(value) = objective(&trial) {
                // Require an actual decrease: with large weights the
                // Armijo slack can fall below one ulp of the objective.
                if value <= current + 0.25 * t * slope && value < current {
                    break Some((trial, value));
                }
            }
            t *= 0.5;
            if t < 1e-14 {
                break None;
            }
        };
        match accepted {
            Some((trial, value)) => {
                *y = trial;
                current = value;
            }
            // No further progress is representable; the point is centered to
            // working precision.
            None => return Ok(step),
        }
    }
    Err(Error::Numerical(format!(
        "barrier centering did not converge within {budget} Newton steps (weight {weight:e})"
    )))
}

fn solve_spd(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(chol) = h.clone().cholesky() {
        return Ok(chol.solve(rhs));
    }
    // Rank-deficient Hessians happen when a block does not depend on some
    // variable; a tiny ridge restores solvability.
    let ridge = 1e-12 * h.diagonal().amax().max(1e-300);
    let regularized = h + DMatrix::identity(h.nrows(), h.ncols()) * ridge;
    regularized
        .cholesky()
        .map(|c| c.solve(rhs))
        .ok_or_else(|| Error::Numerical("Newton system is not positive definite".into()))
}
