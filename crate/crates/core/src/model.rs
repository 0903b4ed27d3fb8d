//! Plant, emulated controller, controller-side predictor and the network
//! events that switch between them.
//!
//! The augmented state is `ζ = (x, x̂₋, û₋)`: the true plant state, the
//! predictor estimate from the previous step and the control value currently
//! held at the actuator. One step applies, in order,
//!
//! ```text
//! x̂ = x              if σ = -1 and the packet arrives
//!     A x̂₋ + B û₋     otherwise
//! û = K x̂            if σ =  1 and the packet arrives
//!     û₋              otherwise
//! x⁺ = A x + B û
//! ```
//!
//! and returns `(x⁺, x̂, û)`. [`build_mode_set`] writes the same three cases
//! as block matrices acting on the flattened state.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Scheduler decision for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Switch {
    /// σ = 1, controller to actuator.
    Control,
    /// σ = 0, nothing is sent.
    Silent,
    /// σ = -1, plant state to predictor.
    Observe,
}

impl Switch {
    pub const ALL: [Switch; 3] = [Switch::Control, Switch::Silent, Switch::Observe];

    pub fn value(self) -> i8 {
        match self {
            Switch::Control => 1,
            Switch::Silent => 0,
            Switch::Observe => -1,
        }
    }

    pub fn from_value(v: i64) -> Result<Self> {
        match v {
            1 => Ok(Switch::Control),
            0 => Ok(Switch::Silent),
            -1 => Ok(Switch::Observe),
            other => Err(Error::Domain(format!("switch value {other} not in {{1, 0, -1}}"))),
        }
    }

    /// `σᵀσ`, the number of packets put on the channel.
    pub fn transmissions(self) -> f64 {
        f64::from(self.value().abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Success,
    Failure,
    NotApplicable,
}

/// The five jump modes, one per (switch, transmission outcome) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    ControlDelivered,
    ControlLost,
    ObservationDelivered,
    ObservationLost,
    Idle,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::ControlDelivered,
        Mode::ControlLost,
        Mode::ObservationDelivered,
        Mode::ObservationLost,
        Mode::Idle,
    ];

    /// 1-based index as used in mode distributions.
    pub fn index(self) -> usize {
        match self {
            Mode::ControlDelivered => 1,
            Mode::ControlLost => 2,
            Mode::ObservationDelivered => 3,
            Mode::ObservationLost => 4,
            Mode::Idle => 5,
        }
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Mode::ALL
            .get(index.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Domain(format!("mode index {index} not in 1..=5")))
    }

    pub fn switch(self) -> Switch {
        match self {
            Mode::ControlDelivered | Mode::ControlLost => Switch::Control,
            Mode::ObservationDelivered | Mode::ObservationLost => Switch::Observe,
            Mode::Idle => Switch::Silent,
        }
    }

    pub fn outcome(self) -> Outcome {
        match self {
            Mode::ControlDelivered | Mode::ObservationDelivered => Outcome::Success,
            Mode::ControlLost | Mode::ObservationLost => Outcome::Failure,
            Mode::Idle => Outcome::NotApplicable,
        }
    }
}

/// Mode selected by a switch decision and the packet-success indicator.
pub fn mode_from_events(switch: Switch, delivered: bool) -> Mode {
    match (switch, delivered) {
        (Switch::Control, true) => Mode::ControlDelivered,
        (Switch::Control, false) => Mode::ControlLost,
        (Switch::Observe, true) => Mode::ObservationDelivered,
        (Switch::Observe, false) => Mode::ObservationLost,
        (Switch::Silent, _) => Mode::Idle,
    }
}

/// Linear plant `x⁺ = A x + B u`, `y = C x`, with the nominal state feedback
/// `u = K x`. `C` is kept for completeness; the predictor receives the full
/// state.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    k: DMatrix<f64>,
}

impl PlantModel {
    /// Validates dimensions and that `A + B K` is Schur stable.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, k: DMatrix<f64>) -> Result<Self> {
        let plant = Self::new_unchecked_gain(a, b, c, k)?;
        let rho = linalg::spectral_radius(&plant.closed_loop())?;
        if rho >= 1.0 {
            return Err(Error::Config(format!(
                "gain K does not stabilize the plant: spectral radius of A + BK is {rho}"
            )));
        }
        Ok(plant)
    }

    /// Dimension checks only. Used for deliberately unstable test plants.
    pub fn new_unchecked_gain(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        k: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::Config(format!("A must be square and non-empty, got {}x{}", a.nrows(), a.ncols())));
        }
        let m = b.ncols();
        if b.nrows() != n || m == 0 {
            return Err(Error::Config(format!("B must be {n}xm with m > 0, got {}x{}", b.nrows(), b.ncols())));
        }
        if c.ncols() != n || c.nrows() == 0 {
            return Err(Error::Config(format!("C must be rx{n} with r > 0, got {}x{}", c.nrows(), c.ncols())));
        }
        if k.nrows() != m || k.ncols() != n {
            return Err(Error::Config(format!("K must be {m}x{n}, got {}x{}", k.nrows(), k.ncols())));
        }
        let finite = [&a, &b, &c, &k].iter().all(|m| m.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Config("plant matrices contain non-finite entries".into()));
        }
        Ok(Self { a, b, c, k })
    }

    /// The double-integrator example: `A = [[1, 0.1], [0, 1]]`, `B = [0; 1]`,
    /// `C = I`, `K = [-0.012, -0.07]`.
    pub fn reference() -> Self {
        Self::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(1, 2, &[-0.012, -0.07]),
        )
        .expect("reference plant is valid")
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    /// `2n + m`.
    pub fn augmented_dim(&self) -> usize {
        2 * self.state_dim() + self.input_dim()
    }

    pub fn closed_loop(&self) -> DMatrix<f64> {
        &self.a + &self.b * &self.k
    }

    pub fn to_spec(&self) -> PlantSpec {
        PlantSpec {
            a: linalg::to_rows(&self.a),
            b: linalg::to_rows(&self.b),
            c: linalg::to_rows(&self.c),
            k: linalg::to_rows(&self.k),
        }
    }
}

/// JSON form of a plant: row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "K")]
    pub k: Vec<Vec<f64>>,
}

impl PlantSpec {
    pub fn build(&self) -> Result<PlantModel> {
        PlantModel::new(
            linalg::from_rows(&self.a, "A")?,
            linalg::from_rows(&self.b, "B")?,
            linalg::from_rows(&self.c, "C")?,
            linalg::from_rows(&self.k, "K")?,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub x: DVector<f64>,
    pub xhat_prev: DVector<f64>,
    pub uhat_prev: DVector<f64>,
}

impl AugmentedState {
    /// State at k = 0: the predictor starts at the true state and no control
    /// has been delivered yet.
    pub fn initial(x0: DVector<f64>, input_dim: usize) -> Self {
        Self {
            xhat_prev: x0.clone(),
            x: x0,
            uhat_prev: DVector::zeros(input_dim),
        }
    }

    pub fn zeros(state_dim: usize, input_dim: usize) -> Self {
        Self {
            x: DVector::zeros(state_dim),
            xhat_prev: DVector::zeros(state_dim),
            uhat_prev: DVector::zeros(input_dim),
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.x.len() + self.uhat_prev.len()
    }

    /// `(x, x̂₋, û₋)` stacked in that order.
    pub fn flatten(&self) -> DVector<f64> {
        let n = self.x.len();
        let m = self.uhat_prev.len();
        let mut z = DVector::zeros(2 * n + m);
        z.rows_mut(0, n).copy_from(&self.x);
        z.rows_mut(n, n).copy_from(&self.xhat_prev);
        z.rows_mut(2 * n, m).copy_from(&self.uhat_prev);
        z
    }

    pub fn unflatten(z: &DVector<f64>, state_dim: usize, input_dim: usize) -> Result<Self> {
        let n = state_dim;
        if z.len() != 2 * n + input_dim {
            return Err(Error::Config(format!(
                "augmented vector has length {}, expected {}",
                z.len(),
                2 * n + input_dim
            )));
        }
        Ok(Self {
            x: z.rows(0, n).into_owned(),
            xhat_prev: z.rows(n, n).into_owned(),
            uhat_prev: z.rows(2 * n, input_dim).into_owned(),
        })
    }

    /// `ζᵀζ`.
    pub fn norm_squared(&self) -> f64 {
        self.x.norm_squared() + self.xhat_prev.norm_squared() + self.uhat_prev.norm_squared()
    }
}

/// Applies one step of the component update equations.
pub fn step_components(
    plant: &PlantModel,
    state: &AugmentedState,
    switch: Switch,
    delivered: bool,
) -> Result<AugmentedState> {
    let (n, m) = (plant.state_dim(), plant.input_dim());
    if state.x.len() != n || state.xhat_prev.len() != n || state.uhat_prev.len() != m {
        return Err(Error::Config(format!(
            "state dimensions ({}, {}, {}) do not match plant (n = {n}, m = {m})",
            state.x.len(),
            state.xhat_prev.len(),
            state.uhat_prev.len()
        )));
    }
    let xhat = if switch == Switch::Observe && delivered {
        state.x.clone()
    } else {
        &plant.a * &state.xhat_prev + &plant.b * &state.uhat_prev
    };
    let uhat = if switch == Switch::Control && delivered {
        &plant.k * &xhat
    } else {
        state.uhat_prev.clone()
    };
    let x_next = &plant.a * &state.x + &plant.b * &uhat;
    Ok(AugmentedState {
        x: x_next,
        xhat_prev: xhat,
        uhat_prev: uhat,
    })
}

/// Mode matrices acting on the flattened augmented state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSet {
    gamma: [DMatrix<f64>; 5],
    state_dim: usize,
    input_dim: usize,
}

impl ModeSet {
    /// Arbitrary mode matrices, e.g. synthetic contractive families in tests.
    /// All five must be square of size `2 * state_dim + input_dim`.
    pub fn from_matrices(gamma: [DMatrix<f64>; 5], state_dim: usize, input_dim: usize) -> Result<Self> {
        let d = 2 * state_dim + input_dim;
        for (i, g) in gamma.iter().enumerate() {
            if g.nrows() != d || g.ncols() != d {
                return Err(Error::Config(format!(
                    "mode {} matrix is {}x{}, expected {d}x{d}",
                    i + 1,
                    g.nrows(),
                    g.ncols()
                )));
            }
        }
        Ok(Self {
            gamma,
            state_dim,
            input_dim,
        })
    }

    pub fn gamma(&self, mode: Mode) -> &DMatrix<f64> {
        &self.gamma[mode.index() - 1]
    }

    pub fn matrices(&self) -> &[DMatrix<f64>; 5] {
        &self.gamma
    }

    pub fn dim(&self) -> usize {
        2 * self.state_dim + self.input_dim
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Every matrix multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            gamma: self.gamma.clone().map(|g| g * factor),
            ..self.clone()
        }
    }
}

/// Builds the block matrices
///
/// ```text
/// Γ₁  = [[A, BKA, BKB], [0, A, B], [0, KA, KB]]   (control delivered)
/// Γ₋₁ = [[A, 0,   B  ], [I, 0, 0], [0, 0,  I ]]   (observation delivered)
/// Γ₀  = [[A, 0,   B  ], [0, A, B], [0, 0,  I ]]   (nothing delivered)
/// ```
pub fn build_mode_set(plant: &PlantModel) -> ModeSet {
    let (n, m) = (plant.state_dim(), plant.input_dim());
    let (a, b, k) = (plant.a(), plant.b(), plant.k());
    let d = 2 * n + m;
    let (x, xh, uh) = (0, n, 2 * n);

    let mut idle = DMatrix::zeros(d, d);
    idle.view_mut((x, x), (n, n)).copy_from(a);
    idle.view_mut((x, uh), (n, m)).copy_from(b);
    idle.view_mut((xh, xh), (n, n)).copy_from(a);
    idle.view_mut((xh, uh), (n, m)).copy_from(b);
    idle.view_mut((uh, uh), (m, m)).fill_with_identity();

    let ka = k * a;
    let kb = k * b;
    let mut control = DMatrix::zeros(d, d);
    control.view_mut((x, x), (n, n)).copy_from(a);
    control.view_mut((x, xh), (n, n)).copy_from(&(b * &ka));
    control.view_mut((x, uh), (n, m)).copy_from(&(b * &kb));
    control.view_mut((xh, xh), (n, n)).copy_from(a);
    control.view_mut((xh, uh), (n, m)).copy_from(b);
    control.view_mut((uh, xh), (m, n)).copy_from(&ka);
    control.view_mut((uh, uh), (m, m)).copy_from(&kb);

    let mut observe = DMatrix::zeros(d, d);
    observe.view_mut((x, x), (n, n)).copy_from(a);
    observe.view_mut((x, uh), (n, m)).copy_from(b);
    observe.view_mut((xh, x), (n, n)).fill_with_identity();
    observe.view_mut((uh, uh), (m, m)).fill_with_identity();

    ModeSet {
        gamma: [control, idle.clone(), observe, idle.clone(), idle],
        state_dim: n,
        input_dim: m,
    }
}

/// `ζ⁺ = Γ_mode ζ`.
pub fn step_augmented(modes: &ModeSet, state: &AugmentedState, mode: Mode) -> Result<AugmentedState> {
    if state.dim() != modes.dim() {
        return Err(Error::Config(format!(
            "state has dimension {}, mode set expects {}",
            state.dim(),
            modes.dim()
        )));
    }
    let z = modes.gamma(mode) * state.flatten();
    AugmentedState::unflatten(&z, modes.state_dim, modes.input_dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn reference_state() -> AugmentedState {
        AugmentedState::initial(DVector::from_vec(vec![1.0, 0.0]), 1)
    }

    #[test]
    fn zero_gain_control_mode_ignores_controller() {
        let plant = PlantModel::new_unchecked_gain(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.4]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::identity(2, 2),
            DMatrix::zeros(1, 2),
        )
        .unwrap();
        let modes = build_mode_set(&plant);
        let g1 = modes.gamma(Mode::ControlDelivered);
        assert_eq!(g1.view((0, 0), (2, 2)), plant.a().view((0, 0), (2, 2)));
        assert!(g1.view((0, 2), (2, 3)).iter().all(|&v| v == 0.0));
        assert_eq!(g1.view((2, 2), (2, 2)), plant.a().view((0, 0), (2, 2)));
        assert_eq!(g1.view((2, 4), (2, 1)), plant.b().view((0, 0), (2, 1)));
        assert!(g1.view((4, 0), (1, 4)).iter().all(|&v| v == 0.0));
        // KB = 0, so the held control is reset to zero.
        assert_eq!(g1[(4, 4)], 0.0);
    }

    #[test]
    fn reference_control_block() {
        let modes = build_mode_set(&PlantModel::reference());
        let g1 = modes.gamma(Mode::ControlDelivered);
        let expected = [[0.0, 0.0], [-0.012, -0.0712]];
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(g1[(i, 2 + j)], expected[i][j], epsilon = 1e-15);
                assert_eq!(g1[(i, j)], PlantModel::reference().a()[(i, j)]);
            }
        }
    }

    #[test]
    fn idle_matrices_shared() {
        let modes = build_mode_set(&PlantModel::reference());
        assert_eq!(modes.gamma(Mode::ControlLost), modes.gamma(Mode::ObservationLost));
        assert_eq!(modes.gamma(Mode::ControlLost), modes.gamma(Mode::Idle));
    }

    #[test]
    fn reference_single_step() {
        let plant = PlantModel::reference();
        let next = step_components(&plant, &reference_state(), Switch::Control, true).unwrap();
        assert_abs_diff_eq!(next.xhat_prev[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(next.xhat_prev[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(next.uhat_prev[0], -0.012, epsilon = 1e-15);
        assert_abs_diff_eq!(next.x[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(next.x[1], -0.012, epsilon = 1e-15);

        let via_matrix = step_augmented(&build_mode_set(&plant), &reference_state(), Mode::ControlDelivered).unwrap();
        assert!((via_matrix.flatten() - next.flatten()).amax() < 1e-12);
    }

    #[test]
    fn open_loop_step() {
        let plant = PlantModel::reference();
        let state = AugmentedState {
            x: DVector::from_vec(vec![0.3, -2.0]),
            xhat_prev: DVector::zeros(2),
            uhat_prev: DVector::zeros(1),
        };
        for delivered in [false, true] {
            let next = step_components(&plant, &state, Switch::Silent, delivered).unwrap();
            assert_eq!(next.x, plant.a() * &state.x);
        }
    }

    #[test]
    fn delivered_observation_resets_predictor() {
        let plant = PlantModel::reference();
        let state = AugmentedState {
            x: DVector::from_vec(vec![0.7, 1.3]),
            xhat_prev: DVector::from_vec(vec![-5.0, 2.0]),
            uhat_prev: DVector::from_vec(vec![0.4]),
        };
        let next = step_components(&plant, &state, Switch::Observe, true).unwrap();
        assert_eq!(next.xhat_prev, state.x);
        let via_matrix = step_augmented(&build_mode_set(&plant), &state, Mode::ObservationDelivered).unwrap();
        assert_eq!(via_matrix.xhat_prev, state.x);
    }

    #[test]
    fn idle_mode_keeps_zero_state() {
        let modes = build_mode_set(&PlantModel::reference());
        let next = step_augmented(&modes, &AugmentedState::zeros(2, 1), Mode::Idle).unwrap();
        assert_eq!(next.norm_squared(), 0.0);
    }

    #[test]
    fn event_to_mode_table() {
        assert_eq!(mode_from_events(Switch::Control, true), Mode::ControlDelivered);
        assert_eq!(mode_from_events(Switch::Control, false), Mode::ControlLost);
        assert_eq!(mode_from_events(Switch::Observe, true), Mode::ObservationDelivered);
        assert_eq!(mode_from_events(Switch::Observe, false), Mode::ObservationLost);
        assert_eq!(mode_from_events(Switch::Silent, false), Mode::Idle);
        assert_eq!(mode_from_events(Switch::Silent, true), Mode::Idle);
        for mode in Mode::ALL {
            assert_eq!(Mode::from_index(mode.index()).unwrap(), mode);
        }
        assert_eq!(Mode::ObservationLost.outcome(), Outcome::Failure);
        assert_eq!(Mode::Idle.outcome(), Outcome::NotApplicable);
        assert!(Mode::from_index(0).is_err());
        assert!(Mode::from_index(6).is_err());
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let err = PlantModel::new(
            DMatrix::identity(2, 2) * 0.5,
            DMatrix::zeros(3, 1),
            DMatrix::identity(2, 2),
            DMatrix::zeros(1, 2),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn destabilizing_gain_rejected() {
        let err = PlantModel::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DMatrix::from_row_slice(1, 1, &[0.5]),
        )
        .unwrap_err();
        assert!(err.to_string().contains("does not stabilize"));
    }

    #[test]
    fn spec_round_trip() {
        let plant = PlantModel::reference();
        let json = serde_json::to_string(&plant.to_spec()).unwrap();
        assert!(json.contains("\"A\""));
        let back: PlantSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back.build().unwrap(), plant);
    }
}
