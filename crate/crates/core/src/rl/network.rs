//! Fully connected Q-network with rectifier hidden layers, batched through
//! nalgebra matrix products.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Switch;

/// Output `i` is the value of `ACTIONS[i]`.
pub const ACTIONS: [Switch; 3] = [Switch::Control, Switch::Silent, Switch::Observe];

/// Order in which tied outputs are preferred: silent, then control.
const TIE_ORDER: [usize; 3] = [1, 0, 2];

pub fn action_index(switch: Switch) -> usize {
    match switch {
        Switch::Control => 0,
        Switch::Silent => 1,
        Switch::Observe => 2,
    }
}

/// Index of the largest value; exact ties go to σ = 0, then σ = 1.
pub fn greedy_action(q: &[f64]) -> Switch {
    let mut best = TIE_ORDER[0];
    for &i in &TIE_ORDER[1..] {
        if q[i] > q[best] {
            best = i;
        }
    }
    ACTIONS[best]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: DMatrix::zeros(output, input),
            b: DVector::zeros(output),
        }
    }

    fn apply(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = if a.ncols() == 1 {
            &self.w * a
        } else {
            matmul(&self.w, false, a, false)
        };
        for mut col in z.column_iter_mut() {
            col += &self.b;
        }
        z
    }
}

/// `op(a) · op(b)` where `op` optionally transposes. Transposition only swaps
/// strides, so no copy is made.
fn matmul(a: &DMatrix<f64>, ta: bool, b: &DMatrix<f64>, tb: bool) -> DMatrix<f64> {
    let (m, k, rsa, csa) = if ta {
        (a.ncols(), a.nrows(), a.nrows(), 1)
    } else {
        (a.nrows(), a.ncols(), 1, a.nrows())
    };
    let (kb, n, rsb, csb) = if tb {
        (b.ncols(), b.nrows(), b.nrows(), 1)
    } else {
        (b.nrows(), b.ncols(), 1, b.nrows())
    };
    assert_eq!(k, kb, "inner dimensions differ");
    let mut c = DMatrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: the pointers cover m×k, k×n and m×n column-major buffers with
    // the strides given, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            1,
            m as isize,
        );
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    layers: Vec<Dense>,
}

/// Per-layer gradients, same shapes as the network.
pub type Gradient = Vec<Dense>;

impl QNetwork {
    fn check_arch(arch: &[usize]) -> Result<()> {
        if arch.len() < 2 || arch.contains(&0) {
            return Err(Error::Config(format!("invalid architecture {arch:?}")));
        }
        if *arch.last().expect("len checked") != ACTIONS.len() {
            return Err(Error::Config(format!(
                "architecture {arch:?} must end in {} outputs",
                ACTIONS.len()
            )));
        }
        Ok(())
    }

    pub fn zeros(arch: &[usize]) -> Result<Self> {
        Self::check_arch(arch)?;
        Ok(Self {
            layers: arch.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        })
    }

    /// Weights and biases uniform on `±1/√fan_in`.
    pub fn random(arch: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.w.ncols() as f64).sqrt();
            layer.w.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
            layer.b.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        }
        Ok(net)
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].w.ncols() != pair[0].w.nrows() {
                return Err(Error::Config(format!(
                    "layer {} takes {} inputs but layer {i} produces {}",
                    i + 1,
                    pair[1].w.ncols(),
                    pair[0].w.nrows()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.b.len() != l.w.nrows() {
                return Err(Error::Config(format!(
                    "layer {i} bias has length {}, expected {}",
                    l.b.len(),
                    l.w.nrows()
                )));
            }
        }
        let net = Self { layers };
        Self::check_arch(&net.arch())?;
        Ok(net)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn arch(&self) -> Vec<usize> {
        let mut arch = vec![self.layers[0].w.ncols()];
        arch.extend(self.layers.iter().map(|l| l.w.nrows()));
        arch
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// Q-values for one input, ordered as [`ACTIONS`].
    pub fn forward(&self, state: &DVector<f64>) -> Result<[f64; 3]> {
        let input = DMatrix::from_column_slice(state.len(), 1, state.as_slice());
        let out = self.forward_batch(&input)?;
        Ok([out[0], out[1], out[2]])
    }

    /// Column-wise forward pass; `inputs` is `input_dim × batch`.
    pub fn forward_batch(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(inputs)?;
        let mut a = inputs.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            a = layer.apply(&a);
            if i < last {
                a.apply(|v| *v = v.max(0.0));
            }
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("Q-network produced non-finite output".into()));
        }
        Ok(a)
    }

    fn check_input(&self, inputs: &DMatrix<f64>) -> Result<()> {
        if inputs.nrows() != self.input_dim() {
            return Err(Error::Config(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                inputs.nrows()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("network input must be finite".into()));
        }
        Ok(())
    }

    /// Mean of `(Q(sᵢ, aᵢ) - yᵢ)²` and its gradient with respect to every
    /// weight, for fixed regression targets `y`.
    pub fn regression_gradient(
        &self,
        inputs: &DMatrix<f64>,
        actions: &[usize],
        targets: &[f64],
    ) -> Result<(f64, Gradient)> {
        self.check_input(inputs)?;
        let batch = inputs.ncols();
        if batch == 0 || actions.len() != batch || targets.len() != batch {
            return Err(Error::Config(format!(
                "batch of {batch} inputs with {} actions and {} targets",
                actions.len(),
                targets.len()
            )));
        }

        // Pre-activations of every layer; the input is activation 0.
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = inputs.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&a);
            a = if i < last { z.map(|v| v.max(0.0)) } else { z.clone() };
            pre.push(z);
        }
        let out = &pre[last];

        let scale = 2.0 / batch as f64;
        let mut delta = DMatrix::zeros(out.nrows(), batch);
        let mut loss = 0.0;
        for (j, (&act, &y)) in actions.iter().zip(targets).enumerate() {
            let err = out[(act, j)] - y;
            loss += err * err;
            delta[(act, j)] = scale * err;
        }
        loss /= batch as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite TD loss {loss}")));
        }

        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let below = if i == 0 {
                inputs.clone()
            } else {
                pre[i - 1].map(|v| v.max(0.0))
            };
            grads.push(Dense {
                w: matmul(&delta, false, &below, true),
                b: delta.column_sum(),
            });
            if i > 0 {
                let mut back = matmul(&self.layers[i].w, true, &delta, false);
                back.zip_apply(&pre[i - 1], |d, z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
                delta = back;
            }
        }
        grads.reverse();
        Ok((loss, grads))
    }

    pub fn to_document(&self, meta: WeightsMeta) -> WeightsDocument {
        WeightsDocument {
            arch: self.arch(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerDocument {
                    w: l.w.row_iter().map(|r| r.iter().copied().collect()).collect(),
                    b: l.b.iter().copied().collect(),
                })
                .collect(),
            meta,
        }
    }

    pub fn from_document(doc: &WeightsDocument) -> Result<Self> {
        Self::check_arch(&doc.arch).map_err(|e| Error::Parse(format!("arch: {e}")))?;
        if doc.layers.len() != doc.arch.len() - 1 {
            return Err(Error::Parse(format!(
                "layers: expected {} layers for arch {:?}, found {}",
                doc.arch.len() - 1,
                doc.arch,
                doc.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(doc.layers.len());
        for (i, (l, io)) in doc.layers.iter().zip(doc.arch.windows(2)).enumerate() {
            let (inp, out) = (io[0], io[1]);
            let cols = l.w.first().map_or(0, Vec::len);
            if l.w.len() != out || l.w.iter().any(|r| r.len() != inp) {
                let found = if l.w.iter().all(|r| r.len() == cols) {
                    format!("{}x{cols}", l.w.len())
                } else {
                    format!("{} ragged rows", l.w.len())
                };
                return Err(Error::Parse(format!(
                    "layers[{i}].w: expected shape {out}x{inp}, found {found}"
                )));
            }
            if l.b.len() != out {
                return Err(Error::Parse(format!(
                    "layers[{i}].b: expected length {out}, found {}",
                    l.b.len()
                )));
            }
            layers.push(Dense {
                w: DMatrix::from_fn(out, inp, |r, c| l.w[r][c]),
                b: DVector::from_column_slice(&l.b),
            });
        }
        let net = Self { layers };
        if !net.is_finite() {
            return Err(Error::Parse("layers: non-finite weight".into()));
        }
        Ok(net)
    }
}

/// Which features the Q-network sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// The plant state `x` only.
    #[default]
    State,
    /// The full augmented state `(x, x̂₋, û₋)`.
    Augmented,
}

impl InputMode {
    pub fn features(self, state: &crate::model::AugmentedState) -> DVector<f64> {
        match self {
            InputMode::State => state.x.clone(),
            InputMode::Augmented => state.flatten(),
        }
    }

    pub fn dim(self, state_dim: usize, input_dim: usize) -> usize {
        match self {
            InputMode::State => state_dim,
            InputMode::Augmented => 2 * state_dim + input_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDocument {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsMeta {
    pub epsilon: f64,
    pub delta: f64,
    pub seed: u64,
    #[serde(default)]
    pub input: InputMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsDocument {
    pub arch: Vec<usize>,
    pub layers: Vec<LayerDocument>,
    pub meta: WeightsMeta,
}

pub fn save_weights<W: Write>(net: &QNetwork, meta: WeightsMeta, out: W) -> Result<()> {
    serde_json::to_writer(out, &net.to_document(meta)).map_err(|e| Error::Parse(format!("weights: {e}")))
}

pub fn load_weights<R: Read>(input: R) -> Result<(QNetwork, WeightsMeta)> {
    let doc: WeightsDocument =
        serde_json::from_reader(input).map_err(|e| Error::Parse(format!("weights document: {e}")))?;
    Ok((QNetwork::from_document(&doc)?, doc.meta))
}
