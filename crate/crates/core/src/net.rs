//! A small fully-connected network with exact reverse-mode gradients.
//!
//! Layers are bias-free linear maps `z_l = W_l a_{l-1}` separated by an
//! elementwise nonlinearity; the last layer is linear. Samples are stored as
//! columns, so a batch of `B` inputs is an `in_dim x B` matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Tanh,
    Relu,
    #[serde(rename = "none")]
    Identity,
}

impl Nonlinearity {
    fn apply(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => z.tanh(),
            Nonlinearity::Relu => z.max(0.0),
            Nonlinearity::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Nonlinearity::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `(1/B) Σ ‖ŷ − y‖²`.
    #[serde(rename = "mse")]
    MeanSquaredError,
    /// `−(1/B) Σ_b Σ_k y_kb log softmax(ŷ_b)_k`, targets are probability columns.
    SoftmaxCrossEntropy,
}

/// One adaptable linear layer and the functional group it belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub group: String,
    pub base_weight: Matrix,
}

impl LayerSpec {
    pub fn new(group: impl Into<String>, base_weight: Matrix) -> Self {
        Self {
            group: group.into(),
            base_weight,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.base_weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.base_weight.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    layers: Vec<LayerSpec>,
    nonlinearity: Nonlinearity,
    loss: LossKind,
}

impl ToyModel {
    pub fn new(layers: Vec<LayerSpec>, nonlinearity: Nonlinearity, loss: LossKind) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::mismatch(
                    "ToyModel::new",
                    format!("layer {} in_dim {}", i + 1, pair[0].out_dim()),
                    format!("{}", pair[1].in_dim()),
                ));
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            layer.base_weight.check_finite()?;
            if let Some(first) = layers.iter().find(|l| l.group == layer.group) {
                if first.in_dim() != layer.in_dim() {
                    return Err(Error::mismatch(
                        "ToyModel::new",
                        format!("in_dim {} for group {:?}", first.in_dim(), layer.group),
                        format!("layer {i} in_dim {}", layer.in_dim()),
                    ));
                }
            }
        }
        Ok(Self {
            layers,
            nonlinearity,
            loss,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn base_weights(&self) -> Vec<Matrix> {
        self.layers.iter().map(|l| l.base_weight.clone()).collect()
    }

    /// Group ids in order of first appearance.
    pub fn groups(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for l in &self.layers {
            if !out.contains(&l.group.as_str()) {
                out.push(&l.group);
            }
        }
        out
    }

    pub fn layers_in_group(&self, group: &str) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].group == group)
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, LayerSpec::in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, LayerSpec::out_dim)
    }

    fn check_weights(&self, weights: &[Matrix]) -> Result<()> {
        if weights.len() != self.layers.len() {
            return Err(Error::mismatch(
                "weights",
                format!("{} layers", self.layers.len()),
                weights.len(),
            ));
        }
        for (i, (w, l)) in weights.iter().zip(&self.layers).enumerate() {
            if w.shape() != l.base_weight.shape() {
                return Err(Error::mismatch(
                    "weights",
                    format!("layer {i} {:?}", l.base_weight.shape()),
                    format!("{:?}", w.shape()),
                ));
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("model has no layers".into()));
        }
        if batch.inputs.rows() != self.input_dim() {
            return Err(Error::mismatch(
                "batch inputs",
                format!("{} features", self.input_dim()),
                batch.inputs.rows(),
            ));
        }
        if batch.targets.rows() != self.output_dim() || batch.targets.cols() != batch.inputs.cols() {
            return Err(Error::mismatch(
                "batch targets",
                format!("{}x{}", self.output_dim(), batch.inputs.cols()),
                format!("{}x{}", batch.targets.rows(), batch.targets.cols()),
            ));
        }
        if batch.inputs.cols() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(())
    }
}

/// Inputs and targets, one sample per column.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.inputs.cols()
    }
}

/// `∂loss/∂W` for every layer, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet(pub Vec<Matrix>);

impl GradientSet {
    pub fn layers(&self) -> &[Matrix] {
        &self.0
    }

    pub fn zeros_like(weights: &[Matrix]) -> Self {
        Self(weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, g| m.max(g.max_abs()))
    }
}

impl std::ops::Index<usize> for GradientSet {
    type Output = Matrix;
    fn index(&self, i: usize) -> &Matrix {
        &self.0[i]
    }
}

struct Trace {
    /// Inputs to each layer: `a_0 = X, a_1, …, a_{L-1}`.
    activations: Vec<Matrix>,
    /// Pre-activations of hidden layers.
    pre: Vec<Matrix>,
    output: Matrix,
}

fn run(model: &ToyModel, weights: &[Matrix], inputs: &Matrix) -> Trace {
    let n = weights.len();
    let mut activations = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n.saturating_sub(1));
    let mut a = inputs.clone();
    for (l, w) in weights.iter().enumerate() {
        let z = w.matmul(&a);
        activations.push(a);
        if l + 1 == n {
            return Trace {
                activations,
                pre,
                output: z,
            };
        }
        a = z.map(|v| model.nonlinearity.apply(v));
        pre.push(z);
    }
    unreachable!("model validated non-empty")
}

/// Network output for `inputs` under the given weights.
pub fn predict(model: &ToyModel, weights: &[Matrix], inputs: &Matrix) -> Result<Matrix> {
    model.check_weights(weights)?;
    if inputs.rows() != model.input_dim() || model.layers.is_empty() {
        return Err(Error::mismatch("predict", model.input_dim(), inputs.rows()));
    }
    Ok(run(model, weights, inputs).output)
}

pub(crate) fn log_softmax_columns(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for j in 0..z.cols() {
        let mx = (0..z.rows()).fold(f64::NEG_INFINITY, |m, i| m.max(z[(i, j)]));
        let lse = mx + (0..z.rows()).map(|i| (z[(i, j)] - mx).exp()).sum::<f64>().ln();
        for i in 0..z.rows() {
            out[(i, j)] = z[(i, j)] - lse;
        }
    }
    out
}

pub(crate) fn softmax_columns(z: &Matrix) -> Matrix {
    log_softmax_columns(z).map(f64::exp)
}

fn loss_of_output(kind: LossKind, output: &Matrix, targets: &Matrix) -> f64 {
    let b = output.cols() as f64;
    match kind {
        LossKind::MeanSquaredError => (output - targets).frobenius_norm_sq() / b,
        LossKind::SoftmaxCrossEntropy => {
            let logp = log_softmax_columns(output);
            -logp
                .as_slice()
                .iter()
                .zip(targets.as_slice())
                .map(|(lp, y)| lp * y)
                .sum::<f64>()
                / b
        }
    }
}

/// `∂loss/∂output`.
fn output_gradient(kind: LossKind, output: &Matrix, targets: &Matrix) -> Matrix {
    let b = output.cols() as f64;
    match kind {
        LossKind::MeanSquaredError => (output - targets).scale(2.0 / b),
        LossKind::SoftmaxCrossEntropy => {
            let p = softmax_columns(output);
            let mut g = Matrix::zeros(output.rows(), output.cols());
            for j in 0..output.cols() {
                let mass: f64 = (0..targets.rows()).map(|i| targets[(i, j)]).sum();
                for i in 0..output.rows() {
                    g[(i, j)] = (p[(i, j)] * mass - targets[(i, j)]) / b;
                }
            }
            g
        }
    }
}

pub fn forward(model: &ToyModel, weights: &[Matrix], batch: &Batch) -> Result<f64> {
    model.check_weights(weights)?;
    model.check_batch(batch)?;
    let trace = run(model, weights, &batch.inputs);
    Ok(loss_of_output(model.loss, &trace.output, &batch.targets))
}

pub fn grad(model: &ToyModel, weights: &[Matrix], batch: &Batch) -> Result<GradientSet> {
    Ok(loss_and_grad(model, weights, batch)?.1)
}

/// Loss and exact gradients from a single forward/backward pass.
pub fn loss_and_grad(model: &ToyModel, weights: &[Matrix], batch: &Batch) -> Result<(f64, GradientSet)> {
    model.check_weights(weights)?;
    model.check_batch(batch)?;
    let trace = run(model, weights, &batch.inputs);
    let loss = loss_of_output(model.loss, &trace.output, &batch.targets);

    let n = weights.len();
    let mut grads = vec![Matrix::zeros(0, 0); n];
    let mut delta = output_gradient(model.loss, &trace.output, &batch.targets);
    for l in (0..n).rev() {
        grads[l] = delta.matmul_t(&trace.activations[l]);
        if l > 0 {
            let upstream = weights[l].t_matmul(&delta);
            let nl = model.nonlinearity;
            delta = upstream.zip_map(&trace.pre[l - 1], |g, z| g * nl.derivative(z));
        }
    }
    Ok((loss, GradientSet(grads)))
}

/// Central-difference gradient, one pair of loss evaluations per entry.
pub fn finite_diff_grad(
    model: &ToyModel,
    weights: &[Matrix],
    batch: &Batch,
    step: f64,
) -> Result<GradientSet> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step {step}")));
    }
    model.check_weights(weights)?;
    model.check_batch(batch)?;
    let mut work = weights.to_vec();
    let mut out = Vec::with_capacity(weights.len());
    for l in 0..weights.len() {
        let (rows, cols) = weights[l].shape();
        let mut g = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let orig = work[l][(i, j)];
                work[l][(i, j)] = orig + step;
                let plus = loss_of_output(model.loss, &run(model, &work, &batch.inputs).output, &batch.targets);
                work[l][(i, j)] = orig - step;
                let minus = loss_of_output(model.loss, &run(model, &work, &batch.inputs).output, &batch.targets);
                work[l][(i, j)] = orig;
                g[(i, j)] = (plus - minus) / (2.0 * step);
            }
        }
        out.push(g);
    }
    Ok(GradientSet(out))
}

/// Largest entrywise `|analytic − numeric| / max(1, |analytic|)`.
pub fn gradient_check_error(analytic: &GradientSet, numeric: &GradientSet) -> f64 {
    analytic
        .0
        .iter()
        .zip(&numeric.0)
        .flat_map(|(a, n)| a.as_slice().iter().zip(n.as_slice()))
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs() / a.abs().max(1.0)))
}

/// Layer widths of a gradient-check network: `widths[0]` is the input
/// dimension and each following entry adds one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub widths: Vec<usize>,
    pub nonlinearity: Nonlinearity,
    pub loss: LossKind,
    pub batch: usize,
}

/// Every nonlinearity × loss on a single square layer-pair and on a
/// three-layer rectangular stack: 12 configurations.
pub fn default_gradcheck_matrix() -> Vec<GradCheckConfig> {
    let shapes: [&[usize]; 2] = [&[6, 6, 6], &[5, 7, 4, 3]];
    let mut out = Vec::new();
    for widths in shapes {
        for nonlinearity in [Nonlinearity::Tanh, Nonlinearity::Relu, Nonlinearity::Identity] {
            for loss in [LossKind::MeanSquaredError, LossKind::SoftmaxCrossEntropy] {
                out.push(GradCheckConfig {
                    widths: widths.to_vec(),
                    nonlinearity,
                    loss,
                    batch: 4,
                });
            }
        }
    }
    out
}

/// Builds a seeded model and batch for `config` (layers alternate groups
/// `q`, `v`; cross-entropy targets are softmax columns) and returns the
/// finite-difference error of the analytic gradient at step 1e-5.
pub fn gradient_check(config: &GradCheckConfig, seed: u64) -> Result<f64> {
    if config.widths.len() < 2 || config.widths.contains(&0) || config.batch == 0 {
        return Err(Error::InvalidArgument(format!("gradient-check config {config:?}")));
    }
    let mut rng = crate::rng::seeded(seed);
    let layers = config
        .widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let group = format!("{}{i}", if i % 2 == 0 { "q" } else { "v" });
            LayerSpec::new(group, crate::rng::gaussian_matrix(&mut rng, w[1], w[0], 1.0 / (w[0] as f64).sqrt()))
        })
        .collect();
    let model = ToyModel::new(layers, config.nonlinearity, config.loss)?;
    let out_dim = *config.widths.last().expect("at least two widths");
    let inputs = crate::rng::gaussian_matrix(&mut rng, config.widths[0], config.batch, 1.0);
    let raw = crate::rng::gaussian_matrix(&mut rng, out_dim, config.batch, 1.0);
    let targets = match config.loss {
        LossKind::MeanSquaredError => raw,
        LossKind::SoftmaxCrossEntropy => softmax_columns(&raw),
    };
    let batch = Batch { inputs, targets };
    let weights = model.base_weights();
    let analytic = grad(&model, &weights, &batch)?;
    let numeric = finite_diff_grad(&model, &weights, &batch, 1e-5)?;
    Ok(gradient_check_error(&analytic, &numeric))
}
