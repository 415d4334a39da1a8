//! Shared-trunk, multi-head feed-forward regressor with hand-written
//! backpropagation and Adam.
//!
//! The trunk maps the stacked signal window to a shared representation;
//! each of the six heads maps that representation to one wrench axis. Every
//! layer is followed by a rectifier except the last layer of each head.
//! Weights are stored row-major as `out × in`.

use crate::mechanics::Wrench;
use crate::pipeline::{Normalizer, PipelineConfig, ProcessedDataset, NUM_LABELS};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("empty training set")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpDims {
    pub input: usize,
    /// Output width of each trunk layer.
    pub trunk: Vec<usize>,
    /// Output width of each head layer; the last entry is the per-axis output (1).
    pub head: Vec<usize>,
    pub heads: usize,
}

impl MlpDims {
    /// 3×128 trunk, heads 64-32-1, six outputs.
    pub fn calibration(input: usize) -> Self {
        Self {
            input,
            trunk: vec![128, 128, 128],
            head: vec![64, 32, 1],
            heads: NUM_LABELS,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        let ok = self.input > 0
            && !self.trunk.is_empty()
            && self.trunk.iter().all(|&d| d > 0)
            && self.head.last() == Some(&1)
            && self.head.iter().all(|&d| d > 0)
            && self.heads > 0;
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidModel(format!("bad dimensions {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim × in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn weight_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.out_dim, self.in_dim), &self.weights).expect("dense shape")
    }

    /// `x · Wᵀ + b`
    fn affine(&self, x: &ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight_view().t());
        z += &ArrayView2::from_shape((1, self.out_dim), &self.bias).expect("bias shape");
        z
    }
}

/// Network parameters; gradients and Adam moments use the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub dims: MlpDims,
    pub trunk: Vec<Dense>,
    pub heads: Vec<Vec<Dense>>,
}

impl MlpParams {
    pub fn zeros(dims: &MlpDims) -> Self {
        let mut trunk = Vec::with_capacity(dims.trunk.len());
        let mut prev = dims.input;
        for &w in &dims.trunk {
            trunk.push(Dense::zeros(prev, w));
            prev = w;
        }
        let shared = prev;
        let heads = (0..dims.heads)
            .map(|_| {
                let mut prev = shared;
                dims.head
                    .iter()
                    .map(|&w| {
                        let d = Dense::zeros(prev, w);
                        prev = w;
                        d
                    })
                    .collect()
            })
            .collect();
        Self {
            dims: dims.clone(),
            trunk,
            heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.dims)
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain(self.heads.iter().flatten())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk.iter_mut().chain(self.heads.iter_mut().flatten())
    }

    /// Every weight and bias buffer, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_consistent(&self) -> Result<(), ModelError> {
        let fresh = Self::zeros(&self.dims);
        let same = fresh.layers().zip(self.layers()).all(|(a, b)| {
            a.in_dim == b.in_dim
                && a.out_dim == b.out_dim
                && a.weights.len() == b.weights.len()
                && a.bias.len() == b.bias.len()
        }) && fresh.layers().count() == self.layers().count();
        if !same {
            return Err(ModelError::InvalidModel("layer shapes do not chain".into()));
        }
        if !self.is_finite() {
            return Err(ModelError::InvalidModel("non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.dims.heads
    }
}

/// Fan-in scaled normal initialization (`std = sqrt(2 / fan_in)`), zero biases.
pub fn init_params<R: Rng + ?Sized>(rng: &mut R, dims: &MlpDims) -> Result<MlpParams, ModelError> {
    dims.validate()?;
    let mut p = MlpParams::zeros(dims);
    for layer in p.layers_mut() {
        let normal = Normal::new(0.0, (2.0 / layer.in_dim as f64).sqrt()).expect("positive std");
        for w in &mut layer.weights {
            *w = normal.sample(rng);
        }
    }
    Ok(p)
}

fn relu_inplace(z: &mut Array2<f64>) {
    z.mapv_inplace(|v| v.max(0.0));
}

/// Post-activation outputs of every layer, kept for the backward pass.
struct Activations {
    /// `trunk[0]` is the input; `trunk[i + 1]` the output of trunk layer `i`.
    trunk: Vec<Array2<f64>>,
    /// `heads[h][j]` is the output of layer `j` of head `h`.
    heads: Vec<Vec<Array2<f64>>>,
}

fn forward_cached(params: &MlpParams, x: ArrayView2<'_, f64>) -> Activations {
    let mut trunk = Vec::with_capacity(params.trunk.len() + 1);
    trunk.push(x.to_owned());
    for layer in &params.trunk {
        let mut z = layer.affine(&trunk.last().expect("input").view());
        relu_inplace(&mut z);
        trunk.push(z);
    }
    let shared = trunk.last().expect("trunk output");
    let heads = params
        .heads
        .iter()
        .map(|head| {
            let mut outs: Vec<Array2<f64>> = Vec::with_capacity(head.len());
            for (j, layer) in head.iter().enumerate() {
                let input = if j == 0 { shared.view() } else { outs[j - 1].view() };
                let mut z = layer.affine(&input);
                if j + 1 < head.len() {
                    relu_inplace(&mut z);
                }
                outs.push(z);
            }
            outs
        })
        .collect();
    Activations { trunk, heads }
}

fn collect_outputs(acts: &Activations, rows: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows, acts.heads.len()));
    for (h, head) in acts.heads.iter().enumerate() {
        out.column_mut(h).assign(&head.last().expect("head output").column(0));
    }
    out
}

fn check_input(params: &MlpParams, x: &ArrayView2<'_, f64>) -> Result<(), ModelError> {
    if x.ncols() != params.dims.input {
        return Err(ModelError::ShapeMismatch {
            expected: params.dims.input,
            actual: x.ncols(),
        });
    }
    Ok(())
}

/// Batch forward pass: `rows × input` to `rows × heads`, in normalized label units.
pub fn forward(params: &MlpParams, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, ModelError> {
    check_input(params, &x)?;
    let acts = forward_cached(params, x);
    Ok(collect_outputs(&acts, x.nrows()))
}

/// Zeroes `grad` wherever the layer output was clipped by the rectifier.
fn relu_backward(grad: &mut Array2<f64>, activation: &Array2<f64>) {
    grad.zip_mut_with(activation, |g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Accumulates `dW = gradᵀ · input` and `db = Σ grad` into `out`.
fn dense_grads(out: &mut Dense, grad: &Array2<f64>, input: &ArrayView2<'_, f64>) {
    let dw = grad.t().dot(input);
    out.weights
        .iter_mut()
        .zip(dw.iter())
        .for_each(|(o, v)| *o = *v);
    let db = grad.sum_axis(Axis(0));
    out.bias.iter_mut().zip(db.iter()).for_each(|(o, v)| *o = *v);
}

/// Mean squared error over all rows and outputs, and its gradient.
pub fn loss_and_gradients(
    params: &MlpParams,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
) -> Result<(f64, MlpParams), ModelError> {
    check_input(params, &x)?;
    if y.nrows() != x.nrows() || y.ncols() != params.dims.heads {
        return Err(ModelError::ShapeMismatch {
            expected: x.nrows() * params.dims.heads,
            actual: y.nrows() * y.ncols(),
        });
    }
    let rows = x.nrows();
    let acts = forward_cached(params, x);
    let pred = collect_outputs(&acts, rows);
    let resid = &pred - &y;
    let count = (rows * params.dims.heads) as f64;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / count;
    let d_out = resid * (2.0 / count);

    let mut grads = params.zeros_like();
    let shared = acts.trunk.last().expect("trunk output");
    let mut d_shared = Array2::<f64>::zeros(shared.raw_dim());
    for (h, head) in params.heads.iter().enumerate() {
        let outs = &acts.heads[h];
        let mut grad = d_out.slice(s![.., h..h + 1]).to_owned();
        for j in (0..head.len()).rev() {
            let input = if j == 0 { shared.view() } else { outs[j - 1].view() };
            dense_grads(&mut grads.heads[h][j], &grad, &input);
            let mut d_in = grad.dot(&head[j].weight_view());
            if j == 0 {
                d_shared += &d_in;
            } else {
                relu_backward(&mut d_in, &outs[j - 1]);
                grad = d_in;
            }
        }
    }
    relu_backward(&mut d_shared, shared);
    let mut grad = d_shared;
    for i in (0..params.trunk.len()).rev() {
        let input = acts.trunk[i].view();
        dense_grads(&mut grads.trunk[i], &grad, &input);
        if i > 0 {
            let mut d_in = grad.dot(&params.trunk[i].weight_view());
            relu_backward(&mut d_in, &acts.trunk[i]);
            grad = d_in;
        }
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 2000,
            learning_rate: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.adam_beta1)
            && (0.0..1.0).contains(&self.adam_beta2)
            && self.adam_epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: MlpParams,
    pub v: MlpParams,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// Bias-corrected Adam update for step `t` (1-based).
pub fn adam_step(
    state: &mut AdamState,
    params: &mut MlpParams,
    grads: &MlpParams,
    t: u64,
    cfg: &TrainConfig,
) {
    assert!(t >= 1, "Adam steps are 1-based");
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    let lr = cfg.learning_rate;
    let eps = cfg.adam_epsilon;
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Persisted calibration artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub params: MlpParams,
    pub normalizer: Normalizer,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Hash of the configuration the training data was generated with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_config_hash: Option<String>,
}

/// Mini-batch Adam on the full recipe; reshuffles every epoch from `cfg.seed`.
///
/// `on_epoch` receives `(epoch, mean loss)` after each epoch.
pub fn train_with_callback(
    dataset: &ProcessedDataset,
    dims: &MlpDims,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutput, ModelError> {
    cfg.validate()?;
    dims.validate()?;
    let n = dataset.rows();
    if n == 0 {
        return Err(ModelError::EmptyDataset);
    }
    if dataset.feature_width != dims.input {
        return Err(ModelError::ShapeMismatch {
            expected: dims.input,
            actual: dataset.feature_width,
        });
    }
    let width = dataset.feature_width;
    let x_all = ArrayView2::from_shape((n, width), &dataset.features).expect("feature matrix");
    let y_all = ArrayView2::from_shape((n, NUM_LABELS), &dataset.labels).expect("label matrix");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_params(&mut rng, dims)?;
    let mut adam = AdamState::new(&params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xb = x_all.select(Axis(0), batch);
            let yb = y_all.select(Axis(0), batch);
            let (loss, grads) = loss_and_gradients(&params, xb.view(), yb.view())?;
            if !loss.is_finite() {
                return Err(ModelError::Divergence { epoch, loss });
            }
            step += 1;
            adam_step(&mut adam, &mut params, &grads, step, cfg);
            total += loss * batch.len() as f64;
        }
        let mean = total / n as f64;
        if !mean.is_finite() || !params.is_finite() {
            return Err(ModelError::Divergence { epoch, loss: mean });
        }
        on_epoch(epoch, mean);
        curve.push(mean);
    }
    Ok(TrainOutput { params, curve })
}

/// Raw result of a training run.
pub struct TrainOutput {
    pub params: MlpParams,
    pub curve: Vec<f64>,
}

/// Trains the calibration network and bundles it with its normalizer.
pub fn train(
    dataset: &ProcessedDataset,
    normalizer: &Normalizer,
    pipeline: &PipelineConfig,
    cfg: &TrainConfig,
) -> Result<TrainedModel, ModelError> {
    train_logged(dataset, normalizer, pipeline, cfg, |_, _| {})
}

pub fn train_logged(
    dataset: &ProcessedDataset,
    normalizer: &Normalizer,
    pipeline: &PipelineConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(usize, f64),
) -> Result<TrainedModel, ModelError> {
    let dims = MlpDims::calibration(dataset.feature_width);
    let out = train_with_callback(dataset, &dims, cfg, on_epoch)?;
    Ok(TrainedModel {
        params: out.params,
        normalizer: normalizer.clone(),
        pipeline: pipeline.clone(),
        train: cfg.clone(),
        loss_curve: out.curve,
        data_config_hash: None,
    })
}

impl TrainedModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.params.check_consistent()?;
        if !self.normalizer.is_valid() {
            return Err(ModelError::InvalidModel("degenerate normalizer".into()));
        }
        if self.normalizer.feature_width() != self.params.dims.input {
            return Err(ModelError::ShapeMismatch {
                expected: self.params.dims.input,
                actual: self.normalizer.feature_width(),
            });
        }
        if self.pipeline.feature_width() != self.params.dims.input {
            return Err(ModelError::ShapeMismatch {
                expected: self.params.dims.input,
                actual: self.pipeline.feature_width(),
            });
        }
        if self.params.dims.heads != NUM_LABELS {
            return Err(ModelError::InvalidModel("model must have 6 outputs".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        let io = |e: &dyn std::fmt::Display| ModelError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        };
        let json = serde_json::to_string(self).map_err(|e| io(&e))?;
        std::fs::write(path, json).map_err(|e| io(&e))
    }

    /// Loads and validates a saved model.
    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let io = |e: &dyn std::fmt::Display| ModelError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(&e))?;
        let model: Self = serde_json::from_str(&text).map_err(|e| io(&e))?;
        model.validate()?;
        Ok(model)
    }

    pub fn input_width(&self) -> usize {
        self.params.dims.input
    }

    /// Predicts physical wrenches for normalized feature rows (as produced by the pipeline).
    pub fn predict_normalized(&self, x: ArrayView2<'_, f64>) -> Result<Vec<Wrench>, ModelError> {
        let mut out = forward(&self.params, x)?;
        let flat = out.as_slice_mut().expect("standard layout");
        self.normalizer.denormalize_labels(flat);
        Ok(flat
            .chunks_exact(NUM_LABELS)
            .map(|r| Wrench::from_array([r[0], r[1], r[2], r[3], r[4], r[5]]))
            .collect())
    }

    /// Predicts from raw delta-signal windows, row-major `rows × (window · kept channels)`.
    pub fn predict_batch(&self, windows: &[f64]) -> Result<Vec<Wrench>, ModelError> {
        let w = self.input_width();
        if windows.len() % w != 0 {
            return Err(ModelError::ShapeMismatch {
                expected: w,
                actual: windows.len(),
            });
        }
        let mut x = windows.to_vec();
        self.normalizer.normalize_features(&mut x);
        let x = Array2::from_shape_vec((windows.len() / w, w), x).expect("row-major batch");
        self.predict_normalized(x.view())
    }

    /// Predicts one wrench from a window of processed frames (oldest first).
    pub fn predict(&self, window: &[f64]) -> Result<Wrench, ModelError> {
        if window.len() != self.input_width() {
            return Err(ModelError::ShapeMismatch {
                expected: self.input_width(),
                actual: window.len(),
            });
        }
        Ok(self.predict_batch(window)?.remove(0))
    }
}

/// Dense-layer output for a single row; used by tests as a reference.
#[doc(hidden)]
pub fn dense_row(layer: &Dense, x: &[f64]) -> Array1<f64> {
    let w = layer.weight_view();
    Array1::from_iter((0..layer.out_dim).map(|o| {
        layer.bias[o] + w.row(o).iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }))
}
