//! Parameter-level channel prediction with a doubly residual block stack.
//!
//! One univariate model per parameter type (Re h, Im h, τ, ν) shares its
//! weights across every path. Windows are normalized individually: the last
//! value is subtracted and the result divided by the RMS of the first
//! differences, so the network sees the local trajectory shape whatever the
//! magnitude of the parameter.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};
use crate::channel::PathParams;
use crate::container::{Container, ContainerError, ContainerKind};
use crate::nn::{flatten_params, unflatten_params, Dense, DenseNodes};
use crate::optim::Adam;
use crate::scenario::ParamSeries;

pub const PREDICTOR_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("series of length {len} is too short for lookback {lookback} (need at least lookback + 1)")]
    SeriesTooShort { len: usize, lookback: usize },
    #[error("no training windows")]
    NoSamples,
    #[error("window has length {got}, model expects {expected}")]
    WindowLength { expected: usize, got: usize },
    #[error("invalid predictor configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("weights file does not match its header: {0}")]
    Weights(String),
}

/// Scalar channel parameter forecast by one model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesParam {
    ReH,
    ImH,
    Tau,
    Nu,
}

impl SeriesParam {
    pub const ALL: [SeriesParam; 4] = [SeriesParam::ReH, SeriesParam::ImH, SeriesParam::Tau, SeriesParam::Nu];

    pub fn name(self) -> &'static str {
        match self {
            SeriesParam::ReH => "re_h",
            SeriesParam::ImH => "im_h",
            SeriesParam::Tau => "tau",
            SeriesParam::Nu => "nu",
        }
    }

    pub fn get(self, p: &PathParams) -> f64 {
        match self {
            SeriesParam::ReH => p.h.re,
            SeriesParam::ImH => p.h.im,
            SeriesParam::Tau => p.tau,
            SeriesParam::Nu => p.nu,
        }
    }

    pub fn set(self, p: &mut PathParams, v: f64) {
        match self {
            SeriesParam::ReH => p.h.re = v,
            SeriesParam::ImH => p.h.im = v,
            SeriesParam::Tau => p.tau = v,
            SeriesParam::Nu => p.nu = v,
        }
    }
}

/// Per-path value sequences of one parameter, communication paths first.
pub fn extract_series<'a>(groups: impl IntoIterator<Item = &'a ParamSeries>, param: SeriesParam) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for g in groups {
        for slots in [&g.comm, &g.sensing] {
            let paths = slots.first().map_or(0, Vec::len);
            for p in 0..paths {
                out.push(slots.iter().map(|s| param.get(&s[p])).collect());
            }
        }
    }
    out
}

/// Affine map from raw window values to the normalized domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowNorm {
    pub offset: f64,
    pub scale: f64,
}

impl WindowNorm {
    pub fn fit(window: &[f64]) -> Self {
        let offset = *window.last().expect("non-empty window");
        let diffs = window.len().saturating_sub(1).max(1);
        let rms = (window.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / diffs as f64).sqrt();
        let max_abs = window.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let scale = if rms > 1e-12 * max_abs && rms > 0.0 {
            rms
        } else if max_abs > 0.0 {
            max_abs
        } else {
            1.0
        };
        Self { offset, scale }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.scale + self.offset
    }

    pub fn apply(&self, window: &[f64]) -> Vec<f64> {
        window.iter().map(|v| self.normalize(*v)).collect()
    }
}

/// Raw input window and the value that follows it.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastSample {
    pub window: Vec<f64>,
    pub target: f64,
}

impl ForecastSample {
    /// Window and target mapped by the window's own normalization.
    pub fn normalized(&self) -> (Vec<f64>, f64) {
        let n = WindowNorm::fit(&self.window);
        (n.apply(&self.window), n.normalize(self.target))
    }
}

pub fn windows_from_series(series: &[f64], lookback: usize) -> Result<Vec<ForecastSample>, PredictorError> {
    if series.len() < lookback + 1 {
        return Err(PredictorError::SeriesTooShort {
            len: series.len(),
            lookback,
        });
    }
    Ok(series
        .windows(lookback + 1)
        .map(|w| ForecastSample {
            window: w[..lookback].to_vec(),
            target: w[lookback],
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForecastConfig {
    pub lookback: usize,
    pub width: usize,
    pub trunk_layers: usize,
    pub stacks: usize,
    pub blocks_per_stack: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            lookback: 12,
            width: 64,
            trunk_layers: 4,
            stacks: 6,
            blocks_per_stack: 3,
        }
    }
}

impl ForecastConfig {
    pub fn validate(&self) -> Result<(), PredictorError> {
        if self.lookback < 2 || self.width == 0 || self.trunk_layers == 0 || self.stacks == 0 || self.blocks_per_stack == 0 {
            return Err(PredictorError::Config(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.stacks * self.blocks_per_stack
    }
}

/// Fully connected ReLU trunk with linear backcast and forecast heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub trunk: Vec<Dense>,
    pub backcast: Dense,
    pub forecast: Dense,
}

pub struct BlockNodes {
    trunk: Vec<DenseNodes>,
    backcast: DenseNodes,
    forecast: DenseNodes,
}

impl Block {
    pub fn zeros(config: &ForecastConfig) -> Self {
        let mut trunk = vec![Dense::zeros(config.lookback, config.width)];
        trunk.extend((1..config.trunk_layers).map(|_| Dense::zeros(config.width, config.width)));
        Self {
            trunk,
            backcast: Dense::zeros(config.width, config.lookback),
            forecast: Dense::zeros(config.width, 1),
        }
    }

    /// He-uniform trunk, small backcast head, zero forecast head.
    pub fn init(config: &ForecastConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut trunk = vec![Dense::he_uniform(config.lookback, config.width, rng)];
        trunk.extend((1..config.trunk_layers).map(|_| Dense::he_uniform(config.width, config.width, rng)));
        Self {
            trunk,
            backcast: Dense::uniform(config.width, config.lookback, 1.0 / (config.width as f64).sqrt(), rng),
            forecast: Dense::zeros(config.width, 1),
        }
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> BlockNodes {
        BlockNodes {
            trunk: self.trunk.iter().map(|d| d.bind(tape, trainable)).collect(),
            backcast: self.backcast.bind(tape, trainable),
            forecast: self.forecast.bind(tape, trainable),
        }
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.trunk
            .iter()
            .chain([&self.backcast, &self.forecast])
            .flat_map(|d| d.tensors())
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.trunk
            .iter_mut()
            .chain([&mut self.backcast, &mut self.forecast])
            .flat_map(|d| d.tensors_mut())
    }
}

impl BlockNodes {
    /// Returns `(backcast (B, ζ), forecast (B, 1))` for a batch `x` of shape `(B, ζ)`.
    fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId), AutodiffError> {
        let mut h = x;
        for layer in &self.trunk {
            let z = layer.forward(tape, h)?;
            h = tape.relu(z);
        }
        Ok((self.backcast.forward(tape, h)?, self.forecast.forward(tape, h)?))
    }

    fn ids(&self) -> Vec<NodeId> {
        self.trunk
            .iter()
            .chain([&self.backcast, &self.forecast])
            .flat_map(|d| d.ids())
            .collect()
    }
}

fn batch_tensor(rows: &[Vec<f64>], cols: usize) -> Tensor {
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Tensor::matrix(rows.len(), cols, data).expect("rectangular batch")
}

/// Single forward pass of one block on a normalized window.
pub fn block_forward(block: &Block, window: &[f64]) -> Result<(Vec<f64>, f64), PredictorError> {
    let lookback = block.backcast.outputs();
    if window.len() != lookback {
        return Err(PredictorError::WindowLength {
            expected: lookback,
            got: window.len(),
        });
    }
    let mut tape = Tape::new();
    let nodes = block.bind(&mut tape, false);
    let x = tape.constant(batch_tensor(&[window.to_vec()], lookback));
    let (b, f) = nodes.forward(&mut tape, x)?;
    Ok((tape.value(b).data().to_vec(), tape.value(f).item()))
}

/// Per-block outputs of a forward pass on one normalized window.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub backcasts: Vec<Vec<f64>>,
    pub forecasts: Vec<f64>,
    pub residual: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastModel {
    pub config: ForecastConfig,
    pub blocks: Vec<Block>,
}

pub struct ModelNodes {
    blocks: Vec<BlockNodes>,
}

impl ModelNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        self.blocks.iter().flat_map(BlockNodes::ids).collect()
    }
}

impl ForecastModel {
    pub fn zeros(config: ForecastConfig) -> Self {
        let blocks = (0..config.num_blocks()).map(|_| Block::zeros(&config)).collect();
        Self { config, blocks }
    }

    pub fn init(config: ForecastConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..config.num_blocks()).map(|_| Block::init(&config, &mut rng)).collect();
        Self { config, blocks }
    }

    pub fn lookback(&self) -> usize {
        self.config.lookback
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.blocks.iter().flat_map(Block::tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.blocks.iter_mut().flat_map(Block::tensors_mut)
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelNodes {
        ModelNodes {
            blocks: self.blocks.iter().map(|b| b.bind(tape, trainable)).collect(),
        }
    }

    /// Forecast `(B, 1)` for a normalized batch `(B, ζ)`, together with the
    /// per-block backcasts and forecasts and the final residual.
    pub fn forward_nodes(
        &self,
        tape: &mut Tape,
        nodes: &ModelNodes,
        x: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>, Vec<NodeId>, NodeId), AutodiffError> {
        let mut residual = x;
        let mut backcasts = Vec::with_capacity(nodes.blocks.len());
        let mut forecasts = Vec::with_capacity(nodes.blocks.len());
        let mut total: Option<NodeId> = None;
        for block in &nodes.blocks {
            let (b, f) = block.forward(tape, residual)?;
            residual = tape.sub(residual, b)?;
            total = Some(match total {
                None => f,
                Some(t) => tape.add(t, f)?,
            });
            backcasts.push(b);
            forecasts.push(f);
        }
        Ok((total.expect("at least one block"), backcasts, forecasts, residual))
    }

    /// Forecasts in the normalized domain for a batch of normalized windows.
    pub fn predict_normalized(&self, windows: &[Vec<f64>]) -> Result<Vec<f64>, PredictorError> {
        if let Some(w) = windows.iter().find(|w| w.len() != self.lookback()) {
            return Err(PredictorError::WindowLength {
                expected: self.lookback(),
                got: w.len(),
            });
        }
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let nodes = self.bind(&mut tape, false);
        let x = tape.constant(batch_tensor(windows, self.lookback()));
        let (y, ..) = self.forward_nodes(&mut tape, &nodes, x)?;
        Ok(tape.value(y).data().to_vec())
    }

    pub fn decompose(&self, window: &[f64]) -> Result<Decomposition, PredictorError> {
        if window.len() != self.lookback() {
            return Err(PredictorError::WindowLength {
                expected: self.lookback(),
                got: window.len(),
            });
        }
        let mut tape = Tape::new();
        let nodes = self.bind(&mut tape, false);
        let x = tape.constant(batch_tensor(&[window.to_vec()], self.lookback()));
        let (_, b, f, r) = self.forward_nodes(&mut tape, &nodes, x)?;
        Ok(Decomposition {
            backcasts: b.iter().map(|id| tape.value(*id).data().to_vec()).collect(),
            forecasts: f.iter().map(|id| tape.value(*id).item()).collect(),
            residual: tape.value(r).data().to_vec(),
        })
    }
}

/// One-step forecaster over raw (unnormalized) windows.
pub trait Forecaster {
    fn lookback(&self) -> usize;
    fn predict_batch(&self, windows: &[&[f64]]) -> Result<Vec<f64>, PredictorError>;
}

impl Forecaster for ForecastModel {
    fn lookback(&self) -> usize {
        self.config.lookback
    }

    fn predict_batch(&self, windows: &[&[f64]]) -> Result<Vec<f64>, PredictorError> {
        let norms: Vec<WindowNorm> = windows.iter().map(|w| WindowNorm::fit(w)).collect();
        let inputs: Vec<Vec<f64>> = windows.iter().zip(&norms).map(|(w, n)| n.apply(w)).collect();
        let out = self.predict_normalized(&inputs)?;
        Ok(out.iter().zip(&norms).map(|(y, n)| n.denormalize(*y)).collect())
    }
}

/// Repeats the last observed value.
#[derive(Clone, Copy, Debug)]
pub struct Persistence {
    pub lookback: usize,
}

pub fn persistence_baseline(window: &[f64]) -> f64 {
    *window.last().expect("non-empty window")
}

impl Forecaster for Persistence {
    fn lookback(&self) -> usize {
        self.lookback
    }

    fn predict_batch(&self, windows: &[&[f64]]) -> Result<Vec<f64>, PredictorError> {
        Ok(windows.iter().map(|w| persistence_baseline(w)).collect())
    }
}

/// Least-squares linear autoregression on normalized windows.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearAr {
    pub coefficients: Vec<f64>,
    pub bias: f64,
}

impl LinearAr {
    pub fn fit(samples: &[ForecastSample], ridge: f64) -> Result<Self, PredictorError> {
        let first = samples.first().ok_or(PredictorError::NoSamples)?;
        let k = first.window.len() + 1;
        let mut gram = DMatrix::<f64>::zeros(k, k);
        let mut rhs = DVector::<f64>::zeros(k);
        for s in samples {
            let (w, t) = s.normalized();
            let mut x = w;
            x.push(1.0);
            let x = DVector::from_vec(x);
            gram += &x * x.transpose();
            rhs += &x * t;
        }
        let lambda = ridge * (gram.trace() / k as f64).max(f64::MIN_POSITIVE);
        for i in 0..k {
            gram[(i, i)] += lambda;
        }
        let sol = gram
            .cholesky()
            .ok_or_else(|| PredictorError::Config("autoregression normal equations are singular".into()))?
            .solve(&rhs);
        Ok(Self {
            coefficients: sol.as_slice()[..k - 1].to_vec(),
            bias: sol[k - 1],
        })
    }
}

impl Forecaster for LinearAr {
    fn lookback(&self) -> usize {
        self.coefficients.len()
    }

    fn predict_batch(&self, windows: &[&[f64]]) -> Result<Vec<f64>, PredictorError> {
        windows
            .iter()
            .map(|w| {
                if w.len() != self.coefficients.len() {
                    return Err(PredictorError::WindowLength {
                        expected: self.coefficients.len(),
                        got: w.len(),
                    });
                }
                let n = WindowNorm::fit(w);
                let y = n.apply(w).iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>() + self.bias;
                Ok(n.denormalize(y))
            })
            .collect()
    }
}

/// Mean absolute percentage error with a division guard.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MapeReport {
    pub mape: f64,
    pub samples: usize,
    pub excluded: usize,
}

/// Samples with `|z| < 1e-12 · max|z|` are skipped and counted as excluded.
pub fn mape(truth: &[f64], predicted: &[f64]) -> MapeReport {
    assert_eq!(truth.len(), predicted.len());
    let scale = truth.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = 1e-12 * scale;
    let (mut sum, mut samples, mut excluded) = (0.0, 0, 0);
    for (z, zh) in truth.iter().zip(predicted) {
        if z.abs() < floor || *z == 0.0 {
            excluded += 1;
            continue;
        }
        sum += ((z - zh) / z).abs();
        samples += 1;
    }
    MapeReport {
        mape: if samples > 0 { 100.0 * sum / samples as f64 } else { 0.0 },
        samples,
        excluded,
    }
}

/// MAPE of one-step forecasts over every window of every series.
pub fn evaluate_mape(model: &dyn Forecaster, series: &[Vec<f64>]) -> Result<MapeReport, PredictorError> {
    let lookback = model.lookback();
    let mut windows: Vec<&[f64]> = Vec::new();
    let mut truth = Vec::new();
    for s in series {
        if s.len() < lookback + 1 {
            return Err(PredictorError::SeriesTooShort { len: s.len(), lookback });
        }
        for w in s.windows(lookback + 1) {
            windows.push(&w[..lookback]);
            truth.push(w[lookback]);
        }
    }
    let mut predicted = Vec::with_capacity(truth.len());
    for chunk in windows.chunks(4096) {
        predicted.extend(model.predict_batch(chunk)?);
    }
    Ok(mape(&truth, &predicted))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Fraction of series (or of windows, with a single series) held out for
    /// early stopping.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 40,
            patience: 10,
            validation_fraction: 0.15,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedPredictor {
    /// Weights at the epoch with the lowest validation loss.
    pub model: ForecastModel,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
    /// Validation loss of the persistence forecast (zero in the normalized domain).
    pub persistence_val_loss: f64,
}

struct Normalized {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

impl Normalized {
    fn from_samples(samples: &[ForecastSample]) -> Self {
        let (inputs, targets) = samples.iter().map(ForecastSample::normalized).unzip();
        Self { inputs, targets }
    }

    fn len(&self) -> usize {
        self.targets.len()
    }
}

fn validation_loss(model: &ForecastModel, data: &Normalized) -> Result<f64, PredictorError> {
    let mut total = 0.0;
    for (xs, ys) in data.inputs.chunks(2048).zip(data.targets.chunks(2048)) {
        let pred = model.predict_normalized(xs)?;
        total += pred.iter().zip(ys).map(|(p, y)| (p - y).powi(2)).sum::<f64>();
    }
    Ok(total / data.len().max(1) as f64)
}

/// Mean squared normalized error of `model` on a batch, on the tape.
fn batch_loss(
    model: &ForecastModel,
    tape: &mut Tape,
    nodes: &ModelNodes,
    inputs: &[Vec<f64>],
    targets: &[f64],
) -> Result<NodeId, AutodiffError> {
    let x = tape.constant(batch_tensor(inputs, model.lookback()));
    let y = tape.constant(Tensor::matrix(targets.len(), 1, targets.to_vec())?);
    let (pred, ..) = model.forward_nodes(tape, nodes, x)?;
    let err = tape.sub(pred, y)?;
    let ss = tape.sum_squares(err);
    Ok(tape.scale(ss, 1.0 / targets.len() as f64))
}

fn split_samples(
    series: &[Vec<f64>],
    lookback: usize,
    fraction: f64,
) -> Result<(Vec<ForecastSample>, Vec<ForecastSample>), PredictorError> {
    let mut per_series = Vec::with_capacity(series.len());
    for s in series {
        per_series.push(windows_from_series(s, lookback)?);
    }
    if per_series.is_empty() {
        return Err(PredictorError::NoSamples);
    }
    if per_series.len() >= 2 {
        let n_val = ((per_series.len() as f64 * fraction).round() as usize).clamp(1, per_series.len() - 1);
        let train_n = per_series.len() - n_val;
        let val = per_series.split_off(train_n);
        Ok((per_series.concat(), val.concat()))
    } else {
        let mut all = per_series.pop().unwrap_or_default();
        let n_val = ((all.len() as f64 * fraction).round() as usize).clamp(1, all.len().max(2) - 1);
        if all.len() < 2 {
            return Ok((all.clone(), all));
        }
        let val = all.split_off(all.len() - n_val);
        Ok((all, val))
    }
}

/// Adam on the mean squared one-step error with early stopping on a held-out
/// part of `series`.
pub fn train_predictor(
    config: &ForecastConfig,
    series: &[Vec<f64>],
    train: &PredictorTrainConfig,
) -> Result<TrainedPredictor, PredictorError> {
    config.validate()?;
    if train.batch_size == 0 || train.max_epochs == 0 || !(0.0..1.0).contains(&train.validation_fraction) {
        return Err(PredictorError::Config(format!("{train:?}")));
    }
    let (train_samples, val_samples) = split_samples(series, config.lookback, train.validation_fraction)?;
    let train_data = Normalized::from_samples(&train_samples);
    let val_data = Normalized::from_samples(&val_samples);
    if train_data.len() == 0 {
        return Err(PredictorError::NoSamples);
    }

    let mut model = ForecastModel::init(config.clone(), train.seed);
    let mut opt = Adam::new(train.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x005E_ED0F_0DE5);
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    let persistence_val_loss = val_data.targets.iter().map(|y| y * y).sum::<f64>() / val_data.len().max(1) as f64;
    let mut best = (validation_loss(&model, &val_data)?, model.clone(), 0);
    let mut curve = Vec::new();
    let mut stale = 0;

    for epoch in 1..=train.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(train.batch_size) {
            let inputs: Vec<Vec<f64>> = idx.iter().map(|i| train_data.inputs[*i].clone()).collect();
            let targets: Vec<f64> = idx.iter().map(|i| train_data.targets[*i]).collect();
            let mut tape = Tape::new();
            let nodes = model.bind(&mut tape, true);
            let loss = batch_loss(&model, &mut tape, &nodes, &inputs, &targets)?;
            total += tape.value(loss).item() * idx.len() as f64;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Tensor> = nodes
                .ids()
                .into_iter()
                .zip(model.tensors())
                .map(|(id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
                .collect();
            opt.step(model.tensors_mut().collect(), &g);
        }
        let val_loss = validation_loss(&model, &val_data)?;
        if val_loss < best.0 {
            best = (val_loss, model.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
        }
        curve.push(EpochStats {
            epoch,
            train_loss: total / train_data.len() as f64,
            val_loss,
            best_val_loss: best.0,
        });
        if stale >= train.patience {
            break;
        }
    }
    Ok(TrainedPredictor {
        model: best.1,
        curve,
        best_epoch: best.2,
        persistence_val_loss,
    })
}

/// One forecast model per parameter type.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorBundle {
    pub models: Vec<(SeriesParam, ForecastModel)>,
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    schema_version: u32,
    normalization: String,
    models: Vec<BundleEntry>,
}

#[derive(Serialize, Deserialize)]
struct BundleEntry {
    param: SeriesParam,
    config: ForecastConfig,
    values: usize,
}

impl PredictorBundle {
    pub fn model(&self, param: SeriesParam) -> Option<&ForecastModel> {
        self.models.iter().find(|(p, _)| *p == param).map(|(_, m)| m)
    }

    pub fn lookback(&self) -> usize {
        self.models.first().map_or(0, |(_, m)| m.lookback())
    }

    /// Forecast of every path for slots `lookback..slots.len()`; parameters
    /// without a model are carried over from the previous slot.
    pub fn forecast_slots(&self, slots: &[Vec<PathParams>]) -> Result<Vec<Vec<PathParams>>, PredictorError> {
        let lb = self.lookback();
        if slots.len() < lb + 1 {
            return Err(PredictorError::SeriesTooShort { len: slots.len(), lookback: lb });
        }
        let mut out: Vec<Vec<PathParams>> = slots[lb - 1..slots.len() - 1].to_vec();
        let paths = slots[0].len();
        for (param, model) in &self.models {
            for p in 0..paths {
                let values: Vec<f64> = slots.iter().map(|s| param.get(&s[p])).collect();
                let windows: Vec<&[f64]> = (lb..slots.len()).map(|t| &values[t - lb..t]).collect();
                let pred = model.predict_batch(&windows)?;
                for (slot, v) in out.iter_mut().zip(pred) {
                    param.set(&mut slot[p], v);
                }
            }
        }
        Ok(out)
    }

    pub fn to_container(&self) -> Result<Container, PredictorError> {
        let mut body = Vec::new();
        let mut models = Vec::new();
        for (param, m) in &self.models {
            let flat = flatten_params(m.tensors());
            models.push(BundleEntry {
                param: *param,
                config: m.config.clone(),
                values: flat.len(),
            });
            body.extend(flat);
        }
        let header = BundleHeader {
            schema_version: PREDICTOR_SCHEMA_VERSION,
            normalization: "window_last_value_diff_rms".into(),
            models,
        };
        Ok(Container::new(ContainerKind::PredictorWeights, &header, body)?)
    }

    pub fn from_container(c: &Container) -> Result<Self, PredictorError> {
        let header: BundleHeader = c.header_as()?;
        if header.schema_version != PREDICTOR_SCHEMA_VERSION {
            return Err(PredictorError::Weights(format!("schema version {}", header.schema_version)));
        }
        let expected: usize = header.models.iter().map(|e| e.values).sum();
        if expected != c.body.len() {
            return Err(ContainerError::BodyLength {
                expected,
                got: c.body.len(),
            }
            .into());
        }
        let mut offset = 0;
        let mut models = Vec::new();
        for e in header.models {
            e.config.validate()?;
            let mut m = ForecastModel::zeros(e.config);
            if m.num_params() != e.values {
                return Err(PredictorError::Weights(format!(
                    "{} model declares {} values, architecture has {}",
                    e.param.name(),
                    e.values,
                    m.num_params()
                )));
            }
            unflatten_params(m.tensors_mut(), &c.body[offset..offset + e.values]);
            offset += e.values;
            models.push((e.param, m));
        }
        Ok(Self { models })
    }

    pub fn save(&self, path: &Path) -> Result<(), PredictorError> {
        Ok(self.to_container()?.write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, PredictorError> {
        Self::from_container(&Container::read(path, ContainerKind::PredictorWeights)?)
    }
}
