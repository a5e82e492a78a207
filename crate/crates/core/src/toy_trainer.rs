//! Desk-scale classifiers with hand-written gradients.
//!
//! Two architectures: softmax regression, and a single tanh hidden layer
//! followed by a softmax layer. Parameters live in one flat vector:
//!
//! ```text
//! linear:      [ W (C×m) | b (C) ]
//! one_hidden:  [ W1 (E×m) | b1 (E) | W2 (C×E) | b2 (C) ]
//! ```
//!
//! The last layer is always the trailing `C·(E+1)` block, laid out exactly
//! like [`last_layer_full_proxy`](crate::gradient_proxy::last_layer_full_proxy),
//! where `E = m` for the linear model.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DatasetState;
use crate::epic_defense::RoundReport;
use crate::error::{Error, Result};
use crate::gradient_proxy::{class_residual_proxy, cross_entropy, outer_with_bias, softmax, ProxyMatrix, ProxyMode};
use crate::rng::{derive_seed, seeded, shuffle, EpicRng};
use crate::scalar::{all_finite, Real};

/// Examples per reduction chunk. Fixed so the summation order never depends
/// on the thread count.
const REDUCE_CHUNK: usize = 64;

pub const DEFAULT_HIDDEN_WIDTH: usize = 16;
pub const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    #[default]
    Linear,
    OneHidden {
        #[serde(default = "default_width")]
        width: usize,
    },
}

fn default_width() -> usize {
    DEFAULT_HIDDEN_WIDTH
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T> {
    arch: Architecture,
    classes: usize,
    input_dim: usize,
    params: Vec<T>,
}

/// Penultimate activations and logits for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward<T> {
    pub embedding: Vec<T>,
    pub logits: Vec<T>,
}

impl<T: Real> ToyModel<T> {
    pub fn param_count(arch: Architecture, classes: usize, input_dim: usize) -> usize {
        match arch {
            Architecture::Linear => classes * (input_dim + 1),
            Architecture::OneHidden { width } => width * (input_dim + 1) + classes * (width + 1),
        }
    }

    pub fn zeros(arch: Architecture, classes: usize, input_dim: usize) -> Result<Self> {
        Self::from_params(arch, classes, input_dim, vec![T::zero(); Self::param_count(arch, classes, input_dim)])
    }

    pub fn from_params(arch: Architecture, classes: usize, input_dim: usize, params: Vec<T>) -> Result<Self> {
        if classes < 2 || input_dim == 0 {
            return Err(Error::invalid("model needs ≥ 2 classes and input_dim ≥ 1"));
        }
        if let Architecture::OneHidden { width: 0 } = arch {
            return Err(Error::invalid("hidden width must be positive"));
        }
        let want = Self::param_count(arch, classes, input_dim);
        if params.len() != want {
            return Err(Error::invalid(format!("{} parameters supplied, architecture needs {want}", params.len())));
        }
        Ok(Self { arch, classes, input_dim, params })
    }

    /// Parameters drawn uniformly from `[-0.1, 0.1]`.
    pub fn init(arch: Architecture, classes: usize, input_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let params = (0..Self::param_count(arch, classes, input_dim))
            .map(|_| T::lit(rng.random_range(-INIT_RANGE..=INIT_RANGE)))
            .collect();
        Self::from_params(arch, classes, input_dim, params)
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn with_params(&self, params: Vec<T>) -> Result<Self> {
        Self::from_params(self.arch, self.classes, self.input_dim, params)
    }

    /// Width of the input to the last layer.
    pub fn embedding_dim(&self) -> usize {
        match self.arch {
            Architecture::Linear => self.input_dim,
            Architecture::OneHidden { width } => width,
        }
    }

    /// Range of the last layer's parameters inside the flat vector.
    pub fn last_layer_range(&self) -> std::ops::Range<usize> {
        let len = self.classes * (self.embedding_dim() + 1);
        self.params.len() - len..self.params.len()
    }

    pub fn forward(&self, x: &[T]) -> Forward<T> {
        let embedding = match self.arch {
            Architecture::Linear => x.to_vec(),
            Architecture::OneHidden { width } => {
                let m = self.input_dim;
                let (w1, rest) = self.params.split_at(width * m);
                let b1 = &rest[..width];
                (0..width)
                    .map(|h| {
                        let row = &w1[h * m..(h + 1) * m];
                        (row.iter().zip(x).fold(b1[h], |acc, (&w, &xi)| acc + w * xi)).tanh()
                    })
                    .collect()
            }
        };
        let logits = self.head(&embedding);
        Forward { embedding, logits }
    }

    fn head(&self, embedding: &[T]) -> Vec<T> {
        let e = embedding.len();
        let last = &self.params[self.last_layer_range()];
        let (w, b) = last.split_at(self.classes * e);
        (0..self.classes)
            .map(|c| w[c * e..(c + 1) * e].iter().zip(embedding).fold(b[c], |acc, (&wi, &hi)| acc + wi * hi))
            .collect()
    }

    pub fn predict(&self, x: &[T]) -> usize {
        argmax(&self.forward(x).logits)
    }

    /// Adds the gradient of `CE(x, y)` into `grad` and returns the loss.
    pub fn accumulate_example_grad(&self, x: &[T], y: usize, grad: &mut [T]) -> T {
        let fwd = self.forward(x);
        let mut r = softmax(&fwd.logits);
        r[y] = r[y] - T::one();
        let loss = cross_entropy(&fwd.logits, y);

        let e = fwd.embedding.len();
        let last = self.last_layer_range();
        let (front, back) = grad.split_at_mut(last.start);
        let (gw, gb) = back.split_at_mut(self.classes * e);
        for c in 0..self.classes {
            for (g, &h) in gw[c * e..(c + 1) * e].iter_mut().zip(&fwd.embedding) {
                *g = *g + r[c] * h;
            }
            gb[c] = gb[c] + r[c];
        }

        if let Architecture::OneHidden { width } = self.arch {
            let m = self.input_dim;
            let w2 = &self.params[last.start..last.start + self.classes * width];
            let (gw1, gb1) = front.split_at_mut(width * m);
            for hdx in 0..width {
                let back_h = (0..self.classes).fold(T::zero(), |acc, c| acc + w2[c * width + hdx] * r[c]);
                let h = fwd.embedding[hdx];
                let da = back_h * (T::one() - h * h);
                for (g, &xi) in gw1[hdx * m..(hdx + 1) * m].iter_mut().zip(x) {
                    *g = *g + da * xi;
                }
                gb1[hdx] = gb1[hdx] + da;
            }
        }
        loss
    }

    pub fn example_grad(&self, x: &[T], y: usize) -> (T, Vec<T>) {
        let mut g = vec![T::zero(); self.params.len()];
        let loss = self.accumulate_example_grad(x, y, &mut g);
        (loss, g)
    }

    /// Proxy for one example under the chosen mode.
    pub fn proxy(&self, x: &[T], y: usize, mode: ProxyMode) -> Result<Vec<T>> {
        let fwd = self.forward(x);
        match mode {
            ProxyMode::ClassResidual => class_residual_proxy(&fwd.logits, y),
            ProxyMode::LastLayerFull => {
                let r = class_residual_proxy(&fwd.logits, y)?;
                Ok(outer_with_bias(&r, &fwd.embedding))
            }
        }
    }
}

pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy over `batch` (original indices) and its exact gradient.
pub fn loss_and_grad<T: Real>(model: &ToyModel<T>, data: &DatasetState<T>, batch: &[usize]) -> Result<(T, Vec<T>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    check_compatible(model, data)?;
    if let Some(&bad) = batch.iter().find(|&&i| i >= data.len()) {
        return Err(Error::invalid(format!("batch index {bad} out of range")));
    }
    let p = model.params.len();
    let partials: Vec<(T, Vec<T>)> = batch
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut g = vec![T::zero(); p];
            let mut loss = T::zero();
            for &i in chunk {
                loss = loss + model.accumulate_example_grad(data.x(i), data.label(i), &mut g);
            }
            (loss, g)
        })
        .collect();
    let mut total = T::zero();
    let mut grad = vec![T::zero(); p];
    for (l, g) in partials {
        total = total + l;
        grad.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b);
    }
    let scale = T::one() / T::lit(batch.len() as f64);
    grad.iter_mut().for_each(|g| *g = *g * scale);
    Ok((total * scale, grad))
}

/// Mean loss and accuracy over `indices` without gradients.
pub fn evaluate<T: Real>(model: &ToyModel<T>, data: &DatasetState<T>, indices: &[usize]) -> (T, f64) {
    if indices.is_empty() {
        return (T::zero(), 0.0);
    }
    let (loss, correct) = indices
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            chunk.iter().fold((T::zero(), 0usize), |(l, c), &i| {
                let fwd = model.forward(data.x(i));
                let y = data.label(i);
                (l + cross_entropy(&fwd.logits, y), c + usize::from(argmax(&fwd.logits) == y))
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((T::zero(), 0usize), |(l, c), (l2, c2)| (l + l2, c + c2));
    (loss / T::lit(indices.len() as f64), correct as f64 / indices.len() as f64)
}

fn check_compatible<T: Real>(model: &ToyModel<T>, data: &DatasetState<T>) -> Result<()> {
    if model.input_dim != data.dim() || model.classes != data.classes() {
        return Err(Error::invalid(format!(
            "model expects {} features / {} classes, dataset has {} / {}",
            model.input_dim,
            model.classes,
            data.dim(),
            data.classes()
        )));
    }
    Ok(())
}

/// `θ − η·g`, refusing non-finite gradients.
pub fn gd_update<T: Real>(params: &[T], grad: &[T], eta: T) -> Result<Vec<T>> {
    if eta.is_nan() || eta <= T::zero() {
        return Err(Error::invalid("learning rate must be positive"));
    }
    if params.len() != grad.len() {
        return Err(Error::invalid("gradient length does not match parameters"));
    }
    if !all_finite(grad) {
        return Err(Error::NumericalDivergence { epoch: None });
    }
    let next: Vec<T> = params.iter().zip(grad).map(|(&p, &g)| p - eta * g).collect();
    if !all_finite(&next) {
        return Err(Error::NumericalDivergence { epoch: None });
    }
    Ok(next)
}

/// One gradient-descent step on `batch`; returns the new model and the
/// batch loss at the old parameters.
pub fn gd_step<T: Real>(
    model: &ToyModel<T>,
    data: &DatasetState<T>,
    batch: &[usize],
    eta: T,
) -> Result<(ToyModel<T>, T)> {
    let (loss, grad) = loss_and_grad(model, data, batch)?;
    let params = gd_update(&model.params, &grad, eta)?;
    Ok((model.with_params(params)?, loss))
}

/// Step decay: `base / factor^(number of decay epochs ≤ epoch)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
}

fn default_decay_factor() -> f64 {
    10.0
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self { base, decay_epochs: Vec::new(), decay_factor: 1.0 }
    }

    /// Starting rate 0.1, divided by 10 at epochs 100 and 150.
    pub fn step_decay_200() -> Self {
        Self { base: 0.1, decay_epochs: vec![100, 150], decay_factor: 10.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base.is_finite() && self.base > 0.0) {
            return Err(Error::invalid("base learning rate must be positive"));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return Err(Error::invalid("decay factor must be positive"));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("decay epochs must be sorted"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.base / self.decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BatchMode {
    #[default]
    Full,
    Minibatch {
        size: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord<T> {
    pub epoch: usize,
    pub lr: T,
    /// Mean training loss on the active set after the epoch's updates.
    pub loss: T,
    pub accuracy: f64,
    pub active: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace<T> {
    pub epochs: Vec<EpochRecord<T>>,
    #[serde(default)]
    pub rounds: Vec<RoundReport>,
}

impl<T> Default for TrainTrace<T> {
    fn default() -> Self {
        Self { epochs: Vec::new(), rounds: Vec::new() }
    }
}

/// Epoch driver shared by plain training and the defended loop, so the two
/// agree exactly when the defense never fires.
#[derive(Debug, Clone)]
pub struct Trainer {
    schedule: LrSchedule,
    batch: BatchMode,
    rng: Option<EpicRng>,
}

impl Trainer {
    pub fn new(schedule: LrSchedule, batch: BatchMode) -> Result<Self> {
        schedule.validate()?;
        let rng = match batch {
            BatchMode::Full => None,
            BatchMode::Minibatch { size: 0, .. } => return Err(Error::invalid("minibatch size must be positive")),
            BatchMode::Minibatch { seed, .. } => Some(seeded(derive_seed(seed, 0x6d69_6e69))),
        };
        Ok(Self { schedule, batch, rng })
    }

    pub fn schedule(&self) -> &LrSchedule {
        &self.schedule
    }

    pub fn run_epoch<T: Real>(
        &mut self,
        model: &mut ToyModel<T>,
        data: &DatasetState<T>,
        epoch: usize,
    ) -> Result<EpochRecord<T>> {
        if data.active().is_empty() {
            return Err(Error::invalid("active set is empty"));
        }
        let lr = T::lit(self.schedule.lr_at(epoch));
        let tag = |e: Error| match e {
            Error::NumericalDivergence { .. } => Error::NumericalDivergence { epoch: Some(epoch) },
            other => other,
        };
        match (self.batch, self.rng.as_mut()) {
            (BatchMode::Minibatch { size, .. }, Some(rng)) => {
                let mut order = data.active().to_vec();
                shuffle(rng, &mut order);
                for batch in order.chunks(size) {
                    *model = gd_step(model, data, batch, lr).map_err(tag)?.0;
                }
            }
            _ => {
                *model = gd_step(model, data, data.active(), lr).map_err(tag)?.0;
            }
        }
        let (loss, accuracy) = evaluate(model, data, data.active());
        Ok(EpochRecord { epoch, lr, loss, accuracy, active: data.active().len() })
    }
}

/// Plain training on the active set for `epochs` epochs.
pub fn train<T: Real>(
    model: &mut ToyModel<T>,
    data: &DatasetState<T>,
    schedule: &LrSchedule,
    epochs: usize,
    batch: BatchMode,
) -> Result<TrainTrace<T>> {
    let mut trainer = Trainer::new(schedule.clone(), batch)?;
    let mut trace = TrainTrace::default();
    if epochs > 0 && data.active().is_empty() {
        return Err(Error::invalid("active set is empty"));
    }
    for epoch in 0..epochs {
        trace.epochs.push(trainer.run_epoch(model, data, epoch)?);
    }
    Ok(trace)
}

/// Proxy rows for the active examples, in `data.active()` order.
pub fn extract_proxies<T: Real>(
    model: &ToyModel<T>,
    data: &DatasetState<T>,
    mode: ProxyMode,
) -> Result<ProxyMatrix<T>> {
    proxies_for(model, data, data.active(), mode)
}

/// Proxy rows for an arbitrary list of original indices.
pub fn proxies_for<T: Real>(
    model: &ToyModel<T>,
    data: &DatasetState<T>,
    indices: &[usize],
    mode: ProxyMode,
) -> Result<ProxyMatrix<T>> {
    check_compatible(model, data)?;
    let d = mode.dim(model.classes, model.embedding_dim());
    let rows: Vec<Vec<T>> =
        indices.par_iter().map(|&i| model.proxy(data.x(i), data.label(i), mode)).collect::<Result<_>>()?;
    ProxyMatrix::new(indices.len(), d, rows.concat())
}
