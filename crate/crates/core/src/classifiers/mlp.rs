//! One-hidden-layer perceptron: sigmoid hidden units, softmax output,
//! mean cross-entropy loss, minibatch gradient descent with momentum.
//!
//! The maths is generic over the float type so the gradient can be checked
//! in f64; production training runs in f32.

use std::time::Instant;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, LinalgScalar, Zip};
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{check_training_set, ModelWeights, TrainedModel, TrainingMetadata};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    Full,
    Size(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub hidden_units: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: BatchSize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_units: 1600,
            epochs: 2000,
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: BatchSize::Size(128),
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_units == 0 {
            return Err(Error::Parameter("MLP needs hidden_units >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!("MLP learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!("MLP momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == BatchSize::Size(0) {
            return Err(Error::Parameter("MLP batch size must be >= 1".into()));
        }
        Ok(())
    }

    fn echo(&self) -> Vec<(String, String)> {
        let batch = match self.batch_size {
            BatchSize::Full => "full".to_owned(),
            BatchSize::Size(n) => n.to_string(),
        };
        [
            ("mlp.hidden_units", self.hidden_units.to_string()),
            ("mlp.epochs", self.epochs.to_string()),
            ("mlp.learning_rate", self.learning_rate.to_string()),
            ("mlp.momentum", self.momentum.to_string()),
            ("mlp.batch_size", batch),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect()
    }
}

/// Network parameters; also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

impl<T: Float + LinalgScalar> MlpParams<T> {
    /// Seeded uniform `±sqrt(6 / (fan_in + fan_out))` weights, zero biases.
    pub fn init(input_dim: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let layer = |rows: usize, cols: usize, which: u64| {
            let mut r = rng::stream(seed, &[rng::tag("mlp_init"), which]);
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || T::from(r.random_range(-limit..limit)).unwrap())
        };
        Self {
            w1: layer(input_dim, hidden, 0),
            b1: Array1::zeros(hidden),
            w2: layer(hidden, classes, 1),
            b2: Array1::zeros(classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }
}

fn sigmoid<T: Float>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// `sigmoid(x·w + b)`.
pub(crate) fn sigmoid_layer<T: Float + LinalgScalar>(x: ArrayView2<'_, T>, w: ArrayView2<'_, T>, b: ArrayView1<'_, T>) -> Array2<T> {
    let mut z = x.dot(&w);
    Zip::from(z.rows_mut()).for_each(|mut row| {
        row.iter_mut().zip(b).for_each(|(v, &bi)| *v = sigmoid(*v + bi));
    });
    z
}

pub(crate) fn softmax_rows<T: Float>(z: &mut Array2<T>) {
    for mut row in z.rows_mut() {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        row.iter_mut().for_each(|v| {
            *v = (*v - m).exp();
            total = total + *v;
        });
        row.iter_mut().for_each(|v| *v = *v / total);
    }
}

struct Backward<T> {
    loss: f64,
    hidden: Array2<T>,
    /// Loss gradient with respect to the output pre-activations.
    d_out: Array2<T>,
    /// Loss gradient with respect to the hidden pre-activations.
    d_hidden: Array2<T>,
}

fn backward<T: Float + LinalgScalar>(p: &MlpParams<T>, x: ArrayView2<'_, T>, labels: &[u8]) -> Backward<T> {
    let n = x.nrows();
    let hidden = sigmoid_layer(x, p.w1.view(), p.b1.view());
    let mut probs = hidden.dot(&p.w2) + &p.b2;
    softmax_rows(&mut probs);
    let inv_n = T::from(1.0 / n as f64).unwrap();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let py = probs[[i, y as usize]].to_f64().unwrap();
        loss -= py.max(f64::MIN_POSITIVE).ln();
        probs[[i, y as usize]] = probs[[i, y as usize]] - T::one();
    }
    probs.mapv_inplace(|v| v * inv_n);
    let mut d_hidden = probs.dot(&p.w2.t());
    Zip::from(&mut d_hidden)
        .and(&hidden)
        .for_each(|d, &h| *d = *d * h * (T::one() - h));
    Backward {
        loss: loss / n as f64,
        hidden,
        d_out: probs,
        d_hidden,
    }
}

/// Mean cross-entropy over `(x, labels)` and its gradient.
pub fn loss_and_gradient<T: Float + LinalgScalar>(p: &MlpParams<T>, x: ArrayView2<'_, T>, labels: &[u8]) -> (f64, MlpParams<T>) {
    let b = backward(p, x, labels);
    let grad = MlpParams {
        w1: x.t().dot(&b.d_hidden),
        b1: b.d_hidden.sum_axis(Axis(0)),
        w2: b.hidden.t().dot(&b.d_out),
        b2: b.d_out.sum_axis(Axis(0)),
    };
    (b.loss, grad)
}

pub fn loss<T: Float + LinalgScalar>(p: &MlpParams<T>, x: ArrayView2<'_, T>, labels: &[u8]) -> f64 {
    backward(p, x, labels).loss
}

/// One momentum step `v ← μv − η∇`, `θ ← θ + v` on a minibatch. Returns the
/// minibatch loss before the step.
fn momentum_step(p: &mut MlpParams<f32>, v: &mut MlpParams<f32>, x: ArrayView2<'_, f32>, labels: &[u8], lr: f32, mu: f32) -> f64 {
    let b = backward(p, x, labels);
    general_mat_mul(-lr, &x.t(), &b.d_hidden, mu, &mut v.w1);
    general_mat_mul(-lr, &b.hidden.t(), &b.d_out, mu, &mut v.w2);
    Zip::from(&mut v.b1)
        .and(&b.d_hidden.sum_axis(Axis(0)))
        .for_each(|v, &g| *v = mu * *v - lr * g);
    Zip::from(&mut v.b2)
        .and(&b.d_out.sum_axis(Axis(0)))
        .for_each(|v, &g| *v = mu * *v - lr * g);
    p.w1 += &v.w1;
    p.b1 += &v.b1;
    p.w2 += &v.w2;
    p.b2 += &v.b2;
    b.loss
}

pub fn train_mlp(features: &FeatureSet, config: &MlpConfig) -> Result<TrainedModel> {
    config.validate()?;
    check_training_set(features)?;
    let start = Instant::now();
    let (n, d, k) = (features.len(), features.dim(), features.class_count);
    let mut params = MlpParams::<f32>::init(d, config.hidden_units, k, config.seed);
    let mut velocity = params.zeros_like();
    let batch = match config.batch_size {
        BatchSize::Full => n,
        BatchSize::Size(b) => b.min(n),
    };
    let (lr, mu) = (config.learning_rate as f32, config.momentum as f32);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if batch < n {
            order.sort_unstable();
            order.shuffle(&mut rng::stream(config.seed, &[rng::tag("mlp_order"), epoch as u64]));
        }
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let loss = if batch == n {
                momentum_step(&mut params, &mut velocity, features.vectors.view(), &features.labels, lr, mu)
            } else {
                let x = features.vectors.select(Axis(0), chunk);
                let y: Vec<u8> = chunk.iter().map(|&i| features.labels[i]).collect();
                momentum_step(&mut params, &mut velocity, x.view(), &y, lr, mu)
            };
            total += loss * chunk.len() as f64;
        }
        let mean = total / n as f64;
        if !mean.is_finite() || params.w1.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { epoch: epoch + 1 });
        }
        log::debug!("mlp epoch {}: loss {mean:.6}", epoch + 1);
        history.push(mean);
    }
    let metadata = TrainingMetadata {
        config: config.echo(),
        seed: Some(config.seed),
        wall_time_s: start.elapsed().as_secs_f64(),
        history,
        converged: None,
    };
    let MlpParams { w1, b1, w2, b2 } = params;
    TrainedModel::new(ModelWeights::Mlp { w1, b1, w2, b2 }, d, k, metadata)
}
