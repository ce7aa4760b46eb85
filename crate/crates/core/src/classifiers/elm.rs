//! Extreme learning machine: a fixed random sigmoid projection followed by
//! a ridge-regression readout onto one-hot targets.

use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};

use super::linalg::solve_ridge;
use super::mlp::sigmoid_layer;
use super::{check_training_set, one_hot, ModelWeights, TrainedModel, TrainingMetadata};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::rng;

/// Rows projected per block while accumulating `HᵀH`.
const GRAM_BLOCK: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct ElmConfig {
    pub hidden_units: usize,
    /// Ridge penalty λ on the readout.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for ElmConfig {
    fn default() -> Self {
        Self {
            hidden_units: 1600,
            lambda: 1e-3,
            seed: 0,
        }
    }
}

impl ElmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_units == 0 {
            return Err(Error::Parameter("ELM needs hidden_units >= 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Parameter(format!("ELM lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("elm.hidden_units".into(), self.hidden_units.to_string()),
            ("elm.lambda".into(), self.lambda.to_string()),
        ]
    }
}

/// Hidden weights and biases, standard normal, from the seed alone.
pub fn hidden_layer(input_dim: usize, hidden: usize, seed: u64) -> (Array2<f32>, Array1<f32>) {
    let mut r = rng::stream(seed, &[rng::tag("elm_hidden")]);
    let w = Array2::from_shape_simple_fn((input_dim, hidden), || StandardNormal.sample(&mut r));
    let b = Array1::from_shape_simple_fn(hidden, || StandardNormal.sample(&mut r));
    (w, b)
}

/// β solving `(HᵀH + λI) β = HᵀT`.
pub fn solve_readout(h: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>, lambda: f64) -> Result<Array2<f64>> {
    if h.nrows() != targets.nrows() {
        return Err(Error::Dimension(format!(
            "{} hidden rows for {} target rows",
            h.nrows(),
            targets.nrows()
        )));
    }
    solve_ridge(h.t().dot(&h).view(), h.t().dot(&targets).view(), lambda)
}

pub fn train_elm(features: &FeatureSet, config: &ElmConfig) -> Result<TrainedModel> {
    config.validate()?;
    check_training_set(features)?;
    let start = Instant::now();
    let (n, d, k) = (features.len(), features.dim(), features.class_count);
    let hu = config.hidden_units;
    let (w, b) = hidden_layer(d, hu, config.seed);

    let mut gram = Array2::<f64>::zeros((hu, hu));
    let mut rhs = Array2::<f64>::zeros((hu, k));
    let mut lo = 0;
    while lo < n {
        let hi = (lo + GRAM_BLOCK).min(n);
        let h = sigmoid_layer(features.vectors.slice(s![lo..hi, ..]), w.view(), b.view()).mapv(f64::from);
        gram += &h.t().dot(&h);
        rhs += &h.t().dot(&one_hot(&features.labels[lo..hi], k));
        lo = hi;
    }
    let beta = solve_ridge(gram.view(), rhs.view(), config.lambda)?;

    let metadata = TrainingMetadata {
        config: config.echo(),
        seed: Some(config.seed),
        wall_time_s: start.elapsed().as_secs_f64(),
        history: Vec::new(),
        converged: None,
    };
    let weights = ModelWeights::Elm {
        w,
        b,
        beta: beta.mapv(|v| v as f32),
    };
    TrainedModel::new(weights, d, k, metadata)
}
