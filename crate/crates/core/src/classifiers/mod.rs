//! Stage-2 heads: a one-hidden-layer MLP, a one-vs-all squared-hinge linear
//! SVM and an extreme learning machine, with shared prediction, scoring and
//! model files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::envelope::{read_file, EnvelopeReader, EnvelopeWriter, Magic};
use crate::error::{Error, Result};
use crate::features::FeatureSet;

pub mod elm;
mod linalg;
pub mod mlp;
pub mod svm;

pub use elm::{solve_readout, train_elm, ElmConfig};
pub use mlp::{train_mlp, BatchSize, MlpConfig};
pub use svm::{train_svm, SvmConfig};

const MODEL_MAGIC: &Magic = b"WBMODEL\0";
const MODEL_VERSION: u32 = 1;

/// Rows scored per block in `scores`, to bound temporary memory.
const SCORE_BLOCK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassifierKind {
    Mlp,
    Svm,
    Elm,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 3] = [ClassifierKind::Mlp, ClassifierKind::Svm, ClassifierKind::Elm];

    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Mlp => "mlp",
            ClassifierKind::Svm => "svm",
            ClassifierKind::Elm => "elm",
        }
    }

    fn code(self) -> u32 {
        match self {
            ClassifierKind::Mlp => 1,
            ClassifierKind::Svm => 2,
            ClassifierKind::Elm => 3,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(ClassifierKind::Mlp),
            2 => Ok(ClassifierKind::Svm),
            3 => Ok(ClassifierKind::Elm),
            _ => Err(Error::Format(format!("model file: unknown classifier kind {code}"))),
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mlp" | "cnn" => Ok(ClassifierKind::Mlp),
            "svm" | "csvm" => Ok(ClassifierKind::Svm),
            "elm" | "celm" => Ok(ClassifierKind::Elm),
            other => Err(Error::Parameter(format!("unknown classifier {other:?} (expected mlp, svm or elm)"))),
        }
    }
}

/// Learned parameters. Matrices map inputs (rows) to outputs (columns).
#[derive(Debug, Clone, PartialEq)]
pub enum ModelWeights {
    Mlp {
        w1: Array2<f32>,
        b1: Array1<f32>,
        w2: Array2<f32>,
        b2: Array1<f32>,
    },
    Svm {
        w: Array2<f32>,
        b: Array1<f32>,
    },
    Elm {
        w: Array2<f32>,
        b: Array1<f32>,
        beta: Array2<f32>,
    },
}

impl ModelWeights {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            ModelWeights::Mlp { .. } => ClassifierKind::Mlp,
            ModelWeights::Svm { .. } => ClassifierKind::Svm,
            ModelWeights::Elm { .. } => ClassifierKind::Elm,
        }
    }

    fn hidden_units(&self) -> usize {
        match self {
            ModelWeights::Mlp { b1, .. } => b1.len(),
            ModelWeights::Svm { .. } => 0,
            ModelWeights::Elm { b, .. } => b.len(),
        }
    }
}

/// What training observed, kept for reports and model files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingMetadata {
    /// Configuration echo as ordered `key = value` pairs.
    pub config: Vec<(String, String)>,
    pub seed: Option<u64>,
    pub wall_time_s: f64,
    /// Per-epoch mean loss (MLP) or per-iteration objective (SVM). Not stored
    /// in model files.
    pub history: Vec<f64>,
    pub converged: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub weights: ModelWeights,
    pub input_dim: usize,
    pub class_count: usize,
    pub metadata: TrainingMetadata,
}

impl TrainedModel {
    pub(crate) fn new(weights: ModelWeights, input_dim: usize, class_count: usize, metadata: TrainingMetadata) -> Result<Self> {
        let model = Self {
            weights,
            input_dim,
            class_count,
            metadata,
        };
        model.check_shapes()?;
        Ok(model)
    }

    pub fn kind(&self) -> ClassifierKind {
        self.weights.kind()
    }

    fn check_shapes(&self) -> Result<()> {
        let (d, k) = (self.input_dim, self.class_count);
        let ok = match &self.weights {
            ModelWeights::Mlp { w1, b1, w2, b2 } => {
                let h = b1.len();
                h >= 1 && w1.dim() == (d, h) && w2.dim() == (h, k) && b2.len() == k
            }
            ModelWeights::Svm { w, b } => w.dim() == (d, k) && b.len() == k,
            ModelWeights::Elm { w, b, beta } => {
                let h = b.len();
                h >= 1 && w.dim() == (d, h) && beta.dim() == (h, k)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{} weights inconsistent with input_dim {d}, class_count {k}",
                self.kind()
            )))
        }
    }

    /// Class scores, one row per sample: softmax probabilities for the MLP,
    /// `w_c·x + b_c` for the SVM and `βᵀh` for the ELM.
    pub fn scores(&self, vectors: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
        if vectors.ncols() != self.input_dim {
            return Err(Error::Dimension(format!(
                "model expects {} features, got {}",
                self.input_dim,
                vectors.ncols()
            )));
        }
        let n = vectors.nrows();
        let mut out = Array2::<f32>::zeros((n, self.class_count));
        let mut start = 0;
        while start < n {
            let end = (start + SCORE_BLOCK).min(n);
            let x = vectors.slice(s![start..end, ..]);
            let block = match &self.weights {
                ModelWeights::Mlp { w1, b1, w2, b2 } => {
                    let h = mlp::sigmoid_layer(x, w1.view(), b1.view());
                    let mut z = h.dot(w2) + b2;
                    mlp::softmax_rows(&mut z);
                    z
                }
                ModelWeights::Svm { w, b } => x.dot(w) + b,
                ModelWeights::Elm { w, b, beta } => mlp::sigmoid_layer(x, w.view(), b.view()).dot(beta),
            };
            out.slice_mut(s![start..end, ..]).assign(&block);
            start = end;
        }
        Ok(out)
    }

    pub fn predict(&self, features: &FeatureSet) -> Result<Vec<u8>> {
        self.predict_vectors(features.vectors.view())
    }

    pub fn predict_vectors(&self, vectors: ArrayView2<'_, f32>) -> Result<Vec<u8>> {
        Ok(argmax_rows(self.scores(vectors)?.view()))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = EnvelopeWriter::new(MODEL_MAGIC, MODEL_VERSION);
        w.u32(self.kind().code());
        w.dim(self.input_dim, "input_dim")?;
        w.dim(self.class_count, "class_count")?;
        w.dim(self.weights.hidden_units(), "hidden_units")?;
        match &self.weights {
            ModelWeights::Mlp { w1, b1, w2, b2 } => {
                w.f32s(w1.iter().copied()).f32s(b1.iter().copied());
                w.f32s(w2.iter().copied()).f32s(b2.iter().copied());
            }
            ModelWeights::Svm { w: wt, b } => {
                w.f32s(wt.iter().copied()).f32s(b.iter().copied());
            }
            ModelWeights::Elm { w: wt, b, beta } => {
                w.f32s(wt.iter().copied()).f32s(b.iter().copied());
                w.f32s(beta.iter().copied());
            }
        }
        let text = self.config_text();
        w.dim(text.len(), "config length")?;
        w.bytes(text.as_bytes());
        Ok(w.finish())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = EnvelopeReader::open(bytes, MODEL_MAGIC, MODEL_VERSION, "model file")?;
        let kind = ClassifierKind::from_code(r.u32()?)?;
        let (d, k, h) = (r.dim()?, r.dim()?, r.dim()?);
        let mut matrix = |rows: usize, cols: usize| -> Result<Array2<f32>> {
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Format("model file: declared size overflows".into()))?;
            Ok(Array2::from_shape_vec((rows, cols), r.f32s(n)?).expect("length checked"))
        };
        let weights = match kind {
            ClassifierKind::Mlp => {
                let w1 = matrix(d, h)?;
                let b1 = matrix(1, h)?.into_shape_with_order(h).unwrap();
                let w2 = matrix(h, k)?;
                let b2 = matrix(1, k)?.into_shape_with_order(k).unwrap();
                ModelWeights::Mlp { w1, b1, w2, b2 }
            }
            ClassifierKind::Svm => {
                let w = matrix(d, k)?;
                let b = matrix(1, k)?.into_shape_with_order(k).unwrap();
                ModelWeights::Svm { w, b }
            }
            ClassifierKind::Elm => {
                let w = matrix(d, h)?;
                let b = matrix(1, h)?.into_shape_with_order(h).unwrap();
                let beta = matrix(h, k)?;
                ModelWeights::Elm { w, b, beta }
            }
        };
        let len = r.dim()?;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("model file: config block is not UTF-8".into()))?
            .to_owned();
        r.finish()?;
        let metadata = parse_config_text(&text)?;
        TrainedModel::new(weights, d, k, metadata).map_err(|e| Error::Format(format!("model file: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&read_file(path.as_ref())?)
    }

    fn config_text(&self) -> String {
        let m = &self.metadata;
        let mut out = String::new();
        for (k, v) in &m.config {
            out.push_str(&format!("{k} = {v}\n"));
        }
        if let Some(seed) = m.seed {
            out.push_str(&format!("meta.seed = {seed}\n"));
        }
        if let Some(c) = m.converged {
            out.push_str(&format!("meta.converged = {c}\n"));
        }
        out.push_str(&format!("meta.wall_time_s = {}\n", m.wall_time_s));
        out
    }
}

fn parse_config_text(text: &str) -> Result<TrainingMetadata> {
    let mut meta = TrainingMetadata::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Format(format!("model file: bad config line {line:?}")))?;
        let bad = || Error::Format(format!("model file: bad value in {line:?}"));
        match k {
            "meta.seed" => meta.seed = Some(v.parse().map_err(|_| bad())?),
            "meta.converged" => meta.converged = Some(v.parse().map_err(|_| bad())?),
            "meta.wall_time_s" => meta.wall_time_s = v.parse().map_err(|_| bad())?,
            _ => meta.config.push((k.to_owned(), v.to_owned())),
        }
    }
    Ok(meta)
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows(scores: ArrayView2<'_, f32>) -> Vec<u8> {
    scores
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// `100 × mismatches / N`.
pub fn error_percent(predicted: &[u8], truth: &[u8]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Parameter(format!(
            "error_percent: {} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Parameter("error_percent: no samples".into()));
    }
    let wrong = predicted.iter().zip(truth).filter(|(p, t)| p != t).count();
    Ok(100.0 * wrong as f64 / truth.len() as f64)
}

/// Shared input checks: nonempty, finite, labels within `class_count`.
pub(crate) fn check_training_set(features: &FeatureSet) -> Result<()> {
    if features.is_empty() {
        return Err(Error::Parameter("training set has no samples".into()));
    }
    if features.class_count < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 classes, got {}",
            features.class_count
        )));
    }
    if let Some(i) = features.vectors.iter().position(|v| !v.is_finite()) {
        let d = features.dim().max(1);
        return Err(Error::Parameter(format!(
            "non-finite feature value at sample {}, component {}",
            i / d,
            i % d
        )));
    }
    Ok(())
}

pub(crate) fn one_hot(labels: &[u8], class_count: usize) -> Array2<f64> {
    let mut t = Array2::zeros((labels.len(), class_count));
    for (i, &y) in labels.iter().enumerate() {
        t[[i, y as usize]] = 1.0;
    }
    t
}

/// Trains whichever classifier `config` names.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierConfig {
    Mlp(MlpConfig),
    Svm(SvmConfig),
    Elm(ElmConfig),
}

impl ClassifierConfig {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            ClassifierConfig::Mlp(_) => ClassifierKind::Mlp,
            ClassifierConfig::Svm(_) => ClassifierKind::Svm,
            ClassifierConfig::Elm(_) => ClassifierKind::Elm,
        }
    }

    /// The same configuration with its seed replaced. The SVM has none.
    pub fn with_seed(&self, seed: u64) -> Self {
        match self {
            ClassifierConfig::Mlp(c) => ClassifierConfig::Mlp(MlpConfig { seed, ..c.clone() }),
            ClassifierConfig::Svm(c) => ClassifierConfig::Svm(c.clone()),
            ClassifierConfig::Elm(c) => ClassifierConfig::Elm(ElmConfig { seed, ..c.clone() }),
        }
    }

    pub fn train(&self, features: &FeatureSet) -> Result<TrainedModel> {
        match self {
            ClassifierConfig::Mlp(c) => train_mlp(features, c),
            ClassifierConfig::Svm(c) => train_svm(features, c),
            ClassifierConfig::Elm(c) => train_elm(features, c),
        }
    }
}
