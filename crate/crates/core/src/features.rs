//! The fixed feature stage: valid convolution with an `L`-filter bank,
//! LP-pooling, flattening and standardization.
//!
//! Stage weights never change after construction, so every experiment that
//! shares a bank and pooling config sees identical features.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::dataset::LabeledImageSet;
use crate::envelope::{read_file, EnvelopeReader, EnvelopeWriter, Magic, StreamReader, StreamWriter};
use crate::error::{Error, Result};
use crate::rng;

const BANK_MAGIC: &Magic = b"WBFILTER";
const BANK_VERSION: u32 = 1;
const FEATURES_MAGIC: &Magic = b"WBFEATUR";
const FEATURES_VERSION: u32 = 1;

/// Floor applied to per-feature standard deviations.
pub const STD_EPSILON: f64 = 1e-8;

/// `L` square kernels of side `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    kernels: Array3<f64>,
    /// `seeded:...` for generated banks, the SHA-256 of the file for loaded ones.
    pub source_tag: String,
}

impl FilterBank {
    pub fn new(kernels: Array3<f64>, source_tag: impl Into<String>) -> Result<Self> {
        let (l, h, w) = kernels.dim();
        if l == 0 || h == 0 || h != w {
            return Err(Error::Parameter(format!("filter bank must hold L >= 1 square kernels, got {l}x{h}x{w}")));
        }
        Ok(Self {
            kernels,
            source_tag: source_tag.into(),
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.len_of(Axis(1))
    }

    pub fn filter_count(&self) -> usize {
        self.kernels.len_of(Axis(0))
    }

    pub fn kernel(&self, l: usize) -> ArrayView2<'_, f64> {
        self.kernels.index_axis(Axis(0), l)
    }

    pub fn kernels(&self) -> &Array3<f64> {
        &self.kernels
    }

    /// Kernels flattened into the columns of a `(W*W) x L` matrix.
    fn as_columns(&self) -> Array2<f64> {
        let (l, w, _) = self.kernels.dim();
        self.kernels
            .to_shape((l, w * w))
            .expect("contiguous")
            .t()
            .to_owned()
    }
}

/// `L` kernels drawn from a seeded standard normal, each shifted to zero mean
/// and scaled to unit Frobenius norm.
pub fn default_filter_bank(kernel_size: usize, filter_count: usize, seed: u64) -> Result<FilterBank> {
    if kernel_size == 0 || filter_count == 0 {
        return Err(Error::Parameter(format!(
            "kernel size and filter count must be >= 1, got W={kernel_size}, L={filter_count}"
        )));
    }
    let mut rng = rng::stream(seed, &[rng::tag("filter_bank")]);
    let mut kernels: Array3<f64> = Array3::from_shape_simple_fn((filter_count, kernel_size, kernel_size), || {
        rng.sample(StandardNormal)
    });
    for mut k in kernels.outer_iter_mut() {
        let mean = k.mean().unwrap();
        k.mapv_inplace(|v| v - mean);
        let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            k.mapv_inplace(|v| v / norm);
        }
    }
    FilterBank::new(
        kernels,
        format!("seeded:W={kernel_size},L={filter_count},seed={seed}"),
    )
}

fn bank_writer(bank: &FilterBank) -> Result<EnvelopeWriter> {
    let mut w = EnvelopeWriter::new(BANK_MAGIC, BANK_VERSION);
    w.dim(bank.kernel_size(), "W")?.dim(bank.filter_count(), "L")?;
    w.f32s(bank.kernels.iter().map(|&v| v as f32));
    Ok(w)
}

pub fn encode_filter_bank(bank: &FilterBank) -> Result<Vec<u8>> {
    Ok(bank_writer(bank)?.finish())
}

/// Decodes a bank file. Values are stored as `f32`.
pub fn decode_filter_bank(bytes: &[u8]) -> Result<FilterBank> {
    let mut r = EnvelopeReader::open(bytes, BANK_MAGIC, BANK_VERSION, "filter bank")?;
    let w = r.dim()?;
    let l = r.dim()?;
    if w == 0 || l == 0 {
        return Err(Error::Format(format!("filter bank declares W={w}, L={l}")));
    }
    let values = r.f32s(l * w * w)?;
    r.finish()?;
    let kernels = Array3::from_shape_vec((l, w, w), values.into_iter().map(f64::from).collect())
        .expect("length checked");
    let tag = Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect::<String>();
    FilterBank::new(kernels, format!("sha256:{tag}"))
}

pub fn save_filter_bank(bank: &FilterBank, path: impl AsRef<Path>) -> Result<()> {
    bank_writer(bank)?.write_to(path.as_ref())
}

pub fn load_filter_bank(path: impl AsRef<Path>) -> Result<FilterBank> {
    decode_filter_bank(&read_file(path.as_ref())?)
}

/// LP-pooling window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolingConfig {
    pub q: usize,
    pub stride: usize,
    /// Pooling exponent; `f64::INFINITY` gives max-pooling of `|x|`.
    pub p: f64,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self { q: 8, stride: 2, p: 2.0 }
    }
}

impl PoolingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || self.stride == 0 || self.stride > self.q {
            return Err(Error::Parameter(format!(
                "pooling needs 1 <= stride <= q, got q={}, stride={}",
                self.q, self.stride
            )));
        }
        if !(self.p >= 1.0) {
            return Err(Error::Parameter(format!("pooling exponent must be >= 1, got {}", self.p)));
        }
        Ok(())
    }

    /// Pooled side length for an input of side `len`.
    pub fn output_len(&self, len: usize) -> usize {
        (len - self.q) / self.stride + 1
    }
}

/// Valid-mode 2-D cross-correlation with stride 1.
pub fn convolve_valid(image: ArrayView2<'_, f64>, kernel: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    let (kh, kw) = kernel.dim();
    if kh > h || kw > w || kh == 0 || kw == 0 {
        return Err(Error::Dimension(format!("kernel {kh}x{kw} does not fit image {h}x{w}")));
    }
    Ok(Array2::from_shape_fn((h - kh + 1, w - kw + 1), |(y, x)| {
        let mut acc = 0.0;
        for i in 0..kh {
            for j in 0..kw {
                acc += image[[y + i, x + j]] * kernel[[i, j]];
            }
        }
        acc
    }))
}

fn pool_window(values: impl Iterator<Item = f64>, p: f64, window: usize) -> f64 {
    if p.is_infinite() {
        values.fold(0.0, |m, v| m.max(v.abs()))
    } else if p == 2.0 {
        (values.map(|v| v * v).sum::<f64>() / window as f64).sqrt()
    } else if p == 1.0 {
        values.map(f64::abs).sum::<f64>() / window as f64
    } else {
        (values.map(|v| v.abs().powf(p)).sum::<f64>() / window as f64).powf(1.0 / p)
    }
}

/// Window-normalized LP-pooling: `(sum |x|^p)^(1/p) / q^(2/p)` per window,
/// i.e. the power mean of `|x|`, and `max |x|` when `p` is infinite.
pub fn lp_pool(map: ArrayView2<'_, f64>, config: &PoolingConfig) -> Result<Array2<f64>> {
    config.validate()?;
    let (h, w) = map.dim();
    let q = config.q;
    if q > h || q > w {
        return Err(Error::Dimension(format!("pool window {q} exceeds map {h}x{w}")));
    }
    let (oh, ow) = (config.output_len(h), config.output_len(w));
    Ok(Array2::from_shape_fn((oh, ow), |(y, x)| {
        let (y0, x0) = (y * config.stride, x * config.stride);
        let window = map.slice(ndarray::s![y0..y0 + q, x0..x0 + q]);
        pool_window(window.iter().copied(), config.p, q * q)
    }))
}

/// Stage-1 output: one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub vectors: Array2<f32>,
    pub labels: Vec<u8>,
    pub class_count: usize,
    pub standardized: bool,
}

impl FeatureSet {
    pub fn new(vectors: Array2<f32>, labels: Vec<u8>, class_count: usize) -> Result<Self> {
        if vectors.nrows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} feature rows but {} labels",
                vectors.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= class_count) {
            return Err(Error::Consistency(format!("label {bad} out of range for {class_count} classes")));
        }
        Ok(Self {
            vectors,
            labels,
            class_count,
            standardized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        crate::dataset::class_histogram(&self.labels, self.class_count)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            vectors: self.vectors.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            standardized: self.standardized,
        }
    }

    /// Row indices of each class, in order.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            members[usize::from(l)].push(i);
        }
        members
    }

    /// Appends `other`'s rows in place. Call `reserve_rows` first to avoid
    /// repeated reallocation.
    pub fn append(&mut self, other: &Self) -> Result<()> {
        if self.is_empty() {
            *self = Self { standardized: self.standardized, ..other.clone() };
            return Ok(());
        }
        if self.dim() != other.dim() {
            return Err(Error::Dimension(format!(
                "cannot append features of dim {} to dim {}",
                other.dim(),
                self.dim()
            )));
        }
        if self.standardized != other.standardized {
            return Err(Error::Consistency("cannot mix standardized and raw features".into()));
        }
        self.vectors
            .append(Axis(0), other.vectors.view())
            .map_err(|e| Error::Dimension(e.to_string()))?;
        self.labels.extend_from_slice(&other.labels);
        self.class_count = self.class_count.max(other.class_count);
        Ok(())
    }

    pub fn reserve_rows(&mut self, additional: usize) -> Result<()> {
        self.vectors
            .reserve_rows(additional)
            .map_err(|e| Error::Dimension(e.to_string()))
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() && !self.is_empty() && !other.is_empty() {
            return Err(Error::Dimension(format!(
                "cannot concatenate features of dim {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        if self.standardized != other.standardized {
            return Err(Error::Consistency("cannot mix standardized and raw features".into()));
        }
        let vectors = if other.is_empty() {
            self.vectors.clone()
        } else if self.is_empty() {
            other.vectors.clone()
        } else {
            ndarray::concatenate(Axis(0), &[self.vectors.view(), other.vectors.view()]).expect("dims checked")
        };
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self {
            vectors,
            labels,
            class_count: self.class_count.max(other.class_count),
            standardized: self.standardized,
        })
    }
}

/// Features of a single image: `L` pooled maps flattened filter-major, each
/// map row-major.
fn image_features(image: ArrayView2<'_, f64>, columns: &Array2<f64>, w: usize, pool: &PoolingConfig) -> Result<Vec<f32>> {
    let (h, iw) = image.dim();
    if w > h || w > iw {
        return Err(Error::Dimension(format!("kernel {w}x{w} does not fit image {h}x{iw}")));
    }
    let (ch, cw) = (h - w + 1, iw - w + 1);
    if pool.q > ch || pool.q > cw {
        return Err(Error::Dimension(format!("pool window {} exceeds map {ch}x{cw}", pool.q)));
    }
    // im2col: one row per output position, one column per kernel tap.
    let mut patches = Array2::<f64>::zeros((ch * cw, w * w));
    for (pos, mut row) in patches.outer_iter_mut().enumerate() {
        let (y, x) = (pos / cw, pos % cw);
        for i in 0..w {
            for j in 0..w {
                row[i * w + j] = image[[y + i, x + j]];
            }
        }
    }
    let maps = patches.dot(columns);
    let (oh, ow) = (pool.output_len(ch), pool.output_len(cw));
    let q = pool.q;
    let mut out = Vec::with_capacity(columns.ncols() * oh * ow);
    for l in 0..columns.ncols() {
        let map = maps.column(l);
        for py in 0..oh {
            for px in 0..ow {
                let (y0, x0) = (py * pool.stride, px * pool.stride);
                let window = (y0..y0 + q).flat_map(|y| (x0..x0 + q).map(move |x| y * cw + x));
                out.push(pool_window(window.map(|k| map[k]), pool.p, q * q) as f32);
            }
        }
    }
    Ok(out)
}

/// Feature dimension `L * P^2` for `height x width` inputs.
pub fn feature_dim(height: usize, width: usize, bank: &FilterBank, pool: &PoolingConfig) -> Result<usize> {
    let w = bank.kernel_size();
    if w > height || w > width || pool.q > height - w + 1 || pool.q > width - w + 1 {
        return Err(Error::Dimension(format!(
            "{height}x{width} images are too small for W={w}, q={}",
            pool.q
        )));
    }
    Ok(bank.filter_count() * pool.output_len(height - w + 1) * pool.output_len(width - w + 1))
}

/// Runs every image through convolution and pooling. Samples are processed
/// independently, so the result does not depend on the thread count.
pub fn extract_features(set: &LabeledImageSet, bank: &FilterBank, pool: &PoolingConfig) -> Result<FeatureSet> {
    pool.validate()?;
    let dim = feature_dim(set.height(), set.width(), bank, pool)?;
    let columns = bank.as_columns();
    let w = bank.kernel_size();
    let mut vectors = Array2::<f32>::zeros((set.len(), dim));
    if dim > 0 {
        vectors
            .as_slice_mut()
            .expect("fresh array is contiguous")
            .par_chunks_mut(dim)
            .enumerate()
            .try_for_each(|(i, row)| -> Result<()> {
                row.copy_from_slice(&image_features(set.image(i), &columns, w, pool)?);
                Ok(())
            })?;
    }
    FeatureSet::new(vectors, set.labels().to_vec(), set.class_count())
}

/// Per-feature affine normalization fitted on a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    /// Means and `max(std, STD_EPSILON)` scales of `train`'s columns
    /// (population standard deviation).
    pub fn fit(train: &FeatureSet) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Parameter("cannot standardize on an empty training set".into()));
        }
        let n = train.len() as f64;
        let d = train.dim();
        let mut means = vec![0.0f64; d];
        for row in train.vectors.outer_iter() {
            for (m, &v) in means.iter_mut().zip(row.iter()) {
                *m += f64::from(v);
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; d];
        for row in train.vectors.outer_iter() {
            for ((s, &v), m) in var.iter_mut().zip(row.iter()).zip(&means) {
                let c = f64::from(v) - m;
                *s += c * c;
            }
        }
        let scales = var.into_iter().map(|s| (s / n).sqrt().max(STD_EPSILON)).collect();
        Ok(Self { means, scales })
    }

    pub fn apply_in_place(&self, set: &mut FeatureSet) -> Result<()> {
        if set.dim() != self.means.len() && !set.is_empty() {
            return Err(Error::Dimension(format!(
                "standardizer fitted on dim {}, got {}",
                self.means.len(),
                set.dim()
            )));
        }
        let d = self.means.len();
        if d > 0 {
            let data = set.vectors.as_slice_mut().ok_or_else(|| Error::Parameter("feature matrix is not contiguous".into()))?;
            data.par_chunks_mut(d).for_each(|row| {
                for ((v, m), s) in row.iter_mut().zip(&self.means).zip(&self.scales) {
                    *v = ((f64::from(*v) - m) / s) as f32;
                }
            });
        }
        set.standardized = true;
        Ok(())
    }

    pub fn apply(&self, set: &FeatureSet) -> Result<FeatureSet> {
        let mut out = set.clone();
        self.apply_in_place(&mut out)?;
        Ok(out)
    }
}

/// Fits on `train` and applies to `train` and every set in `others`.
pub fn standardize(train: &FeatureSet, others: &[&FeatureSet]) -> Result<(Standardizer, FeatureSet, Vec<FeatureSet>)> {
    let s = Standardizer::fit(train)?;
    let train = s.apply(train)?;
    let others = others.iter().map(|o| s.apply(o)).collect::<Result<_>>()?;
    Ok((s, train, others))
}

/// Writes a feature set in the streaming cache format.
pub fn write_features(set: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = StreamWriter::create(path.as_ref(), FEATURES_MAGIC, FEATURES_VERSION)?;
    w.dim(set.len(), "N")?;
    w.dim(set.dim(), "D")?;
    w.dim(set.class_count, "class_count")?;
    w.dim(usize::from(set.standardized), "standardized")?;
    w.bytes(&set.labels)?;
    for row in set.vectors.outer_iter() {
        match row.as_slice() {
            Some(s) => w.f32s(s)?,
            None => w.f32s(&row.to_vec())?,
        }
    }
    w.finish()
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let mut r = StreamReader::open(path.as_ref(), FEATURES_MAGIC, FEATURES_VERSION, "feature cache")?;
    let n = r.dim()?;
    let d = r.dim()?;
    let class_count = r.dim()?;
    let standardized = r.dim()? != 0;
    let labels = r.take(n)?;
    let total = n
        .checked_mul(d)
        .ok_or_else(|| Error::Format("feature cache: declared size overflows".into()))?;
    let mut vectors = Array2::<f32>::zeros((n, d));
    if total > 0 {
        r.f32s_into(vectors.as_slice_mut().expect("fresh array is contiguous"))?;
    }
    r.finish()?;
    let mut set = FeatureSet::new(vectors, labels, class_count).map_err(|e| Error::Format(format!("feature cache: {e}")))?;
    set.standardized = standardized;
    Ok(set)
}
