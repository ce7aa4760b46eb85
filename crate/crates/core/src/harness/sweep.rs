//! Learning-curve sweeps: build each cell's training set, extract features,
//! train, evaluate.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Recipe};
use crate::classifiers::{error_percent, ClassifierKind};
use crate::dataset::{self, balanced_subset_indices, ClassBalanceSpec, LabeledImageSet};
use crate::error::{Error, Result};
use crate::features::{self, extract_features, FeatureSet, FilterBank, PoolingConfig, Standardizer};
use crate::oversample::{oversample_to_count, DbsmoteParams, OversampleMethod, SmoteParams};
use crate::rng;
use crate::warp::warp_augment_dataset;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Warped images are featurized in chunks of this many, so the full
/// synthetic feature block never exists twice.
const FEATURE_CHUNK: usize = 5000;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub classifier: ClassifierKind,
    pub recipe: Recipe,
    pub n_per_class: usize,
    pub repeat: usize,
    pub seed: u64,
    pub train_error_pct: f64,
    pub test_error_pct: f64,
    pub wall_time_s: f64,
}

/// Training and test splits from the four standard IDX files in `dir`.
pub fn load_mnist(dir: &Path) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let train = dataset::load_idx(dir.join(TRAIN_IMAGES), dir.join(TRAIN_LABELS))?;
    let test = dataset::load_idx(dir.join(TEST_IMAGES), dir.join(TEST_LABELS))?;
    Ok((train, test))
}

/// The seed owned by sweep cell `(point, repeat)`.
pub fn cell_seed(master_seed: u64, n_per_class: usize, repeat: usize) -> u64 {
    rng::derive_seed(master_seed, &[n_per_class as u64, repeat as u64])
}

/// Indices of the fixed real pool shared by every augmented cell.
pub fn pool_indices(config: &ExperimentConfig, train: &LabeledImageSet) -> Result<Vec<usize>> {
    balanced_subset_indices(
        train.labels(),
        train.class_count(),
        ClassBalanceSpec {
            per_class_count: config.pool_per_class,
            seed: rng::derive_seed(config.master_seed, &[rng::tag("pool")]),
        },
    )
}

fn baseline_indices(train: &LabeledImageSet, n_per_class: usize, seed: u64) -> Result<Vec<usize>> {
    balanced_subset_indices(
        train.labels(),
        train.class_count(),
        ClassBalanceSpec {
            per_class_count: n_per_class,
            seed: rng::derive_seed(seed, &[rng::tag("baseline")]),
        },
    )
}

pub fn filter_bank(config: &ExperimentConfig) -> Result<FilterBank> {
    let f = &config.features;
    match &f.bank_path {
        Some(path) => features::load_filter_bank(path),
        None => features::default_filter_bank(f.kernel_size, f.filter_count, f.bank_seed),
    }
}

fn cache_key(set: &LabeledImageSet, bank: &FilterBank, pool: &PoolingConfig) -> String {
    let mut h = Sha256::new();
    h.update(b"features-v1\0");
    h.update(bank.source_tag.as_bytes());
    for v in bank.kernels() {
        h.update(v.to_le_bytes());
    }
    for v in [pool.q as u64, pool.stride as u64, pool.p.to_bits()] {
        h.update(v.to_le_bytes());
    }
    for v in [set.len(), set.height(), set.width(), set.class_count()] {
        h.update((v as u64).to_le_bytes());
    }
    h.update(set.labels());
    for v in set.images() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect()
}

/// Features of `set`, read from or written to `cache_dir` when given.
pub fn cached_features(set: &LabeledImageSet, bank: &FilterBank, pool: &PoolingConfig, cache_dir: Option<&Path>) -> Result<FeatureSet> {
    let Some(dir) = cache_dir else {
        return extract_features(set, bank, pool);
    };
    let path = dir.join(format!("features-{}.wbf", cache_key(set, bank, pool)));
    if path.exists() {
        match features::read_features(&path) {
            Ok(f) if f.len() == set.len() && f.labels == set.labels() => {
                log::debug!("feature cache hit {}", path.display());
                return Ok(f);
            }
            Ok(_) => log::warn!("feature cache {} does not match its key; recomputing", path.display()),
            Err(e) => log::warn!("feature cache {} unreadable ({e}); recomputing", path.display()),
        }
    }
    let start = Instant::now();
    let f = extract_features(set, bank, pool)?;
    log::info!("extracted {} feature vectors in {:.1}s", f.len(), start.elapsed().as_secs_f64());
    features::write_features(&f, &path)?;
    Ok(f)
}

/// Warped images for an elastic cell, quantized to the cache precision.
fn warped_images(config: &ExperimentConfig, pool: &LabeledImageSet, per_class: usize, seed: u64) -> Result<LabeledImageSet> {
    let generate = || warp_augment_dataset(pool, per_class, &config.elastic, config.affine.as_ref(), seed);
    let Some(dir) = &config.cache_dir else {
        return Ok(generate()?.quantized());
    };
    let name = format!(
        "warped-a{}-s{}-{}-p{}-n{}-{seed:016x}.wbi",
        config.elastic.alpha,
        config.elastic.sigma,
        if config.affine.is_some() { "affine" } else { "plain" },
        config.pool_per_class,
        per_class
    );
    let path = dir.join(name);
    if path.exists() {
        if let Ok(set) = dataset::read_cache(&path) {
            if set.len() == per_class * pool.class_count() {
                return Ok(set);
            }
        }
        log::warn!("warped-image cache {} is stale; regenerating", path.display());
    }
    dataset::cache_roundtrip(&generate()?, &path)
}

/// Data shared by all cells of one sweep.
pub struct SweepData {
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
    pub bank: FilterBank,
    /// Raw features of the test set.
    pub test_features: FeatureSet,
    /// Raw features of every training image a baseline or pool draw uses,
    /// keyed by source index.
    real_rows: BTreeMap<usize, usize>,
    real_features: FeatureSet,
    pool: Vec<usize>,
}

impl SweepData {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = load_mnist(&config.data_dir)?;
        Self::from_sets(config, train, test)
    }

    pub fn from_sets(config: &ExperimentConfig, train: LabeledImageSet, test: LabeledImageSet) -> Result<Self> {
        config.validate()?;
        let bank = filter_bank(config)?;
        let pool = if config.recipes.iter().any(|r| r.is_augmented()) {
            pool_indices(config, &train)?
        } else {
            Vec::new()
        };
        let mut needed: Vec<usize> = pool.clone();
        if config.recipes.contains(&Recipe::Baseline) {
            for &point in &config.sweep_points {
                for repeat in 0..config.repeats {
                    needed.extend(baseline_indices(&train, point, cell_seed(config.master_seed, point, repeat))?);
                }
            }
        }
        needed.sort_unstable();
        needed.dedup();
        let cache = config.cache_dir.as_deref();
        let real_features = cached_features(&train.select(&needed), &bank, &config.features.pool, cache)?;
        let test_features = cached_features(&test, &bank, &config.features.pool, cache)?;
        let real_rows = needed.iter().enumerate().map(|(row, &i)| (i, row)).collect();
        Ok(Self {
            train,
            test,
            bank,
            test_features,
            real_rows,
            real_features,
            pool,
        })
    }

    fn real(&self, indices: &[usize]) -> FeatureSet {
        let rows: Vec<usize> = indices.iter().map(|i| self.real_rows[i]).collect();
        self.real_features.select(&rows)
    }

    /// Raw (unstandardized) training features for one cell.
    pub fn training_features(&self, config: &ExperimentConfig, recipe: Recipe, n_per_class: usize, seed: u64) -> Result<FeatureSet> {
        let set = match recipe {
            Recipe::Baseline => self.real(&baseline_indices(&self.train, n_per_class, seed)?),
            Recipe::Elastic => {
                let pool = self.real(&self.pool);
                let extra = n_per_class - config.pool_per_class;
                if extra == 0 {
                    pool
                } else {
                    let images = self.train.select(&self.pool);
                    let warp_seed = rng::derive_seed(seed, &[rng::tag("elastic")]);
                    let warped = warped_images(config, &images, extra, warp_seed)?;
                    let mut set = pool;
                    set.reserve_rows(warped.len())?;
                    let order: Vec<usize> = (0..warped.len()).collect();
                    for chunk in order.chunks(FEATURE_CHUNK) {
                        let part = warped.select(chunk);
                        set.append(&cached_features(&part, &self.bank, &config.features.pool, config.cache_dir.as_deref())?)?;
                    }
                    set
                }
            }
            Recipe::Smote => {
                let p = SmoteParams {
                    seed: rng::derive_seed(seed, &[rng::tag("smote")]),
                    ..config.smote
                };
                oversample_to_count(&self.real(&self.pool), n_per_class, &OversampleMethod::Smote(p))?
            }
            Recipe::Dbsmote => {
                let p = DbsmoteParams {
                    seed: rng::derive_seed(seed, &[rng::tag("dbsmote")]),
                    ..config.dbsmote
                };
                oversample_to_count(&self.real(&self.pool), n_per_class, &OversampleMethod::Dbsmote(p))?
            }
        };
        let expected = n_per_class * self.train.class_count();
        if set.len() != expected {
            return Err(Error::Consistency(format!(
                "{recipe} training set has {} samples, expected {expected}",
                set.len()
            )));
        }
        Ok(set)
    }
}

/// Runs every (classifier, recipe, point, repeat) cell. Results come back in
/// that nesting order, following the order of the configuration lists.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<ExperimentResult>> {
    let data = SweepData::prepare(config)?;
    run_sweep_with(config, &data)
}

pub fn run_sweep_with(config: &ExperimentConfig, data: &SweepData) -> Result<Vec<ExperimentResult>> {
    config.validate()?;
    let mut results = Vec::new();
    for &recipe in &config.recipes {
        for &point in &config.sweep_points {
            for repeat in 0..config.repeats {
                let seed = cell_seed(config.master_seed, point, repeat);
                let context = format!("{recipe} at {point}/class, repeat {repeat}");
                let cell = run_cell(config, data, recipe, point, repeat, seed).map_err(|e| e.with_context(context))?;
                results.extend(cell);
            }
        }
    }
    let rank = |r: &ExperimentResult| {
        (
            config.classifiers.iter().position(|&c| c == r.classifier),
            config.recipes.iter().position(|&x| x == r.recipe),
            r.n_per_class,
            r.repeat,
        )
    };
    results.sort_by_key(rank);
    Ok(results)
}

fn run_cell(
    config: &ExperimentConfig,
    data: &SweepData,
    recipe: Recipe,
    point: usize,
    repeat: usize,
    seed: u64,
) -> Result<Vec<ExperimentResult>> {
    let start = Instant::now();
    let mut train = data.training_features(config, recipe, point, seed)?;
    let standardizer = Standardizer::fit(&train)?;
    standardizer.apply_in_place(&mut train)?;
    let test = standardizer.apply(&data.test_features)?;
    let prep = start.elapsed().as_secs_f64();
    let mut out = Vec::new();
    for &kind in &config.classifiers {
        let t = Instant::now();
        let classifier_seed = rng::derive_seed(seed, &[rng::tag(kind.name())]);
        let model = config.classifier_config(kind).with_seed(classifier_seed).train(&train)?;
        let train_error_pct = error_percent(&model.predict(&train)?, &train.labels)?;
        let test_error_pct = error_percent(&model.predict(&test)?, &test.labels)?;
        let wall = t.elapsed().as_secs_f64() + prep;
        log::info!(
            "{kind} {recipe} n={point} repeat={repeat}: train {train_error_pct:.2}% test {test_error_pct:.2}% ({wall:.1}s)"
        );
        out.push(ExperimentResult {
            classifier: kind,
            recipe,
            n_per_class: point,
            repeat,
            seed,
            train_error_pct,
            test_error_pct,
            wall_time_s: wall,
        });
    }
    Ok(out)
}

/// Mean and spread over repeats for one curve point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSummary {
    pub classifier: ClassifierKind,
    pub recipe: Recipe,
    pub n_per_class: usize,
    pub repeats: usize,
    pub mean_train: f64,
    pub mean_test: f64,
    /// Sample standard deviations (zero for a single repeat).
    pub std_train: f64,
    pub std_test: f64,
    pub mean_gap: f64,
    pub std_gap: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One summary per (classifier, recipe, point), in first-appearance order.
pub fn summarize(results: &[ExperimentResult]) -> Vec<PointSummary> {
    let mut keys: Vec<(ClassifierKind, Recipe, usize)> = Vec::new();
    for r in results {
        let k = (r.classifier, r.recipe, r.n_per_class);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(classifier, recipe, n)| {
            let cell: Vec<&ExperimentResult> = results
                .iter()
                .filter(|r| r.classifier == classifier && r.recipe == recipe && r.n_per_class == n)
                .collect();
            let col = |f: fn(&ExperimentResult) -> f64| cell.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (mean_train, std_train) = mean_std(&col(|r| r.train_error_pct));
            let (mean_test, std_test) = mean_std(&col(|r| r.test_error_pct));
            let (mean_gap, std_gap) = mean_std(&col(|r| r.test_error_pct - r.train_error_pct));
            PointSummary {
                classifier,
                recipe,
                n_per_class: n,
                repeats: cell.len(),
                mean_train,
                mean_test,
                std_train,
                std_test,
                mean_gap,
                std_gap,
            }
        })
        .collect()
}

/// Baseline test error and overfitting gap at the smallest and largest
/// sweep point, per classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineTrend {
    pub classifier: ClassifierKind,
    pub smallest: PointSummary,
    pub largest: PointSummary,
}

impl BaselineTrend {
    pub fn test_improves(&self) -> bool {
        self.largest.mean_test < self.smallest.mean_test
    }

    pub fn gap_shrinks(&self) -> bool {
        self.largest.mean_gap < self.smallest.mean_gap
    }
}

pub fn baseline_trend(results: &[ExperimentResult]) -> Vec<BaselineTrend> {
    let summaries: Vec<PointSummary> = summarize(results)
        .into_iter()
        .filter(|s| s.recipe == Recipe::Baseline)
        .collect();
    let mut kinds: Vec<ClassifierKind> = Vec::new();
    for s in &summaries {
        if !kinds.contains(&s.classifier) {
            kinds.push(s.classifier);
        }
    }
    kinds
        .into_iter()
        .filter_map(|k| {
            let mine: Vec<&PointSummary> = summaries.iter().filter(|s| s.classifier == k).collect();
            let smallest = mine.iter().min_by_key(|s| s.n_per_class)?;
            let largest = mine.iter().max_by_key(|s| s.n_per_class)?;
            Some(BaselineTrend {
                classifier: k,
                smallest: (*smallest).clone(),
                largest: (*largest).clone(),
            })
        })
        .collect()
}

/// Output paths for a sweep written to `out_dir`.
pub fn output_paths(out_dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (out_dir.join(format!("{stem}.csv")), out_dir.join(format!("{stem}.svg")))
}
