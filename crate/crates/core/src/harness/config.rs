//! Experiment configuration and its `key = value` file grammar.
//!
//! ```text
//! # comment
//! run.points = 500, 1000, 2500, 5000
//! run.classifiers = elm, svm
//! elastic.alpha = 1.2
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::classifiers::{BatchSize, ClassifierConfig, ClassifierKind, ElmConfig, MlpConfig, SvmConfig};
use crate::error::{Error, Result};
use crate::features::PoolingConfig;
use crate::oversample::{DbsmoteParams, SmoteParams};
use crate::warp::{AffineRanges, ElasticParams};

/// Environment variable naming the dataset directory.
pub const DATA_ENV: &str = "WARPBENCH_DATA";

/// How a cell's training set is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Recipe {
    /// `n` real samples per class.
    Baseline,
    /// The fixed real pool plus elastically warped images up to `n` per class.
    Elastic,
    /// The fixed real pool plus SMOTE feature vectors up to `n` per class.
    Smote,
    /// The fixed real pool plus simplified-DBSMOTE vectors up to `n` per class.
    Dbsmote,
}

impl Recipe {
    pub const ALL: [Recipe; 4] = [Recipe::Baseline, Recipe::Elastic, Recipe::Smote, Recipe::Dbsmote];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::Baseline => "baseline",
            Recipe::Elastic => "elastic",
            Recipe::Smote => "smote",
            Recipe::Dbsmote => "dbsmote",
        }
    }

    pub fn is_augmented(self) -> bool {
        self != Recipe::Baseline
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Parameter(format!("unknown recipe {s:?} (expected baseline, elastic, smote or dbsmote)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub kernel_size: usize,
    pub filter_count: usize,
    pub bank_seed: u64,
    /// Load the filter bank from this file instead of generating it.
    pub bank_path: Option<PathBuf>,
    pub pool: PoolingConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            kernel_size: 7,
            filter_count: 96,
            bank_seed: 0,
            bank_path: None,
            pool: PoolingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Directory holding the four IDX files.
    pub data_dir: PathBuf,
    pub classifiers: Vec<ClassifierKind>,
    pub recipes: Vec<Recipe>,
    /// Samples per class at each sweep point, strictly increasing.
    pub sweep_points: Vec<usize>,
    pub repeats: usize,
    pub master_seed: u64,
    /// Real samples per class available to the augmented recipes.
    pub pool_per_class: usize,
    pub elastic: ElasticParams,
    /// Affine jitter applied after the elastic warp, if any.
    pub affine: Option<AffineRanges>,
    pub smote: SmoteParams,
    pub dbsmote: DbsmoteParams,
    pub mlp: MlpConfig,
    pub svm: SvmConfig,
    pub elm: ElmConfig,
    pub features: FeatureConfig,
    pub out_dir: PathBuf,
    /// Where feature and warped-image caches live; `None` disables caching.
    pub cache_dir: Option<PathBuf>,
    /// Write measured wall times to the CSV. Off by default so that the CSV
    /// depends only on the configuration and seed.
    pub record_wall_time: bool,
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_dir: std::env::var_os(DATA_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data/mnist")),
            classifiers: ClassifierKind::ALL.to_vec(),
            recipes: vec![Recipe::Baseline],
            sweep_points: vec![500, 1000, 2500, 5000],
            repeats: 3,
            master_seed: 0,
            pool_per_class: 500,
            elastic: ElasticParams::default(),
            affine: None,
            smote: SmoteParams::default(),
            dbsmote: DbsmoteParams::default(),
            mlp: desk_mlp(),
            svm: SvmConfig::default(),
            elm: ElmConfig::default(),
            features: FeatureConfig::default(),
            out_dir: PathBuf::from("results"),
            cache_dir: Some(PathBuf::from("cache")),
            record_wall_time: false,
            threads: None,
        }
    }
}

/// MLP settings for desk-scale runs: 200 epochs of minibatch 128.
pub fn desk_mlp() -> MlpConfig {
    MlpConfig {
        epochs: 200,
        batch_size: BatchSize::Size(128),
        ..MlpConfig::default()
    }
}

/// MLP settings matching the original protocol: 2000 full-batch epochs.
pub fn fidelity_mlp() -> MlpConfig {
    MlpConfig {
        epochs: 2000,
        batch_size: BatchSize::Full,
        ..MlpConfig::default()
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Parameter("repeats must be >= 1".into()));
        }
        if self.sweep_points.is_empty() {
            return Err(Error::Parameter("sweep_points must not be empty".into()));
        }
        if self.sweep_points.windows(2).any(|w| w[0] >= w[1]) || self.sweep_points[0] == 0 {
            return Err(Error::Parameter(format!(
                "sweep_points must be positive and strictly increasing, got {:?}",
                self.sweep_points
            )));
        }
        if self.classifiers.is_empty() || self.recipes.is_empty() {
            return Err(Error::Parameter("need at least one classifier and one recipe".into()));
        }
        if self.recipes.iter().any(|r| r.is_augmented()) && self.sweep_points[0] < self.pool_per_class {
            return Err(Error::Parameter(format!(
                "augmented recipes start from {} real samples per class; sweep point {} is below that",
                self.pool_per_class, self.sweep_points[0]
            )));
        }
        if self.threads == Some(0) {
            return Err(Error::Parameter("threads must be >= 1".into()));
        }
        self.elastic.validate()?;
        if let Some(a) = &self.affine {
            a.validate()?;
        }
        self.features.pool.validate()?;
        self.mlp.validate()?;
        self.svm.validate()?;
        self.elm.validate()
    }

    pub fn classifier_config(&self, kind: ClassifierKind) -> ClassifierConfig {
        match kind {
            ClassifierKind::Mlp => ClassifierConfig::Mlp(self.mlp.clone()),
            ClassifierKind::Svm => ClassifierConfig::Svm(self.svm.clone()),
            ClassifierKind::Elm => ClassifierConfig::Elm(self.elm.clone()),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut config = Self::default();
        config.apply_file(path)?;
        Ok(config)
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
            .map_err(|e| e.with_context(format!("config file {}", path.display())))
    }

    /// Applies every `key = value` line of `text` in order.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parameter(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| e.with_context(format!("line {}", n + 1)))?;
        }
        Ok(())
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data.dir" => self.data_dir = PathBuf::from(value),
            "data.pool_per_class" => self.pool_per_class = parse(key, value)?,
            "run.classifiers" => self.classifiers = parse_list(value)?,
            "run.recipes" => self.recipes = parse_list(value)?,
            "run.points" => self.sweep_points = parse_list(value)?,
            "run.repeats" => self.repeats = parse(key, value)?,
            "run.seed" => self.master_seed = parse(key, value)?,
            "run.out" => self.out_dir = PathBuf::from(value),
            "run.cache" => {
                self.cache_dir = match value {
                    "" | "none" | "off" => None,
                    dir => Some(PathBuf::from(dir)),
                }
            }
            "run.threads" => self.threads = Some(parse(key, value)?),
            "run.fidelity" => {
                if parse::<bool>(key, value)? {
                    self.mlp = MlpConfig { seed: self.mlp.seed, ..fidelity_mlp() };
                }
            }
            "report.wall_time" => self.record_wall_time = parse(key, value)?,
            "elastic.alpha" => self.elastic.alpha = parse(key, value)?,
            "elastic.sigma" => self.elastic.sigma = parse(key, value)?,
            "affine.enabled" => {
                self.affine = if parse(key, value)? {
                    Some(self.affine.unwrap_or_default())
                } else {
                    None
                }
            }
            "affine.rotation" | "affine.shear" | "affine.translate" | "affine.scale_min" | "affine.scale_max" => {
                let v: f64 = parse(key, value)?;
                let a = self.affine.get_or_insert_with(AffineRanges::default);
                match key {
                    "affine.rotation" => a.rotation = (-v, v),
                    "affine.shear" => {
                        a.shear_x = (-v, v);
                        a.shear_y = (-v, v);
                    }
                    "affine.translate" => {
                        a.translate_x = (-v, v);
                        a.translate_y = (-v, v);
                    }
                    "affine.scale_min" => a.scale.0 = v,
                    _ => a.scale.1 = v,
                }
            }
            "smote.k" => self.smote.k = parse(key, value)?,
            "dbsmote.k" => self.dbsmote.k = parse(key, value)?,
            "dbsmote.eps" => self.dbsmote.eps = parse(key, value)?,
            "mlp.hidden_units" => self.mlp.hidden_units = parse(key, value)?,
            "mlp.epochs" => self.mlp.epochs = parse(key, value)?,
            "mlp.learning_rate" => self.mlp.learning_rate = parse(key, value)?,
            "mlp.momentum" => self.mlp.momentum = parse(key, value)?,
            "mlp.batch_size" => {
                self.mlp.batch_size = match value {
                    "full" => BatchSize::Full,
                    n => BatchSize::Size(parse(key, n)?),
                }
            }
            "svm.c" => self.svm.c = parse(key, value)?,
            "svm.max_iterations" => self.svm.max_iterations = parse(key, value)?,
            "svm.tolerance" => self.svm.tolerance = parse(key, value)?,
            "elm.hidden_units" => self.elm.hidden_units = parse(key, value)?,
            "elm.lambda" => self.elm.lambda = parse(key, value)?,
            "features.kernel_size" => self.features.kernel_size = parse(key, value)?,
            "features.filters" => self.features.filter_count = parse(key, value)?,
            "features.seed" => self.features.bank_seed = parse(key, value)?,
            "features.bank" => self.features.bank_path = Some(PathBuf::from(value)),
            "features.pool_size" => self.features.pool.q = parse(key, value)?,
            "features.pool_stride" => self.features.pool.stride = parse(key, value)?,
            "features.pool_p" => {
                self.features.pool.p = match value {
                    "inf" | "max" => f64::INFINITY,
                    v => parse(key, v)?,
                }
            }
            _ => return Err(Error::Parameter(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parameter(format!("{key}: cannot parse {value:?}")))
}

/// Comma-separated list.
pub fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Parameter(format!("cannot parse list item {s:?}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_dotted_keys() {
        let mut c = ExperimentConfig::default();
        c.apply_text(
            "# sweep\nrun.points = 500, 1000\nrun.classifiers = elm,svm\nrun.recipes = elastic, smote\n\
             elastic.alpha = 8   # strong\nmlp.batch_size = full\nfeatures.pool_p = inf\nrun.cache = none\n",
        )
        .unwrap();
        assert_eq!(c.sweep_points, vec![500, 1000]);
        assert_eq!(c.classifiers, vec![ClassifierKind::Elm, ClassifierKind::Svm]);
        assert_eq!(c.recipes, vec![Recipe::Elastic, Recipe::Smote]);
        assert_eq!(c.elastic.alpha, 8.0);
        assert_eq!(c.mlp.batch_size, BatchSize::Full);
        assert!(c.features.pool.p.is_infinite());
        assert_eq!(c.cache_dir, None);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_lines() {
        let mut c = ExperimentConfig::default();
        assert!(c.apply_text("elastic.beta = 1").is_err());
        assert!(c.apply_text("run.repeats").is_err());
        assert!(c.apply_text("run.repeats = many").is_err());
    }

    #[test]
    fn validates_invariants() {
        let mut c = ExperimentConfig::default();
        c.validate().unwrap();
        c.repeats = 0;
        assert!(c.validate().is_err());
        c.repeats = 1;
        c.sweep_points = vec![1000, 500];
        assert!(c.validate().is_err());
        c.sweep_points = vec![];
        assert!(c.validate().is_err());
        c.sweep_points = vec![100, 1000];
        c.recipes = vec![Recipe::Smote];
        assert!(c.validate().is_err());
    }

    #[test]
    fn fidelity_restores_full_batch_epochs() {
        let mut c = ExperimentConfig::default();
        assert_eq!(c.mlp.epochs, 200);
        c.set("run.fidelity", "true").unwrap();
        assert_eq!((c.mlp.epochs, c.mlp.batch_size), (2000, BatchSize::Full));
    }
}
