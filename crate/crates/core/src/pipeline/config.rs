//! Experiment configuration.
//!
//! The file format is one `key = value` pair per line. `#` starts a comment and blank lines
//! are ignored. Later assignments win, so command-line overrides are applied after the file.
//! Relative paths are resolved against the working directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::baselines::ImputationMode;
use crate::em::{EmConfig, EmInit};
use crate::error::{Error, Result};
use crate::pipeline::classifier::ClassifierConfig;
use crate::pipeline::features::FeatureArm;
use crate::pipeline::mask::{MaskPattern, MaskSpec};

/// Directory holding the four MNIST IDX files, from `MISCONV_MNIST_DIR` or `data/mnist`.
pub fn default_mnist_dir() -> PathBuf {
    std::env::var_os("MISCONV_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub train_size: usize,
    pub test_size: usize,
    /// `square`, `noise` or `none`.
    pub mask: String,
    /// Area fraction for `square`, missing fraction for `noise`; `None` picks 0.25 or 0.75.
    pub mask_fraction: Option<f64>,
    pub mask_seed: u64,
    pub arms: Vec<FeatureArm>,
    pub kernel_file: Option<PathBuf>,
    pub kernel_seed: u64,
    pub filters: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub model_file: Option<PathBuf>,
    pub em: EmConfig,
    /// Training images used by EM (all when `None`).
    pub em_train_size: Option<usize>,
    pub imputation_mode: ImputationMode,
    pub classifier: ClassifierConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let dir = default_mnist_dir();
        Self {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
            train_size: 10_000,
            test_size: 2_000,
            mask: "square".into(),
            mask_fraction: None,
            mask_seed: 1,
            arms: FeatureArm::ALL.to_vec(),
            kernel_file: None,
            kernel_seed: 7,
            filters: 32,
            kernel_size: 5,
            stride: 2,
            padding: 2,
            model_file: None,
            em: EmConfig::default(),
            em_train_size: None,
            imputation_mode: ImputationMode::MixtureMean,
            classifier: ClassifierConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {value:?}")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "train_images" => self.train_images = value.into(),
            "train_labels" => self.train_labels = value.into(),
            "test_images" => self.test_images = value.into(),
            "test_labels" => self.test_labels = value.into(),
            "train_size" => self.train_size = parse(key, value)?,
            "test_size" => self.test_size = parse(key, value)?,
            "mask" => {
                if !matches!(value, "square" | "noise" | "none") {
                    return Err(Error::Config(format!("unknown mask {value:?}")));
                }
                self.mask = value.into();
            }
            "mask_fraction" => {
                self.mask_fraction = if value == "default" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "mask_seed" => self.mask_seed = parse(key, value)?,
            "arms" => {
                self.arms = value
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<Vec<_>>>()?;
            }
            "kernel_file" => self.kernel_file = optional_path(value),
            "kernel_seed" => self.kernel_seed = parse(key, value)?,
            "filters" => self.filters = parse(key, value)?,
            "kernel_size" => self.kernel_size = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "padding" => self.padding = parse(key, value)?,
            "model_file" => self.model_file = optional_path(value),
            "em_k" => self.em.k = parse(key, value)?,
            "em_l" => self.em.l = parse(key, value)?,
            "em_max_iters" => self.em.max_iters = parse(key, value)?,
            "em_ll_tol" => self.em.ll_tol = parse(key, value)?,
            "em_d_floor" => self.em.d_floor = parse(key, value)?,
            "em_seed" => self.em.seed = parse(key, value)?,
            "em_init" => self.em.init = value.parse::<EmInit>()?,
            "em_train_size" => {
                self.em_train_size = if value == "all" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "imputation_mode" => self.imputation_mode = value.parse()?,
            "learning_rate" => self.classifier.learning_rate = parse(key, value)?,
            "epochs" => self.classifier.epochs = parse(key, value)?,
            "batch_size" => self.classifier.batch_size = parse(key, value)?,
            "l2" => self.classifier.l2 = parse(key, value)?,
            "classifier_seed" => self.classifier.seed = parse(key, value)?,
            "output_dir" => self.output_dir = value.into(),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn mask_spec(&self) -> MaskSpec {
        let pattern = match self.mask.as_str() {
            "square" => MaskPattern::Square {
                area_fraction: self.mask_fraction.unwrap_or(0.25),
            },
            "noise" => MaskPattern::Noise {
                missing_fraction: self.mask_fraction.unwrap_or(0.75),
            },
            _ => MaskPattern::Complete,
        };
        MaskSpec {
            pattern,
            seed: self.mask_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut files = vec![
            &self.train_images,
            &self.train_labels,
            &self.test_images,
            &self.test_labels,
        ];
        files.extend(self.kernel_file.iter());
        files.extend(self.model_file.iter());
        if let Some(missing) = files.iter().find(|p| !p.is_file()) {
            return Err(Error::Config(format!(
                "file {} does not exist",
                missing.display()
            )));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config(
                "train_size and test_size must be positive".into(),
            ));
        }
        if self.arms.is_empty() {
            return Err(Error::Config("no arms selected".into()));
        }
        if self.filters == 0 || self.kernel_size == 0 || self.stride == 0 {
            return Err(Error::Config(
                "filters, kernel_size and stride must be positive".into(),
            ));
        }
        self.em.validate()?;
        self.classifier.validate()
    }

    /// Canonical `key = value` listing of every setting.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or("none".into(), |p| p.display().to_string())
        };
        let arms: Vec<&str> = self.arms.iter().map(|a| a.name()).collect();
        let init = match self.em.init {
            EmInit::KMeans => "kmeans",
            EmInit::RandomSubset => "random-subset",
        };
        let mode = match self.imputation_mode {
            ImputationMode::MixtureMean => "mixture-mean",
            ImputationMode::MapComponent => "map-component",
        };
        let entries: Vec<(&str, String)> = vec![
            ("train_images", self.train_images.display().to_string()),
            ("train_labels", self.train_labels.display().to_string()),
            ("test_images", self.test_images.display().to_string()),
            ("test_labels", self.test_labels.display().to_string()),
            ("train_size", self.train_size.to_string()),
            ("test_size", self.test_size.to_string()),
            ("mask", self.mask.clone()),
            (
                "mask_fraction",
                self.mask_fraction
                    .map_or("default".into(), |f| f.to_string()),
            ),
            ("mask_seed", self.mask_seed.to_string()),
            ("arms", arms.join(",")),
            ("kernel_file", path(&self.kernel_file)),
            ("kernel_seed", self.kernel_seed.to_string()),
            ("filters", self.filters.to_string()),
            ("kernel_size", self.kernel_size.to_string()),
            ("stride", self.stride.to_string()),
            ("padding", self.padding.to_string()),
            ("model_file", path(&self.model_file)),
            ("em_k", self.em.k.to_string()),
            ("em_l", self.em.l.to_string()),
            ("em_max_iters", self.em.max_iters.to_string()),
            ("em_ll_tol", self.em.ll_tol.to_string()),
            ("em_d_floor", self.em.d_floor.to_string()),
            ("em_seed", self.em.seed.to_string()),
            ("em_init", init.into()),
            (
                "em_train_size",
                self.em_train_size.map_or("all".into(), |n| n.to_string()),
            ),
            ("imputation_mode", mode.into()),
            ("learning_rate", self.classifier.learning_rate.to_string()),
            ("epochs", self.classifier.epochs.to_string()),
            ("batch_size", self.classifier.batch_size.to_string()),
            ("l2", self.classifier.l2.to_string()),
            ("classifier_seed", self.classifier.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_with_comments_and_overrides() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(
            "# header\n train_size = 50 # inline\n\nmask = noise\narms = zero, misconv\n",
        )
        .unwrap();
        cfg.apply_override("train_size=70").unwrap();
        assert_eq!(cfg.train_size, 70);
        assert_eq!(cfg.arms, vec![FeatureArm::Zero, FeatureArm::MisConv]);
        assert_eq!(
            cfg.mask_spec().pattern,
            MaskPattern::Noise {
                missing_fraction: 0.75
            }
        );
    }

    #[test]
    fn echo_roundtrips() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("mask_fraction = 0.3\nem_train_size = 123\nkernel_file = k.krn\nem_init = random-subset")
            .unwrap();
        let mut again = ExperimentConfig::default();
        again.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, again);

        let defaults = ExperimentConfig::default();
        let mut echoed = ExperimentConfig {
            mask_fraction: Some(0.5),
            ..ExperimentConfig::default()
        };
        echoed.apply_text(&defaults.to_text()).unwrap();
        assert_eq!(echoed, defaults);
    }

    #[test]
    fn rejects_bad_input() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.apply_text("nonsense").is_err());
        assert!(cfg.set("bogus", "1").is_err());
        assert!(cfg.set("train_size", "many").is_err());
        assert!(cfg.set("mask", "trapezoid").is_err());
        cfg.train_images = "/definitely/not/here".into();
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("does not exist"));
    }
}
