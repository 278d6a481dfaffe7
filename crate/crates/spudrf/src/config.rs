//! Run configuration: one JSON file describing the data source, the model,
//! the schedule, and the reporting knobs.
//!
//! Every field has a default, so `{}` is a valid config. Unknown keys are
//! rejected with the offending key named and its position in the document
//! spelled out, which catches typos like `"pase"` before a long run burns
//! time on the wrong settings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic, load_csv, split_train_test, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::rng::{salt, substream_seed};
use crate::self_paced::{PaceConfig, WeightScheme};
use crate::trainer::{
    BackboneConfig, ForestConfig, LeafSection, OptimizerConfig, TrainConfig, TrainMode,
};

/// Where the training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSource {
    /// Generate the two-component benchmark from a spec.
    #[serde(rename = "synthetic")]
    Synthetic(SyntheticSpec),
    /// Load CSV files. With no `test` file, `train` is split by the
    /// `split` section.
    #[serde(rename = "csv")]
    Csv {
        train: String,
        #[serde(default)]
        test: Option<String>,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::default())
    }
}

/// How a single dataset is divided into train and test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    /// Shuffle seed; when absent one is derived from the run seed.
    pub seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.8,
            seed: None,
        }
    }
}

/// Metric and summary settings; none of these affect the trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Absolute-error level for the cumulative score.
    pub cs_level: f64,
    /// Target-bin width for the entropy profile in the summary.
    pub entropy_bin_width: f64,
    /// Targets at or above this are the rare region in ablation tables.
    pub rare_threshold: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            cs_level: 5.0,
            entropy_bin_width: 5.0,
            rare_threshold: 60.0,
        }
    }
}

/// The whole run: data, model, schedule, optimizer, and reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: TrainMode,
    pub seed: u64,
    pub warmup_steps: usize,
    pub weight_scheme: WeightScheme,
    pub entropy_in_gradient: bool,
    pub dataset: DatasetSource,
    pub split: SplitConfig,
    pub backbone: BackboneConfig,
    pub forest: ForestConfig,
    pub optimizer: OptimizerConfig,
    pub pace: PaceConfig,
    pub leaf: LeafSection,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            mode: train.mode,
            seed: train.seed,
            warmup_steps: train.warmup_steps,
            weight_scheme: train.weight_scheme,
            entropy_in_gradient: train.entropy_in_gradient,
            dataset: DatasetSource::default(),
            split: SplitConfig::default(),
            backbone: train.backbone,
            forest: train.forest,
            optimizer: train.optimizer,
            pace: train.pace,
            leaf: train.leaf,
            report: ReportConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a JSON document, reporting unknown or ill-typed keys with
    /// their path in the document.
    pub fn from_json_str(text: &str) -> Result<RunConfig> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                Error::Config(format!("invalid config: {}", e.inner()))
            } else {
                Error::Config(format!("invalid config at `{path}`: {}", e.inner()))
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Read and parse a config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(&path.display().to_string(), e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
        }
        let f = self.split.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!(
                "split train_fraction must be in (0, 1), got {f}"
            )));
        }
        if !(self.report.cs_level >= 0.0) || !self.report.cs_level.is_finite() {
            return Err(Error::Config(format!(
                "cs_level must be finite and >= 0, got {}",
                self.report.cs_level
            )));
        }
        if !(self.report.entropy_bin_width > 0.0) || !self.report.entropy_bin_width.is_finite() {
            return Err(Error::Config(format!(
                "entropy_bin_width must be positive and finite, got {}",
                self.report.entropy_bin_width
            )));
        }
        if !self.report.rare_threshold.is_finite() {
            return Err(Error::Config(format!(
                "rare_threshold must be finite, got {}",
                self.report.rare_threshold
            )));
        }
        Ok(())
    }

    /// The training slice of the config.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            seed: self.seed,
            warmup_steps: self.warmup_steps,
            weight_scheme: self.weight_scheme,
            entropy_in_gradient: self.entropy_in_gradient,
            backbone: self.backbone.clone(),
            forest: self.forest.clone(),
            optimizer: self.optimizer.clone(),
            pace: self.pace.clone(),
            leaf: self.leaf.clone(),
        }
    }

    /// The config as the run actually executes it, with the mode's
    /// constraints applied. This is what run summaries echo.
    pub fn effective(&self) -> RunConfig {
        let normalized = self.train_config().normalized();
        RunConfig {
            weight_scheme: normalized.weight_scheme,
            pace: normalized.pace,
            ..self.clone()
        }
    }

    /// Produce the train/test pair this config describes.
    pub fn resolve_data(&self) -> Result<(Dataset, Dataset)> {
        let split_seed = self
            .split
            .seed
            .unwrap_or_else(|| substream_seed(self.seed, salt::SPLIT, 0));
        match &self.dataset {
            DatasetSource::Synthetic(spec) => {
                let full = generate_synthetic(spec)?;
                split_train_test(&full, self.split.train_fraction, split_seed)
            }
            DatasetSource::Csv { train, test } => {
                let train_set = load_csv(Path::new(train))?;
                match test {
                    Some(test_path) => {
                        let test_set = load_csv(Path::new(test_path))?;
                        Ok((train_set, test_set))
                    }
                    None => split_train_test(&train_set, self.split.train_fraction, split_seed),
                }
            }
        }
    }
}
