//! Experiment configuration, read from JSON with unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::DatasetSpec;
use super::optim::OptimizerConfig;
use crate::diffmodel::Head;
use crate::error::{Error, Result};
use crate::perturb::AdvConfig;
use crate::regularizers::RegularizerKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    Adv,
    Vat,
    Salt,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "erm" => Ok(Method::Erm),
            "adv" => Ok(Method::Adv),
            "vat" => Ok(Method::Vat),
            "salt" => Ok(Method::Salt),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Layer widths from input to output, e.g. `[2, 32, 32, 2]`.
    pub layers: Vec<usize>,
    pub head: HeadKind,
}

fn default_bins() -> usize {
    crate::calibration::DEFAULT_BINS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    #[serde(default)]
    pub adv: AdvConfig,
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub output_dir: PathBuf,
    /// Equal-width bins for the validation ECE.
    #[serde(default = "default_bins")]
    pub calibration_bins: usize,
}

impl ExperimentConfig {
    /// Two moons (100 train / 500 test, noise 0.1), MLP [2, 32, 32, 2], SALT
    /// with the default adversarial settings, Adam at lr 0.01 for 200 epochs of
    /// batch 32.
    pub fn canonical() -> Self {
        Self {
            method: Method::Salt,
            adv: AdvConfig::default(),
            model: ModelSpec {
                layers: vec![2, 32, 32, 2],
                head: HeadKind::Classification,
            },
            optimizer: OptimizerConfig::Adam {
                lr: 0.01,
                beta1: 0.9,
                beta2: 0.98,
                eps: 1e-8,
            },
            epochs: 200,
            batch_size: 32,
            seed: 0,
            dataset: DatasetSpec::TwoMoons {
                n_train: 100,
                n_test: 500,
                noise: 0.1,
            },
            output_dir: PathBuf::from("runs/canonical"),
            calibration_bins: default_bins(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn head(&self) -> Head {
        match self.model.head {
            HeadKind::Classification => Head::Classification {
                classes: self.model.layers.last().copied().unwrap_or(0),
            },
            HeadKind::Regression => Head::Regression,
        }
    }

    pub fn regularizer(&self) -> RegularizerKind {
        RegularizerKind::for_head(self.head())
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.calibration_bins == 0 {
            return bad("calibration_bins must be >= 1".into());
        }
        let layers = &self.model.layers;
        if layers.len() < 2 || layers.contains(&0) {
            return bad(format!("invalid layer sizes {layers:?}"));
        }
        let out = layers[layers.len() - 1];
        match self.model.head {
            HeadKind::Classification if out < 2 => {
                return bad("a classification head needs >= 2 outputs".into())
            }
            HeadKind::Regression if out != 1 => return bad("a regression head needs exactly 1 output".into()),
            _ => {}
        }
        self.optimizer.validate()?;
        if self.method != Method::Erm {
            self.adv.validate()?;
        }
        self.dataset.validate()?;
        let expected = match self.dataset {
            DatasetSpec::TwoMoons { .. } => Some((2, HeadKind::Classification, 2)),
            DatasetSpec::Blobs { dim, centers, .. } => Some((dim, HeadKind::Classification, centers)),
            DatasetSpec::Sine { .. } => Some((1, HeadKind::Regression, 1)),
            DatasetSpec::Csv { .. } => None,
        };
        if let Some((dim, head, outputs)) = expected {
            if layers[0] != dim || self.model.head != head || out != outputs {
                return bad(format!(
                    "model {layers:?} ({:?}) does not fit the dataset: need input {dim}, {head:?} head with {outputs} outputs",
                    self.model.head
                ));
            }
        }
        Ok(())
    }
}
