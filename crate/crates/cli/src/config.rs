//! The TOML run configuration. Every key is optional; command-line flags are
//! layered on top of the file and the fully resolved result is written back
//! to the output directory as `config.toml`.

use std::path::{Path, PathBuf};

use fiona_core::dataio::SynthConfig;
use fiona_core::models::{Architecture, ModelConfig, DEFAULT_DROPOUT, DEFAULT_PROJECTION_DIM};
use fiona_core::objective::LossConfig;
use fiona_core::train::{AdamConfig, TrainConfig};
use fiona_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: DataSection,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `fcn`, `cnn`, `concat` or `fiona`.
    pub arch: Option<String>,
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub train_a: Option<PathBuf>,
    pub train_b: Option<PathBuf>,
    pub eval_a: Option<PathBuf>,
    pub eval_b: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_per_class: Option<usize>,
    pub dims: Option<[usize; 2]>,
    pub theta: Option<f64>,
    pub sigma: Option<f64>,
    pub separation: Option<f64>,
    pub nuisance: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dropout: Option<f64>,
    pub projection_dim: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_epsilon: Option<f64>,
    pub patience: Option<usize>,
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda: Option<f64>,
    pub label_smoothing: Option<f64>,
    pub cka_epsilon: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub data_dir: Option<PathBuf>,
    pub pairs: Option<Vec<String>>,
    pub modes: Option<Vec<String>>,
    pub seeds: Option<Vec<u64>>,
    pub jobs: Option<usize>,
}

/// Overlays `top` onto `base`, key by key, recursing into tables.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn to_table(cfg: &RunConfig) -> toml::Table {
    toml::Table::try_from(cfg).expect("run config serializes to a table")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// The file at `path` (if any) with `flags` layered on top.
    pub fn resolve(path: Option<&Path>, flags: &RunConfig) -> Result<Self> {
        let mut table = match path {
            Some(p) => to_table(&Self::load(p)?),
            None => toml::Table::new(),
        };
        merge(&mut table, to_table(flags));
        table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn arch(&self) -> Result<Architecture> {
        match self.data.arch.as_deref() {
            Some("fcn") => Ok(Architecture::Fcn),
            Some("cnn") => Ok(Architecture::Cnn),
            Some("concat") => Ok(Architecture::ConcatFusion),
            Some("fiona") => Ok(Architecture::Fiona),
            Some(other) => Err(Error::Config(format!("unknown architecture {other:?}"))),
            None => Err(Error::Config("no architecture given".into())),
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        let d = SynthConfig::default();
        let s = &self.synth;
        SynthConfig {
            n_per_class: s.n_per_class.unwrap_or(d.n_per_class),
            dims: s.dims.map_or(d.dims, |[a, b]| (a, b)),
            theta: s.theta.unwrap_or(d.theta),
            sigma: s.sigma.unwrap_or(d.sigma),
            separation: s.separation.unwrap_or(d.separation),
            nuisance: s.nuisance.unwrap_or(d.nuisance),
            seed: self.seed(),
        }
    }

    pub fn model_config(&self, arch: Architecture, dims: &[usize]) -> ModelConfig {
        ModelConfig {
            arch,
            input_dims: dims.to_vec(),
            dropout: self.model.dropout.unwrap_or(DEFAULT_DROPOUT),
            projection_dim: self.model.projection_dim.unwrap_or(DEFAULT_PROJECTION_DIM),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        let (t, l) = (&self.train, &self.loss);
        let adam = AdamConfig {
            learning_rate: t.learning_rate.unwrap_or(d.adam.learning_rate),
            beta1: t.beta1.unwrap_or(d.adam.beta1),
            beta2: t.beta2.unwrap_or(d.adam.beta2),
            epsilon: t.adam_epsilon.unwrap_or(d.adam.epsilon),
        };
        let loss = LossConfig {
            lambda: l.lambda.unwrap_or(d.loss.lambda),
            label_smoothing: l.label_smoothing.unwrap_or(d.loss.label_smoothing),
            cka_epsilon: l.cka_epsilon.unwrap_or(d.loss.cka_epsilon),
        };
        TrainConfig {
            epochs: t.epochs.unwrap_or(d.epochs),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            adam,
            early_stop_patience: t.patience.unwrap_or(d.early_stop_patience),
            seed: self.seed(),
            loss,
        }
    }

    pub fn val_fraction(&self) -> Result<f64> {
        let f = self.train.val_fraction.unwrap_or(DEFAULT_VAL_FRACTION);
        if f > 0.0 && f < 1.0 {
            Ok(f)
        } else {
            Err(Error::Config(format!("validation fraction {f} outside (0, 1)")))
        }
    }

    /// Copy with every training default spelled out, for the echo.
    pub fn with_training_defaults(&self) -> Self {
        let t = self.train_config();
        let mut out = self.clone();
        out.seed = Some(t.seed);
        out.model.dropout.get_or_insert(DEFAULT_DROPOUT);
        out.model.projection_dim.get_or_insert(DEFAULT_PROJECTION_DIM);
        out.train = TrainSection {
            epochs: Some(t.epochs),
            batch_size: Some(t.batch_size),
            learning_rate: Some(t.adam.learning_rate),
            beta1: Some(t.adam.beta1),
            beta2: Some(t.adam.beta2),
            adam_epsilon: Some(t.adam.epsilon),
            patience: Some(t.early_stop_patience),
            val_fraction: Some(self.train.val_fraction.unwrap_or(DEFAULT_VAL_FRACTION)),
        };
        out.loss = LossSection {
            lambda: Some(t.loss.lambda),
            label_smoothing: Some(t.loss.label_smoothing),
            cka_epsilon: Some(t.loss.cka_epsilon),
        };
        out
    }

    /// Copy with every synthetic-data default spelled out.
    pub fn with_synth_defaults(&self) -> Self {
        let s = self.synth_config();
        let mut out = self.clone();
        out.seed = Some(s.seed);
        out.synth = SynthSection {
            n_per_class: Some(s.n_per_class),
            dims: Some([s.dims.0, s.dims.1]),
            theta: Some(s.theta),
            sigma: Some(s.sigma),
            separation: Some(s.separation),
            nuisance: Some(s.nuisance),
        };
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
