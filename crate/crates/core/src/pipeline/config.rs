use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::composer::EnsembleSpace;
use crate::corpus::{DomainRole, IngestSource, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluator::{EnergyModel, GridSpec, ScoringConfig};
use crate::metareg::MetaregConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Where the corpora come from: a synthetic spec, or plain-text files.
/// With neither given the default synthetic setup is used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticSpec>,
    pub files: Vec<IngestSource>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Files(Vec<IngestSource>),
}

impl DataConfig {
    pub fn source(&self) -> Result<DataSource> {
        match (&self.synthetic, self.files.is_empty()) {
            (Some(_), false) => Err(Error::Config(
                "data: give either `synthetic` or `files`, not both".into(),
            )),
            (Some(s), true) => Ok(DataSource::Synthetic(s.clone())),
            (None, false) => Ok(DataSource::Files(self.files.clone())),
            (None, true) => Ok(DataSource::Synthetic(SyntheticSpec::default())),
        }
    }
}

/// Base-model pre-training before adapters are fitted; `epochs = 0` skips it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Also the seed of the base initialization.
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            seed: 1,
            epochs: 1,
            lr: 1e-3,
            batch_size: 4,
        }
    }
}

impl PretrainConfig {
    /// Optimizer settings: everything not listed here comes from `train`.
    pub fn train_config(&self, train: &TrainConfig) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
            ..train.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Predictions per evaluation window.
    pub eval_seq_len: usize,
    pub ensemble_space: EnsembleSpace,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            eval_seq_len: 128,
            ensemble_space: EnsembleSpace::Probability,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Thresholds of the auto-k sweep.
    pub auto_thresholds: Vec<f64>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            auto_thresholds: (1..=10).map(|i| i as f64 / 1000.0).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub scoring: ScoringConfig,
    pub grid: GridSpec,
    pub bench: BenchConfig,
    pub energy: EnergyModel,
    pub metareg: MetaregConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("modcomp-out"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            scoring: ScoringConfig::default(),
            grid: GridSpec::default(),
            bench: BenchConfig::default(),
            energy: EnergyModel::default(),
            metareg: MetaregConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; a missing file is a configuration error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks that do not need the corpus. Vocabulary size and domain
    /// references are checked once the corpus is known.
    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synthetic(s) = self.data.source()? {
            s.validate()?;
        }
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = 4;
        }
        model.validate()?;
        self.train.validate()?;
        if self.pretrain.epochs > 0 {
            self.pretrain.train_config(&self.train).validate()?;
        }
        self.scoring.validate(&self.model)?;
        self.energy.validate()?;
        self.metareg.validate()?;
        if self.train.seq_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "train.seq_len {} exceeds model.max_seq_len {}",
                self.train.seq_len, self.model.max_seq_len
            )));
        }
        if self.bench.eval_seq_len == 0 || self.bench.eval_seq_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "bench.eval_seq_len must be in 1..={}",
                self.model.max_seq_len
            )));
        }
        if self.report.auto_thresholds.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("report.auto_thresholds must be positive".into()));
        }
        if self.grid.seeds.is_empty() {
            return Err(Error::Config("grid.seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Model config with the vocabulary size taken from the corpus.
    pub fn model_for_vocab(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        match m.vocab_size {
            0 => m.vocab_size = vocab_size,
            v if v != vocab_size => {
                return Err(Error::Config(format!(
                    "model.vocab_size {v} does not match the corpus vocabulary of {vocab_size}"
                )))
            }
            _ => {}
        }
        m.validate()?;
        Ok(m)
    }

    /// Number of domains that get an adapter, known before the corpus
    /// exists.
    pub fn n_train_domains(&self) -> Result<usize> {
        Ok(match self.data.source()? {
            DataSource::Synthetic(s) => s.n_domains,
            DataSource::Files(f) => f.iter().filter(|s| s.role == DomainRole::Train).count(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn default_round_trips_through_toml() {
        let text = RunConfig::default().to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(matches!(
            RunConfig::from_toml("outptu_dir = 'x'"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[train]\nepoch = 3"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn grid_axes_parse() {
        let cfg = RunConfig::from_toml(
            "[grid]\nstrategies = ['tfidf', 'prior']\nmethods = ['ensemble']\nk = [0, 2, 'auto:0.01']\nseeds = [1]",
        )
        .unwrap();
        assert_eq!(cfg.grid.k.len(), 3);
        assert!(matches!(
            RunConfig::from_toml("[grid]\nk = ['two']"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn both_data_sources_conflict() {
        let cfg = RunConfig::from_toml(
            "[data.synthetic]\nn_domains = 2\n[[data.files]]\ndomain_id = 'a'\npath = 'a.txt'\nrole = 'train'",
        )
        .unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn vocab_mismatch_is_a_config_error() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.model_for_vocab(50).unwrap().vocab_size, 50);
        cfg.model.vocab_size = 40;
        assert!(matches!(cfg.model_for_vocab(50), Err(Error::Config(_))));
    }
}
