use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compensation::{EnsembleConfig, DEFAULT_SCALE};
use crate::data::SyntheticConfig;
use crate::encoder::OptimizerKind;
use crate::error::{Error, Result};
use crate::preservation::PreservationConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodVariant {
    /// Fixed epoch budget, masked cross-entropy, text head only.
    Naive,
    /// Like `Naive` with an added image/text alignment term.
    Alignment,
    /// Adaptive epoch budget, text head only.
    MgpOnly,
    /// Fixed epoch budget plus the visual compensation classifier.
    MgcOnly,
    Full,
}

impl MethodVariant {
    pub const ALL: [MethodVariant; 5] = [Self::Naive, Self::Alignment, Self::MgpOnly, Self::MgcOnly, Self::Full];

    pub fn preserves_gap(self) -> bool {
        matches!(self, Self::MgpOnly | Self::Full)
    }

    pub fn compensates(self) -> bool {
        matches!(self, Self::MgcOnly | Self::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Naive => "naive",
            Self::Alignment => "alignment",
            Self::MgpOnly => "mgp_only",
            Self::MgcOnly => "mgc_only",
            Self::Full => "full",
        }
    }
}

impl std::str::FromStr for MethodVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

/// Exported embedding tables. Table vectors serve directly as encoder inputs;
/// the text table has one row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TablePaths {
    pub image: PathBuf,
    pub text: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub test_fraction: f64,
    /// Used unless `tables` is set.
    pub synthetic: SyntheticConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tables: Option<TablePaths>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            synthetic: SyntheticConfig::default(),
            tables: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Zero means twice `embed_dim`.
    pub hidden_dim: usize,
    pub init_logit_scale: f64,
    pub adapter_rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 0,
            init_logit_scale: 30.0,
            adapter_rank: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.1,
            batch_size: 32,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs per task when the budget is not estimated.
    pub fixed_epochs: usize,
    pub alignment_weight: f64,
    pub optimizer: OptimizerKind,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 32,
            fixed_epochs: 10,
            alignment_weight: 1.0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub scale: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            learning_rate: 0.05,
            scale: DEFAULT_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub method: MethodVariant,
    /// Drives class order, holdout, initialization and batch order. The
    /// synthetic data keeps its own seed.
    pub seed: u64,
    pub num_tasks: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub preservation: PreservationConfig,
    pub classifier: ClassifierConfig,
    pub ensemble: EnsembleConfig,
    /// Attach a subspace analysis to the result when a visual classifier exists.
    pub analyze_subspace: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: MethodVariant::Full,
            seed: 7,
            num_tasks: 5,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            preservation: PreservationConfig::default(),
            classifier: ClassifierConfig::default(),
            ensemble: EnsembleConfig::default(),
            analyze_subspace: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::InvalidConfig("num_tasks must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::InvalidConfig("test_fraction must lie in [0, 1)".into()));
        }
        if self.data.tables.is_none() {
            self.data.synthetic.validate()?;
        }
        if self.model.embed_dim == 0 || self.model.adapter_rank == 0 {
            return Err(Error::InvalidConfig("embed_dim and adapter_rank must be positive".into()));
        }
        if !(self.model.init_logit_scale > 0.0) {
            return Err(Error::InvalidConfig("init_logit_scale must be positive".into()));
        }
        for (what, lr) in [
            ("pretrain", self.pretrain.learning_rate),
            ("finetune", self.finetune.learning_rate),
            ("classifier", self.classifier.learning_rate),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::InvalidConfig(format!("{what} learning_rate must be positive")));
            }
        }
        if self.pretrain.batch_size < 2 || self.finetune.batch_size == 0 {
            return Err(Error::InvalidConfig("batch sizes too small".into()));
        }
        if !(self.classifier.scale > 0.0) {
            return Err(Error::InvalidConfig("classifier scale must be positive".into()));
        }
        self.preservation.validate()?;
        self.ensemble.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.method = MethodVariant::MgcOnly;
        cfg.preservation.alpha = 0.2;
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_and_tables_source() {
        let cfg = RunConfig::from_toml(
            r#"
            method = "mgp_only"
            [data.tables]
            image = "img.embt"
            text = "txt.embt"
            [preservation]
            alpha = 0.05
            "#,
        )
        .unwrap();
        assert_eq!(cfg.method, MethodVariant::MgpOnly);
        assert_eq!(cfg.preservation.max_probe_epochs, 20);
        assert!(cfg.data.tables.is_some());
        assert_eq!(cfg.data.synthetic, SyntheticConfig::default());
        assert_eq!(cfg.data.test_fraction, 0.2);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("num_tasks = 0").is_err());
        assert!(RunConfig::from_toml("[ensemble]\nbeta = -1.0").is_err());
        assert!(RunConfig::from_toml("method = \"other\"").is_err());
        assert!("full".parse::<MethodVariant>().is_ok());
        assert!("fancy".parse::<MethodVariant>().is_err());
    }
}
