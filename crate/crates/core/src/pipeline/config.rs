use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datalab::{MultiRootPolicy, SynthCorpusSpec};
use crate::dsp::SpectrogramConfig;
use crate::error::{Error, Result};
use crate::models::{MaskConfig, ModelVariant, TransformerConfig};
use crate::numerics::Precision;
use crate::training::{FinetuneConfig, PretrainConfig};
use crate::vqcodec::{VqTrainConfig, VqVaeConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SynthCorpusSpec),
    /// FMA `tracks.csv` / `genres.csv`, converted through the import adapter.
    Fma {
        tracks_csv: PathBuf,
        genres_csv: PathBuf,
        audio_root: PathBuf,
        subset: Option<String>,
    },
    /// Files already in the native metadata layout.
    Files {
        metadata: PathBuf,
        taxonomy: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    pub split_ratios: [f64; 3],
    pub multi_root: MultiRootPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic(SynthCorpusSpec::default()),
            split_ratios: [0.8, 0.1, 0.1],
            multi_root: MultiRootPolicy::Reject,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Spectro,
    Token,
    Codebook,
}

impl VariantKind {
    pub const ALL: [VariantKind; 3] = [
        VariantKind::Spectro,
        VariantKind::Token,
        VariantKind::Codebook,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Spectro => "spectro",
            VariantKind::Token => "token",
            VariantKind::Codebook => "codebook",
        }
    }

    pub fn needs_codec(self) -> bool {
        self != VariantKind::Spectro
    }
}

impl std::str::FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected spectro, token or codebook"
                ))
            })
    }
}

/// Everything that determines a run. `seed` and `precision` override the
/// corresponding fields of every sub-config (see [`ExperimentConfig::resolved`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub precision: Precision,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub spectrogram: SpectrogramConfig,
    pub vqvae: VqVaeConfig,
    pub vq_train: VqTrainConfig,
    pub model: TransformerConfig,
    pub variant: VariantKind,
    pub pretrain: bool,
    pub pretraining: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub chance_trials: usize,
}

impl Default for ExperimentConfig {
    /// Desk-scale run on the 4-genre synthetic corpus.
    fn default() -> Self {
        ExperimentConfig {
            name: "spectro-pretrained".into(),
            seed: 0,
            precision: Precision::F64,
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            spectrogram: SpectrogramConfig::default(),
            vqvae: VqVaeConfig {
                vocab_size: 256,
                code_dim: 16,
                channels: 16,
                ..VqVaeConfig::default()
            },
            vq_train: VqTrainConfig {
                steps: 300,
                batch: 4,
                window: 4096,
                ..VqTrainConfig::default()
            },
            model: TransformerConfig {
                d_model: 32,
                n_heads: 4,
                n_layers: 4,
                max_seq_len: 64,
                ..TransformerConfig::default()
            },
            variant: VariantKind::Spectro,
            pretrain: true,
            pretraining: PretrainConfig {
                mask: MaskConfig::default(),
                ..PretrainConfig::default()
            },
            finetune: FinetuneConfig::default(),
            chance_trials: 10_000,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copy with the global seed and precision pushed into every stage.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let DataSource::Synthetic(spec) = &mut c.data.source {
            spec.seed = c.seed;
        }
        c.vq_train.seed = c.seed;
        c.vq_train.precision = c.precision;
        c.pretraining.seed = c.seed;
        c.pretraining.precision = c.precision;
        c.finetune.seed = c.seed;
        c.finetune.precision = c.precision;
        c
    }

    pub fn model_variant(&self) -> ModelVariant {
        match self.variant {
            VariantKind::Spectro => ModelVariant::Spectro {
                n_mels: self.spectrogram.n_mels,
            },
            VariantKind::Token => ModelVariant::Token {
                vocab: self.vqvae.vocab_size,
            },
            VariantKind::Codebook => ModelVariant::Codebook {
                code_dim: self.vqvae.code_dim,
                vocab: self.vqvae.vocab_size,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!(
                "run name {:?} must be a plain file name",
                self.name
            )));
        }
        self.spectrogram.validate()?;
        self.vqvae.validate()?;
        self.model.validate()?;
        self.pretraining.mask.validate()?;
        if self.chance_trials < 1000 {
            return Err(Error::Config("chance_trials must be at least 1000".into()));
        }
        if self.finetune.batch_size == 0 || self.pretraining.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.finetune.epochs == 0 {
            return Err(Error::Config("finetune.epochs must be positive".into()));
        }
        let r = self.data.split_ratios;
        if r.iter().any(|x| !(*x >= 0.0))
            || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9
            || r[1] == 0.0
        {
            return Err(Error::Config(format!(
                "split ratios {r:?} must be non-negative, sum to 1 and leave a validation segment"
            )));
        }
        if let DataSource::Synthetic(spec) = &self.data.source {
            spec.resolved_recipes()?;
        }
        Ok(())
    }

    /// The six-configuration grid: each variant with and without pretraining.
    pub fn grid(&self) -> Vec<ExperimentConfig> {
        VariantKind::ALL
            .into_iter()
            .flat_map(|v| [true, false].into_iter().map(move |pre| (v, pre)))
            .map(|(variant, pretrain)| ExperimentConfig {
                name: format!(
                    "{}-{}",
                    variant.name(),
                    if pretrain { "pretrained" } else { "scratch" }
                ),
                variant,
                pretrain,
                ..self.clone()
            })
            .collect()
    }
}
