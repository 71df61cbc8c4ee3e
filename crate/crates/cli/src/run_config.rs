//! Run configuration: a preset plus optional TOML overrides plus flags.
//!
//! ```toml
//! preset = "tiny"          # or "base" (default)
//! seed = 3
//!
//! [model]
//! setup = "ma"
//! head = "cnn"
//! layers = 2
//! widths = [2, 3]
//!
//! [train]
//! epochs = 30
//! lr = 1e-3
//!
//! [data]
//! min_freq = 1
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use qpi::training::{AdamConfig, TrainConfig};
use qpi::{HeadKind, ModelConfig, Precision, Setup};
use serde::Deserialize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Base,
    Tiny,
}

impl Preset {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "base" => Some(Preset::Base),
            "tiny" => Some(Preset::Tiny),
            _ => None,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub setup: Option<Setup>,
    pub head: Option<HeadKind>,
    pub max_len: Option<usize>,
    pub trainable_encoders: Option<usize>,
    pub precision: Option<Precision>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub embed_dim: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub max_position: Option<usize>,
    pub vocab_size: Option<usize>,
    pub dropout: Option<f64>,
    pub widths: Option<Vec<usize>>,
    pub filters: Option<usize>,
    pub head_dropout: Option<f64>,
    pub init_std: Option<f64>,
    /// Checkpoint whose encoder weights initialise the model.
    pub pretrained_encoder: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub target_train_accuracy: Option<f64>,
    pub eval_train: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub data_dir: Option<PathBuf>,
    pub strict_split: Option<bool>,
    /// Vocabulary file; built from the training split when absent.
    pub vocab: Option<PathBuf>,
    pub min_freq: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
}

impl ConfigFile {
    /// `source` is either a preset name or a path to a TOML file.
    pub fn from_source(source: Option<&str>) -> anyhow::Result<Self> {
        let Some(source) = source else {
            return Ok(Self::default());
        };
        if let Some(preset) = Preset::parse(source) {
            return Ok(Self {
                preset: Some(preset),
                ..Self::default()
            });
        }
        let text = std::fs::read_to_string(source)
            .map_err(|e| qpi::Error::Config(format!("cannot read config {source}: {e}")))?;
        Self::parse(&text).with_context(|| format!("in config file {source}"))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

/// Values given on the command line; they win over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub data_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub setup: Option<Setup>,
    pub head: Option<HeadKind>,
    pub trainable_encoders: Option<usize>,
    pub strict_split: bool,
    pub precision: Option<Precision>,
}

/// Everything a command needs, fully resolved and validated.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub strict_split: bool,
    pub vocab: Option<PathBuf>,
    pub min_freq: usize,
    pub pretrained_encoder: Option<PathBuf>,
}

impl RunConfig {
    pub fn resolve(file: ConfigFile, flags: &Overrides) -> anyhow::Result<Self> {
        let m = file.model;
        let setup = flags.setup.or(m.setup).unwrap_or(Setup::MatchedAggregation);
        let head = flags.head.or(m.head).unwrap_or(HeadKind::Cnn);
        let mut model = match file.preset.unwrap_or_default() {
            Preset::Base => ModelConfig::base(setup, head),
            Preset::Tiny => ModelConfig::tiny(setup, head),
        };
        let e = &mut model.encoder;
        set(&mut e.num_layers, m.layers);
        set(&mut e.num_heads, m.heads);
        set(&mut e.embed_dim, m.embed_dim);
        set(&mut e.ffn_dim, m.ffn_dim);
        set(&mut e.max_position, m.max_position);
        set(&mut e.vocab_size, m.vocab_size);
        set(&mut e.dropout, m.dropout);
        set(&mut model.cnn.widths, m.widths);
        set(&mut model.cnn.filters_per_width, m.filters);
        set(&mut model.max_len, m.max_len);
        set(&mut model.head_dropout, m.head_dropout);
        set(&mut model.init_std, m.init_std);
        set(&mut model.precision, flags.precision.or(m.precision));
        // every layer trainable unless asked otherwise
        model.trainable_encoders = flags
            .trainable_encoders
            .or(m.trainable_encoders)
            .unwrap_or(model.encoder.num_layers);
        if model.trainable_encoders > model.encoder.num_layers {
            bail!(qpi::Error::Config(format!(
                "trainable_encoders = {} exceeds layers = {}",
                model.trainable_encoders, model.encoder.num_layers
            )));
        }
        model.validate()?;

        let seed = flags.seed.or(file.seed).unwrap_or(0);
        let t = file.train;
        let defaults = TrainConfig::default();
        let adam = AdamConfig {
            lr: t.lr.unwrap_or(defaults.adam.lr),
            beta1: t.beta1.unwrap_or(defaults.adam.beta1),
            beta2: t.beta2.unwrap_or(defaults.adam.beta2),
            eps: t.eps.unwrap_or(defaults.adam.eps),
        };
        let train = TrainConfig {
            epochs: t.epochs.unwrap_or(defaults.epochs),
            batch_size: t.batch_size.unwrap_or(defaults.batch_size),
            adam,
            seed,
            target_train_accuracy: t.target_train_accuracy,
            eval_train: t.eval_train.unwrap_or(defaults.eval_train),
        };
        if train.batch_size == 0 {
            bail!(qpi::Error::Config("batch_size must be positive".into()));
        }
        if !(train.adam.lr > 0.0) {
            bail!(qpi::Error::Config(format!(
                "lr must be positive, got {}",
                train.adam.lr
            )));
        }

        let d = file.data;
        Ok(Self {
            model,
            train,
            seed,
            data_dir: flags.data_dir.clone().or(d.data_dir),
            strict_split: flags.strict_split || d.strict_split.unwrap_or(false),
            vocab: d.vocab,
            min_freq: d.min_freq.unwrap_or(1),
            pretrained_encoder: m.pretrained_encoder,
        })
    }

    pub fn data_dir(&self) -> anyhow::Result<&Path> {
        match &self.data_dir {
            Some(d) => Ok(d),
            None => bail!(qpi::Error::Usage(
                "no data directory: pass --data-dir or set data.data_dir".into()
            )),
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
