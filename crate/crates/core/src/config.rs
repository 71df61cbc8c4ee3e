//! Model hyperparameters and presets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a question pair reaches the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setup {
    /// Each question is encoded on its own by the shared encoder; the two
    /// condensed vectors are concatenated.
    #[serde(rename = "siamese")]
    Siamese,
    /// Both questions are packed into one sequence and encoded together.
    #[serde(rename = "ma", alias = "matched_aggregation")]
    MatchedAggregation,
}

impl Setup {
    /// Default sequence length for the setup: 32 per question for Siamese,
    /// 64 for the packed pair.
    pub fn default_max_len(self) -> usize {
        match self {
            Setup::Siamese => 32,
            Setup::MatchedAggregation => 64,
        }
    }
}

impl FromStr for Setup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "siamese" => Ok(Setup::Siamese),
            "ma" | "matched_aggregation" => Ok(Setup::MatchedAggregation),
            other => Err(Error::Config(format!(
                "setup: unknown value {other:?} (expected siamese or ma)"
            ))),
        }
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setup::Siamese => "siamese",
            Setup::MatchedAggregation => "ma",
        })
    }
}

/// Which condenser turns encoder states into a fixed-length vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    #[serde(rename = "cnn")]
    Cnn,
    #[serde(rename = "mean", alias = "mean_pool")]
    MeanPool,
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(HeadKind::Cnn),
            "mean" | "mean_pool" => Ok(HeadKind::MeanPool),
            other => Err(Error::Config(format!(
                "head: unknown value {other:?} (expected cnn or mean)"
            ))),
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Cnn => "cnn",
            HeadKind::MeanPool => "mean",
        })
    }
}

/// Storage precision of parameters. All arithmetic runs in `f64`; with `F32`
/// (the default) parameters are rounded to the nearest `f32` after
/// initialisation and after every optimizer step, so they survive the
/// checkpoint's `f32` storage bit for bit. `F64` keeps full precision in
/// memory and rounds only when saving.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "precision: unknown value {other:?} (expected f32 or f64)"
            ))),
        }
    }
}

impl Precision {
    pub fn round(self, values: &mut [f64]) {
        if self == Precision::F32 {
            values.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub max_position: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// 12 layers, 12 heads, width 768, matching the public `bert-base-uncased` checkpoint.
    pub fn base() -> Self {
        Self {
            num_layers: 12,
            num_heads: 12,
            embed_dim: 768,
            ffn_dim: 3072,
            max_position: 512,
            vocab_size: 30522,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn tiny() -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            embed_dim: 16,
            ffn_dim: 64,
            max_position: 64,
            vocab_size: 64,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_heads == 0 || self.embed_dim == 0 {
            return err("num_heads and embed_dim must be positive".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return err(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.embed_dim < 2 {
            return err("embed_dim must be at least 2".into());
        }
        if self.ffn_dim == 0 || self.max_position == 0 || self.vocab_size < 4 {
            return err("ffn_dim, max_position must be positive and vocab_size at least 4".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.layer_norm_eps <= 0.0 {
            return err("layer_norm_eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    /// Window sizes, in output order.
    pub widths: Vec<usize>,
    pub filters_per_width: usize,
}

impl CnnConfig {
    pub fn base() -> Self {
        Self {
            widths: vec![2, 3, 4, 5],
            filters_per_width: 100,
        }
    }

    pub fn tiny() -> Self {
        Self {
            widths: vec![2, 3],
            filters_per_width: 2,
        }
    }

    pub fn total_filters(&self) -> usize {
        self.widths.len() * self.filters_per_width
    }

    pub fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub cnn: CnnConfig,
    pub head: HeadKind,
    pub setup: Setup,
    pub max_len: usize,
    /// Number of top encoder layers that are fine-tuned.
    pub trainable_encoders: usize,
    pub head_dropout: f64,
    /// Standard deviation of the truncated-normal weight initialisation.
    pub init_std: f64,
    #[serde(default)]
    pub precision: Precision,
}

impl ModelConfig {
    /// Full-size configuration with every encoder layer trainable.
    pub fn base(setup: Setup, head: HeadKind) -> Self {
        let encoder = EncoderConfig::base();
        Self {
            trainable_encoders: encoder.num_layers,
            encoder,
            cnn: CnnConfig::base(),
            head,
            setup,
            max_len: setup.default_max_len(),
            head_dropout: 0.1,
            init_std: 0.02,
            precision: Precision::F32,
        }
    }

    /// Two layers, two heads, width 16; filter widths 2 and 3 with two filters each.
    pub fn tiny(setup: Setup, head: HeadKind) -> Self {
        let encoder = EncoderConfig::tiny();
        Self {
            trainable_encoders: encoder.num_layers,
            encoder,
            cnn: CnnConfig::tiny(),
            head,
            setup,
            max_len: match setup {
                Setup::Siamese => 16,
                Setup::MatchedAggregation => 32,
            },
            head_dropout: 0.1,
            init_std: 0.02,
            precision: Precision::F32,
        }
    }

    /// Disables every dropout layer.
    pub fn without_dropout(mut self) -> Self {
        self.encoder.dropout = 0.0;
        self.head_dropout = 0.0;
        self
    }

    /// Width of one condensed vector.
    pub fn condensed_dim(&self) -> usize {
        match self.head {
            HeadKind::Cnn => self.cnn.total_filters(),
            HeadKind::MeanPool => self.encoder.embed_dim,
        }
    }

    pub fn classifier_input_dim(&self) -> usize {
        match self.setup {
            Setup::Siamese => 2 * self.condensed_dim(),
            Setup::MatchedAggregation => self.condensed_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let err = |m: String| Err(Error::Config(m));
        if self.head == HeadKind::Cnn {
            if self.cnn.widths.is_empty() || self.cnn.filters_per_width == 0 {
                return err("cnn needs at least one width and one filter per width".into());
            }
            if self.cnn.widths.contains(&0) {
                return err("cnn widths must be positive".into());
            }
            let mut sorted = self.cnn.widths.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.cnn.widths.len() {
                return err("cnn widths must be distinct".into());
            }
        }
        let min_len = match self.setup {
            Setup::Siamese => 3,
            Setup::MatchedAggregation => 5,
        };
        if self.max_len < min_len {
            return err(format!(
                "max_len {} below {min_len} for setup {}",
                self.max_len, self.setup
            ));
        }
        if self.max_len > self.encoder.max_position {
            return err(format!(
                "max_len {} exceeds max_position {}",
                self.max_len, self.encoder.max_position
            ));
        }
        if self.head == HeadKind::Cnn && self.cnn.max_width() > self.max_len {
            return err(format!(
                "widest filter {} exceeds max_len {}",
                self.cnn.max_width(),
                self.max_len
            ));
        }
        if self.trainable_encoders > self.encoder.num_layers {
            return err(format!(
                "trainable_encoders {} exceeds num_layers {}",
                self.trainable_encoders, self.encoder.num_layers
            ));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return err(format!("head_dropout {} outside [0, 1)", self.head_dropout));
        }
        if !(self.init_std > 0.0) {
            return err("init_std must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for setup in [Setup::Siamese, Setup::MatchedAggregation] {
            for head in [HeadKind::Cnn, HeadKind::MeanPool] {
                ModelConfig::base(setup, head).validate().unwrap();
                ModelConfig::tiny(setup, head).validate().unwrap();
            }
        }
        assert_eq!(ModelConfig::base(Setup::Siamese, HeadKind::Cnn).max_len, 32);
        assert_eq!(ModelConfig::base(Setup::MatchedAggregation, HeadKind::Cnn).max_len, 64);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::tiny(Setup::Siamese, HeadKind::Cnn);
        c.encoder.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(Setup::Siamese, HeadKind::Cnn);
        c.trainable_encoders = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(Setup::Siamese, HeadKind::Cnn);
        c.max_len = 100;
        assert!(c.validate().is_err());
    }

    #[test]
    fn dims() {
        let c = ModelConfig::base(Setup::Siamese, HeadKind::Cnn);
        assert_eq!(c.condensed_dim(), 400);
        assert_eq!(c.classifier_input_dim(), 800);
        let c = ModelConfig::base(Setup::MatchedAggregation, HeadKind::MeanPool);
        assert_eq!(c.classifier_input_dim(), 768);
        assert_eq!(c.encoder.head_dim(), 64);
    }

    #[test]
    fn parse_names() {
        assert_eq!("ma".parse::<Setup>().unwrap(), Setup::MatchedAggregation);
        assert_eq!("mean".parse::<HeadKind>().unwrap(), HeadKind::MeanPool);
        assert!(matches!("bogus".parse::<Setup>(), Err(Error::Config(m)) if m.contains("setup")));
    }
}
