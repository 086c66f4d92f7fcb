//! Hyperparameter vocabulary shared by the tuning spec and the compiler.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Encoder that summarizes a sequence into a single vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EncoderKind {
    MeanPool,
    MaxPool,
    /// Same-padded convolution of odd width followed by max pooling.
    Conv1D(usize),
    /// Single-layer Elman recurrence; the final state is the summary.
    Recurrent,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderKind::MeanPool => write!(f, "mean_pool"),
            EncoderKind::MaxPool => write!(f, "max_pool"),
            EncoderKind::Conv1D(w) => write!(f, "conv1d:{w}"),
            EncoderKind::Recurrent => write!(f, "recurrent"),
        }
    }
}

impl FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean_pool" => Ok(EncoderKind::MeanPool),
            "max_pool" => Ok(EncoderKind::MaxPool),
            "recurrent" => Ok(EncoderKind::Recurrent),
            _ => {
                let width = s
                    .strip_prefix("conv1d:")
                    .and_then(|w| w.parse::<usize>().ok())
                    .ok_or_else(|| format!("unknown encoder `{s}`"))?;
                if width % 2 == 0 || !(1..=7).contains(&width) {
                    return Err(format!("conv1d width must be odd and in 1..=7, got {width}"));
                }
                Ok(EncoderKind::Conv1D(width))
            }
        }
    }
}

impl Serialize for EncoderKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EncoderKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A searchable or pinnable hyperparameter.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HyperKey {
    /// Encoder for every sequence-aggregating payload without its own override.
    Encoder,
    /// Encoder for one named payload.
    PayloadEncoder(String),
    EmbedDim,
    HiddenDim,
    LearningRate,
    Epochs,
    BatchSize,
}

impl HyperKey {
    pub fn parse(key: &str) -> Option<HyperKey> {
        Some(match key {
            "encoder" => HyperKey::Encoder,
            "embed_dim" => HyperKey::EmbedDim,
            "hidden_dim" => HyperKey::HiddenDim,
            "learning_rate" => HyperKey::LearningRate,
            "epochs" => HyperKey::Epochs,
            "batch_size" => HyperKey::BatchSize,
            _ => {
                let payload = key.strip_prefix("encoder.")?;
                if payload.is_empty() {
                    return None;
                }
                HyperKey::PayloadEncoder(payload.to_string())
            }
        })
    }
}

pub const DEFAULT_EMBED_DIM: usize = 16;
pub const DEFAULT_HIDDEN_DIM: usize = 16;
pub const DEFAULT_LEARNING_RATE: f64 = 0.1;
pub const DEFAULT_EPOCHS: usize = 10;
pub const DEFAULT_BATCH_SIZE: usize = 16;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_strings_round_trip() {
        for e in [
            EncoderKind::MeanPool,
            EncoderKind::MaxPool,
            EncoderKind::Conv1D(3),
            EncoderKind::Conv1D(7),
            EncoderKind::Recurrent,
        ] {
            assert_eq!(e.to_string().parse::<EncoderKind>().unwrap(), e);
        }
    }

    #[test]
    fn conv_width_must_be_odd_and_small() {
        assert!("conv1d:2".parse::<EncoderKind>().is_err());
        assert!("conv1d:9".parse::<EncoderKind>().is_err());
        assert!("conv1d:x".parse::<EncoderKind>().is_err());
        assert!("lstm".parse::<EncoderKind>().is_err());
    }

    #[test]
    fn hyper_keys() {
        assert_eq!(HyperKey::parse("encoder.query"), Some(HyperKey::PayloadEncoder("query".into())));
        assert_eq!(HyperKey::parse("encoder."), None);
        assert_eq!(HyperKey::parse("dropout"), None);
    }
}
