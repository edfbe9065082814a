use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{ModelError, TransformerConfig};

/// A named hidden state inside the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CapturePoint {
    /// Output of the embedding LayerNorm.
    PostEmbedding,
    /// Head-concatenated attention output, before `W_O` and its bias.
    MhaPreproj(usize),
    /// First feed-forward layer after the nonlinearity.
    FfHidden(usize),
    /// First feed-forward layer before the nonlinearity.
    FfPreact(usize),
    /// `LN(W_O MHA(x) + x)`.
    ResAfterAttn(usize),
    /// `LN(W_2 act(W_1 x) + x)`.
    ResAfterFf(usize),
    /// Output of the last layer's final LayerNorm.
    FinalLn,
}

impl CapturePoint {
    pub fn layer(self) -> Option<usize> {
        match self {
            CapturePoint::MhaPreproj(l)
            | CapturePoint::FfHidden(l)
            | CapturePoint::FfPreact(l)
            | CapturePoint::ResAfterAttn(l)
            | CapturePoint::ResAfterFf(l) => Some(l),
            CapturePoint::PostEmbedding | CapturePoint::FinalLn => None,
        }
    }

    pub fn width(self, config: &TransformerConfig) -> usize {
        match self {
            CapturePoint::FfHidden(_) | CapturePoint::FfPreact(_) => config.d_ff,
            _ => config.d_model,
        }
    }

    pub fn validate(self, config: &TransformerConfig) -> Result<(), ModelError> {
        match self.layer() {
            Some(l) if l >= config.num_layers => Err(ModelError::BadCapturePoint(self.to_string())),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for CapturePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CapturePoint::PostEmbedding => write!(f, "post_embedding"),
            CapturePoint::MhaPreproj(l) => write!(f, "mha_preproj.{l}"),
            CapturePoint::FfHidden(l) => write!(f, "ff_hidden.{l}"),
            CapturePoint::FfPreact(l) => write!(f, "ff_preact.{l}"),
            CapturePoint::ResAfterAttn(l) => write!(f, "res_after_attn.{l}"),
            CapturePoint::ResAfterFf(l) => write!(f, "res_after_ff.{l}"),
            CapturePoint::FinalLn => write!(f, "final_ln"),
        }
    }
}

impl FromStr for CapturePoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "post_embedding" => return Ok(CapturePoint::PostEmbedding),
            "final_ln" => return Ok(CapturePoint::FinalLn),
            _ => {}
        }
        let (kind, layer) = s
            .rsplit_once('.')
            .ok_or_else(|| format!("unknown capture point {s:?}"))?;
        let l: usize = layer
            .parse()
            .map_err(|_| format!("bad layer index in capture point {s:?}"))?;
        Ok(match kind {
            "mha_preproj" => CapturePoint::MhaPreproj(l),
            "ff_hidden" => CapturePoint::FfHidden(l),
            "ff_preact" => CapturePoint::FfPreact(l),
            "res_after_attn" => CapturePoint::ResAfterAttn(l),
            "res_after_ff" => CapturePoint::ResAfterFf(l),
            _ => return Err(format!("unknown capture point {s:?}")),
        })
    }
}

impl Serialize for CapturePoint {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CapturePoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The set of points to tap during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CaptureSpec {
    points: BTreeSet<CapturePoint>,
}

impl CaptureSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(points: impl IntoIterator<Item = CapturePoint>) -> Self {
        Self {
            points: points.into_iter().collect(),
        }
    }

    /// Every point needed by any alignment strategy (post-activation FF features).
    pub fn all(config: &TransformerConfig) -> Self {
        let mut points = BTreeSet::new();
        points.insert(CapturePoint::PostEmbedding);
        points.insert(CapturePoint::FinalLn);
        for l in 0..config.num_layers {
            points.insert(CapturePoint::MhaPreproj(l));
            points.insert(CapturePoint::FfHidden(l));
            points.insert(CapturePoint::ResAfterAttn(l));
            points.insert(CapturePoint::ResAfterFf(l));
        }
        Self { points }
    }

    pub fn points(&self) -> &BTreeSet<CapturePoint> {
        &self.points
    }

    pub fn contains(&self, p: CapturePoint) -> bool {
        self.points.contains(&p)
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self, config: &TransformerConfig) -> Result<(), ModelError> {
        self.points.iter().try_for_each(|p| p.validate(config))
    }
}
