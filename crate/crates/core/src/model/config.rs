use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numerics::{ActivationKind, DEFAULT_LN_EPS};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
/// First id that carries content; everything below is a reserved special token.
pub const FIRST_CONTENT: u32 = 4;

fn default_activation() -> ActivationKind {
    ActivationKind::Gelu
}

fn default_ln_eps() -> f32 {
    DEFAULT_LN_EPS
}

/// Shape hyperparameters of a post-LN Transformer encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default = "default_activation")]
    pub activation: ActivationKind,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f32,
    /// Present once a classification head has been attached.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_labels: Option<usize>,
}

impl TransformerConfig {
    pub fn new(
        num_layers: usize,
        d_model: usize,
        num_heads: usize,
        d_ff: usize,
        vocab_size: usize,
        max_positions: usize,
    ) -> Self {
        Self {
            num_layers,
            d_model,
            num_heads,
            d_ff,
            vocab_size,
            max_positions,
            activation: default_activation(),
            ln_eps: default_ln_eps(),
            num_labels: None,
        }
    }

    pub fn with_activation(mut self, activation: ActivationKind) -> Self {
        self.activation = activation;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_ff", self.d_ff),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.vocab_size <= FIRST_CONTENT as usize {
            return Err(ModelError::InvalidConfig(format!(
                "vocab_size {} leaves no room past the {} reserved ids",
                self.vocab_size, FIRST_CONTENT
            )));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(ModelError::InvalidConfig("ln_eps must be positive".into()));
        }
        if let Some(k) = self.num_labels {
            if k < 2 {
                return Err(ModelError::InvalidConfig(
                    "num_labels must be at least 2".into(),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = TransformerConfig::new(1, 8, 3, 16, 32, 16);
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig(_))));
        assert!(TransformerConfig::new(1, 8, 2, 16, 32, 16).validate().is_ok());
    }

    #[test]
    fn rejects_zero_counts() {
        let mut cfg = TransformerConfig::new(1, 8, 2, 16, 32, 16);
        cfg.d_ff = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_defaults() {
        let cfg: TransformerConfig = serde_json::from_str(
            r#"{"num_layers":2,"d_model":8,"num_heads":2,"d_ff":16,"vocab_size":20,"max_positions":12}"#,
        )
        .unwrap();
        assert_eq!(cfg.activation, ActivationKind::Gelu);
        assert_eq!(cfg.ln_eps, DEFAULT_LN_EPS);
        assert_eq!(cfg.num_labels, None);
    }
}
