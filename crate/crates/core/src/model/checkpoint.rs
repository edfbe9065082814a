use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelError, TransformerConfig};
use crate::numerics::Matrix;

pub const INIT_STD: f32 = 0.02;

/// Canonical tensor names.
pub mod names {
    pub const EMB_TOK: &str = "emb.tok";
    pub const EMB_POS: &str = "emb.pos";
    pub const EMB_TYPE: &str = "emb.type";
    pub const EMB_LN_G: &str = "emb.ln.g";
    pub const EMB_LN_B: &str = "emb.ln.b";
    pub const MLM_DENSE: &str = "mlm.dense";
    pub const MLM_DENSE_B: &str = "mlm.dense.b";
    pub const MLM_LN_G: &str = "mlm.ln.g";
    pub const MLM_LN_B: &str = "mlm.ln.b";
    pub const MLM_DECODER: &str = "mlm.decoder";
    pub const MLM_DECODER_B: &str = "mlm.decoder.b";
    pub const CLS_POOL: &str = "cls.pool";
    pub const CLS_POOL_B: &str = "cls.pool.b";
    pub const CLS_OUT: &str = "cls.out";
    pub const CLS_OUT_B: &str = "cls.out.b";

    /// Per-layer suffixes, each prefixed by `L{layer}.`.
    pub const LAYER_SUFFIXES: [&str; 16] = [
        "attn.Wq", "attn.bq", "attn.Wk", "attn.bk", "attn.Wv", "attn.bv", "attn.Wo", "attn.bo",
        "attn.ln.g", "attn.ln.b", "ff.W1", "ff.b1", "ff.W2", "ff.b2", "ff.ln.g", "ff.ln.b",
    ];

    pub fn layer(layer: usize, suffix: &str) -> String {
        format!("L{layer}.{suffix}")
    }
}

/// Every tensor a checkpoint with this config must hold, with its shape.
/// Rank-1 shapes are biases and LayerNorm parameters.
pub fn expected_shapes(config: &TransformerConfig) -> BTreeMap<String, Vec<usize>> {
    let d = config.d_model;
    let f = config.d_ff;
    let v = config.vocab_size;
    let mut m = BTreeMap::new();
    let mut put = |name: String, shape: Vec<usize>| {
        m.insert(name, shape);
    };
    put(names::EMB_TOK.into(), vec![v, d]);
    put(names::EMB_POS.into(), vec![config.max_positions, d]);
    put(names::EMB_TYPE.into(), vec![2, d]);
    put(names::EMB_LN_G.into(), vec![d]);
    put(names::EMB_LN_B.into(), vec![d]);
    for l in 0..config.num_layers {
        for w in ["attn.Wq", "attn.Wk", "attn.Wv", "attn.Wo"] {
            put(names::layer(l, w), vec![d, d]);
        }
        for b in ["attn.bq", "attn.bk", "attn.bv", "attn.bo", "attn.ln.g", "attn.ln.b"] {
            put(names::layer(l, b), vec![d]);
        }
        put(names::layer(l, "ff.W1"), vec![f, d]);
        put(names::layer(l, "ff.b1"), vec![f]);
        put(names::layer(l, "ff.W2"), vec![d, f]);
        put(names::layer(l, "ff.b2"), vec![d]);
        put(names::layer(l, "ff.ln.g"), vec![d]);
        put(names::layer(l, "ff.ln.b"), vec![d]);
    }
    put(names::MLM_DENSE.into(), vec![d, d]);
    put(names::MLM_DENSE_B.into(), vec![d]);
    put(names::MLM_LN_G.into(), vec![d]);
    put(names::MLM_LN_B.into(), vec![d]);
    put(names::MLM_DECODER.into(), vec![v, d]);
    put(names::MLM_DECODER_B.into(), vec![v]);
    if let Some(k) = config.num_labels {
        put(names::CLS_POOL.into(), vec![d, d]);
        put(names::CLS_POOL_B.into(), vec![d]);
        put(names::CLS_OUT.into(), vec![k, d]);
        put(names::CLS_OUT_B.into(), vec![k]);
    }
    m
}

pub(crate) fn shape_matches(m: &Matrix, shape: &[usize]) -> bool {
    match shape {
        [n] => m.rows() == 1 && m.cols() == *n,
        [r, c] => m.rows() == *r && m.cols() == *c,
        _ => false,
    }
}

pub(crate) fn matrix_for_shape(shape: &[usize], data: Vec<f32>) -> Result<Matrix, ModelError> {
    let (r, c) = match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => return Err(ModelError::Format(format!("unsupported rank {}", shape.len()))),
    };
    Matrix::from_vec(r, c, data).map_err(ModelError::from)
}

/// Model weights plus the configuration that determines their shapes.
/// Vectors are stored as `1 x n` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    config: TransformerConfig,
    tensors: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    /// Validates the config and that exactly the expected tensors are present.
    pub fn new(
        config: TransformerConfig,
        tensors: BTreeMap<String, Matrix>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = expected_shapes(&config);
        for (name, shape) in &expected {
            let t = tensors
                .get(name)
                .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if !shape_matches(t, shape) {
                return Err(ModelError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: vec![t.rows(), t.cols()],
                });
            }
            if !t.is_finite() {
                return Err(ModelError::NonFinite(name.clone()));
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(ModelError::UnexpectedTensor(extra.clone()));
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Matrix> {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }

    /// Internal accessor for names guaranteed by construction.
    pub(crate) fn t(&self, name: &str) -> &Matrix {
        &self.tensors[name]
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut BTreeMap<String, Matrix> {
        &mut self.tensors
    }

    pub fn into_parts(self) -> (TransformerConfig, BTreeMap<String, Matrix>) {
        (self.config, self.tensors)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(|m| m.data().len()).sum()
    }

    /// Replaces the classification head (or attaches one), re-validating shapes.
    pub fn with_classifier(
        &self,
        num_labels: usize,
        head: BTreeMap<String, Matrix>,
    ) -> Result<Self, ModelError> {
        let mut config = self.config.clone();
        config.num_labels = Some(num_labels);
        let mut tensors: BTreeMap<String, Matrix> = self
            .tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("cls."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        tensors.extend(head);
        Self::new(config, tensors)
    }
}

pub(crate) fn truncated_normal(rng: &mut ChaCha8Rng, std: f32, len: usize) -> Vec<f32> {
    let normal = Normal::new(0.0f32, std).expect("positive std");
    (0..len)
        .map(|_| loop {
            let x = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect()
}

/// Initial value for a tensor: LN gains are one, rank-1 tensors otherwise
/// zero, matrices truncated normal.
pub(crate) fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Matrix {
    let len: usize = shape.iter().product();
    let data = if name.ends_with(".ln.g") {
        vec![1.0; len]
    } else if shape.len() == 1 {
        vec![0.0; len]
    } else {
        truncated_normal(rng, INIT_STD, len)
    };
    matrix_for_shape(shape, data).expect("shape agrees with length")
}

/// Fresh weights: normal(0, 0.02) truncated at two standard deviations for
/// matrices and embeddings, ones for LayerNorm gains, zeros elsewhere.
/// Tensors are drawn in sorted-name order from a ChaCha8 stream seeded by `seed`.
pub fn init_model(config: &TransformerConfig, seed: u64) -> Result<Checkpoint, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = expected_shapes(config)
        .into_iter()
        .map(|(name, shape)| {
            let t = init_tensor(&name, &shape, &mut rng);
            (name, t)
        })
        .collect();
    Checkpoint::new(config.clone(), tensors)
}
