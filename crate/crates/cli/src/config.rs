//! Experiment configuration: one JSON file, every field defaulted, with flag
//! overrides applied by the commands.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use permweave::activations::TokenFilter;
use permweave::align::{AlignSpec, Component, FfFeatures, MhaMode, ResidualMode};
use permweave::merge::{DEFAULT_BLOCK, DEFAULT_MASK_PROB};
use permweave::model::TransformerConfig;
use permweave::trainer::TrainSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// A model config given inline or as a path to a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Inline(TransformerConfig),
    Path(PathBuf),
}

/// Synthetic corpus parameters. The last `heldout_sequences` sequences are
/// reserved for evaluation; the rest are used for training and capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    /// Defaults to the model's vocabulary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default = "d_num_sequences")]
    pub num_sequences: usize,
    #[serde(default = "d_seq_len")]
    pub seq_len: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_heldout")]
    pub heldout_sequences: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: None,
            num_sequences: d_num_sequences(),
            seq_len: d_seq_len(),
            seed: 0,
            heldout_sequences: d_heldout(),
        }
    }
}

/// Held-out masked evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default = "d_mask_prob")]
    pub mask_prob: f64,
    #[serde(default = "d_block")]
    pub block: usize,
    #[serde(default)]
    pub mask_seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            mask_prob: d_mask_prob(),
            block: d_block(),
            mask_seed: 0,
        }
    }
}

/// Toy sequence-classification task used by `finetune` and classification
/// barriers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    #[serde(default = "d_labels")]
    pub num_labels: usize,
    #[serde(default = "d_task_train")]
    pub train_sequences: usize,
    #[serde(default = "d_task_eval")]
    pub eval_sequences: usize,
    #[serde(default = "d_seq_len")]
    pub seq_len: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_task_steps")]
    pub steps: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            num_labels: d_labels(),
            train_sequences: d_task_train(),
            eval_sequences: d_task_eval(),
            seq_len: d_seq_len(),
            seed: 0,
            steps: d_task_steps(),
        }
    }
}

/// One alignment strategy evaluated by `pairs`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub components: BTreeSet<Component>,
    #[serde(default = "d_mha_mode")]
    pub mha_mode: MhaMode,
    #[serde(default = "d_residual_mode")]
    pub residual_mode: ResidualMode,
    #[serde(default = "d_ff_features")]
    pub ff_features: FfFeatures,
}

impl Variant {
    /// Plain averaging without any permutation.
    pub const VANILLA: &'static str = "vanilla";

    pub fn align_spec(&self) -> AlignSpec {
        let mut spec = AlignSpec::new(self.components.iter().copied(), self.mha_mode, self.residual_mode);
        spec.ff_features = self.ff_features;
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "d_model")]
    pub model: ModelSource,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub corpus: CorpusSpec,
    /// `init_seed` and `data_seed` are replaced by the model seed.
    #[serde(default = "d_train")]
    pub train: TrainSpec,
    /// Tokens consumed by capture.
    #[serde(default = "d_budget")]
    pub capture_budget: usize,
    #[serde(default)]
    pub token_filter: TokenFilter,
    #[serde(default = "d_mha_mode")]
    pub mha_mode: MhaMode,
    #[serde(default = "d_residual_mode")]
    pub residual_mode: ResidualMode,
    #[serde(default = "d_components")]
    pub components: BTreeSet<Component>,
    #[serde(default = "d_ff_features")]
    pub ff_features: FfFeatures,
    #[serde(default = "d_grid_points")]
    pub grid_points: usize,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub task: TaskSpec,
    /// Strategies compared by `pairs`; defaults to the single strategy given
    /// by the top-level fields. The vanilla baseline is always added.
    #[serde(default)]
    pub variants: Vec<Variant>,
    #[serde(default = "d_output_dir")]
    pub output_dir: PathBuf,
}

fn d_num_sequences() -> usize {
    4000
}
fn d_seq_len() -> usize {
    32
}
fn d_heldout() -> usize {
    250
}
fn d_mask_prob() -> f64 {
    DEFAULT_MASK_PROB
}
fn d_block() -> usize {
    DEFAULT_BLOCK
}
fn d_labels() -> usize {
    2
}
fn d_task_train() -> usize {
    1000
}
fn d_task_eval() -> usize {
    200
}
fn d_task_steps() -> usize {
    300
}
fn d_mha_mode() -> MhaMode {
    MhaMode::HeadPerm
}
fn d_residual_mode() -> ResidualMode {
    ResidualMode::Identity
}
fn d_ff_features() -> FfFeatures {
    FfFeatures::Hidden
}
fn d_components() -> BTreeSet<Component> {
    [Component::Ff, Component::Mha].into_iter().collect()
}
fn d_model() -> ModelSource {
    ModelSource::Inline(TransformerConfig::new(4, 64, 4, 128, 256, 34))
}
fn d_seeds() -> Vec<u64> {
    (1..=5).collect()
}
fn d_train() -> TrainSpec {
    TrainSpec::new(5000)
}
fn d_budget() -> usize {
    100_000
}
fn d_grid_points() -> usize {
    21
}
fn d_output_dir() -> PathBuf {
    PathBuf::from("permweave-out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl ExperimentConfig {
    /// Reads a config file. A model given by path is loaded and inlined
    /// (relative paths resolve against the config's directory), so the
    /// result is self-contained.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        if let ModelSource::Path(p) = &cfg.model {
            let base = path.parent().unwrap_or(Path::new("."));
            let full = if p.is_absolute() { p.clone() } else { base.join(p) };
            let text = std::fs::read_to_string(&full)
                .map_err(|e| CliError::Usage(format!("cannot read model config {}: {e}", full.display())))?;
            let model = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("invalid model config {}: {e}", full.display())))?;
            cfg.model = ModelSource::Inline(model);
        }
        Ok(cfg)
    }

    pub fn model_config(&self) -> Result<TransformerConfig, CliError> {
        match &self.model {
            ModelSource::Inline(c) => {
                c.validate().map_err(CliError::usage)?;
                Ok(c.clone())
            }
            ModelSource::Path(p) => Err(CliError::Usage(format!(
                "model config {} was not resolved",
                p.display()
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let model = self.model_config()?;
        let bad = |m: String| Err(CliError::Usage(m));
        if self.seeds.len() < 2 {
            return bad(format!("need at least 2 seeds, got {}", self.seeds.len()));
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.corpus.num_sequences <= self.corpus.heldout_sequences || self.corpus.heldout_sequences == 0 {
            return bad("corpus needs both training and held-out sequences".into());
        }
        if self.corpus.vocab_size.is_some_and(|v| v > model.vocab_size) {
            return bad("corpus vocabulary exceeds the model's".into());
        }
        if self.capture_budget == 0 {
            return bad("capture budget must be positive".into());
        }
        if self.grid_points < 2 {
            return bad("grid needs at least 2 points".into());
        }
        self.train.validate().map_err(CliError::usage)?;
        for v in self.resolved_variants() {
            if v.name != Variant::VANILLA && v.components.is_empty() {
                return bad(format!("variant {} selects no components", v.name));
            }
        }
        Ok(())
    }

    /// The configured strategy as a variant.
    pub fn primary_variant(&self) -> Variant {
        Variant {
            name: "aligned".into(),
            components: self.components.clone(),
            mha_mode: self.mha_mode,
            residual_mode: self.residual_mode,
            ff_features: self.ff_features,
        }
    }

    /// Vanilla first, then the configured variants in order.
    pub fn resolved_variants(&self) -> Vec<Variant> {
        let mut out = vec![Variant {
            name: Variant::VANILLA.into(),
            components: BTreeSet::new(),
            mha_mode: MhaMode::Identity,
            residual_mode: ResidualMode::Identity,
            ff_features: FfFeatures::Hidden,
        }];
        if self.variants.is_empty() {
            out.push(self.primary_variant());
        } else {
            out.extend(self.variants.iter().filter(|v| v.name != Variant::VANILLA).cloned());
        }
        out
    }

    /// Train spec for one model seed.
    pub fn train_spec(&self, seed: u64) -> TrainSpec {
        let mut spec = self.train.clone();
        spec.init_seed = seed;
        spec.data_seed = seed;
        spec
    }
}
