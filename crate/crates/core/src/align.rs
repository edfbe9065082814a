//! Permutation plans: computing them from feature correlations and applying
//! them to a checkpoint without changing its function.
//!
//! Every permutation here maps model A's feature `i` to model B's feature
//! `π(i)`. Applying it to B gathers B's features into A's order.
//!
//! Three kinds of feature space are permuted:
//! - the feed-forward hidden layer of each block,
//! - the head-concatenated attention space of each block, where Q, K and V
//!   share one permutation and heads move as whole blocks,
//! - the residual stream, which couples embeddings, every sublayer output,
//!   every LayerNorm and the head input, so valid plans use one shared
//!   permutation for all of them.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activations::{require, ActivationError, CorrelationMatrix, JointFeatureStats, StatsMap};
use crate::assignment::{captured_total, solve_lap, solve_lap_f64, AssignmentError, Permutation};
use crate::model::{
    classify_logits, forward_batch, names, CapturePoint, CaptureSpec, Checkpoint, ModelError,
    TransformerConfig,
};
use crate::numerics::Matrix;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("d_model {d_model} is not divisible by {num_heads} heads")]
    HeadDivisibility { d_model: usize, num_heads: usize },
    #[error("expected a {expected}x{expected} correlation matrix, got {rows}x{cols}")]
    Shape {
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("plan does not fit the model: {0}")]
    PlanMismatch(String),
    #[error("plan is not function-preserving ({0}); pass the override to apply it anyway")]
    InvalidPlan(String),
    #[error("no components selected")]
    NoComponents,
    #[error("unknown {kind} {value:?}")]
    UnknownName { kind: &'static str, value: String },
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
    #[error(transparent)]
    Activation(#[from] ActivationError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("malformed plan: {0}")]
    Format(String),
}

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident, $kind:literal, { $($(#[$vm:meta])* $variant:ident => $text:literal),* $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $($(#[$vm])* #[serde(rename = $text)] $variant),*
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),*];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),*
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = AlignError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)*
                    _ => Err(AlignError::UnknownName { kind: $kind, value: s.to_string() }),
                }
            }
        }
    };
}

named_enum!(
    /// How the attention space is permuted.
    MhaMode, "mha mode", {
        /// Two-stage search: inner LAPs for every head pair, outer LAP over heads.
        HeadPerm => "head_perm",
        /// Heads stay in place; only dimensions within each head move.
        Monotonic => "monotonic",
        /// One LAP over the whole space, ignoring head boundaries (not valid).
        IgnoreHeads => "ignore_heads",
        /// Attention is left untouched.
        Identity => "identity",
    }
);

named_enum!(
    /// Which correlations drive the residual-stream permutation.
    ResidualMode, "residual mode", {
        Identity => "identity",
        /// Embedding output.
        First => "first",
        /// Final LayerNorm output.
        Last => "last",
        /// All sublayer outputs of all blocks, pooled over the token axis.
        All => "all",
        /// An independent permutation per sublayer output (not valid).
        Separate => "separate",
    }
);

named_enum!(
    /// A separately selectable part of a plan.
    Component, "component", {
        Ff => "ff",
        Mha => "mha",
        Residual => "residual",
    }
);

named_enum!(
    /// Which feed-forward activations define FF feature correlation.
    FfFeatures, "ff feature kind", {
        /// After the nonlinearity.
        Hidden => "hidden",
        /// Before the nonlinearity.
        Preact => "preact",
    }
);

impl FfFeatures {
    pub fn point(self, layer: usize) -> CapturePoint {
        match self {
            FfFeatures::Hidden => CapturePoint::FfHidden(layer),
            FfFeatures::Preact => CapturePoint::FfPreact(layer),
        }
    }
}

/// An outer permutation over heads plus one inner permutation per head.
/// `inner[j]` aligns A's head `j` with B's head `outer(j)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "HeadPermutationRepr", into = "HeadPermutationRepr")]
pub struct HeadPermutation {
    outer: Permutation,
    inner: Vec<Permutation>,
}

#[derive(Serialize, Deserialize)]
struct HeadPermutationRepr {
    outer: Permutation,
    inner: Vec<Permutation>,
}

impl TryFrom<HeadPermutationRepr> for HeadPermutation {
    type Error = AlignError;

    fn try_from(r: HeadPermutationRepr) -> Result<Self, Self::Error> {
        HeadPermutation::new(r.outer, r.inner)
    }
}

impl From<HeadPermutation> for HeadPermutationRepr {
    fn from(h: HeadPermutation) -> Self {
        Self {
            outer: h.outer,
            inner: h.inner,
        }
    }
}

impl HeadPermutation {
    pub fn new(outer: Permutation, inner: Vec<Permutation>) -> Result<Self, AlignError> {
        if outer.len() != inner.len() || outer.is_empty() {
            return Err(AlignError::Format(format!(
                "{} heads in the outer map but {} inner maps",
                outer.len(),
                inner.len()
            )));
        }
        let dk = inner[0].len();
        if inner.iter().any(|p| p.len() != dk) {
            return Err(AlignError::Format("inner maps differ in size".into()));
        }
        Ok(Self { outer, inner })
    }

    pub fn identity(num_heads: usize, d_k: usize) -> Self {
        Self {
            outer: Permutation::identity(num_heads),
            inner: vec![Permutation::identity(d_k); num_heads],
        }
    }

    pub fn num_heads(&self) -> usize {
        self.outer.len()
    }

    pub fn d_k(&self) -> usize {
        self.inner[0].len()
    }

    pub fn outer(&self) -> &Permutation {
        &self.outer
    }

    pub fn inner(&self) -> &[Permutation] {
        &self.inner
    }

    /// The full-width map: `j·d_k + i ↦ outer(j)·d_k + inner[j](i)`.
    pub fn expand(&self) -> Permutation {
        let dk = self.d_k();
        let mut map = Vec::with_capacity(self.num_heads() * dk);
        for (j, inner) in self.inner.iter().enumerate() {
            let base = self.outer.map()[j] * dk;
            map.extend(inner.map().iter().map(|&i| base + i));
        }
        Permutation::new(map).expect("block expansion is a bijection")
    }

    pub fn inverse(&self) -> Self {
        let outer_inv = self.outer.inverse();
        let inner = outer_inv
            .map()
            .iter()
            .map(|&j| self.inner[j].inverse())
            .collect();
        Self {
            outer: outer_inv,
            inner,
        }
    }
}

/// The attention permutation of one block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MhaPermutation {
    Heads(HeadPermutation),
    /// A full-width map with no head structure.
    Free { map: Permutation },
}

impl MhaPermutation {
    pub fn expand(&self) -> Permutation {
        match self {
            MhaPermutation::Heads(h) => h.expand(),
            MhaPermutation::Free { map } => map.clone(),
        }
    }

    fn inverse(&self) -> Self {
        match self {
            MhaPermutation::Heads(h) => MhaPermutation::Heads(h.inverse()),
            MhaPermutation::Free { map } => MhaPermutation::Free { map: map.inverse() },
        }
    }
}

/// The residual-stream part of a plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ResidualPlan {
    Identity,
    Shared(Permutation),
    /// `(after attention, after feed-forward)` for each block.
    Separate(Vec<(Permutation, Permutation)>),
}

impl ResidualPlan {
    fn inverse(&self) -> Self {
        match self {
            ResidualPlan::Identity => ResidualPlan::Identity,
            ResidualPlan::Shared(p) => ResidualPlan::Shared(p.inverse()),
            ResidualPlan::Separate(v) => {
                ResidualPlan::Separate(v.iter().map(|(a, f)| (a.inverse(), f.inverse())).collect())
            }
        }
    }

    /// Output permutations of the attention and feed-forward sublayers of
    /// `layer`. The stream entering block 0 (the embeddings) uses the first
    /// attention permutation.
    fn sublayer(&self, layer: usize) -> (Option<&Permutation>, Option<&Permutation>) {
        match self {
            ResidualPlan::Identity => (None, None),
            ResidualPlan::Shared(p) => (Some(p), Some(p)),
            ResidualPlan::Separate(v) => (Some(&v[layer].0), Some(&v[layer].1)),
        }
    }

    fn block_input(&self, layer: usize) -> Option<&Permutation> {
        if layer == 0 {
            self.sublayer(0).0
        } else {
            self.sublayer(layer - 1).1
        }
    }
}

/// A complete set of permutations for one model pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PlanRepr", into = "PlanRepr")]
pub struct PermutationPlan {
    pub mha_mode: MhaMode,
    pub residual_mode: ResidualMode,
    pub components: BTreeSet<Component>,
    pub ff_features: FfFeatures,
    pub ff: Vec<Permutation>,
    pub mha: Vec<MhaPermutation>,
    pub residual: ResidualPlan,
}

#[derive(Serialize, Deserialize)]
struct PlanRepr {
    mha_mode: MhaMode,
    residual_mode: ResidualMode,
    components: BTreeSet<Component>,
    #[serde(default = "default_ff_features")]
    ff_features: FfFeatures,
    valid: bool,
    ff: Vec<Permutation>,
    mha: Vec<MhaPermutation>,
    residual: ResidualPlan,
}

fn default_ff_features() -> FfFeatures {
    FfFeatures::Hidden
}

impl TryFrom<PlanRepr> for PermutationPlan {
    type Error = AlignError;

    fn try_from(r: PlanRepr) -> Result<Self, Self::Error> {
        let plan = PermutationPlan {
            mha_mode: r.mha_mode,
            residual_mode: r.residual_mode,
            components: r.components,
            ff_features: r.ff_features,
            ff: r.ff,
            mha: r.mha,
            residual: r.residual,
        };
        if plan.is_valid() != r.valid {
            return Err(AlignError::Format(format!(
                "valid flag {} contradicts modes {}/{}",
                r.valid, plan.mha_mode, plan.residual_mode
            )));
        }
        let separate = matches!(plan.residual, ResidualPlan::Separate(_));
        if separate != (plan.residual_mode == ResidualMode::Separate) {
            return Err(AlignError::Format("residual permutations do not match residual_mode".into()));
        }
        Ok(plan)
    }
}

impl From<PermutationPlan> for PlanRepr {
    fn from(p: PermutationPlan) -> Self {
        Self {
            valid: p.is_valid(),
            mha_mode: p.mha_mode,
            residual_mode: p.residual_mode,
            components: p.components,
            ff_features: p.ff_features,
            ff: p.ff,
            mha: p.mha,
            residual: p.residual,
        }
    }
}

impl PermutationPlan {
    /// The plan that changes nothing (vanilla averaging).
    pub fn identity(config: &TransformerConfig) -> Self {
        Self {
            mha_mode: MhaMode::Identity,
            residual_mode: ResidualMode::Identity,
            components: BTreeSet::new(),
            ff_features: FfFeatures::Hidden,
            ff: vec![Permutation::identity(config.d_ff); config.num_layers],
            mha: vec![
                MhaPermutation::Heads(HeadPermutation::identity(config.num_heads, config.head_dim()));
                config.num_layers
            ],
            residual: ResidualPlan::Identity,
        }
    }

    /// Function-preserving unless heads are ignored or the residual stream is
    /// permuted per sublayer.
    pub fn is_valid(&self) -> bool {
        self.mha_mode != MhaMode::IgnoreHeads && self.residual_mode != ResidualMode::Separate
    }

    /// Undoes this plan: applying `p` then `p.inverse()` restores the
    /// original tensors exactly.
    pub fn inverse(&self) -> Self {
        Self {
            ff: self.ff.iter().map(Permutation::inverse).collect(),
            mha: self.mha.iter().map(MhaPermutation::inverse).collect(),
            residual: self.residual.inverse(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, AlignError> {
        serde_json::from_str(s).map_err(|e| AlignError::Format(e.to_string()))
    }

    /// Checks sizes against `config`.
    pub fn check(&self, config: &TransformerConfig) -> Result<(), AlignError> {
        let l = config.num_layers;
        let bad = |what: String| Err(AlignError::PlanMismatch(what));
        if self.ff.len() != l || self.mha.len() != l {
            return bad(format!(
                "plan has {} ff and {} mha entries for {l} layers",
                self.ff.len(),
                self.mha.len()
            ));
        }
        if let Some(p) = self.ff.iter().find(|p| p.len() != config.d_ff) {
            return bad(format!("ff permutation of size {} for d_ff {}", p.len(), config.d_ff));
        }
        for m in &self.mha {
            if let MhaPermutation::Heads(h) = m {
                if h.num_heads() != config.num_heads || h.d_k() != config.head_dim() {
                    return bad(format!(
                        "head permutation {}x{} for {} heads of {}",
                        h.num_heads(),
                        h.d_k(),
                        config.num_heads,
                        config.head_dim()
                    ));
                }
            } else if m.expand().len() != config.d_model {
                return bad("attention permutation width".into());
            }
        }
        let d = config.d_model;
        match &self.residual {
            ResidualPlan::Identity => {}
            ResidualPlan::Shared(p) if p.len() != d => return bad("residual permutation width".into()),
            ResidualPlan::Shared(_) => {}
            ResidualPlan::Separate(v) => {
                if v.len() != l || v.iter().any(|(a, f)| a.len() != d || f.len() != d) {
                    return bad("per-layer residual permutations".into());
                }
            }
        }
        Ok(())
    }
}

fn square(c: &Matrix, expected: usize) -> Result<(), AlignError> {
    if c.rows() != expected || c.cols() != expected {
        return Err(AlignError::Shape {
            expected,
            rows: c.rows(),
            cols: c.cols(),
        });
    }
    Ok(())
}

/// Feed-forward alignment: a single LAP over the hidden-unit correlations.
pub fn ff_align(c: &CorrelationMatrix, d_ff: usize) -> Result<Permutation, AlignError> {
    square(&c.values, d_ff)?;
    Ok(solve_lap(&c.values)?.0)
}

fn head_geometry(c: &Matrix, num_heads: usize) -> Result<usize, AlignError> {
    let d = c.rows();
    if num_heads == 0 || !d.is_multiple_of(num_heads) {
        return Err(AlignError::HeadDivisibility {
            d_model: d,
            num_heads,
        });
    }
    square(c, d)?;
    Ok(d / num_heads)
}

fn block(c: &Matrix, j: usize, k: usize, dk: usize) -> Matrix {
    let mut out = Matrix::zeros(dk, dk);
    for r in 0..dk {
        out.row_mut(r)
            .copy_from_slice(&c.row(j * dk + r)[k * dk..(k + 1) * dk]);
    }
    out
}

/// Two-stage attention alignment. Every head pair `(j, k)` is scored by the
/// optimal within-head assignment of its `d_k × d_k` block; the outer LAP over
/// those scores picks the head correspondence. All `h²` pairs are evaluated
/// because the scores are not symmetric.
pub fn mha_align_headperm(c: &Matrix, num_heads: usize) -> Result<HeadPermutation, AlignError> {
    let dk = head_geometry(c, num_heads)?;
    let mut scores = vec![0f64; num_heads * num_heads];
    let mut inners = Vec::with_capacity(num_heads * num_heads);
    for j in 0..num_heads {
        for k in 0..num_heads {
            let (p, total) = solve_lap(&block(c, j, k, dk))?;
            scores[j * num_heads + k] = total;
            inners.push(p);
        }
    }
    let (outer, _) = solve_lap_f64(&scores, num_heads)?;
    let inner = outer
        .map()
        .iter()
        .enumerate()
        .map(|(j, &k)| inners[j * num_heads + k].clone())
        .collect();
    HeadPermutation::new(outer, inner)
}

/// Heads stay in place; each head's dimensions are aligned independently.
pub fn mha_align_monotonic(c: &Matrix, num_heads: usize) -> Result<HeadPermutation, AlignError> {
    let dk = head_geometry(c, num_heads)?;
    let inner = (0..num_heads)
        .map(|j| Ok(solve_lap(&block(c, j, j, dk))?.0))
        .collect::<Result<Vec<_>, AlignError>>()?;
    HeadPermutation::new(Permutation::identity(num_heads), inner)
}

/// One LAP over the whole attention space; may split heads.
pub fn mha_align_ignore(c: &Matrix) -> Result<Permutation, AlignError> {
    square(c, c.rows())?;
    Ok(solve_lap(c)?.0)
}

/// Whether an expanded permutation keeps every head's dimensions together.
pub fn respects_heads(p: &Permutation, num_heads: usize) -> bool {
    let dk = p.len() / num_heads;
    (0..num_heads).all(|j| {
        let target = p.map()[j * dk] / dk;
        (0..dk).all(|i| p.map()[j * dk + i] / dk == target)
    })
}

fn lap_on(stats: &JointFeatureStats) -> Result<Permutation, AlignError> {
    let c = stats.finalize()?;
    Ok(solve_lap(&c.values)?.0)
}

/// Residual-stream points whose statistics `mode` consumes.
pub fn residual_points(mode: ResidualMode, num_layers: usize) -> Vec<CapturePoint> {
    match mode {
        ResidualMode::Identity => vec![],
        ResidualMode::First => vec![CapturePoint::PostEmbedding],
        ResidualMode::Last => vec![CapturePoint::FinalLn],
        ResidualMode::All | ResidualMode::Separate => (0..num_layers)
            .flat_map(|l| [CapturePoint::ResAfterAttn(l), CapturePoint::ResAfterFf(l)])
            .collect(),
    }
}

/// Pooled statistics for [`ResidualMode::All`]: every block's sublayer
/// outputs stacked along the token axis.
pub fn pooled_residual_stats(stats: &StatsMap, num_layers: usize) -> Result<JointFeatureStats, AlignError> {
    let parts = residual_points(ResidualMode::All, num_layers)
        .into_iter()
        .map(|p| require(stats, p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(JointFeatureStats::concatenated(CapturePoint::FinalLn, &parts)?)
}

pub fn residual_align(
    stats: &StatsMap,
    mode: ResidualMode,
    num_layers: usize,
) -> Result<ResidualPlan, AlignError> {
    Ok(match mode {
        ResidualMode::Identity => ResidualPlan::Identity,
        ResidualMode::First => ResidualPlan::Shared(lap_on(require(stats, CapturePoint::PostEmbedding)?)?),
        ResidualMode::Last => ResidualPlan::Shared(lap_on(require(stats, CapturePoint::FinalLn)?)?),
        ResidualMode::All => ResidualPlan::Shared(lap_on(&pooled_residual_stats(stats, num_layers)?)?),
        ResidualMode::Separate => ResidualPlan::Separate(
            (0..num_layers)
                .map(|l| {
                    Ok((
                        lap_on(require(stats, CapturePoint::ResAfterAttn(l))?)?,
                        lap_on(require(stats, CapturePoint::ResAfterFf(l))?)?,
                    ))
                })
                .collect::<Result<_, AlignError>>()?,
        ),
    })
}

/// What to align and how.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignSpec {
    pub components: BTreeSet<Component>,
    pub mha_mode: MhaMode,
    pub residual_mode: ResidualMode,
    #[serde(default = "default_ff_features")]
    pub ff_features: FfFeatures,
}

impl AlignSpec {
    pub fn new(components: impl IntoIterator<Item = Component>, mha_mode: MhaMode, residual_mode: ResidualMode) -> Self {
        Self {
            components: components.into_iter().collect(),
            mha_mode,
            residual_mode,
            ff_features: FfFeatures::Hidden,
        }
    }

    /// Modes actually in force once unselected components are forced to identity.
    pub fn effective_modes(&self) -> (MhaMode, ResidualMode) {
        let mha = if self.components.contains(&Component::Mha) {
            self.mha_mode
        } else {
            MhaMode::Identity
        };
        let res = if self.components.contains(&Component::Residual) {
            self.residual_mode
        } else {
            ResidualMode::Identity
        };
        (mha, res)
    }

    /// Capture points needed to build the plan.
    pub fn required_points(&self, config: &TransformerConfig) -> CaptureSpec {
        let (mha, res) = self.effective_modes();
        let mut points = Vec::new();
        for l in 0..config.num_layers {
            if self.components.contains(&Component::Ff) {
                points.push(self.ff_features.point(l));
            }
            if mha != MhaMode::Identity {
                points.push(CapturePoint::MhaPreproj(l));
            }
        }
        points.extend(residual_points(res, config.num_layers));
        CaptureSpec::new(points)
    }
}

/// Builds a plan from captured statistics. Unselected components are identity.
pub fn build_plan(
    config: &TransformerConfig,
    stats: &StatsMap,
    spec: &AlignSpec,
) -> Result<PermutationPlan, AlignError> {
    if spec.components.is_empty() {
        return Err(AlignError::NoComponents);
    }
    let (mha_mode, residual_mode) = spec.effective_modes();
    // Report every missing point up front, naming the first.
    for p in spec.required_points(config).points() {
        require(stats, *p)?;
    }
    let mut plan = PermutationPlan::identity(config);
    plan.components = spec.components.clone();
    plan.mha_mode = mha_mode;
    plan.residual_mode = residual_mode;
    plan.ff_features = spec.ff_features;
    let h = config.num_heads;
    for l in 0..config.num_layers {
        if spec.components.contains(&Component::Ff) {
            let c = require(stats, spec.ff_features.point(l))?.finalize()?;
            plan.ff[l] = ff_align(&c, config.d_ff)?;
        }
        if mha_mode != MhaMode::Identity {
            let c = require(stats, CapturePoint::MhaPreproj(l))?.finalize()?;
            plan.mha[l] = match mha_mode {
                MhaMode::HeadPerm => MhaPermutation::Heads(mha_align_headperm(&c.values, h)?),
                MhaMode::Monotonic => MhaPermutation::Heads(mha_align_monotonic(&c.values, h)?),
                MhaMode::IgnoreHeads => MhaPermutation::Free {
                    map: mha_align_ignore(&c.values)?,
                },
                MhaMode::Identity => unreachable!(),
            };
        }
    }
    plan.residual = residual_align(stats, residual_mode, config.num_layers)?;
    Ok(plan)
}

fn permute_rows(m: &Matrix, p: &Permutation) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for (i, &src) in p.map().iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(src));
    }
    out
}

fn permute_cols(m: &Matrix, p: &Permutation) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let src = m.row(r);
        for (dst, &c) in out.row_mut(r).iter_mut().zip(p.map()) {
            *dst = src[c];
        }
    }
    out
}

/// Applies `plan` to `ckpt` (model B). Plans that break function
/// preservation are refused unless `allow_invalid` is set.
pub fn apply_plan(
    ckpt: &Checkpoint,
    plan: &PermutationPlan,
    allow_invalid: bool,
) -> Result<Checkpoint, AlignError> {
    let config = ckpt.config();
    plan.check(config)?;
    if !plan.is_valid() && !allow_invalid {
        return Err(AlignError::InvalidPlan(format!(
            "mha_mode={}, residual_mode={}",
            plan.mha_mode, plan.residual_mode
        )));
    }
    let mut out = ckpt.clone();
    let t = out.tensors_mut();
    let mut edits: Vec<(String, Option<Permutation>, Option<Permutation>)> = Vec::new();
    let mut edit = |name: String, row: Option<&Permutation>, col: Option<&Permutation>| {
        edits.push((name, row.cloned(), col.cloned()));
    };
    let res_in0 = plan.residual.block_input(0);
    for name in [names::EMB_TOK, names::EMB_POS, names::EMB_TYPE, names::EMB_LN_G, names::EMB_LN_B] {
        edit(name.into(), None, res_in0);
    }
    for l in 0..config.num_layers {
        let r_in = plan.residual.block_input(l);
        let (r_attn, r_ff) = plan.residual.sublayer(l);
        let pm = plan.mha[l].expand();
        let pf = &plan.ff[l];
        for w in ["attn.Wq", "attn.Wk", "attn.Wv"] {
            edit(names::layer(l, w), Some(&pm), r_in);
        }
        for b in ["attn.bq", "attn.bk", "attn.bv"] {
            edit(names::layer(l, b), None, Some(&pm));
        }
        edit(names::layer(l, "attn.Wo"), r_attn, Some(&pm));
        for v in ["attn.bo", "attn.ln.g", "attn.ln.b"] {
            edit(names::layer(l, v), None, r_attn);
        }
        edit(names::layer(l, "ff.W1"), Some(pf), r_attn);
        edit(names::layer(l, "ff.b1"), None, Some(pf));
        edit(names::layer(l, "ff.W2"), r_ff, Some(pf));
        for v in ["ff.b2", "ff.ln.g", "ff.ln.b"] {
            edit(names::layer(l, v), None, r_ff);
        }
    }
    let last = config.num_layers.checked_sub(1).and_then(|l| plan.residual.sublayer(l).1);
    edit(names::MLM_DENSE.into(), None, last);
    if t.contains_key(names::CLS_POOL) {
        edit(names::CLS_POOL.into(), None, last);
    }
    for (name, row, col) in edits {
        let m = t.get_mut(&name).expect("validated checkpoint");
        if let Some(p) = row.filter(|p| !p.is_identity()) {
            *m = permute_rows(m, &p);
        }
        if let Some(p) = col.filter(|p| !p.is_identity()) {
            *m = permute_cols(m, &p);
        }
    }
    Ok(out)
}

/// Largest absolute logit difference between two checkpoints over `probes`.
/// Classification logits are included when both models carry a head.
pub fn check_equivalence<S: AsRef<[u32]>>(
    a: &Checkpoint,
    b: &Checkpoint,
    probes: &[S],
) -> Result<f32, AlignError> {
    let none = CaptureSpec::none();
    let la = forward_batch(a, probes, &none)?.logits;
    let lb = forward_batch(b, probes, &none)?.logits;
    if la.shape() != lb.shape() {
        return Err(AlignError::PlanMismatch("logit shapes differ".into()));
    }
    let mut diff = la.max_abs_diff(&lb);
    if a.config().num_labels.is_some() && b.config().num_labels.is_some() {
        diff = diff.max(classify_logits(a, probes)?.max_abs_diff(&classify_logits(b, probes)?));
    }
    Ok(diff)
}

fn random_perm<R: Rng>(d: usize, rng: &mut R) -> Permutation {
    let mut map: Vec<usize> = (0..d).collect();
    map.shuffle(rng);
    Permutation::new(map).expect("shuffle is a bijection")
}

fn random_heads<R: Rng>(h: usize, dk: usize, monotonic: bool, rng: &mut R) -> HeadPermutation {
    let outer = if monotonic {
        Permutation::identity(h)
    } else {
        random_perm(h, rng)
    };
    let inner = (0..h).map(|_| random_perm(dk, rng)).collect();
    HeadPermutation::new(outer, inner).expect("consistent sizes")
}

/// A random plan of the given kind. Invalid kinds are made genuinely
/// invalid where the geometry allows: ignore-heads plans split at least one
/// head (when `h > 1`), and separate plans differ between sublayers (when
/// `d_model > 1`).
pub fn random_plan<R: Rng>(
    config: &TransformerConfig,
    mha_mode: MhaMode,
    residual_mode: ResidualMode,
    rng: &mut R,
) -> PermutationPlan {
    let (l, d, h, dk) = (config.num_layers, config.d_model, config.num_heads, config.head_dim());
    let mut plan = PermutationPlan::identity(config);
    plan.mha_mode = mha_mode;
    plan.residual_mode = residual_mode;
    plan.components = [Component::Ff, Component::Mha, Component::Residual].into();
    plan.ff = (0..l).map(|_| random_perm(config.d_ff, rng)).collect();
    plan.mha = (0..l)
        .map(|_| match mha_mode {
            MhaMode::HeadPerm => MhaPermutation::Heads(random_heads(h, dk, false, rng)),
            MhaMode::Monotonic => MhaPermutation::Heads(random_heads(h, dk, true, rng)),
            MhaMode::Identity => MhaPermutation::Heads(HeadPermutation::identity(h, dk)),
            MhaMode::IgnoreHeads => loop {
                let p = random_perm(d, rng);
                if h == 1 || dk == 1 || !respects_heads(&p, h) {
                    break MhaPermutation::Free { map: p };
                }
            },
        })
        .collect();
    plan.residual = match residual_mode {
        ResidualMode::Identity => ResidualPlan::Identity,
        ResidualMode::First | ResidualMode::Last | ResidualMode::All => {
            ResidualPlan::Shared(random_perm(d, rng))
        }
        ResidualMode::Separate => ResidualPlan::Separate(
            (0..l)
                .map(|_| loop {
                    let (a, f) = (random_perm(d, rng), random_perm(d, rng));
                    if d == 1 || a != f {
                        break (a, f);
                    }
                })
                .collect(),
        ),
    };
    plan
}

/// Mean diagonal correlation of one capture point before and after a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub component: Component,
    pub layer: Option<usize>,
    pub point: String,
    pub before: f64,
    pub after: f64,
}

/// For every layer and component the plan aligned, the mean diagonal of the
/// correlation matrix the permutation was solved on, before and after
/// permuting its columns. Residual rows follow the residual mode's own
/// source (embedding, final LayerNorm, pooled stream, or each sublayer).
pub fn correlation_report(
    config: &TransformerConfig,
    stats: &StatsMap,
    plan: &PermutationPlan,
) -> Result<Vec<CorrelationRow>, AlignError> {
    plan.check(config)?;
    let mut rows = Vec::new();
    let mut push = |component, layer, point: String, c: &CorrelationMatrix, p: &Permutation| -> Result<(), AlignError> {
        if c.values.rows() != p.len() || c.values.cols() != p.len() {
            return Err(AlignError::PlanMismatch(format!("{point}: stats and plan widths differ")));
        }
        rows.push(CorrelationRow {
            component,
            layer,
            point,
            before: c.mean_diagonal(None),
            after: c.mean_diagonal(Some(p)),
        });
        Ok(())
    };
    for l in 0..config.num_layers {
        if plan.components.contains(&Component::Ff) {
            let p = plan.ff_features.point(l);
            push(Component::Ff, Some(l), p.to_string(), &require(stats, p)?.finalize()?, &plan.ff[l])?;
        }
        if plan.mha_mode != MhaMode::Identity {
            let p = CapturePoint::MhaPreproj(l);
            let c = require(stats, p)?.finalize()?;
            push(Component::Mha, Some(l), p.to_string(), &c, &plan.mha[l].expand())?;
        }
    }
    match (&plan.residual, plan.residual_mode) {
        (ResidualPlan::Shared(p), ResidualMode::First) => {
            let c = require(stats, CapturePoint::PostEmbedding)?.finalize()?;
            push(Component::Residual, None, CapturePoint::PostEmbedding.to_string(), &c, p)?;
        }
        (ResidualPlan::Shared(p), ResidualMode::Last) => {
            let c = require(stats, CapturePoint::FinalLn)?.finalize()?;
            push(Component::Residual, None, CapturePoint::FinalLn.to_string(), &c, p)?;
        }
        (ResidualPlan::Shared(p), ResidualMode::All) => {
            let c = pooled_residual_stats(stats, config.num_layers)?.finalize()?;
            push(Component::Residual, None, "res_all".into(), &c, p)?;
        }
        (ResidualPlan::Separate(v), _) => {
            for (l, (pa, pf)) in v.iter().enumerate() {
                let a = CapturePoint::ResAfterAttn(l);
                let f = CapturePoint::ResAfterFf(l);
                push(Component::Residual, Some(l), a.to_string(), &require(stats, a)?.finalize()?, pa)?;
                push(Component::Residual, Some(l), f.to_string(), &require(stats, f)?.finalize()?, pf)?;
            }
        }
        _ => {}
    }
    Ok(rows)
}

/// Total captured correlation of an attention permutation.
pub fn mha_total(c: &Matrix, p: &MhaPermutation) -> f64 {
    captured_total(c, &p.expand())
}
