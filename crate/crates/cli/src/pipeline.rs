//! The experiment pipeline as library calls: corpus, training, capture,
//! alignment and barrier evaluation, pair sweeps and the data ablation.

use std::collections::BTreeMap;

use permweave::activations::{capture_corpus, StatsMap};
use permweave::align::{apply_plan, build_plan, PermutationPlan};
use permweave::merge::{barrier_scan, lambda_grid, BarrierReport, EvalData, MaskedEvalSet, MergeSpec};
use permweave::model::{CaptureSpec, Checkpoint, TransformerConfig};
use permweave::trainer::{
    finetune_classifier, gen_corpus, gen_labeled_corpus, train_mlm, LabeledCorpus, SyntheticCorpus, TrainOutcome,
    TrainSpec,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Variant};
use crate::error::CliError;

/// Training and held-out splits of the synthetic corpus.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub train: SyntheticCorpus,
    pub heldout: SyntheticCorpus,
}

pub fn corpora(cfg: &ExperimentConfig) -> Result<Corpora, CliError> {
    let model = cfg.model_config()?;
    let c = &cfg.corpus;
    let vocab = c.vocab_size.unwrap_or(model.vocab_size);
    let mut train = gen_corpus(vocab, c.num_sequences, c.seq_len, c.seed).map_err(CliError::usage)?;
    let heldout = train.split_off(c.heldout_sequences);
    Ok(Corpora { train, heldout })
}

pub fn train_model(cfg: &ExperimentConfig, corpora: &Corpora, seed: u64) -> Result<TrainOutcome, CliError> {
    Ok(train_mlm(&cfg.model_config()?, &corpora.train, &cfg.train_spec(seed))?)
}

/// Masked evaluation set over the held-out split.
pub fn eval_set(cfg: &ExperimentConfig, corpora: &Corpora) -> Result<MaskedEvalSet, CliError> {
    let e = &cfg.eval;
    MaskedEvalSet::new(&cfg.model_config()?, &corpora.heldout.sequences, e.mask_prob, e.block, e.mask_seed)
        .map_err(CliError::usage)
}

/// Training and evaluation splits of the toy classification task.
pub fn task_data(cfg: &ExperimentConfig) -> Result<(LabeledCorpus, LabeledCorpus), CliError> {
    let model = cfg.model_config()?;
    let t = &cfg.task;
    let mut data = gen_labeled_corpus(
        model.vocab_size,
        t.train_sequences + t.eval_sequences,
        t.seq_len,
        t.num_labels,
        t.seed,
    )
    .map_err(CliError::usage)?;
    let eval = data.split_off(t.eval_sequences);
    Ok((data, eval))
}

/// Fine-tunes a classification head (and the encoder) on the toy task. The
/// head initialization depends only on `head_seed`.
pub fn finetune(cfg: &ExperimentConfig, ck: &Checkpoint, head_seed: u64) -> Result<Checkpoint, CliError> {
    let (train, _) = task_data(cfg)?;
    let mut spec = TrainSpec::new(cfg.task.steps);
    spec.learning_rate = cfg.train.learning_rate;
    spec.batch_size = cfg.train.batch_size;
    spec.data_seed = head_seed;
    Ok(finetune_classifier(ck, &train, head_seed, &spec)?)
}

/// Union of the capture points every variant needs.
pub fn capture_points(model: &TransformerConfig, variants: &[Variant]) -> CaptureSpec {
    let points: Vec<_> = variants
        .iter()
        .filter(|v| !v.components.is_empty())
        .flat_map(|v| v.align_spec().required_points(model).points().iter().copied().collect::<Vec<_>>())
        .collect();
    CaptureSpec::new(points)
}

/// Joint statistics over the training split, consuming at most `budget` tokens.
pub fn capture(
    cfg: &ExperimentConfig,
    a: &Checkpoint,
    b: &Checkpoint,
    corpora: &Corpora,
    spec: &CaptureSpec,
    budget: usize,
) -> Result<StatsMap, CliError> {
    Ok(capture_corpus(a, b, &corpora.train, spec, cfg.token_filter, Some(budget))?)
}

/// Tokens the statistics were accumulated over.
pub fn captured_tokens(stats: &StatsMap) -> u64 {
    stats.values().next().map_or(0, |s| s.n())
}

/// Plan for one variant; vanilla is the identity.
pub fn plan_for(model: &TransformerConfig, stats: &StatsMap, variant: &Variant) -> Result<PermutationPlan, CliError> {
    if variant.components.is_empty() {
        return Ok(PermutationPlan::identity(model));
    }
    Ok(build_plan(model, stats, &variant.align_spec())?)
}

/// The strategy fields of a plan: everything except the permutations.
pub fn plan_strategy(plan: &PermutationPlan) -> Value {
    let mut v: Value = serde_json::from_str(&plan.to_json()).expect("plan JSON");
    if let Value::Object(m) = &mut v {
        for k in ["ff", "mha", "residual"] {
            m.remove(k);
        }
    }
    v
}

/// Applies `plan` to `b` and scans the path from `a` to the permuted `b`.
/// Plans that do not preserve function need `allow_invalid`.
pub fn barrier_for_plan(
    a: &Checkpoint,
    b: &Checkpoint,
    plan: &PermutationPlan,
    allow_invalid: bool,
    eval: EvalData<'_>,
    grid_points: usize,
    mut metadata: Value,
) -> Result<BarrierReport, CliError> {
    let b_perm = apply_plan(b, plan, allow_invalid)?;
    let spec = MergeSpec::new(lambda_grid(grid_points)?, eval.kind())?;
    if let Value::Object(m) = &mut metadata {
        m.insert("plan".into(), plan_strategy(plan));
    }
    Ok(barrier_scan(a, &b_perm, &spec, eval, metadata)?)
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub plan: PermutationPlan,
    pub report: BarrierReport,
}

/// Builds every variant's plan from `stats` and scans its barrier. Variants
/// whose plans do not preserve function (ignore_heads, separate) are still
/// evaluated; their report metadata records `"valid": false`.
pub fn evaluate_variants(
    a: &Checkpoint,
    b: &Checkpoint,
    stats: &StatsMap,
    variants: &[Variant],
    eval: EvalData<'_>,
    grid_points: usize,
    metadata: &Value,
) -> Result<Vec<VariantResult>, CliError> {
    variants
        .iter()
        .map(|v| {
            let plan = plan_for(a.config(), stats, v)?;
            let mut meta = metadata.clone();
            if let Value::Object(m) = &mut meta {
                m.insert("variant".into(), v.name.clone().into());
            }
            let report = barrier_for_plan(a, b, &plan, true, eval, grid_points, meta)?;
            Ok(VariantResult {
                variant: v.clone(),
                plan,
                report,
            })
        })
        .collect()
}

/// Mean and standard error of the mean (sample standard deviation / √n).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// All unordered pairs `(i, j)` with `i < j`.
pub fn pair_indices(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub seed_a: u64,
    pub seed_b: u64,
    pub variant: String,
    pub barrier: f64,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub pairs: usize,
    pub mean_barrier: f64,
    pub std_err: f64,
}

/// Per-pair outcome: one result per variant plus the raw statistics'
/// token count.
#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub seed_a: u64,
    pub seed_b: u64,
    pub results: Vec<VariantResult>,
    pub stats: StatsMap,
}

impl PairOutcome {
    pub fn records(&self) -> Vec<PairRecord> {
        let tokens = captured_tokens(&self.stats);
        self.results
            .iter()
            .map(|r| PairRecord {
                seed_a: self.seed_a,
                seed_b: self.seed_b,
                variant: r.variant.name.clone(),
                barrier: r.report.barrier,
                tokens,
            })
            .collect()
    }
}

/// Runs capture, alignment and barrier scans for every seed pair. Pairs are
/// independent and run in parallel; `models` must be in seed order.
pub fn run_pairs(
    cfg: &ExperimentConfig,
    models: &[(u64, Checkpoint)],
    corpora: &Corpora,
) -> Result<Vec<PairOutcome>, CliError> {
    let model_cfg = cfg.model_config()?;
    let variants = cfg.resolved_variants();
    let spec = capture_points(&model_cfg, &variants);
    let eval = eval_set(cfg, corpora)?;
    pair_indices(models.len())
        .into_par_iter()
        .map(|(i, j)| {
            let (sa, a) = &models[i];
            let (sb, b) = &models[j];
            let stats = if spec.is_empty() {
                StatsMap::new()
            } else {
                capture(cfg, a, b, corpora, &spec, cfg.capture_budget)?
            };
            let meta = json!({ "seed_a": sa, "seed_b": sb, "tokens": captured_tokens(&stats) });
            let results = evaluate_variants(a, b, &stats, &variants, EvalData::Mlm(&eval), cfg.grid_points, &meta)?;
            Ok(PairOutcome {
                seed_a: *sa,
                seed_b: *sb,
                results,
                stats,
            })
        })
        .collect()
}

/// Mean ± standard error of the barrier per variant, in first-seen order.
pub fn summarize(records: &[PairRecord]) -> Vec<VariantSummary> {
    let mut order: Vec<String> = Vec::new();
    let mut by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        if !by.contains_key(r.variant.as_str()) {
            order.push(r.variant.clone());
        }
        by.entry(&r.variant).or_default().push(r.barrier);
    }
    order
        .into_iter()
        .map(|v| {
            let xs = &by[v.as_str()];
            let (mean_barrier, std_err) = mean_se(xs);
            VariantSummary {
                variant: v,
                pairs: xs.len(),
                mean_barrier,
                std_err,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub size: usize,
    pub tokens: u64,
    pub barrier: f64,
}

/// Capture, align and scan once per capture budget, using the configured
/// strategy.
pub fn ablate_data(
    cfg: &ExperimentConfig,
    a: &Checkpoint,
    b: &Checkpoint,
    corpora: &Corpora,
    sizes: &[usize],
) -> Result<Vec<AblationRow>, CliError> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(CliError::Usage("sizes must be a non-empty list of positive token counts".into()));
    }
    let variant = cfg.primary_variant();
    if variant.components.is_empty() {
        return Err(CliError::Usage("no components selected".into()));
    }
    let spec = capture_points(a.config(), std::slice::from_ref(&variant));
    let eval = eval_set(cfg, corpora)?;
    sizes
        .iter()
        .map(|&size| {
            let stats = capture(cfg, a, b, corpora, &spec, size)?;
            let plan = plan_for(a.config(), &stats, &variant)?;
            let report = barrier_for_plan(a, b, &plan, false, EvalData::Mlm(&eval), cfg.grid_points, json!({}))?;
            Ok(AblationRow {
                size,
                tokens: captured_tokens(&stats),
                barrier: report.barrier,
            })
        })
        .collect()
}

/// `# metadata {json}` then `size,tokens,barrier` rows.
pub fn ablation_csv(rows: &[AblationRow], metadata: &Value) -> String {
    let mut out = format!("# metadata {metadata}\nsize,tokens,barrier\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.size, r.tokens, r.barrier));
    }
    out
}

pub fn pairs_csv(records: &[PairRecord]) -> String {
    let mut out = String::from("seed_a,seed_b,variant,tokens,barrier\n");
    for r in records {
        out.push_str(&format!("{},{},{},{},{}\n", r.seed_a, r.seed_b, r.variant, r.tokens, r.barrier));
    }
    out
}

pub fn summary_csv(summary: &[VariantSummary]) -> String {
    let mut out = String::from("variant,pairs,mean_barrier,std_err\n");
    for s in summary {
        out.push_str(&format!("{},{},{},{}\n", s.variant, s.pairs, s.mean_barrier, s.std_err));
    }
    out
}
