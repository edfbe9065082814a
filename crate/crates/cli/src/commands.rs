//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use permweave::activations::{load_stats, save_stats, StatsMap};
use permweave::align::{apply_plan, correlation_report, Component, FfFeatures, MhaMode, PermutationPlan, ResidualMode};
use permweave::merge::{interpolate, EvalData, LossKind};
use permweave::model::{load_checkpoint, save_checkpoint, CapturePoint, CaptureSpec, Checkpoint, TransformerConfig};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, ModelSource};
use crate::error::CliError;
use crate::pipeline::{self, Corpora};

#[derive(Debug, Parser)]
#[command(name = "permweave", version, about = "Align and merge independently trained Transformer encoders")]
pub struct Cli {
    /// Experiment config (JSON); every field has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic corpus as text.
    Corpus(CorpusArgs),
    /// Train one model on masked language modeling.
    Train(TrainArgs),
    /// Fine-tune a trained model on the toy classification task.
    Finetune(FinetuneArgs),
    /// Capture joint feature statistics of two models.
    Capture(CaptureArgs),
    /// Build a permutation plan from captured statistics.
    Align(AlignArgs),
    /// Write one interpolated checkpoint.
    Merge(MergeArgs),
    /// Scan the loss barrier with and without a plan.
    Barrier(BarrierArgs),
    /// Repeat capture, alignment and barrier for several capture budgets.
    AblateData(AblateArgs),
    /// Mean diagonal correlation per layer before and after a plan.
    CorrReport(CorrReportArgs),
    /// Train every seed and evaluate all seed pairs.
    Pairs(PairsArgs),
    /// Print a checkpoint's config and tensor shapes.
    Inspect(InspectArgs),
}

/// Strategy flags shared by `align`, `ablate-data` and `pairs`.
#[derive(Debug, Args, Default)]
pub struct StrategyArgs {
    /// head_perm, monotonic, ignore_heads or identity.
    #[arg(long)]
    pub mha_mode: Option<MhaMode>,
    /// identity, first, last, all or separate.
    #[arg(long)]
    pub residual_mode: Option<ResidualMode>,
    /// Comma-separated subset of ff, mha, residual.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub components: Option<Vec<Component>>,
    /// hidden (after the nonlinearity) or preact.
    #[arg(long)]
    pub ff_features: Option<FfFeatures>,
}

impl StrategyArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(m) = self.mha_mode {
            cfg.mha_mode = m;
        }
        if let Some(m) = self.residual_mode {
            cfg.residual_mode = m;
        }
        if let Some(c) = &self.components {
            cfg.components = c.iter().copied().collect();
        }
        if let Some(f) = self.ff_features {
            cfg.ff_features = f;
        }
    }
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Write the held-out split instead of the training split.
    #[arg(long)]
    pub heldout: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Seeds both the initialization and the batch order.
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's training steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Seeds the classification head and the batch order.
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CaptureArgs {
    /// Reference model A.
    #[arg(long)]
    pub a: PathBuf,
    /// Model B, whose features are matched to A's.
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Token budget; defaults to the config's capture_budget.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Comma-separated capture points; defaults to every point any
    /// strategy needs.
    #[arg(long, value_delimiter = ',')]
    pub points: Option<Vec<CapturePoint>>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Take the model config from this checkpoint instead of the experiment config.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub strategy: StrategyArgs,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Reference model A, returned at λ = 1.
    #[arg(long)]
    pub a: PathBuf,
    /// Model B, returned at λ = 0.
    #[arg(long)]
    pub b: PathBuf,
    /// Plan applied to B first; identity when omitted.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Weight on A, in [0, 1].
    #[arg(long)]
    pub lambda: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Accept plans that do not preserve B's function.
    #[arg(long)]
    pub allow_invalid: bool,
}

#[derive(Debug, Args)]
pub struct BarrierArgs {
    /// Reference model A.
    #[arg(long)]
    pub a: PathBuf,
    /// Model B, aligned to A by the plan.
    #[arg(long)]
    pub b: PathBuf,
    /// Plan applied to B; identity when omitted.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Output prefix: writes PREFIX.csv, PREFIX.json and the vanilla
    /// baseline PREFIX.vanilla.csv / PREFIX.vanilla.json.
    #[arg(long)]
    pub out: PathBuf,
    /// mlm (held-out masked LM loss) or classification.
    #[arg(long, default_value = "mlm")]
    pub loss: LossKind,
    /// Evenly spaced λ values including both endpoints.
    #[arg(long)]
    pub grid_points: Option<usize>,
    /// Accept plans that do not preserve B's function.
    #[arg(long)]
    pub allow_invalid: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Comma-separated capture budgets in tokens.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sizes: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub strategy: StrategyArgs,
}

#[derive(Debug, Args)]
pub struct CorrReportArgs {
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    /// Take the model config from this checkpoint instead of the experiment config.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    /// Overrides the config's output_dir.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Capture budget per pair in tokens.
    #[arg(long)]
    pub budget: Option<usize>,
    #[command(flatten)]
    pub strategy: StrategyArgs,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_model(path: &Path) -> Result<Checkpoint, CliError> {
    load_checkpoint(path).map_err(|e| CliError::Usage(format!("cannot load checkpoint {}: {e}", path.display())))
}

fn load_plan(path: &Path) -> Result<PermutationPlan, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read plan {}: {e}", path.display())))?;
    PermutationPlan::from_json(&text).map_err(|e| CliError::Usage(format!("invalid plan {}: {e}", path.display())))
}

fn load_stats_file(path: &Path) -> Result<StatsMap, CliError> {
    load_stats(path).map_err(|e| CliError::Usage(format!("cannot load stats {}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn save_model(ck: &Checkpoint, path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(save_checkpoint(ck, path)?)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn same_config(a: &Checkpoint, b: &Checkpoint) -> Result<(), CliError> {
    if a.config() != b.config() {
        return Err(CliError::Usage("checkpoints have different configs".into()));
    }
    Ok(())
}

fn model_config_for(cfg: &ExperimentConfig, model: Option<&Path>) -> Result<TransformerConfig, CliError> {
    match model {
        Some(p) => Ok(load_model(p)?.config().clone()),
        None => cfg.model_config(),
    }
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Corpus(args) => corpus(&cfg, &args),
        Command::Train(args) => {
            if let Some(s) = args.steps {
                cfg.train.steps = s;
            }
            train(&cfg, &args)
        }
        Command::Finetune(args) => {
            if let Some(s) = args.steps {
                cfg.task.steps = s;
            }
            finetune(&cfg, &args)
        }
        Command::Capture(args) => capture(&cfg, &args),
        Command::Align(args) => {
            args.strategy.apply(&mut cfg);
            align(&cfg, &args)
        }
        Command::Merge(args) => merge(&args),
        Command::Barrier(args) => {
            if let Some(g) = args.grid_points {
                cfg.grid_points = g;
            }
            barrier(&cfg, &args)
        }
        Command::AblateData(args) => {
            args.strategy.apply(&mut cfg);
            ablate(&cfg, &args)
        }
        Command::CorrReport(args) => corr_report(&cfg, &args),
        Command::Pairs(args) => {
            args.strategy.apply(&mut cfg);
            if let Some(d) = &args.out_dir {
                cfg.output_dir = d.clone();
            }
            if let Some(s) = &args.seeds {
                cfg.seeds = s.clone();
            }
            if let Some(s) = args.steps {
                cfg.train.steps = s;
            }
            if let Some(b) = args.budget {
                cfg.capture_budget = b;
            }
            pairs(&cfg)
        }
        Command::Inspect(args) => inspect(&args),
    }
}

fn corpus(cfg: &ExperimentConfig, args: &CorpusArgs) -> Result<(), CliError> {
    let c = pipeline::corpora(cfg)?;
    let split = if args.heldout { &c.heldout } else { &c.train };
    write(&args.out, split.to_text())
}

fn train(cfg: &ExperimentConfig, args: &TrainArgs) -> Result<(), CliError> {
    cfg.model_config()?;
    cfg.train.validate().map_err(CliError::usage)?;
    let corpora = pipeline::corpora(cfg)?;
    let outcome = pipeline::train_model(cfg, &corpora, args.seed)?;
    save_model(&outcome.checkpoint, &args.out)?;
    let (early, late) = outcome.early_late();
    let summary = json!({
        "seed": args.seed,
        "checkpoint": args.out,
        "steps": outcome.losses.len(),
        "early_loss": early,
        "late_loss": late,
        "config": cfg,
    });
    write(&with_suffix(&args.out, ".json"), serde_json::to_string_pretty(&summary).expect("json"))?;
    print_json(&json!({"seed": args.seed, "early_loss": early, "late_loss": late}));
    Ok(())
}

fn finetune(cfg: &ExperimentConfig, args: &FinetuneArgs) -> Result<(), CliError> {
    let ck = load_model(&args.model)?;
    let tuned = pipeline::finetune(cfg, &ck, args.seed)?;
    let (_, eval) = pipeline::task_data(cfg)?;
    let (loss, acc) = permweave::trainer::classification_eval(&tuned, &eval)?;
    save_model(&tuned, &args.out)?;
    print_json(&json!({"eval_loss": loss, "eval_accuracy": acc}));
    Ok(())
}

/// Every point any strategy needs, including pre-activation FF features.
fn all_points(model: &TransformerConfig) -> CaptureSpec {
    let mut points: Vec<CapturePoint> = CaptureSpec::all(model).points().iter().copied().collect();
    points.extend((0..model.num_layers).map(CapturePoint::FfPreact));
    CaptureSpec::new(points)
}

fn capture(cfg: &ExperimentConfig, args: &CaptureArgs) -> Result<(), CliError> {
    let a = load_model(&args.a)?;
    let b = load_model(&args.b)?;
    same_config(&a, &b)?;
    let spec = match &args.points {
        Some(p) => CaptureSpec::new(p.iter().copied()),
        None => all_points(a.config()),
    };
    spec.validate(a.config()).map_err(CliError::usage)?;
    let budget = args.budget.unwrap_or(cfg.capture_budget);
    let corpora = pipeline::corpora(cfg)?;
    let stats = pipeline::capture(cfg, &a, &b, &corpora, &spec, budget)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_stats(&args.out, &stats)?;
    print_json(&json!({
        "tokens": pipeline::captured_tokens(&stats),
        "points": spec.points().iter().map(|p| p.to_string()).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn align(cfg: &ExperimentConfig, args: &AlignArgs) -> Result<(), CliError> {
    if cfg.components.is_empty() {
        return Err(CliError::Usage("at least one component must be selected".into()));
    }
    let model = model_config_for(cfg, args.model.as_deref())?;
    let stats = load_stats_file(&args.stats)?;
    let plan = pipeline::plan_for(&model, &stats, &cfg.primary_variant()).map_err(|e| CliError::Usage(e.to_string()))?;
    write(&args.out, plan.to_json())
}

fn merge(args: &MergeArgs) -> Result<(), CliError> {
    let a = load_model(&args.a)?;
    let b = load_model(&args.b)?;
    same_config(&a, &b)?;
    let b = match &args.plan {
        Some(p) => apply_plan(&b, &load_plan(p)?, args.allow_invalid).map_err(CliError::usage)?,
        None => b,
    };
    let merged = interpolate(&a, &b, args.lambda).map_err(CliError::usage)?;
    save_model(&merged, &args.out)
}

fn barrier(cfg: &ExperimentConfig, args: &BarrierArgs) -> Result<(), CliError> {
    let a = load_model(&args.a)?;
    let b = load_model(&args.b)?;
    same_config(&a, &b)?;
    let plan = match &args.plan {
        Some(p) => load_plan(p)?,
        None => PermutationPlan::identity(a.config()),
    };
    plan.check(a.config()).map_err(CliError::usage)?;
    if !plan.is_valid() && !args.allow_invalid {
        return Err(CliError::Usage("plan does not preserve function; pass --allow-invalid".into()));
    }
    let corpora;
    let masked;
    let labeled;
    let eval = match args.loss {
        LossKind::Mlm => {
            let mut local = cfg.clone();
            local.model = ModelSource::Inline(a.config().clone());
            corpora = pipeline::corpora(&local)?;
            masked = pipeline::eval_set(&local, &corpora)?;
            EvalData::Mlm(&masked)
        }
        LossKind::Classification => {
            labeled = pipeline::task_data(cfg)?.1;
            EvalData::Classification(&labeled)
        }
    };
    let meta = json!({
        "model_a": args.a,
        "model_b": args.b,
        "plan_file": args.plan,
        "config": cfg,
    });
    let aligned = pipeline::barrier_for_plan(&a, &b, &plan, args.allow_invalid, eval, cfg.grid_points, meta.clone())?;
    let vanilla = pipeline::barrier_for_plan(
        &a,
        &b,
        &PermutationPlan::identity(a.config()),
        false,
        eval,
        cfg.grid_points,
        meta,
    )?;
    write(&with_suffix(&args.out, ".csv"), aligned.to_csv())?;
    write(&with_suffix(&args.out, ".json"), aligned.to_json())?;
    write(&with_suffix(&args.out, ".vanilla.csv"), vanilla.to_csv())?;
    write(&with_suffix(&args.out, ".vanilla.json"), vanilla.to_json())?;
    let mut summary = json!({
        "loss": args.loss.as_str(),
        "barrier": aligned.barrier,
        "vanilla_barrier": vanilla.barrier,
    });
    if let (Some(p), Some(v)) = (aligned.pseudo_perplexities(), vanilla.pseudo_perplexities()) {
        let max = |xs: Vec<f64>| xs.into_iter().fold(f64::NEG_INFINITY, f64::max);
        summary["max_pseudo_perplexity"] = max(p).into();
        summary["vanilla_max_pseudo_perplexity"] = max(v).into();
    }
    print_json(&summary);
    Ok(())
}

fn ablate(cfg: &ExperimentConfig, args: &AblateArgs) -> Result<(), CliError> {
    let a = load_model(&args.a)?;
    let b = load_model(&args.b)?;
    same_config(&a, &b)?;
    let mut local = cfg.clone();
    local.model = ModelSource::Inline(a.config().clone());
    let corpora = pipeline::corpora(&local)?;
    let rows = pipeline::ablate_data(&local, &a, &b, &corpora, &args.sizes)?;
    let meta = json!({
        "model_a": args.a,
        "model_b": args.b,
        "strategy": local.primary_variant(),
        "config": local,
    });
    write(&args.out, pipeline::ablation_csv(&rows, &meta))
}

fn corr_report(cfg: &ExperimentConfig, args: &CorrReportArgs) -> Result<(), CliError> {
    let model = model_config_for(cfg, args.model.as_deref())?;
    let stats = load_stats_file(&args.stats)?;
    let plan = load_plan(&args.plan)?;
    let rows = correlation_report(&model, &stats, &plan).map_err(CliError::usage)?;
    let mut out = String::from("component,layer,point,before,after\n");
    for r in rows {
        let layer = r.layer.map_or(String::new(), |l| l.to_string());
        out.push_str(&format!("{},{},{},{},{}\n", r.component, layer, r.point, r.before, r.after));
    }
    match &args.out {
        Some(p) => write(p, out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

/// Loads a cached model for `seed` when it exists and matches the config,
/// otherwise trains and caches it.
fn model_for_seed(cfg: &ExperimentConfig, corpora: &Corpora, seed: u64) -> Result<Checkpoint, CliError> {
    let path = cfg.output_dir.join("models").join(format!("seed-{seed}.pwc"));
    let provenance = with_suffix(&path, ".json");
    let expected = json!({"model": cfg.model, "corpus": cfg.corpus, "train": cfg.train_spec(seed)});
    if let (Ok(ck), Ok(text)) = (load_checkpoint(&path), std::fs::read_to_string(&provenance)) {
        if serde_json::from_str::<Value>(&text).ok().as_ref() == Some(&expected) {
            return Ok(ck);
        }
    }
    let outcome = pipeline::train_model(cfg, corpora, seed)?;
    save_model(&outcome.checkpoint, &path)?;
    write(&provenance, serde_json::to_string_pretty(&expected).expect("json"))?;
    Ok(outcome.checkpoint)
}

fn pairs(cfg: &ExperimentConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let corpora = pipeline::corpora(cfg)?;
    use rayon::prelude::*;
    let models: Vec<(u64, Checkpoint)> = cfg
        .seeds
        .par_iter()
        .map(|&s| Ok((s, model_for_seed(cfg, &corpora, s)?)))
        .collect::<Result<_, CliError>>()?;
    let outcomes = pipeline::run_pairs(cfg, &models, &corpora)?;
    let mut records = Vec::new();
    for o in &outcomes {
        let dir = cfg.output_dir.join("pairs").join(format!("{}-{}", o.seed_a, o.seed_b));
        for r in &o.results {
            write(&dir.join(format!("{}.csv", r.variant.name)), r.report.to_csv())?;
            write(&dir.join(format!("{}.json", r.variant.name)), r.report.to_json())?;
            write(&dir.join(format!("{}.plan.json", r.variant.name)), r.plan.to_json())?;
        }
        records.extend(o.records());
    }
    let summary = pipeline::summarize(&records);
    write(&cfg.output_dir.join("pairs.csv"), pipeline::pairs_csv(&records))?;
    write(&cfg.output_dir.join("summary.csv"), pipeline::summary_csv(&summary))?;
    let report = json!({"config": cfg, "variants": cfg.resolved_variants(), "summary": summary});
    write(
        &cfg.output_dir.join("summary.json"),
        serde_json::to_string_pretty(&report).expect("json"),
    )?;
    print!("{}", pipeline::summary_csv(&summary));
    Ok(())
}

fn inspect(args: &InspectArgs) -> Result<(), CliError> {
    let ck = load_model(&args.model)?;
    let shapes: serde_json::Map<String, Value> = ck
        .tensors()
        .iter()
        .map(|(k, m)| (k.clone(), json!([m.rows(), m.cols()])))
        .collect();
    print_json(&json!({
        "config": ck.config(),
        "parameters": ck.num_parameters(),
        "tensors": shapes,
    }));
    Ok(())
}
