//! The command entry points and the artifact files they write.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::analysis::{
    cka_report, dump_representations, grad_norm_report, head_gap_cosine, nil_test,
    similarity_report, CkaReport, GradNormReport, SimilarityReport, CSV_HEADER,
};
use crate::meta::{
    inner_adapt, layer_subset_config, meta_step, meta_test, Episode, EpisodeEval, HeadVariant,
    InnerLoopConfig, Optimizer,
};
use crate::nn::{build, load_checkpoint, save_checkpoint, ParamKind, ParameterSet, HEAD_GROUP};
use crate::tasks::{make_domain, sample_episode, shift_domain, ClassSource, Split};
use crate::{derive_seed, seeded_rng};

use super::{
    read_text, write_report, write_snapshot, write_text, AlgorithmSpec, CliError, EpisodeGeometry,
    ExperimentConfig, Result, RunOptions, ANALYZE_STREAM, EXPORT_STREAM, TEST_STREAM,
    TRAIN_EVAL_STREAM, TRAIN_STREAM, VAL_STREAM,
};

pub const METRICS_HEADER: &str = "step,meta_loss,val_acc_before,val_acc_after";

// ── episode scoring engine ──

/// Episode batch rng stream for one (split, batch index) pair. Batch 0 of the
/// validation split is the same stream the training loop checkpoints on, so
/// a later `cmd_eval` on that split replays it exactly.
fn batch_stream(split: Split, batch: usize) -> u64 {
    let base = match split {
        Split::Train => TRAIN_EVAL_STREAM,
        Split::Val => VAL_STREAM,
        Split::Test => TEST_STREAM,
    };
    base + batch as u64
}

fn sample_batch<S: ClassSource + ?Sized>(
    source: &S,
    split: Split,
    geo: EpisodeGeometry,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Episode>> {
    (0..count)
        .map(|_| sample_episode(source, split, geo.n, geo.k, geo.q, rng).map_err(Into::into))
        .collect()
}

/// Score pre-sampled episodes, fanning out across worker threads when
/// allowed. Chunks land back in episode order and the final fold is the same
/// left-to-right sum as the single-threaded path, so the thread count never
/// changes a reported value.
fn score_episodes(
    params: &ParameterSet,
    inner: &InnerLoopConfig,
    episodes: &[Episode],
    adapt_steps: Option<usize>,
    threads: usize,
) -> Result<Vec<EpisodeEval>> {
    if threads <= 1 || episodes.len() < 2 {
        return Ok(meta_test(params, episodes, inner, adapt_steps)?);
    }
    let chunk = episodes.len().div_ceil(threads.min(episodes.len()));
    let parts = std::thread::scope(|scope| {
        let handles: Vec<_> = episodes
            .chunks(chunk)
            .map(|part| scope.spawn(move || meta_test(params, part, inner, adapt_steps)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<Vec<_>>()
    });
    let mut evals = Vec::with_capacity(episodes.len());
    for part in parts {
        evals.extend(part?);
    }
    Ok(evals)
}

fn mean_eval(evals: &[EpisodeEval]) -> (f64, f64) {
    let n = evals.len().max(1) as f64;
    let before: f64 = evals.iter().map(|e| e.before).sum();
    let after: f64 = evals.iter().map(|e| e.after).sum();
    (before / n, after / n)
}

/// Mean and sample standard deviation (0 for a single value).
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct BatchScore {
    before: f64,
    after: f64,
}

/// One accuracy pair per batch: freshly seeded episodes per batch index,
/// identical across runs, checkpoints and adapt-step settings, so every
/// comparison sharing an eval seed is paired.
fn eval_split<S: ClassSource + ?Sized>(
    params: &ParameterSet,
    inner: &InnerLoopConfig,
    source: &S,
    split: Split,
    geo: EpisodeGeometry,
    eval_seed: u64,
    batches: usize,
    episodes_per_batch: usize,
    adapt_steps: Option<usize>,
    threads: usize,
) -> Result<Vec<BatchScore>> {
    let mut scores = Vec::with_capacity(batches);
    for batch in 0..batches {
        let mut rng = seeded_rng(derive_seed(eval_seed, batch_stream(split, batch)));
        let episodes = sample_batch(source, split, geo, episodes_per_batch, &mut rng)?;
        let evals = score_episodes(params, inner, &episodes, adapt_steps, threads)?;
        let (before, after) = mean_eval(&evals);
        scores.push(BatchScore { before, after });
    }
    Ok(scores)
}

// ── train ──

/// What a training run leaves in its output directory.
#[derive(Clone, Debug)]
pub struct RunArtifact {
    pub config_path: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub report_path: PathBuf,
    pub config_hash: String,
    /// Outer step whose validation accuracy selected the kept checkpoint;
    /// 0 means no evaluation ever ran and the checkpoint is the init.
    pub best_step: usize,
    pub best_val_before: Option<f64>,
    pub best_val_after: Option<f64>,
}

/// Meta-train, evaluating on fixed-seed meta-validation episodes every
/// `checkpoint_every` steps (and at the final step) and keeping the
/// checkpoint with the best after-adaptation accuracy. Metrics rows are
/// written at evaluation steps only.
pub fn cmd_train(config: &ExperimentConfig, out: &Path, opts: &RunOptions) -> Result<RunArtifact> {
    let config_hash = write_snapshot(config, out)?;
    let mut params = build(&config.backbone, config.seeds.build)?;
    let inner = config.algorithm.resolve(&params)?;
    let domain = make_domain(&config.domain)?;
    let mut opt = Optimizer::new(&config.outer, &params)?;
    let mut train_rng = seeded_rng(derive_seed(config.seeds.episodes, TRAIN_STREAM));
    let geo = config.episode;
    let threads = opts.effective_threads();

    // With 0 outer steps the artifact holds the initialization.
    let checkpoint_path = out.join("best_checkpoint.mlt");
    save_checkpoint(&checkpoint_path, &params)?;
    let (mut best_step, mut best_before, mut best_after) = (0usize, None::<f64>, None::<f64>);

    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut final_loss = None;

    for step in 1..=config.outer.steps {
        let episodes =
            sample_batch(&domain, Split::Train, geo, config.outer.meta_batch, &mut train_rng)?;
        let (next, report) = meta_step(&params, &episodes, &inner, &config.outer, &mut opt)?;
        params = next;
        final_loss = Some(report.meta_loss);
        if step % config.eval.checkpoint_every == 0 || step == config.outer.steps {
            let scores = eval_split(
                &params,
                &inner,
                &domain,
                Split::Val,
                geo,
                config.seeds.eval,
                1,
                config.eval.val_episodes,
                None,
                threads,
            )?;
            let (vb, va) = (scores[0].before, scores[0].after);
            metrics.push_str(&format!("{step},{},{vb},{va}\n", report.meta_loss));
            if best_after.map_or(true, |cur| va > cur) {
                (best_step, best_before, best_after) = (step, Some(vb), Some(va));
                save_checkpoint(&checkpoint_path, &params)?;
            }
        }
    }

    let metrics_path = out.join("metrics.csv");
    write_text(&metrics_path, &metrics)?;
    let mut body = serde_json::Map::new();
    body.insert("command".into(), json!("train"));
    body.insert("config_hash".into(), json!(config_hash));
    body.insert("outer_steps".into(), json!(config.outer.steps));
    body.insert("best_step".into(), json!(best_step));
    body.insert("best_val_acc_before".into(), json!(best_before));
    body.insert("best_val_acc_after".into(), json!(best_after));
    body.insert("final_meta_loss".into(), json!(final_loss));
    let report_path = write_report(out, body)?;

    Ok(RunArtifact {
        config_path: out.join("config.json"),
        metrics_path,
        checkpoint_path,
        report_path,
        config_hash,
        best_step,
        best_val_before: best_before,
        best_val_after: best_after,
    })
}

// ── eval ──

#[derive(Clone, Copy, Debug)]
pub struct EvalRow {
    pub adapt_steps: usize,
    pub batch: usize,
    pub acc_before: f64,
    pub acc_after: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalStats {
    pub adapt_steps: usize,
    pub before_mean: f64,
    pub before_std: f64,
    pub after_mean: f64,
    pub after_std: f64,
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    pub stats: Vec<EvalStats>,
    pub report_path: PathBuf,
}

/// Score a checkpoint on independently seeded episode batches; the summary
/// std is over batch means. An empty `adapt_steps` means the configured
/// inner step count; batch episodes depend only on (split, batch), so a
/// step sweep is evaluated on identical episodes at every step count.
pub fn cmd_eval(
    checkpoint: &Path,
    config: &ExperimentConfig,
    split: Split,
    episodes_per_batch: usize,
    adapt_steps: &[usize],
    out: &Path,
    opts: &RunOptions,
) -> Result<EvalSummary> {
    let config_hash = write_snapshot(config, out)?;
    if episodes_per_batch == 0 {
        return Err(CliError::Config("eval needs at least one episode per batch".into()));
    }
    let params = load_checkpoint(checkpoint, &config.backbone)?;
    let inner = config.algorithm.resolve(&params)?;
    let domain = make_domain(&config.domain)?;
    let steps_list: Vec<usize> =
        if adapt_steps.is_empty() { vec![inner.steps] } else { adapt_steps.to_vec() };
    let threads = opts.effective_threads();

    let mut rows = Vec::new();
    let mut stats = Vec::new();
    for &steps in &steps_list {
        let scores = eval_split(
            &params,
            &inner,
            &domain,
            split,
            config.episode,
            config.seeds.eval,
            config.eval.test_batches,
            episodes_per_batch,
            Some(steps),
            threads,
        )?;
        for (batch, s) in scores.iter().enumerate() {
            rows.push(EvalRow { adapt_steps: steps, batch, acc_before: s.before, acc_after: s.after });
        }
        let (before_mean, before_std) = mean_std(&scores.iter().map(|s| s.before).collect::<Vec<_>>());
        let (after_mean, after_std) = mean_std(&scores.iter().map(|s| s.after).collect::<Vec<_>>());
        stats.push(EvalStats { adapt_steps: steps, before_mean, before_std, after_mean, after_std });
    }

    let mut batches_csv = String::from("adapt_steps,batch,acc_before,acc_after\n");
    for r in &rows {
        batches_csv.push_str(&format!("{},{},{},{}\n", r.adapt_steps, r.batch, r.acc_before, r.acc_after));
    }
    write_text(&out.join("eval_batches.csv"), &batches_csv)?;

    let mut summary_csv =
        String::from("adapt_steps,acc_before_mean,acc_before_std,acc_after_mean,acc_after_std\n");
    for s in &stats {
        summary_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            s.adapt_steps, s.before_mean, s.before_std, s.after_mean, s.after_std
        ));
    }
    write_text(&out.join("eval_summary.csv"), &summary_csv)?;

    let stats_json: Vec<serde_json::Value> = stats
        .iter()
        .map(|s| {
            json!({
                "adapt_steps": s.adapt_steps,
                "acc_before_mean": s.before_mean,
                "acc_before_std": s.before_std,
                "acc_after_mean": s.after_mean,
                "acc_after_std": s.after_std,
            })
        })
        .collect();
    let mut body = serde_json::Map::new();
    body.insert("command".into(), json!("eval"));
    body.insert("config_hash".into(), json!(config_hash));
    body.insert("checkpoint".into(), json!(checkpoint.display().to_string()));
    body.insert("split".into(), json!(split.tag()));
    body.insert("batches".into(), json!(config.eval.test_batches));
    body.insert("episodes_per_batch".into(), json!(episodes_per_batch));
    body.insert("stats".into(), json!(stats_json));
    let report_path = write_report(out, body)?;

    Ok(EvalSummary { rows, stats, report_path })
}

// ── crossdomain ──

#[derive(Clone, Debug)]
pub struct CrossRow {
    pub checkpoint: String,
    pub severity: f64,
    pub before_mean: f64,
    pub before_std: f64,
    pub after_mean: f64,
    pub after_std: f64,
}

#[derive(Clone, Debug)]
pub struct CrossdomainTable {
    pub rows: Vec<CrossRow>,
    pub report_path: PathBuf,
}

/// Adaptation rates for one checkpoint: if a config snapshot sits next to
/// the checkpoint file (a training run directory), its algorithm is used —
/// that is what lets checkpoints trained under different presets be compared
/// side by side — otherwise the master config's algorithm applies. The
/// snapshot's backbone must match the master's.
fn checkpoint_algorithm(
    checkpoint: &Path,
    master: &ExperimentConfig,
) -> Result<AlgorithmSpec> {
    let sibling = checkpoint.parent().map(|d| d.join("config.json"));
    match sibling {
        Some(path) if path.is_file() => {
            let own = ExperimentConfig::from_path(&path)?;
            if own.backbone != master.backbone {
                return Err(CliError::Config(format!(
                    "{}: checkpoint was trained with a different backbone",
                    checkpoint.display()
                )));
            }
            Ok(own.algorithm)
        }
        _ => Ok(master.algorithm.clone()),
    }
}

/// Evaluate checkpoints on shifted variants of the source domain, one row
/// per (severity, checkpoint), same meta-test episode seeds everywhere.
/// Severity 0 is the source domain itself, so that row reproduces a plain
/// `cmd_eval` on the test split exactly.
pub fn cmd_crossdomain(
    checkpoints: &[(String, PathBuf)],
    config: &ExperimentConfig,
    severities: &[f64],
    out: &Path,
    opts: &RunOptions,
) -> Result<CrossdomainTable> {
    let config_hash = write_snapshot(config, out)?;
    if checkpoints.is_empty() {
        return Err(CliError::Config("crossdomain needs at least one checkpoint".into()));
    }
    if severities.is_empty() {
        return Err(CliError::Config("crossdomain needs at least one severity".into()));
    }
    for &s in severities {
        if !s.is_finite() || !(0.0..=1.0).contains(&s) {
            return Err(CliError::Config(format!("severity must lie in [0, 1], got {s}")));
        }
    }
    let threads = opts.effective_threads();

    let mut loaded = Vec::with_capacity(checkpoints.len());
    for (label, path) in checkpoints {
        let params = load_checkpoint(path, &config.backbone)?;
        let inner = checkpoint_algorithm(path, config)?.resolve(&params)?;
        loaded.push((label.clone(), params, inner));
    }

    let mut rows = Vec::new();
    for &severity in severities {
        let shifted = shift_domain(&config.domain, severity);
        let domain = make_domain(&shifted)?;
        for (label, params, inner) in &loaded {
            let scores = eval_split(
                params,
                inner,
                &domain,
                Split::Test,
                config.episode,
                config.seeds.eval,
                config.eval.test_batches,
                config.eval.test_episodes_per_batch,
                None,
                threads,
            )?;
            let (before_mean, before_std) =
                mean_std(&scores.iter().map(|s| s.before).collect::<Vec<_>>());
            let (after_mean, after_std) =
                mean_std(&scores.iter().map(|s| s.after).collect::<Vec<_>>());
            rows.push(CrossRow {
                checkpoint: label.clone(),
                severity,
                before_mean,
                before_std,
                after_mean,
                after_std,
            });
        }
    }

    let mut csv = String::from(
        "checkpoint,severity,acc_before_mean,acc_before_std,acc_after_mean,acc_after_std\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.checkpoint, r.severity, r.before_mean, r.before_std, r.after_mean, r.after_std
        ));
    }
    write_text(&out.join("crossdomain.csv"), &csv)?;

    let rows_json: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            json!({
                "checkpoint": r.checkpoint,
                "severity": r.severity,
                "acc_before_mean": r.before_mean,
                "acc_before_std": r.before_std,
                "acc_after_mean": r.after_mean,
                "acc_after_std": r.after_std,
            })
        })
        .collect();
    let mut body = serde_json::Map::new();
    body.insert("command".into(), json!("crossdomain"));
    body.insert("config_hash".into(), json!(config_hash));
    body.insert(
        "checkpoints".into(),
        json!(checkpoints.iter().map(|(l, _)| l.clone()).collect::<Vec<_>>()),
    );
    body.insert("severities".into(), json!(severities));
    body.insert("rows".into(), json!(rows_json));
    let report_path = write_report(out, body)?;

    Ok(CrossdomainTable { rows, report_path })
}

// ── ablate ──

/// One swept dimension; every value gets a full train+eval under otherwise
/// identical (seed-shared) settings.
#[derive(Clone, Debug, PartialEq)]
pub enum AblationAxis {
    /// Inner head learning rates grafted onto the configured algorithm.
    HeadLr(Vec<f64>),
    /// Adapted-layer subsets: body group names, plus whether the head adapts.
    Subsets(Vec<(Vec<String>, bool)>),
    /// Outer-loop head variants.
    Variant(Vec<HeadVariant>),
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::HeadLr(_) => "head_lr",
            AblationAxis::Subsets(_) => "subsets",
            AblationAxis::Variant(_) => "head_variant",
        }
    }

    /// Parse `head_lr=0,0.5` / `subsets=conv4;conv4+head` /
    /// `head_variant=none,fix,centering`.
    pub fn parse(text: &str) -> Result<Self> {
        let (name, body) = text
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("ablation axis {text:?} has no `=`")))?;
        let axis = match name.trim() {
            "head_lr" => {
                let mut vals = Vec::new();
                for part in body.split(',') {
                    let v: f64 = part.trim().parse().map_err(|_| {
                        CliError::Config(format!("head_lr value {part:?} is not a number"))
                    })?;
                    if !v.is_finite() || v < 0.0 {
                        return Err(CliError::Config(format!(
                            "head_lr values must be finite and >= 0, got {v}"
                        )));
                    }
                    vals.push(v);
                }
                AblationAxis::HeadLr(vals)
            }
            "subsets" => {
                let mut vals = Vec::new();
                for part in body.split(';') {
                    let mut layers = Vec::new();
                    let mut head = false;
                    for member in part.split('+') {
                        let member = member.trim();
                        if member.is_empty() {
                            return Err(CliError::Config(format!(
                                "subset {part:?} has an empty member"
                            )));
                        }
                        if member == HEAD_GROUP {
                            head = true;
                        } else {
                            layers.push(member.to_string());
                        }
                    }
                    vals.push((layers, head));
                }
                AblationAxis::Subsets(vals)
            }
            "head_variant" => {
                let mut vals = Vec::new();
                for part in body.split(',') {
                    vals.push(match part.trim() {
                        "none" => HeadVariant::None,
                        "fix" => HeadVariant::Fix,
                        "centering" => HeadVariant::Centering,
                        other => {
                            return Err(CliError::Config(format!(
                                "unknown head variant {other:?} (none | fix | centering)"
                            )))
                        }
                    });
                }
                AblationAxis::Variant(vals)
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown ablation axis {other:?} (head_lr | subsets | head_variant)"
                )))
            }
        };
        if axis.labels().is_empty() {
            return Err(CliError::Config("ablation axis has no values".into()));
        }
        Ok(axis)
    }

    /// One deterministic label per value, used for subdirectories and rows.
    pub fn labels(&self) -> Vec<String> {
        match self {
            AblationAxis::HeadLr(vs) => vs.iter().map(|v| format!("{v}")).collect(),
            AblationAxis::Subsets(vs) => vs
                .iter()
                .map(|(layers, head)| {
                    let mut parts = layers.clone();
                    if *head {
                        parts.push(HEAD_GROUP.to_string());
                    }
                    parts.join("+")
                })
                .collect(),
            AblationAxis::Variant(vs) => vs
                .iter()
                .map(|v| {
                    match v {
                        HeadVariant::None => "none",
                        HeadVariant::Fix => "fix",
                        HeadVariant::Centering => "centering",
                    }
                    .to_string()
                })
                .collect(),
        }
    }

    /// The config that trains one axis value.
    pub(crate) fn derived(&self, index: usize, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let params = build(&base.backbone, base.seeds.build)?;
        let mut config = base.clone();
        match self {
            AblationAxis::HeadLr(vs) => {
                let mut rates = base.algorithm.resolve(&params)?.rates;
                rates.insert(HEAD_GROUP.to_string(), vs[index]);
                config.algorithm = AlgorithmSpec {
                    rates: Some(rates),
                    steps: base.algorithm.steps,
                    order: base.algorithm.order,
                    ..AlgorithmSpec::explicit(BTreeMap::new())
                };
            }
            AblationAxis::Subsets(vs) => {
                let alpha = base.algorithm.alpha.ok_or_else(|| {
                    CliError::Config(
                        "a subsets ablation needs a preset algorithm (one alpha to share)".into(),
                    )
                })?;
                let (layers, head) = &vs[index];
                let subset = layer_subset_config(&params, layers, *head, alpha)?;
                config.algorithm = AlgorithmSpec {
                    rates: Some(subset.rates),
                    steps: base.algorithm.steps,
                    order: base.algorithm.order,
                    ..AlgorithmSpec::explicit(BTreeMap::new())
                };
            }
            AblationAxis::Variant(vs) => {
                config.outer.head_variant = vs[index];
            }
        }
        Ok(config)
    }
}

#[derive(Clone, Debug)]
pub struct AblateRow {
    pub value: String,
    pub best_step: usize,
    pub best_val_after: Option<f64>,
    pub test_before_mean: f64,
    pub test_before_std: f64,
    pub test_after_mean: f64,
    pub test_after_std: f64,
}

#[derive(Clone, Debug)]
pub struct AblateTable {
    pub axis: String,
    pub rows: Vec<AblateRow>,
    pub summary_path: PathBuf,
    pub curves_path: PathBuf,
    pub report_path: PathBuf,
}

/// Train and test once per axis value, sharing every seed, and collect one
/// summary row each plus all training curves in a single CSV.
pub fn cmd_ablate(
    config: &ExperimentConfig,
    axis: &AblationAxis,
    out: &Path,
    opts: &RunOptions,
) -> Result<AblateTable> {
    let config_hash = write_snapshot(config, out)?;
    let labels = axis.labels();
    let threads = opts.effective_threads();

    let mut rows = Vec::new();
    let mut curves = format!("value,{METRICS_HEADER}\n");
    for (i, label) in labels.iter().enumerate() {
        let derived = axis.derived(i, config)?;
        let dir = out.join(format!("run_{label}"));
        let artifact = cmd_train(&derived, &dir, opts)?;

        for line in read_text(&artifact.metrics_path)?.lines().skip(1) {
            curves.push_str(&format!("{label},{line}\n"));
        }

        let params = load_checkpoint(&artifact.checkpoint_path, &derived.backbone)?;
        let inner = derived.algorithm.resolve(&params)?;
        let domain = make_domain(&derived.domain)?;
        let scores = eval_split(
            &params,
            &inner,
            &domain,
            Split::Test,
            derived.episode,
            derived.seeds.eval,
            derived.eval.test_batches,
            derived.eval.test_episodes_per_batch,
            None,
            threads,
        )?;
        let (test_before_mean, test_before_std) =
            mean_std(&scores.iter().map(|s| s.before).collect::<Vec<_>>());
        let (test_after_mean, test_after_std) =
            mean_std(&scores.iter().map(|s| s.after).collect::<Vec<_>>());
        rows.push(AblateRow {
            value: label.clone(),
            best_step: artifact.best_step,
            best_val_after: artifact.best_val_after,
            test_before_mean,
            test_before_std,
            test_after_mean,
            test_after_std,
        });
    }

    let curves_path = out.join("curves.csv");
    write_text(&curves_path, &curves)?;

    let mut summary = String::from(
        "value,best_step,best_val_acc_after,test_acc_before_mean,test_acc_before_std,test_acc_after_mean,test_acc_after_std\n",
    );
    for r in &rows {
        let best = r.best_val_after.map(|v| v.to_string()).unwrap_or_default();
        summary.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.value,
            r.best_step,
            best,
            r.test_before_mean,
            r.test_before_std,
            r.test_after_mean,
            r.test_after_std
        ));
    }
    let summary_path = out.join("summary.csv");
    write_text(&summary_path, &summary)?;

    let rows_json: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            json!({
                "value": r.value,
                "best_step": r.best_step,
                "best_val_acc_after": r.best_val_after,
                "test_acc_before_mean": r.test_before_mean,
                "test_acc_before_std": r.test_before_std,
                "test_acc_after_mean": r.test_after_mean,
                "test_acc_after_std": r.test_after_std,
            })
        })
        .collect();
    let mut body = serde_json::Map::new();
    body.insert("command".into(), json!("ablate"));
    body.insert("config_hash".into(), json!(config_hash));
    body.insert("axis".into(), json!(axis.name()));
    body.insert("values".into(), json!(labels));
    body.insert("rows".into(), json!(rows_json));
    let report_path = write_report(out, body)?;

    Ok(AblateTable { axis: axis.name().into(), rows, summary_path, curves_path, report_path })
}

// ── analyze ──

#[derive(Clone, Debug)]
pub struct AnalyzeReport {
    pub layers: Vec<String>,
    /// Mean head-row direction-gap cosine; the metric averages over class
    /// triples, so it is undefined (None) for heads with fewer than 3 rows.
    pub head_gap: Option<f64>,
    /// Query accuracy through the trained head, before/after adaptation.
    pub with_head_before: f64,
    pub with_head_after: f64,
    /// Head-free template accuracy at the last analyzed layer, before/after.
    pub nil_before: f64,
    pub nil_after: f64,
    pub report_path: PathBuf,
}

/// Representation probes on meta-test episodes: intra/inter-class cosines,
/// before-vs-after CKA per layer, support gradient norms, head-free template
/// accuracies, the 2×2 with/without-head × before/after accuracy grid, the
/// head direction-gap metric, and raw representation dumps for the first
/// episode. All per-episode metrics are means over `episodes` episodes.
pub fn cmd_analyze(
    checkpoint: &Path,
    config: &ExperimentConfig,
    layers: &[String],
    episodes: usize,
    out: &Path,
    opts: &RunOptions,
) -> Result<AnalyzeReport> {
    let config_hash = write_snapshot(config, out)?;
    if episodes == 0 {
        return Err(CliError::Config("analyze needs at least one episode".into()));
    }
    let params = load_checkpoint(checkpoint, &config.backbone)?;
    let inner = config.algorithm.resolve(&params)?;
    let domain = make_domain(&config.domain)?;
    let layers: Vec<String> =
        if layers.is_empty() { params.body_names() } else { layers.to_vec() };
    let layer_refs: Vec<&str> = layers.iter().map(String::as_str).collect();
    let last_layer = layers.last().ok_or_else(|| {
        CliError::Config("analyze needs at least one layer to probe".into())
    })?;

    let mut rng = seeded_rng(derive_seed(config.seeds.eval, ANALYZE_STREAM));
    let eps = sample_batch(&domain, Split::Test, config.episode, episodes, &mut rng)?;

    let mut sim_sum: Option<SimilarityReport> = None;
    let mut cka_sum: Option<CkaReport> = None;
    let mut grad_sum: Option<GradNormReport> = None;
    let mut nil_sums: Vec<(f64, f64)> = vec![(0.0, 0.0); layers.len()];
    let mut dumped: Vec<PathBuf> = Vec::new();

    for (i, ep) in eps.iter().enumerate() {
        let adapted = inner_adapt(&params, &ep.support_x, &ep.support_y, &inner)?;

        let sim = similarity_report(&params, &adapted, ep, &layer_refs)?;
        match &mut sim_sum {
            None => sim_sum = Some(sim),
            Some(acc) => {
                for (a, r) in acc.rows.iter_mut().zip(&sim.rows) {
                    a.intra += r.intra;
                    a.inter += r.inter;
                }
            }
        }

        let cka = cka_report(&params, &adapted, ep, &layer_refs)?;
        match &mut cka_sum {
            None => cka_sum = Some(cka),
            Some(acc) => {
                for (a, r) in acc.rows.iter_mut().zip(&cka.rows) {
                    a.value += r.value;
                }
            }
        }

        let grad = grad_norm_report(&params, ep)?;
        match &mut grad_sum {
            None => grad_sum = Some(grad),
            Some(acc) => {
                for (a, r) in acc.rows.iter_mut().zip(&grad.rows) {
                    a.weight_norm += r.weight_norm;
                    a.bias_norm += r.bias_norm;
                }
            }
        }

        for (j, layer) in layer_refs.iter().enumerate() {
            nil_sums[j].0 += nil_test(&params, ep, layer, None)?;
            nil_sums[j].1 += nil_test(&params, ep, layer, Some(&inner))?;
        }

        if i == 0 {
            dumped = dump_representations(
                &params,
                &adapted,
                ep,
                &layer_refs,
                &out.join("representations"),
            )?;
        }
    }

    let count = episodes as f64;
    let mut sim = sim_sum.expect("at least one episode");
    for r in &mut sim.rows {
        r.intra /= count;
        r.inter /= count;
    }
    let mut cka = cka_sum.expect("at least one episode");
    for r in &mut cka.rows {
        r.value /= count;
    }
    let mut grad = grad_sum.expect("at least one episode");
    for r in &mut grad.rows {
        r.weight_norm /= count;
        r.bias_norm /= count;
    }
    let nil_rows: Vec<(String, f64, f64)> = layers
        .iter()
        .zip(&nil_sums)
        .map(|(l, &(b, a))| (l.clone(), b / count, a / count))
        .collect();

    // Accuracy through the trained head on the same episodes.
    let evals = score_episodes(&params, &inner, &eps, None, opts.effective_threads())?;
    let (with_head_before, with_head_after) = mean_eval(&evals);
    let (nil_before, nil_after) = {
        let last = nil_rows.last().expect("layers is non-empty");
        (last.1, last.2)
    };

    let head_w = params
        .head()
        .params
        .iter()
        .find(|p| p.kind == ParamKind::Weight)
        .expect("head has a weight matrix");
    let head_gap =
        if config.backbone.num_classes >= 3 { Some(head_gap_cosine(&head_w.value)?) } else { None };

    write_text(&out.join("similarity.csv"), &sim.to_csv())?;
    write_text(&out.join("cka.csv"), &cka.to_csv())?;
    write_text(&out.join("grad_norms.csv"), &grad.to_csv())?;

    let mut nil_csv = String::from(CSV_HEADER);
    for (layer, b, a) in &nil_rows {
        nil_csv.push_str(&format!("\n{layer},before,nil_accuracy,{b}"));
        nil_csv.push_str(&format!("\n{layer},after,nil_accuracy,{a}"));
    }
    nil_csv.push('\n');
    write_text(&out.join("nil.csv"), &nil_csv)?;

    // The 2×2 grid: classification with the trained head vs head-free
    // templates at the last probed layer, each before and after adaptation.
    let mut grid = String::from(CSV_HEADER);
    grid.push_str(&format!("\nhead,before,accuracy,{with_head_before}"));
    grid.push_str(&format!("\nhead,after,accuracy,{with_head_after}"));
    grid.push_str(&format!("\nnil:{last_layer},before,accuracy,{nil_before}"));
    grid.push_str(&format!("\nnil:{last_layer},after,accuracy,{nil_after}"));
    grid.push('\n');
    write_text(&out.join("nil_grid.csv"), &grid)?;

    let mut body = serde_json::Map::new();
    body.insert("command".into(), json!("analyze"));
    body.insert("config_hash".into(), json!(config_hash));
    body.insert("checkpoint".into(), json!(checkpoint.display().to_string()));
    body.insert("layers".into(), json!(&layers));
    body.insert("episodes".into(), json!(episodes));
    body.insert("head_gap_cosine".into(), json!(head_gap));
    body.insert("with_head_before".into(), json!(with_head_before));
    body.insert("with_head_after".into(), json!(with_head_after));
    body.insert("nil_layer".into(), json!(last_layer));
    body.insert("nil_before".into(), json!(nil_before));
    body.insert("nil_after".into(), json!(nil_after));
    body.insert(
        "representation_files".into(),
        json!(dumped
            .iter()
            .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
            .collect::<Vec<_>>()),
    );
    let report_path = write_report(out, body)?;

    Ok(AnalyzeReport {
        layers,
        head_gap,
        with_head_before,
        with_head_after,
        nil_before,
        nil_after,
        report_path,
    })
}

// ── export-dataset ──

/// Materialize the source domain to disk in the archive format, so runs can
/// use stored instances instead of fresh draws.
pub fn cmd_export_dataset(
    config: &ExperimentConfig,
    per_class: usize,
    out: &Path,
) -> Result<PathBuf> {
    let config_hash = write_snapshot(config, out)?;
    let domain = make_domain(&config.domain)?;
    let mut rng = seeded_rng(derive_seed(config.seeds.episodes, EXPORT_STREAM));
    crate::tasks::export_dataset(&domain, per_class, out, &mut rng)?;
    let mut body = serde_json::Map::new();
    body.insert("command".into(), json!("export-dataset"));
    body.insert("config_hash".into(), json!(config_hash));
    body.insert("per_class".into(), json!(per_class));
    body.insert("classes".into(), json!(config.domain.num_classes()));
    write_report(out, body)?;
    Ok(out.join("manifest"))
}
