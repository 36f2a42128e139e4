//! Experiment harness: one config document that fully determines a run, the
//! command entry points behind the `metaloop` binary, and the artifact files
//! they leave on disk.
//!
//! Reproducibility contract: every command writes its resolved config
//! snapshot to the output directory *before* any compute, and the run is a
//! pure function of that snapshot — replaying it single-threaded reproduces
//! the metrics CSV, the final report (minus the wall-clock timestamp field)
//! and every checkpoint byte for byte. Worker threads only fan out episode
//! evaluation, and their results are reduced in episode order, so thread
//! count cannot change any reported value either.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::derive_seed;
use crate::meta::{InnerLoopConfig, InnerOrder, MetaError, OuterLoopConfig};
use crate::nn::{BackboneConfig, NnError, ParameterSet};
use crate::tasks::{DomainSpec, TaskError};
use crate::tensor::TensorError;

mod commands;
pub use commands::{
    cmd_ablate, cmd_analyze, cmd_crossdomain, cmd_eval, cmd_export_dataset, cmd_train,
    AblateRow, AblateTable, AblationAxis, AnalyzeReport, CrossRow, CrossdomainTable, EvalRow,
    EvalStats, EvalSummary, RunArtifact, METRICS_HEADER,
};


// ── errors ──

#[derive(Debug, Error)]
pub enum CliError {
    /// The config document is structurally valid but describes a run that
    /// cannot happen.
    #[error("config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)
        .map_err(|e| CliError::Io { context: path.display().to_string(), source: e })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Io { context: path.display().to_string(), source: e })
}

fn make_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Io { context: path.display().to_string(), source: e })
}

// ── rng streams ──
// Sub-stream tags under the config's seeds, so no two roles ever share an
// rng. Validation replays need `VAL_STREAM + batch` for batch 0 to equal the
// stream the training loop evaluates on, hence the base/offset split; the
// bases are spaced so batch indices cannot collide across roles.

const TRAIN_STREAM: u64 = 1;
const ANALYZE_STREAM: u64 = 2;
const EXPORT_STREAM: u64 = 3;
const VAL_STREAM: u64 = 32;
const TEST_STREAM: u64 = 64;
const TRAIN_EVAL_STREAM: u64 = 96;

// ── config document ──

/// Explicit seeds — nothing in a run may touch the wall clock or OS entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Parameter initialization.
    pub build: u64,
    /// Meta-training episode stream (also the dataset-export stream).
    pub episodes: u64,
    /// Validation / test / analysis episode streams. Kept apart from
    /// `episodes` so re-seeding training never changes what is measured.
    pub eval: u64,
}

/// n-way k-shot q-query geometry, shared by training and every evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeGeometry {
    pub n: usize,
    pub k: usize,
    pub q: usize,
}

impl Default for EpisodeGeometry {
    fn default() -> Self {
        EpisodeGeometry { n: 5, k: 5, q: 15 }
    }
}

/// When to evaluate during training and how much to evaluate after it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSchedule {
    /// Evaluate on meta-validation every this many outer steps, keeping the
    /// checkpoint with the best after-adaptation accuracy.
    pub checkpoint_every: usize,
    /// Fixed-seed validation episodes per in-training evaluation.
    pub val_episodes: usize,
    /// Independently seeded meta-test batches; the reported std is over
    /// batch means, not pooled episodes.
    pub test_batches: usize,
    pub test_episodes_per_batch: usize,
}

impl Default for EvalSchedule {
    fn default() -> Self {
        EvalSchedule {
            checkpoint_every: 100,
            val_episodes: 100,
            test_batches: 5,
            test_episodes_per_batch: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Every group adapts in the inner loop.
    Maml,
    /// Head-only adaptation.
    Anil,
    /// Body-only adaptation.
    Boil,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Maml => "maml",
            Preset::Anil => "anil",
            Preset::Boil => "boil",
        }
    }
}

/// Inner-loop algorithm: either a named preset at one rate, or explicit
/// per-group rates. Exactly one of `preset` / `rates` must be given; `alpha`
/// pairs with a preset only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgorithmSpec {
    pub preset: Option<Preset>,
    pub alpha: Option<f64>,
    pub rates: Option<BTreeMap<String, f64>>,
    pub steps: usize,
    pub order: InnerOrder,
}

impl Default for AlgorithmSpec {
    fn default() -> Self {
        AlgorithmSpec { preset: None, alpha: None, rates: None, steps: 1, order: InnerOrder::Second }
    }
}

impl AlgorithmSpec {
    pub fn preset(p: Preset, alpha: f64) -> Self {
        AlgorithmSpec { preset: Some(p), alpha: Some(alpha), ..Default::default() }
    }

    pub fn explicit(rates: BTreeMap<String, f64>) -> Self {
        AlgorithmSpec { rates: Some(rates), ..Default::default() }
    }

    /// Structural checks that need no built network.
    fn validate_shape(&self) -> Result<()> {
        match (&self.preset, &self.rates) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "algorithm: give either a preset or explicit rates, not both".into(),
                ))
            }
            (None, None) => {
                return Err(CliError::Config(
                    "algorithm: give a preset (with alpha) or explicit rates".into(),
                ))
            }
            (Some(_), None) => {
                let alpha = self.alpha.ok_or_else(|| {
                    CliError::Config("algorithm: a preset needs an `alpha`".into())
                })?;
                if !alpha.is_finite() || alpha < 0.0 {
                    return Err(CliError::Config(format!(
                        "algorithm: alpha must be finite and >= 0, got {alpha}"
                    )));
                }
            }
            (None, Some(rates)) => {
                if self.alpha.is_some() {
                    return Err(CliError::Config(
                        "algorithm: `alpha` only pairs with a preset".into(),
                    ));
                }
                for (name, &r) in rates {
                    if !r.is_finite() || r < 0.0 {
                        return Err(CliError::Config(format!(
                            "algorithm: rate for {name:?} must be finite and >= 0, got {r}"
                        )));
                    }
                }
            }
        }
        if self.steps == 0 {
            return Err(CliError::Config("algorithm: steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Instantiate against a built network, so group names resolve.
    pub fn resolve(&self, params: &ParameterSet) -> Result<InnerLoopConfig> {
        self.validate_shape()?;
        let mut cfg = match (&self.preset, &self.rates) {
            (Some(p), None) => {
                let alpha = self.alpha.expect("validated above");
                match p {
                    Preset::Maml => InnerLoopConfig::maml(params, alpha),
                    Preset::Anil => InnerLoopConfig::anil(params, alpha),
                    Preset::Boil => InnerLoopConfig::boil(params, alpha),
                }
            }
            (None, Some(rates)) => InnerLoopConfig { rates: rates.clone(), ..Default::default() },
            _ => unreachable!("validated above"),
        };
        cfg.steps = self.steps;
        cfg.order = self.order;
        cfg.validate(params)?;
        Ok(cfg)
    }

    pub fn label(&self) -> String {
        match &self.preset {
            Some(p) => p.as_str().to_string(),
            None => "explicit".to_string(),
        }
    }
}

/// Optional cross-domain target: the source domain shifted by `severity`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub severity: f64,
}

/// Everything a run depends on. Unknown keys anywhere in the document are
/// errors — a typo must fail loudly, not silently fall back to a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    pub algorithm: AlgorithmSpec,
    #[serde(default)]
    pub outer: OuterLoopConfig,
    #[serde(default)]
    pub domain: DomainSpec,
    #[serde(default)]
    pub target: Option<TargetSpec>,
    #[serde(default)]
    pub episode: EpisodeGeometry,
    pub seeds: Seeds,
    #[serde(default)]
    pub eval: EvalSchedule,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Json { context: path.display().to_string(), source: e })?;
        config.validate()?;
        Ok(config)
    }

    /// Cross-field checks, run before any compute.
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.outer.validate()?;
        self.domain.validate()?;
        self.algorithm.validate_shape()?;
        let EpisodeGeometry { n, k, q } = self.episode;
        if n < 2 || k == 0 || q == 0 {
            return Err(CliError::Config(format!(
                "episode geometry needs n >= 2, k >= 1, q >= 1, got ({n}, {k}, {q})"
            )));
        }
        if self.backbone.num_classes != n {
            return Err(CliError::Config(format!(
                "backbone has {} output classes but episodes are {n}-way",
                self.backbone.num_classes
            )));
        }
        if self.backbone.input_shape != self.domain.image_shape {
            return Err(CliError::Config(format!(
                "backbone input shape {:?} does not match domain image shape {:?}",
                self.backbone.input_shape, self.domain.image_shape
            )));
        }
        for (split, have) in ["meta-train", "meta-val", "meta-test"]
            .iter()
            .zip(self.domain.splits)
        {
            if have < n {
                return Err(CliError::Config(format!(
                    "{split} split has {have} classes, fewer than n = {n}"
                )));
            }
        }
        let ev = self.eval;
        if ev.checkpoint_every == 0
            || ev.val_episodes == 0
            || ev.test_batches == 0
            || ev.test_episodes_per_batch == 0
        {
            return Err(CliError::Config("eval schedule fields must all be >= 1".into()));
        }
        if let Some(t) = self.target {
            if !t.severity.is_finite() || !(0.0..=1.0).contains(&t.severity) {
                return Err(CliError::Config(format!(
                    "target severity must lie in [0, 1], got {}",
                    t.severity
                )));
            }
        }
        Ok(())
    }

    /// Re-seed initialization and the training episode stream from one
    /// master seed, leaving evaluation streams alone — runs re-seeded for a
    /// multi-seed comparison are still scored on identical episodes.
    pub fn reseeded(mut self, master: u64) -> Self {
        self.seeds.build = derive_seed(master, 0);
        self.seeds.episodes = derive_seed(master, 1);
        self
    }

    /// The canonical serialized form: pretty JSON, struct fields in
    /// declaration order, map keys sorted. Snapshot files, and the config
    /// hash, are built from exactly this string.
    pub fn canonical_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Write the resolved config snapshot into `out`, creating the directory.
/// Every command calls this first; the returned hash goes into its report.
fn write_snapshot(config: &ExperimentConfig, out: &Path) -> Result<String> {
    config.validate()?;
    make_dir(out)?;
    let json = config.canonical_json();
    write_text(&out.join("config.json"), &json)?;
    Ok(sha256_hex(json.as_bytes()))
}

fn unix_timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Final report writer: sorted keys (serde_json maps are ordered), one
/// wall-clock field named `timestamp_unix` that replay comparisons exclude.
fn write_report(out: &Path, mut body: serde_json::Map<String, serde_json::Value>) -> Result<PathBuf> {
    body.insert("timestamp_unix".into(), serde_json::json!(unix_timestamp()));
    let path = out.join("report.json");
    let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(body))
        .expect("report serializes");
    text.push('\n');
    write_text(&path, &text)?;
    Ok(path)
}

// ── execution knobs ──

/// Settings that affect how fast a run goes, never what it computes.
#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    /// Force the single-threaded path for byte-exact replays.
    pub deterministic: bool,
    /// Worker threads for episode evaluation.
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { deterministic: false, threads: 1 }
    }
}

impl RunOptions {
    /// Read the thread cap from `METALOOP_THREADS` (absent or unparsable
    /// means 1).
    pub fn from_env() -> Self {
        let threads = std::env::var("METALOOP_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(1)
            .max(1);
        RunOptions { deterministic: false, threads }
    }

    pub fn effective_threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads.max(1)
        }
    }
}
