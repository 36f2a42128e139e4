//! Synthetic few-shot task domains with controllable shift, plus a generic
//! on-disk dataset loader and the n-way k-shot episode sampler.
//!
//! A domain is a family of class patterns: each class is a deterministic sum
//! of sinusoidal gratings inside the domain's frequency band, mixed across
//! channels and normalized. Samples are the class pattern under phase/pixel
//! jitter plus Gaussian noise, so conv layers have real structure to find but
//! everything stays reproducible from (spec, rng).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::meta::MetaError;
use crate::tensor::TensorError;

mod dataset;
mod domain;
mod episodes;
#[cfg(test)]
mod tests;

pub use dataset::{export_dataset, load_dataset, LoadedDataset};
pub use domain::{make_domain, shift_domain, ClassPrototype, Domain};
pub use episodes::{sample_episode, ClassSource};

// ── errors ──

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),
    #[error("could not draw a prototype for class {class} distinct enough from its peers after {attempts} attempts")]
    PrototypeCollision { class: usize, attempts: usize },
    #[error("episode wants {want} classes but the split has {have}")]
    NotEnoughClasses { want: usize, have: usize },
    #[error("class {class} has {have} stored samples, episode needs {want}")]
    NotEnoughSamples { class: usize, want: usize, have: usize },
    #[error("dataset manifest problem: {0}")]
    Manifest(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Episode(#[from] MetaError),
}

pub type Result<T> = std::result::Result<T, TaskError>;

pub(crate) fn io_ctx(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> TaskError {
    let context = context.into();
    move |source| TaskError::Io { context, source }
}

// ── splits ──

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Split> {
        match tag {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Class-disjoint split assignment: which class ids belong to meta-train,
/// meta-validation, and meta-test.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitDataset {
    pub fn classes(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Pairwise disjointness across the three splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (split, ids) in
            [(Split::Train, &self.train), (Split::Val, &self.val), (Split::Test, &self.test)]
        {
            for &id in ids {
                if let Some(prev) = seen.insert(id, split) {
                    return Err(TaskError::Manifest(format!(
                        "class {id} appears in both {} and {}",
                        prev.tag(),
                        split.tag()
                    )));
                }
            }
        }
        Ok(())
    }
}

// ── domain spec ──

pub const GRATINGS_PER_CHANNEL: usize = 3;

/// Everything that determines a domain. Two specs that compare equal generate
/// byte-identical prototypes and, given equal rngs, byte-identical samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    pub seed: u64,
    /// Classes per split: meta-train / meta-val / meta-test, ids assigned in
    /// that order.
    pub splits: [usize; 3],
    /// (C, H, W).
    pub image_shape: [usize; 3],
    /// Spatial frequency band of the gratings, in cycles per image.
    pub freq_lo: f64,
    pub freq_hi: f64,
    /// Per-class contrast is drawn uniformly from this range.
    pub contrast_lo: f64,
    pub contrast_hi: f64,
    /// Row-major C×C channel mixing matrix applied to the raw gratings.
    pub channel_mix: Vec<f64>,
    /// Maximum integer pixel translation (wrap-around) per sample.
    pub jitter_px: usize,
    /// Maximum grating phase rotation (radians) per sample.
    pub jitter_phase: f64,
    pub noise_std: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec {
            seed: 0,
            splits: [20, 5, 5],
            image_shape: [3, 32, 32],
            freq_lo: 1.0,
            freq_hi: 4.0,
            contrast_lo: 0.5,
            contrast_hi: 1.0,
            channel_mix: identity_mix(3),
            jitter_px: 2,
            jitter_phase: 0.5,
            noise_std: 0.05,
        }
    }
}

pub fn identity_mix(c: usize) -> Vec<f64> {
    let mut m = vec![0.0; c * c];
    for i in 0..c {
        m[i * c + i] = 1.0;
    }
    m
}

impl DomainSpec {
    pub fn num_classes(&self) -> usize {
        self.splits.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image_shape;
        let fail = |msg: String| Err(TaskError::InvalidSpec(msg));
        if c == 0 || h < 4 || w < 4 {
            return fail(format!("image shape {:?} too small", self.image_shape));
        }
        if self.num_classes() == 0 {
            return fail("no classes in any split".into());
        }
        if !(self.freq_lo > 0.0 && self.freq_lo < self.freq_hi) {
            return fail(format!("frequency band [{}, {}) is empty", self.freq_lo, self.freq_hi));
        }
        if !(self.contrast_lo > 0.0 && self.contrast_lo <= self.contrast_hi) {
            return fail(format!(
                "contrast range [{}, {}] invalid",
                self.contrast_lo, self.contrast_hi
            ));
        }
        if self.channel_mix.len() != c * c {
            return fail(format!(
                "channel mix has {} entries, expected {}×{}",
                self.channel_mix.len(),
                c,
                c
            ));
        }
        if self.jitter_px >= h.min(w) {
            return fail(format!("jitter {}px exceeds the image", self.jitter_px));
        }
        if !(self.jitter_phase >= 0.0) || !(self.noise_std >= 0.0) {
            return fail("jitter phase and noise std must be non-negative".into());
        }
        Ok(())
    }

    /// Split assignment induced by `splits`: contiguous id blocks in
    /// train/val/test order.
    pub fn split_dataset(&self) -> SplitDataset {
        let [tr, va, te] = self.splits;
        SplitDataset {
            train: (0..tr).collect(),
            val: (tr..tr + va).collect(),
            test: (tr + va..tr + va + te).collect(),
        }
    }
}
