//! Representation-analysis instruments: layer-wise cosine similarity before
//! and after adaptation, linear CKA, template-matching accuracy without the
//! classifier head, inner-loop gradient norms, and the head row-gap metric.
//!
//! Everything here is a pure function over immutable inputs. Representations
//! are the flattened post-pooling outputs of body modules, computed on query
//! samples only, via the backbone's capture mechanism.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::meta::{inner_adapt, Episode, InnerLoopConfig, MetaError};
use crate::nn::{forward, NnError, ParameterSet};
use crate::tensor::{gradient, write_tensor, Array, ComputationRecord, Precision, TensorError};

#[cfg(test)]
mod tests;

// ── errors ──

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("vectors have lengths {a} and {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("{0}")]
    NotEnoughSamples(String),
    #[error("degenerate representation: {0}")]
    Degenerate(String),
    #[error("head gap needs at least 3 rows, got {n}")]
    TooFewRows { n: usize },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("writing {context}: {source}")]
    Archive {
        context: String,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

// ── primitives ──

/// Cosine similarity with the uniform zero-vector convention: if either
/// argument has norm below 1e-12 the result is 0.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(AnalysisError::LengthMismatch { a: u.len(), b: v.len() });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu < 1e-12 || nv < 1e-12 {
        Ok(0.0)
    } else {
        Ok(dot / (nu * nv))
    }
}

/// Linear CKA between two sample-by-feature matrices on the same samples:
/// after column centering, ‖YᵀX‖²_F / (‖XᵀX‖_F · ‖YᵀY‖_F), evaluated through
/// the n×n Gram matrices so wide feature dimensions stay cheap.
pub fn cka_linear(x: &Array, y: &Array) -> Result<f64> {
    let (xs, ys) = (x.shape().to_vec(), y.shape().to_vec());
    if xs.len() != 2 || ys.len() != 2 {
        return Err(AnalysisError::NotEnoughSamples(format!(
            "expected rank-2 sample matrices, got {xs:?} and {ys:?}"
        )));
    }
    if xs[0] != ys[0] {
        return Err(AnalysisError::LengthMismatch { a: xs[0], b: ys[0] });
    }
    if xs[0] < 2 {
        return Err(AnalysisError::NotEnoughSamples(format!("{} samples, need at least 2", xs[0])));
    }
    let k = centered_gram(&x.to_f64_vec(), xs[0], xs[1]);
    let l = centered_gram(&y.to_f64_vec(), ys[0], ys[1]);

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let (num, kk, ll) = (dot(&k, &l), dot(&k, &k), dot(&l, &l));
    if kk.sqrt() < 1e-12 {
        return Err(AnalysisError::Degenerate("first input has zero variance".into()));
    }
    if ll.sqrt() < 1e-12 {
        return Err(AnalysisError::Degenerate("second input has zero variance".into()));
    }
    // Bit-identical inputs give bit-identical Grams; report the mathematical
    // value 1 exactly instead of sqrt rounding residue.
    if num == kk && num == ll {
        return Ok(1.0);
    }
    Ok(num / (kk.sqrt() * ll.sqrt()))
}

/// Column-center a row-major n×d matrix and return its n×n Gram matrix.
fn centered_gram(flat: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut centered = flat.to_vec();
    for col in 0..d {
        let mean = (0..n).map(|r| flat[r * d + col]).sum::<f64>() / n as f64;
        for r in 0..n {
            centered[r * d + col] -= mean;
        }
    }
    let mut gram = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = (0..d).map(|c| centered[i * d + c] * centered[j * d + c]).sum::<f64>();
            gram[i * n + j] = v;
            gram[j * n + i] = v;
        }
    }
    gram
}

/// Mean cosine over all ordered row triples (i, j, k), all distinct, of
/// (row_i − row_k) against (row_j − row_k). Orthonormal rows give 0.5 (to
/// rounding); identical rows give 0 by the zero-vector convention.
pub fn head_gap_cosine(head_w: &Array) -> Result<f64> {
    let shape = head_w.shape().to_vec();
    if shape.len() != 2 {
        return Err(AnalysisError::NotEnoughSamples(format!(
            "expected a rank-2 weight matrix, got {shape:?}"
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 3 {
        return Err(AnalysisError::TooFewRows { n });
    }
    let flat = head_w.to_f64_vec();
    let row = |i: usize| &flat[i * d..(i + 1) * d];
    let (mut total, mut count) = (0.0f64, 0usize);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if i == j || i == k || j == k {
                    continue;
                }
                let gi: Vec<f64> = row(i).iter().zip(row(k)).map(|(a, b)| a - b).collect();
                let gj: Vec<f64> = row(j).iter().zip(row(k)).map(|(a, b)| a - b).collect();
                total += cosine(&gi, &gj)?;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

// ── representation extraction ──

/// Flattened post-module outputs for `x` at the requested capture layers,
/// in forward order.
fn representations(params: &ParameterSet, x: &Array, layers: &[&str]) -> Result<Vec<(String, Array)>> {
    let rec = ComputationRecord::new(params.config.precision);
    let bound = params.bind(&rec)?;
    let xt = rec.leaf(&x.cast(params.config.precision), false)?;
    let out = forward(&bound, &xt, layers)?;
    Ok(out.captures.into_iter().map(|(name, t)| (name, t.value())).collect())
}

fn matrix_rows(a: &Array) -> Vec<Vec<f64>> {
    let n = a.shape()[0];
    let flat = a.to_f64_vec();
    let d = flat.len() / n;
    flat.chunks(d).map(|c| c.to_vec()).collect()
}

// ── reports ──

/// Whether a row was measured before or after inner-loop adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptState {
    Before,
    After,
}

impl AdaptState {
    pub fn as_str(self) -> &'static str {
        match self {
            AdaptState::Before => "before",
            AdaptState::After => "after",
        }
    }
}

pub const CSV_HEADER: &str = "layer,state,metric,value";

#[derive(Clone, Debug, Serialize)]
pub struct SimilarityRow {
    pub layer: String,
    pub state: AdaptState,
    /// Mean cosine over unordered same-class query pairs.
    pub intra: f64,
    /// Mean cosine over unordered different-class query pairs.
    pub inter: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimilarityReport {
    pub rows: Vec<SimilarityRow>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CkaRow {
    pub layer: String,
    /// CKA between before- and after-adaptation representations of the same
    /// query inputs.
    pub value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CkaReport {
    pub rows: Vec<CkaRow>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradNormRow {
    pub group: String,
    pub weight_norm: f64,
    pub bias_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradNormReport {
    pub rows: Vec<GradNormRow>,
}

impl SimilarityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!("\n{},{},intra_cosine,{}", r.layer, r.state.as_str(), r.intra));
            out.push_str(&format!("\n{},{},inter_cosine,{}", r.layer, r.state.as_str(), r.inter));
        }
        out.push('\n');
        out
    }
}

impl CkaReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!("\n{},before_vs_after,cka_linear,{}", r.layer, r.value));
        }
        out.push('\n');
        out
    }
}

impl GradNormReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!("\n{},support,weight_grad_norm,{}", r.group, r.weight_norm));
            out.push_str(&format!("\n{},support,bias_grad_norm,{}", r.group, r.bias_norm));
        }
        out.push('\n');
        out
    }
}

/// Mean cosine over unordered same-class pairs and over different-class
/// pairs. Errors when either bucket is empty.
fn class_pair_means(vecs: &[Vec<f64>], labels: &[usize]) -> Result<(f64, f64)> {
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..vecs.len() {
        for j in 0..i {
            let c = cosine(&vecs[i], &vecs[j])?;
            let bucket = if labels[i] == labels[j] { &mut intra } else { &mut inter };
            bucket.0 += c;
            bucket.1 += 1;
        }
    }
    if intra.1 == 0 {
        return Err(AnalysisError::NotEnoughSamples("no same-class pairs".into()));
    }
    if inter.1 == 0 {
        return Err(AnalysisError::NotEnoughSamples(
            "no cross-class pairs (single class)".into(),
        ));
    }
    Ok((intra.0 / intra.1 as f64, inter.0 / inter.1 as f64))
}

/// Mean intra-/inter-class query cosine at each layer, for the unadapted and
/// adapted parameters. Needs at least 2 classes (inter) and 2 query samples
/// per class (intra).
pub fn similarity_report(
    params_before: &ParameterSet,
    params_after: &ParameterSet,
    episode: &Episode,
    layers: &[&str],
) -> Result<SimilarityReport> {
    episode.validate()?;
    if episode.q < 2 {
        return Err(AnalysisError::NotEnoughSamples(
            "intra-class pairs need at least 2 query samples per class".into(),
        ));
    }
    let mut rows = Vec::with_capacity(layers.len() * 2);
    for (state, params) in
        [(AdaptState::Before, params_before), (AdaptState::After, params_after)]
    {
        for (layer, reps) in representations(params, &episode.query_x, layers)? {
            let (intra, inter) = class_pair_means(&matrix_rows(&reps), &episode.query_y)?;
            rows.push(SimilarityRow { layer, state, intra, inter });
        }
    }
    Ok(SimilarityReport { rows })
}

/// Per-layer linear CKA between before- and after-adaptation query
/// representations.
pub fn cka_report(
    params_before: &ParameterSet,
    params_after: &ParameterSet,
    episode: &Episode,
    layers: &[&str],
) -> Result<CkaReport> {
    episode.validate()?;
    let before = representations(params_before, &episode.query_x, layers)?;
    let after = representations(params_after, &episode.query_x, layers)?;
    let rows = before
        .into_iter()
        .zip(after)
        .map(|((layer, x), (_, y))| Ok(CkaRow { value: cka_linear(&x, &y)?, layer }))
        .collect::<Result<Vec<_>>>()?;
    Ok(CkaReport { rows })
}

/// Template-matching accuracy at a captured layer, bypassing the classifier
/// head: per-class templates are mean support representations, each query is
/// assigned the template with the highest cosine (ties to the lowest label).
/// With `adapt` the parameters take the configured inner-loop steps on the
/// support set first.
pub fn nil_test(
    params: &ParameterSet,
    episode: &Episode,
    layer: &str,
    adapt: Option<&InnerLoopConfig>,
) -> Result<f64> {
    episode.validate()?;
    let adapted;
    let params = match adapt {
        Some(cfg) => {
            adapted = inner_adapt(params, &episode.support_x, &episode.support_y, cfg)?;
            &adapted
        }
        None => params,
    };
    let support = matrix_rows(&representations(params, &episode.support_x, &[layer])?[0].1);
    let query = matrix_rows(&representations(params, &episode.query_x, &[layer])?[0].1);
    let predicted = assign_by_templates(&support, &episode.support_y, &query, episode.n)?;
    let correct =
        predicted.iter().zip(&episode.query_y).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / query.len() as f64)
}

/// Class templates are per-class means of the support rows; each query row
/// gets the template with the highest cosine, ties to the lowest label.
fn assign_by_templates(
    support: &[Vec<f64>],
    support_y: &[usize],
    query: &[Vec<f64>],
    n: usize,
) -> Result<Vec<usize>> {
    let d = support[0].len();
    let mut templates = vec![vec![0.0f64; d]; n];
    let mut counts = vec![0usize; n];
    for (row, &label) in support.iter().zip(support_y) {
        for (t, v) in templates[label].iter_mut().zip(row) {
            *t += v;
        }
        counts[label] += 1;
    }
    for (t, &c) in templates.iter_mut().zip(&counts) {
        for v in t.iter_mut() {
            *v /= c as f64;
        }
    }
    query
        .iter()
        .map(|row| {
            let (mut best, mut best_sim) = (0usize, f64::NEG_INFINITY);
            for (c, t) in templates.iter().enumerate() {
                let sim = cosine(row, t)?;
                if sim > best_sim {
                    best = c;
                    best_sim = sim;
                }
            }
            Ok(best)
        })
        .collect()
}

/// Euclidean norms of the support-loss gradient, per parameter group, with
/// weight and bias norms reported separately. This measures the raw
/// inner-loop signal at `params` — whether an algorithm applies it is a
/// separate question.
pub fn grad_norm_report(params: &ParameterSet, episode: &Episode) -> Result<GradNormReport> {
    episode.validate()?;
    let rec = ComputationRecord::new(params.config.precision);
    let bound = params.bind(&rec)?;
    let x = rec.leaf(&episode.support_x.cast(params.config.precision), false)?;
    let loss = forward(&bound, &x, &[])?.logits.softmax_cross_entropy(&episode.support_y)?;
    let grads = gradient(&loss, &bound.tensors(), false)?;

    let mut rows = Vec::with_capacity(params.groups.len());
    let mut idx = 0;
    for group in &params.groups {
        let (mut wsq, mut bsq) = (0.0f64, 0.0f64);
        for p in &group.params {
            let sq: f64 = grads[idx].value().to_f64_vec().iter().map(|v| v * v).sum();
            match p.kind {
                crate::nn::ParamKind::Weight => wsq += sq,
                crate::nn::ParamKind::Bias => bsq += sq,
            }
            idx += 1;
        }
        rows.push(GradNormRow {
            group: group.name.clone(),
            weight_norm: wsq.sqrt(),
            bias_norm: bsq.sqrt(),
        });
    }
    Ok(GradNormReport { rows })
}

// ── representation dumps ──

fn io_ctx<T>(context: &str, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| AnalysisError::Io { context: context.to_string(), source })
}

/// Write query representations for external embedding tools: one tensor
/// archive per (layer, adaptation state), named `{layer}_{state}.mlt`, plus
/// `labels.mlt` holding the episode-local query labels. Returns the paths
/// written.
pub fn dump_representations(
    params_before: &ParameterSet,
    params_after: &ParameterSet,
    episode: &Episode,
    layers: &[&str],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    episode.validate()?;
    io_ctx(&format!("creating {}", dir.display()), std::fs::create_dir_all(dir))?;
    let mut written = Vec::new();
    for (state, params) in
        [(AdaptState::Before, params_before), (AdaptState::After, params_after)]
    {
        for (layer, reps) in representations(params, &episode.query_x, layers)? {
            let path = dir.join(format!("{layer}_{}.mlt", state.as_str()));
            write_tensor(&path, &reps)
                .map_err(|source| AnalysisError::Archive { context: path.display().to_string(), source })?;
            written.push(path);
        }
    }
    let labels: Vec<f64> = episode.query_y.iter().map(|&y| y as f64).collect();
    let label_array =
        Array::from_f64_values(Precision::F32, vec![episode.query_y.len()], &labels);
    let path = dir.join("labels.mlt");
    write_tensor(&path, &label_array)
        .map_err(|source| AnalysisError::Archive { context: path.display().to_string(), source })?;
    written.push(path);
    Ok(written)
}
