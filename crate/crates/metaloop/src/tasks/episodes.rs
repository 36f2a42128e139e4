//! n-way k-shot episode assembly over any class-sample source.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::meta::Episode;
use crate::tensor::{Array, Precision};

use super::{Result, Split, TaskError};

/// Anything episodes can be sampled from: a synthetic domain (fresh samples
/// per draw) or an on-disk dataset (distinct stored instances per draw).
/// `draw` must return `count` pairwise-distinct instances of one class as a
/// `[count, H, W, C]` batch.
pub trait ClassSource {
    fn classes(&self, split: Split) -> &[usize];
    fn image_shape(&self) -> [usize; 3];
    fn draw(&self, class_id: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Array>;
}

/// Sample one n-way k-shot episode with q queries per class.
///
/// Draw order is fixed: n distinct classes, the label bijection, then k+q
/// instances per class in class-sampling order (first k to support, last q
/// to query) — so (source, rng state) fully determines every byte.
pub fn sample_episode<S: ClassSource + ?Sized>(
    source: &S,
    split: Split,
    n: usize,
    k: usize,
    q: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let pool = source.classes(split);
    if n > pool.len() {
        return Err(TaskError::NotEnoughClasses { want: n, have: pool.len() });
    }
    let picked: Vec<usize> =
        rand::seq::index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
    // Uniformly random bijection: sampled class i ← episode label labels[i].
    let mut labels: Vec<usize> = (0..n).collect();
    labels.shuffle(rng);

    let [c, h, w] = source.image_shape();
    let sample_len = h * w * c;
    let mut support = vec![0.0f64; n * k * sample_len];
    let mut query = vec![0.0f64; n * q * sample_len];
    let mut support_y = vec![0usize; n * k];
    let mut query_y = vec![0usize; n * q];
    for (i, &class_id) in picked.iter().enumerate() {
        let label = labels[i];
        let batch = source.draw(class_id, k + q, rng)?;
        let flat = batch.to_f64_vec();
        support[label * k * sample_len..(label + 1) * k * sample_len]
            .copy_from_slice(&flat[..k * sample_len]);
        query[label * q * sample_len..(label + 1) * q * sample_len]
            .copy_from_slice(&flat[k * sample_len..]);
        support_y[label * k..(label + 1) * k].fill(label);
        query_y[label * q..(label + 1) * q].fill(label);
    }

    let episode = Episode {
        support_x: Array::from_f64_values(Precision::F32, vec![n * k, h, w, c], &support),
        support_y,
        query_x: Array::from_f64_values(Precision::F32, vec![n * q, h, w, c], &query),
        query_y,
        n,
        k,
        q,
        label_map: picked.iter().enumerate().map(|(i, &id)| (id, labels[i])).collect(),
    };
    episode.validate()?;
    Ok(episode)
}
