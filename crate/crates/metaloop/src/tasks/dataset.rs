//! On-disk dataset format and loader.
//!
//! Layout: `root/manifest` is plain text, one line per class —
//! `split<TAB>class_id<TAB>relative_path` — each path a tensor archive of
//! shape `(num_samples, C, H, W)`. In memory samples are `[H, W, C]`; the
//! transpose happens only at this boundary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use crate::tensor::{read_tensor, write_tensor, Array, Precision};

use super::episodes::ClassSource;
use super::{io_ctx, Domain, Result, Split, SplitDataset, TaskError};

const MANIFEST: &str = "manifest";

fn hwc_to_chw(flat: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; flat.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(ch * h + y) * w + x] = flat[(y * w + x) * c + ch];
            }
        }
    }
    out
}

fn chw_to_hwc(flat: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; flat.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x) * c + ch] = flat[(ch * h + y) * w + x];
            }
        }
    }
    out
}

/// Materialize a domain to disk: `per_class` samples for every class of every
/// split, one archive per class, plus the manifest. Samples are drawn from
/// `rng` in class-id order, so the export is deterministic.
pub fn export_dataset(
    domain: &Domain,
    per_class: usize,
    root: &Path,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if per_class == 0 {
        return Err(TaskError::InvalidSpec("export needs at least one sample per class".into()));
    }
    std::fs::create_dir_all(root).map_err(io_ctx(format!("creating {}", root.display())))?;
    let [c, h, w] = domain.spec().image_shape;
    let mut manifest = String::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for &class_id in domain.classes(split) {
            let batch = domain.draw(class_id, per_class, rng)?;
            let chw = hwc_to_chw_batch(&batch.to_f64_vec(), per_class, h, w, c);
            let archive =
                Array::from_f64_values(Precision::F32, vec![per_class, c, h, w], &chw);
            let rel = format!("class_{class_id:04}.mlt");
            write_tensor(&root.join(&rel), &archive)?;
            manifest.push_str(&format!("{}\t{class_id}\t{rel}\n", split.tag()));
        }
    }
    std::fs::write(root.join(MANIFEST), manifest)
        .map_err(io_ctx(format!("writing {}", root.join(MANIFEST).display())))?;
    Ok(())
}

fn hwc_to_chw_batch(flat: &[f64], b: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let stride = h * w * c;
    let mut out = Vec::with_capacity(flat.len());
    for i in 0..b {
        out.extend(hwc_to_chw(&flat[i * stride..(i + 1) * stride], h, w, c));
    }
    out
}

#[derive(Debug)]
struct ClassEntry {
    path: PathBuf,
    num_samples: usize,
}

/// A dataset read back from disk. Class archives are re-read on demand;
/// only the manifest and per-class shapes are held in memory.
#[derive(Debug)]
pub struct LoadedDataset {
    splits: SplitDataset,
    entries: BTreeMap<usize, ClassEntry>,
    /// (C, H, W), uniform across classes.
    image_shape: [usize; 3],
}

/// Parse and validate `root/manifest`, checking every archive's header:
/// shapes must be uniform `(num_samples ≥ 1, C, H, W)`.
pub fn load_dataset(root: &Path) -> Result<LoadedDataset> {
    let manifest_path = root.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(io_ctx(format!("reading {}", manifest_path.display())))?;

    let mut splits = SplitDataset::default();
    let mut entries = BTreeMap::new();
    let mut image_shape: Option<[usize; 3]> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (tag, id, rel) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(tag), Some(id), Some(rel), None) => (tag, id, rel),
            _ => {
                return Err(TaskError::Manifest(format!(
                    "line {}: expected split<TAB>class_id<TAB>path, got {line:?}",
                    lineno + 1
                )))
            }
        };
        let split = Split::from_tag(tag).ok_or_else(|| {
            TaskError::Manifest(format!("line {}: unknown split {tag:?}", lineno + 1))
        })?;
        let class_id: usize = id.parse().map_err(|_| {
            TaskError::Manifest(format!("line {}: bad class id {id:?}", lineno + 1))
        })?;

        let path = root.join(rel);
        let tensor = read_tensor(&path)?;
        let shape = tensor.shape().to_vec();
        if shape.len() != 4 {
            return Err(TaskError::Manifest(format!(
                "{}: expected (num_samples, C, H, W), got {shape:?}",
                path.display()
            )));
        }
        let (num_samples, chw) = (shape[0], [shape[1], shape[2], shape[3]]);
        if num_samples == 0 {
            return Err(TaskError::Manifest(format!(
                "{}: class {class_id} has zero samples",
                path.display()
            )));
        }
        match image_shape {
            None => image_shape = Some(chw),
            Some(expect) if expect != chw => {
                return Err(TaskError::Manifest(format!(
                    "{}: image shape {chw:?} differs from {expect:?}",
                    path.display()
                )))
            }
            Some(_) => {}
        }
        if entries.insert(class_id, ClassEntry { path, num_samples }).is_some() {
            return Err(TaskError::Manifest(format!("class {class_id} listed twice")));
        }
        match split {
            Split::Train => splits.train.push(class_id),
            Split::Val => splits.val.push(class_id),
            Split::Test => splits.test.push(class_id),
        }
    }
    if entries.is_empty() {
        return Err(TaskError::Manifest(format!("{} lists no classes", manifest_path.display())));
    }
    splits.validate()?;
    Ok(LoadedDataset { splits, entries, image_shape: image_shape.unwrap() })
}

impl LoadedDataset {
    pub fn splits(&self) -> &SplitDataset {
        &self.splits
    }

    /// All stored samples of one class, `[num_samples, H, W, C]`, in file
    /// order.
    pub fn class_samples(&self, class_id: usize) -> Result<Array> {
        let entry = self
            .entries
            .get(&class_id)
            .ok_or_else(|| TaskError::Manifest(format!("class {class_id} not in manifest")))?;
        let tensor = read_tensor(&entry.path)?;
        let [c, h, w] = self.image_shape;
        let hwc = chw_to_hwc_batch(&tensor.to_f64_vec(), entry.num_samples, h, w, c);
        Ok(Array::from_f64_values(Precision::F32, vec![entry.num_samples, h, w, c], &hwc))
    }
}

fn chw_to_hwc_batch(flat: &[f64], b: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let stride = h * w * c;
    let mut out = Vec::with_capacity(flat.len());
    for i in 0..b {
        out.extend(chw_to_hwc(&flat[i * stride..(i + 1) * stride], h, w, c));
    }
    out
}

impl ClassSource for LoadedDataset {
    fn classes(&self, split: Split) -> &[usize] {
        self.splits.classes(split)
    }

    fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    /// `count` distinct stored instances, chosen without replacement — this
    /// is what makes support and query sets disjoint for dataset episodes.
    fn draw(&self, class_id: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Array> {
        let entry = self
            .entries
            .get(&class_id)
            .ok_or_else(|| TaskError::Manifest(format!("class {class_id} not in manifest")))?;
        if count > entry.num_samples {
            return Err(TaskError::NotEnoughSamples {
                class: class_id,
                want: count,
                have: entry.num_samples,
            });
        }
        let all = self.class_samples(class_id)?;
        let flat = all.to_f64_vec();
        let [c, h, w] = self.image_shape;
        let stride = h * w * c;
        let picked = rand::seq::index::sample(rng, entry.num_samples, count);
        let mut data = Vec::with_capacity(count * stride);
        for i in picked {
            data.extend_from_slice(&flat[i * stride..(i + 1) * stride]);
        }
        Ok(Array::from_f64_values(Precision::F32, vec![count, h, w, c], &data))
    }
}
