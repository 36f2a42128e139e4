//! Domain realization: grating synthesis, prototype drawing, jittered
//! sampling, and parameterized domain shift.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Array, Precision};
use crate::{derive_seed, seeded_rng};

use super::episodes::ClassSource;
use super::{DomainSpec, Result, Split, SplitDataset, TaskError, GRATINGS_PER_CHANNEL};

/// Prototypes may not look too alike: above this cosine the later class is
/// redrawn from a fresh stream.
const MAX_PROTOTYPE_COSINE: f64 = 0.9;
const MAX_REDRAWS: usize = 64;

/// Seed streams. Class c attempt t draws from stream c·MAX_REDRAWS + t;
/// domain shift derives its target family from a dedicated stream.
const SHIFT_STREAM: u64 = 0x5348_4946_5400;

#[derive(Clone, Debug)]
struct Grating {
    /// Unit direction scaled by 2π·frequency, in normalized image coords.
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

/// One class of a domain: its grating stack and the materialized pattern.
#[derive(Clone, Debug)]
pub struct ClassPrototype {
    pub class_id: usize,
    /// `[H, W, C]`, values in [0, 1].
    pub prototype: Array,
    /// Per channel, `GRATINGS_PER_CHANNEL` gratings (pre-mixing).
    gratings: Vec<Vec<Grating>>,
    contrast: f64,
    /// Min/max of the raw mixed field, frozen at prototype creation so
    /// jittered samples share the prototype's normalization.
    norm: (f64, f64),
}

pub struct Domain {
    spec: DomainSpec,
    splits: SplitDataset,
    classes: Vec<ClassPrototype>,
}

// ── synthesis ──

fn draw_gratings(rng: &mut ChaCha8Rng, spec: &DomainSpec) -> Vec<Vec<Grating>> {
    let c = spec.image_shape[0];
    (0..c)
        .map(|_| {
            (0..GRATINGS_PER_CHANNEL)
                .map(|_| {
                    let freq = rng.gen_range(spec.freq_lo..spec.freq_hi);
                    let theta = rng.gen_range(0.0..std::f64::consts::PI);
                    let k = 2.0 * std::f64::consts::PI * freq;
                    Grating {
                        kx: k * theta.cos(),
                        ky: k * theta.sin(),
                        phase: rng.gen_range(0.0..2.0 * std::f64::consts::PI),
                        amp: rng.gen_range(0.5..1.0),
                    }
                })
                .collect()
        })
        .collect()
}

/// Raw mixed field before normalization, `[H][W][C]` flattened row-major,
/// with a common phase rotation applied to every grating.
fn raw_field(spec: &DomainSpec, gratings: &[Vec<Grating>], phase_shift: f64) -> Vec<f64> {
    let [c, h, w] = spec.image_shape;
    let mut per_channel = vec![vec![0.0f64; h * w]; c];
    for (ch, stack) in gratings.iter().enumerate() {
        let field = &mut per_channel[ch];
        for g in stack {
            for y in 0..h {
                let vy = g.ky * (y as f64 / h as f64) + g.phase + phase_shift;
                for x in 0..w {
                    field[y * w + x] += g.amp * (g.kx * (x as f64 / w as f64) + vy).sin();
                }
            }
        }
    }
    let mut mixed = vec![0.0f64; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for co in 0..c {
                let mut v = 0.0;
                for ci in 0..c {
                    v += spec.channel_mix[co * c + ci] * per_channel[ci][y * w + x];
                }
                mixed[(y * w + x) * c + co] = v;
            }
        }
    }
    mixed
}

/// Map a raw field into [0, 1] using frozen normalization constants, then
/// squeeze toward 0.5 by the class contrast.
fn normalized(field: &[f64], norm: (f64, f64), contrast: f64) -> Vec<f64> {
    let (lo, hi) = norm;
    let span = (hi - lo).max(1e-12);
    field
        .iter()
        .map(|v| {
            let unit = (v - lo) / span;
            (0.5 + (unit - 0.5) * contrast).clamp(0.0, 1.0)
        })
        .collect()
}

fn cosine_flat(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn materialize_class(spec: &DomainSpec, class_id: usize, attempt: usize) -> ClassPrototype {
    let stream = (class_id * MAX_REDRAWS + attempt) as u64;
    let mut rng = seeded_rng(derive_seed(spec.seed, stream));
    let gratings = draw_gratings(&mut rng, spec);
    let contrast = rng.gen_range(spec.contrast_lo..=spec.contrast_hi);
    let raw = raw_field(spec, &gratings, 0.0);
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let values = normalized(&raw, (lo, hi), contrast);
    let [c, h, w] = spec.image_shape;
    ClassPrototype {
        class_id,
        prototype: Array::from_f64_values(Precision::F32, vec![h, w, c], &values),
        gratings,
        contrast,
        norm: (lo, hi),
    }
}

// ── public constructors ──

/// Materialize every class of a domain. Deterministic in the spec; classes
/// too similar to an earlier one are redrawn from the next attempt stream
/// (also deterministic), erroring after [`MAX_REDRAWS`].
pub fn make_domain(spec: &DomainSpec) -> Result<Domain> {
    spec.validate()?;
    let mut classes: Vec<ClassPrototype> = Vec::with_capacity(spec.num_classes());
    let mut flats: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes());
    for class_id in 0..spec.num_classes() {
        let mut accepted = None;
        for attempt in 0..MAX_REDRAWS {
            let candidate = materialize_class(spec, class_id, attempt);
            let flat = candidate.prototype.to_f64_vec();
            if flats.iter().all(|prev| cosine_flat(prev, &flat) < MAX_PROTOTYPE_COSINE) {
                accepted = Some((candidate, flat));
                break;
            }
        }
        match accepted {
            Some((candidate, flat)) => {
                classes.push(candidate);
                flats.push(flat);
            }
            None => {
                return Err(TaskError::PrototypeCollision {
                    class: class_id,
                    attempts: MAX_REDRAWS,
                })
            }
        }
    }
    Ok(Domain { spec: spec.clone(), splits: spec.split_dataset(), classes })
}

/// Interpolate a spec toward an independently drawn pattern family.
///
/// Severity 0 returns the spec unchanged; severity 1 returns the fully
/// independent family under a fresh seed (fresh classes); in between, the
/// band, contrast range, and channel mixing are linearly interpolated while
/// the seed — and with it each class's underlying grating draws — is kept,
/// so intermediate domains stay correlated with the source. Severity is
/// clamped to [0, 1].
pub fn shift_domain(spec: &DomainSpec, severity: f64) -> DomainSpec {
    let severity = severity.clamp(0.0, 1.0);
    if severity == 0.0 {
        return spec.clone();
    }
    let mut rng = seeded_rng(derive_seed(spec.seed, SHIFT_STREAM));
    let c = spec.image_shape[0];
    // The target family must itself materialize: prototypes share a mid-gray
    // mean that floors their raw cosine, so anything that shrinks per-class
    // AC amplitude pushes every pair above the redraw bound — low contrast,
    // a narrow low-frequency band on small images, and most of all strong
    // channel mixing: a dense mix row sums many sinusoids into one channel,
    // the field turns near-Gaussian, and min-max normalization then leaves
    // tiny per-pixel amplitude. Hence contrast stays high, the band keeps
    // width and distance from the smooth low end, and the target mix is a
    // diagonal-dominant unit-row matrix (a mild cross-channel bleed), sign-
    // aligned with the source row so lerped rows never pass near zero at
    // intermediate severities either.
    const MIX_BLEED: f64 = 0.2;
    let target_freq_lo = rng.gen_range(1.5..3.5);
    let target_freq_hi = target_freq_lo + rng.gen_range(2.0..4.0);
    let target_contrast_lo = rng.gen_range(0.6..0.9);
    let target_contrast_hi = rng.gen_range(0.9..1.0);
    let mut target_mix = Vec::with_capacity(c * c);
    for r in 0..c {
        let mut row: Vec<f64> = (0..c).map(|_| MIX_BLEED * rng.gen_range(-1.0..1.0)).collect();
        row[r] += 1.0;
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in row.iter_mut() {
            *v /= norm;
        }
        let source_row = &spec.channel_mix[r * c..(r + 1) * c];
        if row.iter().zip(source_row).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
            for v in row.iter_mut() {
                *v = -*v;
            }
        }
        target_mix.extend(row);
    }

    let lerp = |a: f64, b: f64| a + severity * (b - a);
    let mut out = spec.clone();
    out.freq_lo = lerp(spec.freq_lo, target_freq_lo);
    out.freq_hi = lerp(spec.freq_hi, target_freq_hi);
    out.contrast_lo = lerp(spec.contrast_lo, target_contrast_lo);
    out.contrast_hi = lerp(spec.contrast_hi, target_contrast_hi);
    out.channel_mix =
        spec.channel_mix.iter().zip(&target_mix).map(|(&a, &b)| lerp(a, b)).collect();
    if severity >= 1.0 {
        out.seed = derive_seed(spec.seed, SHIFT_STREAM + 1);
    }
    out
}

// ── sampling ──

impl Domain {
    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    pub fn splits(&self) -> &SplitDataset {
        &self.splits
    }

    pub fn prototype(&self, class_id: usize) -> Option<&ClassPrototype> {
        self.classes.get(class_id)
    }

    /// One jittered sample of a class: common grating phase rotation,
    /// wrap-around integer translation, Gaussian noise, clipped to [0, 1].
    /// Draw order per sample is fixed (phase, dy, dx, then noise row-major),
    /// so a given rng state yields the same bytes forever.
    fn sample_one(&self, class: &ClassPrototype, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let spec = &self.spec;
        let [c, h, w] = spec.image_shape;
        let phase = if spec.jitter_phase > 0.0 {
            rng.gen_range(-spec.jitter_phase..spec.jitter_phase)
        } else {
            0.0
        };
        let (dy, dx) = if spec.jitter_px > 0 {
            let j = spec.jitter_px as i64;
            (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
        } else {
            (0, 0)
        };

        let flat = if phase == 0.0 {
            class.prototype.to_f64_vec()
        } else {
            normalized(&raw_field(spec, &class.gratings, phase), class.norm, class.contrast)
        };

        let mut out = vec![0.0f64; h * w * c];
        for y in 0..h {
            let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
            for x in 0..w {
                let sx = (x as i64 - dx).rem_euclid(w as i64) as usize;
                let (dst, src) = ((y * w + x) * c, (sy * w + sx) * c);
                out[dst..dst + c].copy_from_slice(&flat[src..src + c]);
            }
        }
        if spec.noise_std > 0.0 {
            let normal = Normal::new(0.0, spec.noise_std).expect("validated std");
            for v in out.iter_mut() {
                *v += normal.sample(rng);
            }
        }
        for v in out.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }
}

impl ClassSource for Domain {
    fn classes(&self, split: Split) -> &[usize] {
        self.splits.classes(split)
    }

    fn image_shape(&self) -> [usize; 3] {
        self.spec.image_shape
    }

    fn draw(&self, class_id: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Array> {
        let class = self
            .classes
            .get(class_id)
            .ok_or_else(|| TaskError::InvalidSpec(format!("class {class_id} out of range")))?;
        let [c, h, w] = self.spec.image_shape;
        let mut data = Vec::with_capacity(count * h * w * c);
        for _ in 0..count {
            data.extend(self.sample_one(class, rng));
        }
        Ok(Array::from_f64_values(Precision::F32, vec![count, h, w, c], &data))
    }
}
