//! Weighted 3D patch extraction, flip/rotation augmentation, and mixed-batch
//! assembly.
//!
//! Cropping follows the foreground-weighted strategy: when the label has
//! foreground, the patch is centered on a uniformly chosen foreground voxel
//! plus a bounded random shift, clamped so the patch stays inside the volume;
//! otherwise the origin is uniform over all valid positions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::{Sample, SampleKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub patch_size: usize,
    pub shift_margin: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            patch_size: 24,
            shift_margin: 3,
        }
    }
}

/// A cubic training patch: per-channel crops plus the label crop and the
/// kind flag copied from the source sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin: (usize, usize, usize),
    pub size: usize,
    pub kind: SampleKind,
    pub baseline: Vec<f64>,
    pub follow_up: Vec<f64>,
    pub difference: Vec<f64>,
    pub label: Vec<u8>,
}

impl Patch {
    pub fn voxel_count(&self) -> usize {
        self.size * self.size * self.size
    }

    pub fn foreground_count(&self) -> usize {
        self.label.iter().filter(|&&v| v == 1).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub patches: Vec<Patch>,
}

impl Batch {
    pub fn count(&self, kind: SampleKind) -> usize {
        self.patches.iter().filter(|p| p.kind == kind).count()
    }
}

fn crop_channel_f64(data: &[f64], dims: (usize, usize, usize), o: (usize, usize, usize), p: usize) -> Vec<f64> {
    let (_, h, w) = dims;
    let mut out = Vec::with_capacity(p * p * p);
    for z in o.0..o.0 + p {
        for y in o.1..o.1 + p {
            let row = (z * h + y) * w + o.2;
            out.extend_from_slice(&data[row..row + p]);
        }
    }
    out
}

fn crop_channel_u8(data: &[u8], dims: (usize, usize, usize), o: (usize, usize, usize), p: usize) -> Vec<u8> {
    let (_, h, w) = dims;
    let mut out = Vec::with_capacity(p * p * p);
    for z in o.0..o.0 + p {
        for y in o.1..o.1 + p {
            let row = (z * h + y) * w + o.2;
            out.extend_from_slice(&data[row..row + p]);
        }
    }
    out
}

/// Foreground-weighted crop. `shift_margin` is the maximum per-axis shift of
/// the patch center away from the chosen foreground voxel.
pub fn crop_weighted(
    sample: &Sample,
    cfg: SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Patch> {
    let (d, h, w) = sample.dims();
    let p = cfg.patch_size;
    if p > d || p > h || p > w {
        return Err(Error::Invalid(format!(
            "patch size {p} exceeds volume dims {:?}",
            sample.dims()
        )));
    }
    let fg: Vec<usize> = sample
        .label
        .data
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| (v == 1).then_some(i))
        .collect();

    let origin = if fg.is_empty() {
        (
            rng.gen_range(0..=d - p),
            rng.gen_range(0..=h - p),
            rng.gen_range(0..=w - p),
        )
    } else {
        let v = fg[rng.gen_range(0..fg.len())];
        let center = ((v / (h * w)) as i64, ((v / w) % h) as i64, (v % w) as i64);
        let m = cfg.shift_margin as i64;
        let shifted = (
            center.0 + rng.gen_range(-m..=m),
            center.1 + rng.gen_range(-m..=m),
            center.2 + rng.gen_range(-m..=m),
        );
        let clamp = |c: i64, dim: usize| -> usize {
            (c - p as i64 / 2).clamp(0, (dim - p) as i64) as usize
        };
        (clamp(shifted.0, d), clamp(shifted.1, h), clamp(shifted.2, w))
    };

    Ok(Patch {
        origin,
        size: p,
        kind: sample.kind,
        baseline: crop_channel_f64(&sample.baseline.data, sample.dims(), origin, p),
        follow_up: crop_channel_f64(&sample.follow_up.data, sample.dims(), origin, p),
        difference: crop_channel_f64(&sample.difference.data, sample.dims(), origin, p),
        label: crop_channel_u8(&sample.label.data, sample.dims(), origin, p),
    })
}

/// Coordinate map for the supported augmentations on a cubic patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    /// Reverse the given axis (0 = z, 1 = y, 2 = x).
    Flip(usize),
    /// Rotate `quarter_turns` times 90 degrees about the given axis.
    Rotate { axis: usize, quarter_turns: usize },
}

fn map_index(t: Transform, p: usize, z: usize, y: usize, x: usize) -> (usize, usize, usize) {
    let n = p - 1;
    match t {
        Transform::Identity => (z, y, x),
        Transform::Flip(0) => (n - z, y, x),
        Transform::Flip(1) => (z, n - y, x),
        Transform::Flip(_) => (z, y, n - x),
        Transform::Rotate { axis, quarter_turns } => {
            let (mut a, mut b) = match axis {
                0 => (y, x),
                1 => (z, x),
                _ => (z, y),
            };
            for _ in 0..quarter_turns % 4 {
                let (na, nb) = (b, n - a);
                a = na;
                b = nb;
            }
            match axis {
                0 => (z, a, b),
                1 => (a, y, b),
                _ => (a, b, x),
            }
        }
    }
}

fn permute_f64(data: &[f64], p: usize, t: Transform) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for z in 0..p {
        for y in 0..p {
            for x in 0..p {
                let (sz, sy, sx) = map_index(t, p, z, y, x);
                out[(z * p + y) * p + x] = data[(sz * p + sy) * p + sx];
            }
        }
    }
    out
}

fn permute_u8(data: &[u8], p: usize, t: Transform) -> Vec<u8> {
    let mut out = vec![0u8; data.len()];
    for z in 0..p {
        for y in 0..p {
            for x in 0..p {
                let (sz, sy, sx) = map_index(t, p, z, y, x);
                out[(z * p + y) * p + x] = data[(sz * p + sy) * p + sx];
            }
        }
    }
    out
}

/// Apply the same transform to every channel and the label.
pub fn apply_transform(patch: &Patch, t: Transform) -> Patch {
    let p = patch.size;
    Patch {
        origin: patch.origin,
        size: p,
        kind: patch.kind,
        baseline: permute_f64(&patch.baseline, p, t),
        follow_up: permute_f64(&patch.follow_up, p, t),
        difference: permute_f64(&patch.difference, p, t),
        label: permute_u8(&patch.label, p, t),
    }
}

/// One of: identity, flip about a random axis, rotation by a random multiple
/// of 90 degrees about a random axis.
pub fn augment(patch: &Patch, rng: &mut ChaCha8Rng) -> Patch {
    let t = match rng.gen_range(0..3) {
        0 => Transform::Identity,
        1 => Transform::Flip(rng.gen_range(0..3)),
        _ => Transform::Rotate {
            axis: rng.gen_range(0..3),
            quarter_turns: rng.gen_range(1..4),
        },
    };
    apply_transform(patch, t)
}

/// Assemble a mixed batch: `n_two` two-time-point patches first, then
/// `n_single` single-time-point patches, each cropped and augmented.
pub fn make_batch(
    single_pool: &[Sample],
    two_pool: &[Sample],
    n_single: usize,
    n_two: usize,
    cfg: SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if n_single > 0 && single_pool.is_empty() {
        return Err(Error::Invalid(
            "batch requests single-time-point patches but the pool is empty".into(),
        ));
    }
    if n_two > 0 && two_pool.is_empty() {
        return Err(Error::Invalid(
            "batch requests two-time-point patches but the pool is empty".into(),
        ));
    }
    let mut patches = Vec::with_capacity(n_single + n_two);
    for _ in 0..n_two {
        let s = &two_pool[rng.gen_range(0..two_pool.len())];
        let patch = crop_weighted(s, cfg, rng)?;
        patches.push(augment(&patch, rng));
    }
    for _ in 0..n_single {
        let s = &single_pool[rng.gen_range(0..single_pool.len())];
        let patch = crop_weighted(s, cfg, rng)?;
        patches.push(augment(&patch, rng));
    }
    Ok(Batch { patches })
}
