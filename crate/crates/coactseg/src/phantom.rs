//! Deterministic synthetic phantoms: ellipsoidal brain masks with smooth
//! background texture, Gaussian noise, and hyperintense ellipsoidal lesions.
//!
//! `gen_single` produces single-time-point samples with all-lesion labels;
//! `gen_two` produces two-time-point samples whose exposed label covers only
//! the lesions added at follow-up, with the per-time-point all-lesion masks
//! kept aside as hidden ground truth for evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{
    make_sample_single, make_sample_two, sample_paths, save_label, save_sample, Dims, LabelVolume,
    Sample, SampleKind, Spacing, Volume3D,
};

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub spacing_mm: Spacing,
    pub background_level: f64,
    pub noise_std: f64,
    pub lesion_count_range: (usize, usize),
    pub lesion_radius_range_vox: (f64, f64),
    pub new_lesion_count_range: (usize, usize),
    pub lesion_contrast: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: (24, 24, 24),
            spacing_mm: (1.0, 1.0, 1.0),
            background_level: 100.0,
            noise_std: 1.0,
            lesion_count_range: (2, 4),
            lesion_radius_range_vox: (1.0, 3.0),
            new_lesion_count_range: (1, 2),
            lesion_contrast: 30.0,
            seed: 1337,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.dims;
        if d < 8 || h < 8 || w < 8 {
            return Err(Error::Config(format!("phantom dims too small: {:?}", self.dims)));
        }
        let ranges = [
            ("lesion_count_range", self.lesion_count_range.0 as f64, self.lesion_count_range.1 as f64),
            ("new_lesion_count_range", self.new_lesion_count_range.0 as f64, self.new_lesion_count_range.1 as f64),
            ("lesion_radius_range_vox", self.lesion_radius_range_vox.0, self.lesion_radius_range_vox.1),
        ];
        for (name, lo, hi) in ranges {
            if lo > hi {
                return Err(Error::Config(format!("{name} is empty: ({lo}, {hi})")));
            }
        }
        if self.lesion_radius_range_vox.0 < 1.0 {
            return Err(Error::Config("lesion radii must be >= 1 voxel".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        if self.lesion_contrast <= self.noise_std {
            return Err(Error::Config(format!(
                "lesion_contrast {} must exceed noise_std {}",
                self.lesion_contrast, self.noise_std
            )));
        }
        Ok(())
    }
}

/// Hidden per-time-point all-lesion ground truth for a two-time-point sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenAllLesion {
    pub baseline: LabelVolume,
    pub follow_up: LabelVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub sample: Sample,
    pub hidden: Option<HiddenAllLesion>,
}

/// SplitMix64, used to derive independent per-sample seeds from a root seed.
pub fn child_seed(root: u64, index: u64) -> u64 {
    let mut z = root ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

struct Scene {
    mask: Vec<u8>,
    mask_voxels: Vec<usize>,
    texture: Vec<f64>,
}

fn ellipsoid_mask(dims: Dims) -> (Vec<u8>, Vec<usize>) {
    let (d, h, w) = dims;
    let (cz, cy, cx) = ((d as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (az, ay, ax) = (0.46 * d as f64, 0.46 * h as f64, 0.46 * w as f64);
    let mut mask = vec![0u8; d * h * w];
    let mut voxels = Vec::new();
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let dz = (z as f64 - cz) / az;
                let dy = (y as f64 - cy) / ay;
                let dx = (x as f64 - cx) / ax;
                if dz * dz + dy * dy + dx * dx <= 1.0 {
                    mask[i] = 1;
                    voxels.push(i);
                }
                i += 1;
            }
        }
    }
    (mask, voxels)
}

fn make_scene(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Scene {
    let (d, h, w) = cfg.dims;
    let (mask, mask_voxels) = ellipsoid_mask(cfg.dims);
    // smooth background: base level plus three low-frequency cosine waves
    let amp = 0.15 * cfg.lesion_contrast;
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            (
                [
                    rng.gen_range(0.5..2.0) / d as f64,
                    rng.gen_range(0.5..2.0) / h as f64,
                    rng.gen_range(0.5..2.0) / w as f64,
                ],
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut texture = vec![0.0; d * h * w];
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask[i] == 1 {
                    let mut v = cfg.background_level;
                    for (k, phase) in &waves {
                        let arg = std::f64::consts::TAU
                            * (k[0] * z as f64 + k[1] * y as f64 + k[2] * x as f64)
                            + phase;
                        v += amp / 3.0 * arg.cos();
                    }
                    texture[i] = v;
                }
                i += 1;
            }
        }
    }
    Scene { mask, mask_voxels, texture }
}

/// Place `count` ellipsoidal lesions fully inside the brain mask, none of
/// them 26-adjacent to any voxel already in `occupied`. Marks placed voxels
/// in `occupied` and returns them.
fn place_lesions(
    cfg: &PhantomConfig,
    scene: &Scene,
    occupied: &mut [u8],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let (d, h, w) = cfg.dims;
    let (rmin, rmax) = cfg.lesion_radius_range_vox;
    let mut lesions = Vec::with_capacity(count);
    for li in 0..count {
        let mut placed = false;
        for _ in 0..500 {
            let center = scene.mask_voxels[rng.gen_range(0..scene.mask_voxels.len())];
            let cz = center / (h * w);
            let cy = (center / w) % h;
            let cx = center % w;
            let rz = rng.gen_range(rmin..=rmax);
            let ry = rng.gen_range(rmin..=rmax);
            let rx = rng.gen_range(rmin..=rmax);
            let support = ellipsoid_support(cfg.dims, (cz, cy, cx), (rz, ry, rx));
            if support.is_empty() || support.iter().any(|&i| scene.mask[i] == 0) {
                continue;
            }
            // keep lesions separated so connected components stay exact
            let mut clear = true;
            'outer: for &i in &support {
                let z = i / (h * w);
                let y = (i / w) % h;
                let x = i % w;
                for nz in z.saturating_sub(1)..=(z + 1).min(d - 1) {
                    for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                        for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                            if occupied[(nz * h + ny) * w + nx] == 1 {
                                clear = false;
                                break 'outer;
                            }
                        }
                    }
                }
            }
            if !clear {
                continue;
            }
            for &i in &support {
                occupied[i] = 1;
            }
            lesions.push(support);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Invalid(format!(
                "failed to place lesion {} of {count} after bounded retries",
                li + 1
            )));
        }
    }
    Ok(lesions)
}

fn ellipsoid_support(dims: Dims, center: (usize, usize, usize), radii: (f64, f64, f64)) -> Vec<usize> {
    let (d, h, w) = dims;
    let (cz, cy, cx) = (center.0 as f64, center.1 as f64, center.2 as f64);
    let (rz, ry, rx) = radii;
    let z0 = (cz - rz).floor().max(0.0) as usize;
    let z1 = ((cz + rz).ceil() as usize).min(d - 1);
    let y0 = (cy - ry).floor().max(0.0) as usize;
    let y1 = ((cy + ry).ceil() as usize).min(h - 1);
    let x0 = (cx - rx).floor().max(0.0) as usize;
    let x1 = ((cx + rx).ceil() as usize).min(w - 1);
    let mut out = Vec::new();
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dz = (z as f64 - cz) / rz;
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                if dz * dz + dy * dy + dx * dx <= 1.0 {
                    out.push((z * h + y) * w + x);
                }
            }
        }
    }
    out
}

fn add_noise(data: &mut [f64], mask: &[u8], std: f64, rng: &mut ChaCha8Rng) {
    if std == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("valid std");
    for (v, &m) in data.iter_mut().zip(mask) {
        if m == 1 {
            *v += normal.sample(rng);
        }
    }
}

fn label_from(dims: Dims, spacing: Spacing, support: &[Vec<usize>]) -> LabelVolume {
    let mut data = vec![0u8; dims.0 * dims.1 * dims.2];
    for s in support {
        for &i in s {
            data[i] = 1;
        }
    }
    LabelVolume { dims, spacing_mm: spacing, data }
}

/// Single-time-point phantom with an all-lesion label.
pub fn gen_single(cfg: &PhantomConfig) -> Result<GeneratedSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scene = make_scene(cfg, &mut rng);
    let n = rng.gen_range(cfg.lesion_count_range.0..=cfg.lesion_count_range.1);
    let mut occupied = vec![0u8; scene.mask.len()];
    let lesions = place_lesions(cfg, &scene, &mut occupied, n, &mut rng)?;

    let mut raw = scene.texture.clone();
    for s in &lesions {
        for &i in s {
            raw[i] += cfg.lesion_contrast;
        }
    }
    add_noise(&mut raw, &scene.mask, cfg.noise_std, &mut rng);

    let x = Volume3D::new(cfg.dims, cfg.spacing_mm, raw)?;
    let label = label_from(cfg.dims, cfg.spacing_mm, &lesions);
    let mask = LabelVolume::new(cfg.dims, cfg.spacing_mm, scene.mask.clone())?;
    let sample = make_sample_single(&x, &label, &mask)?;
    Ok(GeneratedSample { sample, hidden: None })
}

/// Two-time-point phantom: the follow-up shares the baseline anatomy but adds
/// new lesions and independently re-sampled noise. The exposed label covers
/// only the new lesions.
pub fn gen_two(cfg: &PhantomConfig) -> Result<GeneratedSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scene = make_scene(cfg, &mut rng);
    let n_base = rng.gen_range(cfg.lesion_count_range.0..=cfg.lesion_count_range.1);
    let n_new = rng.gen_range(cfg.new_lesion_count_range.0..=cfg.new_lesion_count_range.1);
    let mut occupied = vec![0u8; scene.mask.len()];
    let base_lesions = place_lesions(cfg, &scene, &mut occupied, n_base, &mut rng)?;
    let new_lesions = place_lesions(cfg, &scene, &mut occupied, n_new, &mut rng)?;

    let mut raw_b = scene.texture.clone();
    for s in &base_lesions {
        for &i in s {
            raw_b[i] += cfg.lesion_contrast;
        }
    }
    let mut raw_fu = raw_b.clone();
    for s in &new_lesions {
        for &i in s {
            raw_fu[i] += cfg.lesion_contrast;
        }
    }
    add_noise(&mut raw_b, &scene.mask, cfg.noise_std, &mut rng);
    add_noise(&mut raw_fu, &scene.mask, cfg.noise_std, &mut rng);

    let xb = Volume3D::new(cfg.dims, cfg.spacing_mm, raw_b)?;
    let xfu = Volume3D::new(cfg.dims, cfg.spacing_mm, raw_fu)?;
    let y_new = label_from(cfg.dims, cfg.spacing_mm, &new_lesions);
    let mask = LabelVolume::new(cfg.dims, cfg.spacing_mm, scene.mask.clone())?;
    let sample = make_sample_two(&xb, &xfu, &y_new, &mask)?;

    let al_base = label_from(cfg.dims, cfg.spacing_mm, &base_lesions);
    let mut all = base_lesions;
    all.extend(new_lesions);
    let al_fu = label_from(cfg.dims, cfg.spacing_mm, &all);
    Ok(GeneratedSample {
        sample,
        hidden: Some(HiddenAllLesion { baseline: al_base, follow_up: al_fu }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub kind: SampleKind,
    pub split: Split,
    pub seed: u64,
    pub stem: String,
    pub has_hidden: bool,
}

/// Plain-text dataset index: one record per line, fields `kind split seed
/// stem hidden`, paths derived from the stem next to the manifest file.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("# kind split seed stem hidden\n");
        for r in &self.records {
            writeln!(
                out,
                "{} {} {} {} {}",
                r.kind.as_str(),
                r.split.as_str(),
                r.seed,
                r.stem,
                u8::from(r.has_hidden)
            )
            .unwrap();
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut records = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(Error::Format(format!(
                    "{}: line {}: expected 5 fields, got {}",
                    path.display(),
                    ln + 1,
                    fields.len()
                )));
            }
            records.push(ManifestRecord {
                kind: SampleKind::parse(fields[0])?,
                split: Split::parse(fields[1])?,
                seed: fields[2]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad seed `{}`", fields[2])))?,
                stem: fields[3].to_string(),
                has_hidden: fields[4] == "1",
            });
        }
        Ok(Manifest { dir, records })
    }

    pub fn load_sample(&self, r: &ManifestRecord) -> Result<Sample> {
        crate::volume::load_sample(&self.dir, &r.stem, r.kind)
    }

    pub fn load_hidden(&self, r: &ManifestRecord) -> Result<HiddenAllLesion> {
        Ok(HiddenAllLesion {
            baseline: crate::volume::load_label(&hidden_path(&self.dir, &r.stem, 1))?,
            follow_up: crate::volume::load_label(&hidden_path(&self.dir, &r.stem, 2))?,
        })
    }

    pub fn samples(&self, split: Split, kind: SampleKind) -> Vec<&ManifestRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.kind == kind)
            .collect()
    }
}

fn hidden_path(dir: &Path, stem: &str, t: u8) -> PathBuf {
    dir.join(format!("{stem}_hidden_al_t{t}.vol"))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DatasetCounts {
    pub train_single: usize,
    pub train_two: usize,
    pub val_single: usize,
    pub val_two: usize,
}

/// Generate a dataset on disk. Each sample gets its own seed derived from
/// the config seed and its index, so regeneration is reproducible and
/// samples can be generated in parallel.
pub fn gen_dataset(cfg: &PhantomConfig, counts: DatasetCounts, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut plan: Vec<(SampleKind, Split)> = Vec::new();
    for _ in 0..counts.train_single {
        plan.push((SampleKind::SingleTimePoint, Split::Train));
    }
    for _ in 0..counts.train_two {
        plan.push((SampleKind::TwoTimePoint, Split::Train));
    }
    for _ in 0..counts.val_single {
        plan.push((SampleKind::SingleTimePoint, Split::Val));
    }
    for _ in 0..counts.val_two {
        plan.push((SampleKind::TwoTimePoint, Split::Val));
    }

    let generated: Result<Vec<(ManifestRecord, GeneratedSample)>> = plan
        .par_iter()
        .enumerate()
        .map(|(idx, &(kind, split))| {
            let seed = child_seed(cfg.seed, idx as u64);
            let sub = PhantomConfig { seed, ..cfg.clone() };
            let gen = match kind {
                SampleKind::SingleTimePoint => gen_single(&sub)?,
                SampleKind::TwoTimePoint => gen_two(&sub)?,
            };
            let record = ManifestRecord {
                kind,
                split,
                seed,
                stem: format!("sample_{idx:04}"),
                has_hidden: gen.hidden.is_some(),
            };
            Ok((record, gen))
        })
        .collect();

    let mut records = Vec::new();
    for (record, gen) in generated? {
        save_sample(&gen.sample, out_dir, &record.stem)?;
        if let Some(h) = &gen.hidden {
            save_label(&h.baseline, &hidden_path(out_dir, &record.stem, 1))?;
            save_label(&h.follow_up, &hidden_path(out_dir, &record.stem, 2))?;
        }
        records.push(record);
    }
    let manifest = Manifest { dir: out_dir.to_path_buf(), records };
    manifest.save(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

/// All sample file paths for a record, used by determinism checks.
pub fn record_files(dir: &Path, r: &ManifestRecord) -> Vec<PathBuf> {
    let mut files = sample_paths(dir, &r.stem).to_vec();
    if r.has_hidden {
        files.push(hidden_path(dir, &r.stem, 1));
        files.push(hidden_path(dir, &r.stem, 2));
    }
    files
}
