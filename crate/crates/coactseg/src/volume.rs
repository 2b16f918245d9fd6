//! Physical-space 3D volumes, intensity normalization, difference maps, and
//! the COACTVOL on-disk format.
//!
//! COACTVOL layout (little-endian): 8-byte magic `COACTVOL`, u32 version (1),
//! u8 dtype (0 = f64 intensities, 1 = u8 labels), 3x u64 dims (D,H,W),
//! 3x f64 spacing in mm, then the raw row-major data.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"COACTVOL";
const VERSION: u32 = 1;
/// Refuse absurd headers before allocating.
const MAX_VOXELS: u64 = 1 << 32;

pub type Dims = (usize, usize, usize);
pub type Spacing = (f64, f64, f64);

/// Dense scalar 3D grid with physical voxel spacing, row-major (D,H,W).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub dims: Dims,
    pub spacing_mm: Spacing,
    pub data: Vec<f64>,
}

impl Volume3D {
    pub fn new(dims: Dims, spacing_mm: Spacing, data: Vec<f64>) -> Result<Self> {
        check_dims(dims, spacing_mm, data.len())?;
        Ok(Volume3D { dims, spacing_mm, data })
    }

    pub fn zeros(dims: Dims, spacing_mm: Spacing) -> Self {
        Volume3D {
            dims,
            spacing_mm,
            data: vec![0.0; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }
}

/// Binary {0,1} volume sharing the Volume3D geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: Dims,
    pub spacing_mm: Spacing,
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, spacing_mm: Spacing, data: Vec<u8>) -> Result<Self> {
        check_dims(dims, spacing_mm, data.len())?;
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Invalid("label volume must be binary".into()));
        }
        Ok(LabelVolume { dims, spacing_mm, data })
    }

    pub fn zeros(dims: Dims, spacing_mm: Spacing) -> Self {
        LabelVolume {
            dims,
            spacing_mm,
            data: vec![0; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

fn check_dims(dims: Dims, spacing: Spacing, len: usize) -> Result<()> {
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(Error::Invalid(format!("dims must be >= 1, got {dims:?}")));
    }
    if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
        return Err(Error::Invalid(format!("spacing must be > 0, got {spacing:?}")));
    }
    let expect = dims
        .0
        .checked_mul(dims.1)
        .and_then(|v| v.checked_mul(dims.2))
        .ok_or_else(|| Error::Invalid("dim product overflow".into()))?;
    if expect != len {
        return Err(Error::Shape(format!(
            "dims {dims:?} imply {expect} voxels, got {len}"
        )));
    }
    Ok(())
}

fn same_geometry(a: Dims, sa: Spacing, b: Dims, sb: Spacing, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: dims {a:?} vs {b:?}")));
    }
    if sa != sb {
        return Err(Error::Shape(format!("{what}: spacing {sa:?} vs {sb:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    SingleTimePoint,
    TwoTimePoint,
}

impl SampleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SampleKind::SingleTimePoint => "single",
            SampleKind::TwoTimePoint => "two",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(SampleKind::SingleTimePoint),
            "two" => Ok(SampleKind::TwoTimePoint),
            other => Err(Error::Format(format!("unknown sample kind `{other}`"))),
        }
    }
}

/// The training quadruple (baseline, follow-up, difference, label) plus the
/// brain mask. For single-time-point samples baseline and follow-up are the
/// same scan and the difference map is identically zero; the label is then an
/// all-lesion mask, otherwise a new-lesion mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub kind: SampleKind,
    pub baseline: Volume3D,
    pub follow_up: Volume3D,
    pub difference: Volume3D,
    pub label: LabelVolume,
    pub brain_mask: LabelVolume,
}

impl Sample {
    pub fn dims(&self) -> Dims {
        self.baseline.dims
    }

    /// Check the structural invariants; used by property tests and after load.
    pub fn validate(&self) -> Result<()> {
        let (d, s) = (self.baseline.dims, self.baseline.spacing_mm);
        same_geometry(d, s, self.follow_up.dims, self.follow_up.spacing_mm, "sample follow_up")?;
        same_geometry(d, s, self.difference.dims, self.difference.spacing_mm, "sample difference")?;
        same_geometry(d, s, self.label.dims, self.label.spacing_mm, "sample label")?;
        same_geometry(d, s, self.brain_mask.dims, self.brain_mask.spacing_mm, "sample mask")?;
        if self.kind == SampleKind::SingleTimePoint {
            if self.baseline.data != self.follow_up.data {
                return Err(Error::Invalid(
                    "single-time-point sample: baseline != follow_up".into(),
                ));
            }
            if self.difference.data.iter().any(|&v| v != 0.0) {
                return Err(Error::Invalid(
                    "single-time-point sample: difference map not all zero".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Zero-mean unit-variance normalization over the brain mask (population
/// statistics); voxels outside the mask are set to 0.
pub fn normalize_zmuv(v: &Volume3D, mask: &LabelVolume) -> Result<Volume3D> {
    same_geometry(v.dims, v.spacing_mm, mask.dims, mask.spacing_mm, "normalize_zmuv")?;
    let n = mask.foreground_count();
    if n < 2 {
        return Err(Error::Invalid(format!(
            "normalize_zmuv: mask has {n} voxels, need at least 2"
        )));
    }
    let mut sum = 0.0;
    for (x, &m) in v.data.iter().zip(&mask.data) {
        if m == 1 {
            sum += x;
        }
    }
    let mean = sum / n as f64;
    let mut var = 0.0;
    for (x, &m) in v.data.iter().zip(&mask.data) {
        if m == 1 {
            var += (x - mean) * (x - mean);
        }
    }
    var /= n as f64;
    if var <= 0.0 {
        return Err(Error::Invalid(
            "normalize_zmuv: constant intensities inside the mask".into(),
        ));
    }
    let std = var.sqrt();
    let data = v
        .data
        .iter()
        .zip(&mask.data)
        .map(|(x, &m)| if m == 1 { (x - mean) / std } else { 0.0 })
        .collect();
    Ok(Volume3D {
        dims: v.dims,
        spacing_mm: v.spacing_mm,
        data,
    })
}

/// Voxelwise follow-up minus baseline.
pub fn difference_map(baseline: &Volume3D, follow_up: &Volume3D) -> Result<Volume3D> {
    same_geometry(
        baseline.dims,
        baseline.spacing_mm,
        follow_up.dims,
        follow_up.spacing_mm,
        "difference_map",
    )?;
    let data = follow_up
        .data
        .iter()
        .zip(&baseline.data)
        .map(|(f, b)| f - b)
        .collect();
    Ok(Volume3D {
        dims: baseline.dims,
        spacing_mm: baseline.spacing_mm,
        data,
    })
}

/// Build a single-time-point sample: both time points are the normalized `x`
/// and the difference map is all zeros.
pub fn make_sample_single(x: &Volume3D, y_all: &LabelVolume, mask: &LabelVolume) -> Result<Sample> {
    same_geometry(x.dims, x.spacing_mm, y_all.dims, y_all.spacing_mm, "make_sample_single")?;
    let xn = normalize_zmuv(x, mask)?;
    let difference = Volume3D::zeros(x.dims, x.spacing_mm);
    Ok(Sample {
        kind: SampleKind::SingleTimePoint,
        baseline: xn.clone(),
        follow_up: xn,
        difference,
        label: y_all.clone(),
        brain_mask: mask.clone(),
    })
}

/// Build a two-time-point sample. Each time point is normalized independently
/// over the mask before the difference map is taken, which makes the
/// difference invariant to per-scan intensity gain.
pub fn make_sample_two(
    x_b: &Volume3D,
    x_fu: &Volume3D,
    y_new: &LabelVolume,
    mask: &LabelVolume,
) -> Result<Sample> {
    same_geometry(x_b.dims, x_b.spacing_mm, x_fu.dims, x_fu.spacing_mm, "make_sample_two")?;
    same_geometry(x_b.dims, x_b.spacing_mm, y_new.dims, y_new.spacing_mm, "make_sample_two")?;
    let bn = normalize_zmuv(x_b, mask)?;
    let fn_ = normalize_zmuv(x_fu, mask)?;
    let difference = difference_map(&bn, &fn_)?;
    Ok(Sample {
        kind: SampleKind::TwoTimePoint,
        baseline: bn,
        follow_up: fn_,
        difference,
        label: y_new.clone(),
        brain_mask: mask.clone(),
    })
}

fn write_header(out: &mut Vec<u8>, dtype: u8, dims: Dims, spacing: Spacing) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype);
    for d in [dims.0, dims.1, dims.2] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for s in [spacing.0, spacing.1, spacing.2] {
        out.extend_from_slice(&s.to_le_bytes());
    }
}

struct Header {
    dtype: u8,
    dims: Dims,
    spacing: Spacing,
}

fn read_header(bytes: &[u8], path: &Path) -> Result<(Header, usize)> {
    let need = 8 + 4 + 1 + 24 + 24;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "{}: truncated header ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let dtype = bytes[12];
    if dtype > 1 {
        return Err(Error::Format(format!("{}: unknown dtype {dtype}", path.display())));
    }
    let mut off = 13;
    let mut dims = [0u64; 3];
    for d in dims.iter_mut() {
        *d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        off += 8;
    }
    let total = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .filter(|&v| v <= MAX_VOXELS)
        .ok_or_else(|| Error::Format(format!("{}: dim overflow {dims:?}", path.display())))?;
    let _ = total;
    let mut spacing = [0f64; 3];
    for s in spacing.iter_mut() {
        *s = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        off += 8;
    }
    Ok((
        Header {
            dtype,
            dims: (dims[0] as usize, dims[1] as usize, dims[2] as usize),
            spacing: (spacing[0], spacing[1], spacing[2]),
        },
        off,
    ))
}

pub fn save_volume(v: &Volume3D, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(61 + v.data.len() * 8);
    write_header(&mut out, 0, v.dims, v.spacing_mm);
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    write_atomic(path, &out)
}

pub fn load_volume(path: &Path) -> Result<Volume3D> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, off) = read_header(&bytes, path)?;
    if h.dtype != 0 {
        return Err(Error::Format(format!(
            "{}: expected f64 volume, found label dtype",
            path.display()
        )));
    }
    let n = h.dims.0 * h.dims.1 * h.dims.2;
    if bytes.len() != off + n * 8 {
        return Err(Error::Format(format!(
            "{}: truncated data ({} of {} bytes)",
            path.display(),
            bytes.len(),
            off + n * 8
        )));
    }
    let data = bytes[off..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume3D::new(h.dims, h.spacing, data)
}

pub fn save_label(v: &LabelVolume, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(61 + v.data.len());
    write_header(&mut out, 1, v.dims, v.spacing_mm);
    out.extend_from_slice(&v.data);
    write_atomic(path, &out)
}

pub fn load_label(path: &Path) -> Result<LabelVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, off) = read_header(&bytes, path)?;
    if h.dtype != 1 {
        return Err(Error::Format(format!(
            "{}: expected label dtype, found f64 volume",
            path.display()
        )));
    }
    let n = h.dims.0 * h.dims.1 * h.dims.2;
    if bytes.len() != off + n {
        return Err(Error::Format(format!(
            "{}: truncated data ({} of {} bytes)",
            path.display(),
            bytes.len(),
            off + n
        )));
    }
    LabelVolume::new(h.dims, h.spacing, bytes[off..].to_vec())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// File names used when a sample is stored under a directory with a stem.
pub fn sample_paths(dir: &Path, stem: &str) -> [PathBuf; 5] {
    [
        dir.join(format!("{stem}_baseline.vol")),
        dir.join(format!("{stem}_followup.vol")),
        dir.join(format!("{stem}_difference.vol")),
        dir.join(format!("{stem}_label.vol")),
        dir.join(format!("{stem}_mask.vol")),
    ]
}

pub fn save_sample(sample: &Sample, dir: &Path, stem: &str) -> Result<[PathBuf; 5]> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = sample_paths(dir, stem);
    save_volume(&sample.baseline, &paths[0])?;
    save_volume(&sample.follow_up, &paths[1])?;
    save_volume(&sample.difference, &paths[2])?;
    save_label(&sample.label, &paths[3])?;
    save_label(&sample.brain_mask, &paths[4])?;
    Ok(paths)
}

pub fn load_sample(dir: &Path, stem: &str, kind: SampleKind) -> Result<Sample> {
    let paths = sample_paths(dir, stem);
    let sample = Sample {
        kind,
        baseline: load_volume(&paths[0])?,
        follow_up: load_volume(&paths[1])?,
        difference: load_volume(&paths[2])?,
        label: load_label(&paths[3])?,
        brain_mask: load_label(&paths[4])?,
    };
    sample.validate()?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full_mask(dims: Dims) -> LabelVolume {
        LabelVolume::new(dims, (1.0, 1.0, 1.0), vec![1; dims.0 * dims.1 * dims.2]).unwrap()
    }

    #[test]
    fn normalize_hand_computed() {
        let v = Volume3D::new((1, 1, 3), (1.0, 1.0, 1.0), vec![1.0, 2.0, 3.0]).unwrap();
        let out = normalize_zmuv(&v, &full_mask((1, 1, 3))).unwrap();
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, e) in out.data.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn normalize_statistics_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = (4, 5, 6);
        let data: Vec<f64> = (0..120).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let v = Volume3D::new(dims, (1.0, 1.0, 1.0), data).unwrap();
        let mask = full_mask(dims);
        let out = normalize_zmuv(&v, &mask).unwrap();
        let n = out.data.len() as f64;
        let mean: f64 = out.data.iter().sum::<f64>() / n;
        let var: f64 = out.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert!((var.sqrt() - 1.0).abs() < 1e-9);
        let again = normalize_zmuv(&out, &mask).unwrap();
        for (a, b) in again.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_masked_region_only() {
        let dims = (1, 1, 4);
        let v = Volume3D::new(dims, (1.0, 1.0, 1.0), vec![10.0, 1.0, 3.0, 99.0]).unwrap();
        let mask = LabelVolume::new(dims, (1.0, 1.0, 1.0), vec![0, 1, 1, 0]).unwrap();
        let out = normalize_zmuv(&v, &mask).unwrap();
        assert_eq!(out.data[0], 0.0);
        assert_eq!(out.data[3], 0.0);
        assert!((out.data[1] + 1.0).abs() < 1e-12);
        assert!((out.data[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_constant_region_errors() {
        let v = Volume3D::new((1, 1, 3), (1.0, 1.0, 1.0), vec![4.0; 3]).unwrap();
        assert!(normalize_zmuv(&v, &full_mask((1, 1, 3))).is_err());
    }

    #[test]
    fn difference_map_cases() {
        let dims = (2, 2, 2);
        let a = Volume3D::new(dims, (1.0, 1.0, 1.0), vec![1.5; 8]).unwrap();
        let z = difference_map(&a, &a).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));

        let zero = Volume3D::zeros(dims, (1.0, 1.0, 1.0));
        let one = Volume3D::new(dims, (1.0, 1.0, 1.0), vec![1.0; 8]).unwrap();
        assert!(difference_map(&zero, &one).unwrap().data.iter().all(|&v| v == 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
        let f: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
        let bv = Volume3D::new(dims, (1.0, 1.0, 1.0), b.clone()).unwrap();
        let fv = Volume3D::new(dims, (1.0, 1.0, 1.0), f.clone()).unwrap();
        let d = difference_map(&bv, &fv).unwrap();
        for i in 0..8 {
            assert_eq!(d.data[i], f[i] - b[i]);
        }

        let other = Volume3D::zeros((2, 2, 3), (1.0, 1.0, 1.0));
        assert!(difference_map(&bv, &other).is_err());
    }

    #[test]
    fn single_sample_has_zero_difference() {
        let dims = (3, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..27).map(|_| rng.gen::<f64>()).collect();
        let x = Volume3D::new(dims, (1.0, 1.0, 1.0), data).unwrap();
        let y = LabelVolume::zeros(dims, (1.0, 1.0, 1.0));
        let s = make_sample_single(&x, &y, &full_mask(dims)).unwrap();
        s.validate().unwrap();
        assert_eq!(s.kind, SampleKind::SingleTimePoint);
        assert_eq!(s.baseline.data, s.follow_up.data);
        assert!(s.difference.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_sample_difference_positive_on_new_blob() {
        let dims = (1, 1, 8);
        let sp = (1.0, 1.0, 1.0);
        let base = Volume3D::new(dims, sp, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        // follow-up adds a bright blob at voxels 2..4
        let fu = Volume3D::new(dims, sp, vec![1.0, 2.0, 6.0, 7.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let y = LabelVolume::new(dims, sp, vec![0, 0, 1, 1, 0, 0, 0, 0]).unwrap();
        let s = make_sample_two(&base, &fu, &y, &full_mask(dims)).unwrap();
        s.validate().unwrap();
        for i in 0..8 {
            if y.data[i] == 1 {
                assert!(s.difference.data[i] > 0.5, "blob voxel {i} not hyperintense");
            }
        }
        let on: f64 = (0..8).filter(|&i| y.data[i] == 1).map(|i| s.difference.data[i]).sum();
        let off: f64 = (0..8)
            .filter(|&i| y.data[i] == 0)
            .map(|i| s.difference.data[i].abs())
            .sum::<f64>()
            / 6.0;
        assert!(on / 2.0 > off);
    }

    #[test]
    fn volume_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let data: Vec<f64> = (0..24).map(|_| rng.gen::<f64>()).collect();
        let v = Volume3D::new((2, 3, 4), (0.5, 1.0, 2.0), data).unwrap();
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(v, back);

        let good = fs::read(&path).unwrap();

        // corrupt the magic
        let mut bytes = good.clone();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        let err = load_volume(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"));

        // header-only file
        fs::write(&path, &good[..61]).unwrap();
        let err = load_volume(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn sample_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let dims = (4, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..10.0)).collect();
        let f: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..10.0)).collect();
        let y: Vec<u8> = (0..64).map(|_| u8::from(rng.gen_bool(0.2))).collect();
        let sp = (1.0, 1.0, 1.0);
        let s = make_sample_two(
            &Volume3D::new(dims, sp, b).unwrap(),
            &Volume3D::new(dims, sp, f).unwrap(),
            &LabelVolume::new(dims, sp, y).unwrap(),
            &full_mask(dims),
        )
        .unwrap();
        save_sample(&s, dir.path(), "case0").unwrap();
        let back = load_sample(dir.path(), "case0", SampleKind::TwoTimePoint).unwrap();
        assert_eq!(s, back);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn save_load_save_is_byte_identical(seed in 0u64..1000) {
            let dir = tempfile::tempdir().unwrap();
            let p1 = dir.path().join("a.vol");
            let p2 = dir.path().join("b.vol");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
            let data: Vec<f64> = (0..d.0 * d.1 * d.2).map(|_| rng.gen::<f64>()).collect();
            let v = Volume3D::new(d, (1.0, 1.0, 1.0), data).unwrap();
            save_volume(&v, &p1).unwrap();
            let back = load_volume(&p1).unwrap();
            save_volume(&back, &p2).unwrap();
            prop_assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        }
    }
}
