//! Sliding-window whole-volume prediction with overlap averaging.
//!
//! Patch origins form a regular grid with the final origin clamped so the
//! last patch abuts the volume edge; overlapping probabilities are combined
//! by per-voxel arithmetic mean, which makes the result independent of the
//! patch visit order.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::SegNet;
use crate::volume::{save_label, save_volume, LabelVolume, Sample, SampleKind, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig::with_patch(24)
    }
}

impl InferenceConfig {
    /// Paper ratio: stride of a quarter patch per axis.
    pub fn with_patch(patch_size: usize) -> Self {
        InferenceConfig {
            patch_size,
            stride: (patch_size / 4).max(1),
            threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::Config(format!(
                "stride {} must be in 1..={}",
                self.stride, self.patch_size
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {} must be in (0,1)",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Whole-volume probability and binary maps for all three heads.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub p_al_1: Volume3D,
    pub p_al_2: Volume3D,
    pub p_nl: Volume3D,
    pub l_al_1: LabelVolume,
    pub l_al_2: LabelVolume,
    pub l_nl: LabelVolume,
}

impl InferenceResult {
    /// Writes the six maps as COACTVOL files named `{stem}_{head}_prob.vol`
    /// and `{stem}_{head}_label.vol`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let heads = [
            ("al1", &self.p_al_1, &self.l_al_1),
            ("al2", &self.p_al_2, &self.l_al_2),
            ("nl", &self.p_nl, &self.l_nl),
        ];
        for (name, prob, label) in heads {
            save_volume(prob, &dir.join(format!("{stem}_{name}_prob.vol")))?;
            save_label(label, &dir.join(format!("{stem}_{name}_label.vol")))?;
        }
        Ok(())
    }
}

/// Grid positions along one axis: multiples of `stride`, with the final
/// origin clamped so the last patch ends exactly at `dim`.
pub fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = dim - patch;
    let mut origins = Vec::new();
    let mut o = 0;
    loop {
        if o >= last {
            origins.push(last);
            break;
        }
        origins.push(o);
        o += stride;
    }
    origins
}

fn crop(data: &[f64], dims: (usize, usize, usize), origin: (usize, usize, usize), p: usize) -> Vec<f64> {
    let (_, h, w) = dims;
    let mut out = Vec::with_capacity(p * p * p);
    for d in 0..p {
        for r in 0..p {
            let base = ((origin.0 + d) * h + origin.1 + r) * w + origin.2;
            out.extend_from_slice(&data[base..base + p]);
        }
    }
    out
}

/// Per-voxel coverage counts of the sliding-window grid. Exposed so tests
/// can assert every voxel is visited at least once.
pub fn coverage_map(dims: (usize, usize, usize), cfg: InferenceConfig) -> Result<Vec<u32>> {
    check_fit(dims, cfg.patch_size)?;
    let p = cfg.patch_size;
    let (dd, hh, ww) = dims;
    let mut counts = vec![0u32; dd * hh * ww];
    for &od in &axis_origins(dd, p, cfg.stride) {
        for &oh in &axis_origins(hh, p, cfg.stride) {
            for &ow in &axis_origins(ww, p, cfg.stride) {
                for d in od..od + p {
                    for r in oh..oh + p {
                        let base = (d * hh + r) * ww + ow;
                        for c in counts[base..base + p].iter_mut() {
                            *c += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(counts)
}

fn check_fit(dims: (usize, usize, usize), patch: usize) -> Result<()> {
    if dims.0 < patch || dims.1 < patch || dims.2 < patch {
        return Err(Error::Invalid(format!(
            "volume {dims:?} is smaller than the {patch}^3 inference patch"
        )));
    }
    Ok(())
}

/// Predict all three heads over a whole sample: overlapped patches on a
/// regular grid, probabilities averaged per voxel, binarized at the
/// threshold, and restricted to the brain mask (outside set to 0).
pub fn sliding_window_predict(
    net: &SegNet,
    sample: &Sample,
    cfg: InferenceConfig,
) -> Result<InferenceResult> {
    cfg.validate()?;
    let dims = sample.baseline.dims;
    let spacing = sample.baseline.spacing_mm;
    check_fit(dims, cfg.patch_size)?;
    let p = cfg.patch_size;

    let mut origins = Vec::new();
    for &od in &axis_origins(dims.0, p, cfg.stride) {
        for &oh in &axis_origins(dims.1, p, cfg.stride) {
            for &ow in &axis_origins(dims.2, p, cfg.stride) {
                origins.push((od, oh, ow));
            }
        }
    }

    // Predict patches in parallel; the vector keeps grid order so the
    // sequential accumulation below is deterministic.
    let triples = origins
        .par_iter()
        .map(|&o| {
            let xb = crop(&sample.baseline.data, dims, o, p);
            let xfu = crop(&sample.follow_up.data, dims, o, p);
            let xd = crop(&sample.difference.data, dims, o, p);
            net.predict_patch((p, p, p), &xb, &xfu, &xd)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = dims.0 * dims.1 * dims.2;
    let mut sums = [vec![0.0f64; n], vec![0.0f64; n], vec![0.0f64; n]];
    let mut count = vec![0u32; n];
    for (&(od, oh, ow), t) in origins.iter().zip(&triples) {
        let maps = [&t.p_al_1, &t.p_al_2, &t.p_nl];
        for d in 0..p {
            for r in 0..p {
                let base = ((od + d) * dims.1 + oh + r) * dims.2 + ow;
                let src = (d * p + r) * p;
                for (sum, map) in sums.iter_mut().zip(maps) {
                    for c in 0..p {
                        sum[base + c] += map[src + c];
                    }
                }
                for c in count[base..base + p].iter_mut() {
                    *c += 1;
                }
            }
        }
    }

    let mask = &sample.brain_mask.data;
    let mut probs = Vec::with_capacity(3);
    let mut labels = Vec::with_capacity(3);
    for sum in &mut sums {
        let mut lab = vec![0u8; n];
        for i in 0..n {
            debug_assert!(count[i] > 0);
            let mut v = sum[i] / count[i] as f64;
            if mask[i] == 0 {
                v = 0.0;
            }
            sum[i] = v;
            lab[i] = u8::from(v >= cfg.threshold && mask[i] == 1);
        }
        probs.push(Volume3D::new(dims, spacing, std::mem::take(sum))?);
        labels.push(LabelVolume::new(dims, spacing, lab)?);
    }
    let [p_al_1, p_al_2, p_nl]: [Volume3D; 3] = probs.try_into().unwrap();
    let [l_al_1, l_al_2, l_nl]: [LabelVolume; 3] = labels.try_into().unwrap();
    Ok(InferenceResult { p_al_1, p_al_2, p_nl, l_al_1, l_al_2, l_nl })
}

/// Convenience extraction of the binarized new-lesion head for a
/// two-time-point sample.
pub fn predict_new_lesions(net: &SegNet, sample: &Sample, cfg: InferenceConfig) -> Result<LabelVolume> {
    if sample.kind != SampleKind::TwoTimePoint {
        return Err(Error::Invalid(
            "new-lesion prediction expects a two-time-point sample".into(),
        ));
    }
    Ok(sliding_window_predict(net, sample, cfg)?.l_nl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, SegNetConfig};
    use crate::phantom::{gen_two, PhantomConfig};

    fn tiny_net() -> SegNet {
        init_params(SegNetConfig {
            levels: 2,
            base_channels: 2,
            head_channels: 2,
            ..SegNetConfig::default()
        })
        .unwrap()
    }

    fn tiny_sample() -> Sample {
        let cfg = PhantomConfig {
            dims: (16, 16, 16),
            lesion_radius_range_vox: (1.0, 2.0),
            seed: 11,
            ..PhantomConfig::default()
        };
        gen_two(&cfg).unwrap().sample
    }

    #[test]
    fn axis_origins_cover_and_clamp() {
        assert_eq!(axis_origins(16, 8, 4), vec![0, 4, 8]);
        assert_eq!(axis_origins(16, 8, 8), vec![0, 8]);
        assert_eq!(axis_origins(17, 8, 4), vec![0, 4, 8, 9]);
        assert_eq!(axis_origins(8, 8, 4), vec![0]);
        // last origin always abuts the edge
        for dim in 8..40 {
            for stride in 1..=8 {
                let o = axis_origins(dim, 8, stride);
                assert_eq!(*o.last().unwrap(), dim - 8, "dim {dim} stride {stride}");
                assert!(o.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn coverage_is_complete() {
        let cfg = InferenceConfig { patch_size: 8, stride: 3, threshold: 0.5 };
        let counts = coverage_map((17, 16, 19), cfg).unwrap();
        assert!(counts.iter().all(|&c| c >= 1));
        // interior voxels see multiple patches at stride < patch
        assert!(counts.iter().any(|&c| c > 1));
    }

    #[test]
    fn constant_network_gives_constant_half() {
        let mut net = tiny_net();
        // zero every weight and bias: logits vanish, sigmoid gives 0.5
        for p in &mut net.params {
            if !p.name.ends_with(".slope") {
                p.tensor.values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let sample = tiny_sample();
        let cfg = InferenceConfig { patch_size: 8, stride: 3, threshold: 0.5 };
        let out = sliding_window_predict(&net, &sample, cfg).unwrap();
        for (i, &m) in sample.brain_mask.data.iter().enumerate() {
            let expect = if m == 1 { 0.5 } else { 0.0 };
            assert_eq!(out.p_al_1.data[i], expect, "seam artifact at voxel {i}");
            assert_eq!(out.p_nl.data[i], expect);
            assert_eq!(out.l_al_1.data[i], m); // 0.5 >= threshold inside mask
        }
    }

    #[test]
    fn recomposition_matches_brute_force_oracle() {
        let net = tiny_net();
        let sample = tiny_sample();
        let dims = sample.baseline.dims;
        let cfg = InferenceConfig { patch_size: 8, stride: 5, threshold: 0.5 };
        let out = sliding_window_predict(&net, &sample, cfg).unwrap();

        // independent oracle: loop every voxel of every patch, accumulate
        // sums and counts, divide at the end
        let p = cfg.patch_size;
        let n = dims.0 * dims.1 * dims.2;
        let mut sum = vec![0.0f64; n];
        let mut cnt = vec![0u32; n];
        for &od in &axis_origins(dims.0, p, cfg.stride) {
            for &oh in &axis_origins(dims.1, p, cfg.stride) {
                for &ow in &axis_origins(dims.2, p, cfg.stride) {
                    let xb = crop(&sample.baseline.data, dims, (od, oh, ow), p);
                    let xfu = crop(&sample.follow_up.data, dims, (od, oh, ow), p);
                    let xd = crop(&sample.difference.data, dims, (od, oh, ow), p);
                    let t = net.predict_patch((p, p, p), &xb, &xfu, &xd).unwrap();
                    for d in 0..p {
                        for r in 0..p {
                            for c in 0..p {
                                let gi = ((od + d) * dims.1 + oh + r) * dims.2 + ow + c;
                                sum[gi] += t.p_al_1[(d * p + r) * p + c];
                                cnt[gi] += 1;
                            }
                        }
                    }
                }
            }
        }
        for i in 0..n {
            let expect = if sample.brain_mask.data[i] == 1 {
                sum[i] / cnt[i] as f64
            } else {
                0.0
            };
            assert!(
                (out.p_al_1.data[i] - expect).abs() <= 1e-12,
                "voxel {i}: {} vs {}",
                out.p_al_1.data[i],
                expect
            );
        }
    }

    #[test]
    fn stride_equal_patch_matches_independent_tiles() {
        let net = tiny_net();
        let sample = tiny_sample();
        let cfg = InferenceConfig { patch_size: 8, stride: 8, threshold: 0.5 };
        let out = sliding_window_predict(&net, &sample, cfg).unwrap();
        let counts = coverage_map((16, 16, 16), cfg).unwrap();
        assert!(counts.iter().all(|&c| c == 1), "tiles overlap");
        let t = net
            .predict_patch(
                (8, 8, 8),
                &crop(&sample.baseline.data, (16, 16, 16), (8, 8, 8), 8),
                &crop(&sample.follow_up.data, (16, 16, 16), (8, 8, 8), 8),
                &crop(&sample.difference.data, (16, 16, 16), (8, 8, 8), 8),
            )
            .unwrap();
        let gi = (12 * 16 + 12) * 16 + 12;
        if sample.brain_mask.data[gi] == 1 {
            assert_eq!(out.p_al_2.data[gi], t.p_al_2[(4 * 8 + 4) * 8 + 4]);
        }
    }

    #[test]
    fn determinism_and_new_lesion_shape() {
        let net = tiny_net();
        let sample = tiny_sample();
        let cfg = InferenceConfig { patch_size: 8, stride: 3, threshold: 0.5 };
        let a = sliding_window_predict(&net, &sample, cfg).unwrap();
        let b = sliding_window_predict(&net, &sample, cfg).unwrap();
        assert_eq!(a, b);
        let nl = predict_new_lesions(&net, &sample, cfg).unwrap();
        assert_eq!(nl.dims, sample.baseline.dims);
        assert_eq!(nl, a.l_nl);
    }

    #[test]
    fn errors_on_small_volume_and_bad_config() {
        let net = tiny_net();
        let sample = tiny_sample();
        let too_big = InferenceConfig { patch_size: 32, stride: 8, threshold: 0.5 };
        assert!(sliding_window_predict(&net, &sample, too_big).is_err());
        assert!(InferenceConfig { patch_size: 8, stride: 0, threshold: 0.5 }.validate().is_err());
        assert!(InferenceConfig { patch_size: 8, stride: 9, threshold: 0.5 }.validate().is_err());
        assert!(InferenceConfig { patch_size: 8, stride: 4, threshold: 1.0 }.validate().is_err());
        let mut single = tiny_sample();
        single.kind = SampleKind::SingleTimePoint;
        let cfg = InferenceConfig { patch_size: 8, stride: 8, threshold: 0.5 };
        assert!(predict_new_lesions(&net, &single, cfg).is_err());
    }

    #[test]
    fn result_files_written() {
        let net = tiny_net();
        let sample = tiny_sample();
        let cfg = InferenceConfig { patch_size: 8, stride: 8, threshold: 0.5 };
        let out = sliding_window_predict(&net, &sample, cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.save(dir.path(), "case0").unwrap();
        for head in ["al1", "al2", "nl"] {
            assert!(dir.path().join(format!("case0_{head}_prob.vol")).exists());
            assert!(dir.path().join(format!("case0_{head}_label.vol")).exists());
        }
    }
}
