//! Evaluation protocol: overlap metrics, surface distances, and
//! instance-level lesion F1 with the 11-voxel minimum-size rule.
//!
//! Lesions use 26-connectivity; surfaces use 6-connectivity. Distances are
//! Euclidean in voxel units by default, with an optional switch to mm via
//! the volume spacing. Metrics that are undefined for a mask pair (one side
//! empty) report "not applicable" and are excluded from aggregation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::inference::{sliding_window_predict, InferenceConfig, InferenceResult};
use crate::network::SegNet;
use crate::phantom::{HiddenAllLesion, Manifest, Split};
use crate::volume::{LabelVolume, Sample, SampleKind};

/// Components below this voxel count are dropped from the F1 calculation.
pub const MIN_LESION_SIZE: usize = 11;

fn check_dims(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!(
            "mask dims {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    Ok(())
}

/// Dice over raw binary slices; both-empty pairs score 1.0.
pub fn dice_slices(pred: &[u8], gt: &[u8]) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(&p, &g)| p == 1 && g == 1).count();
    let p = pred.iter().filter(|&&v| v == 1).count();
    let g = gt.iter().filter(|&&v| v == 1).count();
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

pub fn dice(pred: &LabelVolume, gt: &LabelVolume) -> Result<f64> {
    check_dims(pred, gt)?;
    Ok(dice_slices(&pred.data, &gt.data))
}

pub fn jaccard(pred: &LabelVolume, gt: &LabelVolume) -> Result<f64> {
    check_dims(pred, gt)?;
    let inter = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(&p, &g)| p == 1 && g == 1)
        .count();
    let union = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(&p, &g)| p == 1 || g == 1)
        .count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// One maximal 26-connected foreground component.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionInstance {
    pub id: usize,
    pub voxels: Vec<usize>,
    pub size: usize,
}

/// Maximal 26-connected components, ordered by their first voxel in
/// row-major order (so the result is deterministic).
pub fn connected_components_26(mask: &LabelVolume) -> Vec<LesionInstance> {
    let (dd, hh, ww) = mask.dims;
    let idx = |d: usize, h: usize, w: usize| (d * hh + h) * ww + w;
    let mut visited = vec![false; mask.data.len()];
    let mut components = Vec::new();
    for start in 0..mask.data.len() {
        if mask.data[start] == 0 || visited[start] {
            continue;
        }
        let mut voxels = Vec::new();
        let mut stack = vec![start];
        visited[start] = true;
        while let Some(v) = stack.pop() {
            voxels.push(v);
            let d = v / (hh * ww);
            let h = (v / ww) % hh;
            let w = v % ww;
            for nd in d.saturating_sub(1)..(d + 2).min(dd) {
                for nh in h.saturating_sub(1)..(h + 2).min(hh) {
                    for nw in w.saturating_sub(1)..(w + 2).min(ww) {
                        let ni = idx(nd, nh, nw);
                        if mask.data[ni] == 1 && !visited[ni] {
                            visited[ni] = true;
                            stack.push(ni);
                        }
                    }
                }
            }
        }
        voxels.sort_unstable();
        let size = voxels.len();
        components.push(LesionInstance { id: components.len(), voxels, size });
    }
    components
}

/// Mask voxels with at least one 6-neighbor outside the mask or lying on the
/// volume boundary. Returned as (d,h,w) coordinates.
fn surface_voxels(mask: &LabelVolume) -> Vec<(usize, usize, usize)> {
    let (dd, hh, ww) = mask.dims;
    let at = |d: usize, h: usize, w: usize| mask.data[(d * hh + h) * ww + w];
    let mut out = Vec::new();
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                if at(d, h, w) == 0 {
                    continue;
                }
                let boundary = d == 0
                    || d + 1 == dd
                    || h == 0
                    || h + 1 == hh
                    || w == 0
                    || w + 1 == ww;
                let exposed = boundary
                    || at(d - 1, h, w) == 0
                    || at(d + 1, h, w) == 0
                    || at(d, h - 1, w) == 0
                    || at(d, h + 1, w) == 0
                    || at(d, h, w - 1) == 0
                    || at(d, h, w + 1) == 0;
                if exposed {
                    out.push((d, h, w));
                }
            }
        }
    }
    out
}

fn directed_distances(
    from: &[(usize, usize, usize)],
    to: &[(usize, usize, usize)],
    scale: (f64, f64, f64),
) -> Vec<f64> {
    from.iter()
        .map(|&(ad, ah, aw)| {
            to.iter()
                .map(|&(bd, bh, bw)| {
                    let dd = (ad as f64 - bd as f64) * scale.0;
                    let dh = (ah as f64 - bh as f64) * scale.1;
                    let dw = (aw as f64 - bw as f64) * scale.2;
                    (dd * dd + dh * dh + dw * dw).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Nearest-rank percentile: the ceil(q·n)-th smallest value.
fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn surface_metric(
    pred: &LabelVolume,
    gt: &LabelVolume,
    use_mm: bool,
) -> Result<Option<(f64, f64)>> {
    check_dims(pred, gt)?;
    let pe = pred.foreground_count() == 0;
    let ge = gt.foreground_count() == 0;
    if pe && ge {
        return Ok(Some((0.0, 0.0)));
    }
    if pe || ge {
        return Ok(None);
    }
    let scale = if use_mm { pred.spacing_mm } else { (1.0, 1.0, 1.0) };
    let sp = surface_voxels(pred);
    let sg = surface_voxels(gt);
    let mut d_pg = directed_distances(&sp, &sg, scale);
    let mut d_gp = directed_distances(&sg, &sp, scale);
    d_pg.sort_by(f64::total_cmp);
    d_gp.sort_by(f64::total_cmp);
    let hd95 = nearest_rank(&d_pg, 0.95).max(nearest_rank(&d_gp, 0.95));
    let total: f64 = d_pg.iter().chain(&d_gp).sum();
    let asd = total / (d_pg.len() + d_gp.len()) as f64;
    Ok(Some((hd95, asd)))
}

/// 95th-percentile Hausdorff distance in voxel units (max of the two
/// directed nearest-rank 95th percentiles). `None` when exactly one mask is
/// empty; 0 when both are.
pub fn hd95(pred: &LabelVolume, gt: &LabelVolume) -> Result<Option<f64>> {
    Ok(surface_metric(pred, gt, false)?.map(|(h, _)| h))
}

pub fn hd95_mm(pred: &LabelVolume, gt: &LabelVolume) -> Result<Option<f64>> {
    Ok(surface_metric(pred, gt, true)?.map(|(h, _)| h))
}

/// Average surface distance in voxel units: mean of all directed surface
/// distances pooled from both directions.
pub fn asd(pred: &LabelVolume, gt: &LabelVolume) -> Result<Option<f64>> {
    Ok(surface_metric(pred, gt, false)?.map(|(_, a)| a))
}

pub fn asd_mm(pred: &LabelVolume, gt: &LabelVolume) -> Result<Option<f64>> {
    Ok(surface_metric(pred, gt, true)?.map(|(_, a)| a))
}

/// Instance-level F1. Components with fewer than `min_size` voxels are
/// dropped on both sides; a ground-truth component counts as detected when
/// it overlaps the retained prediction in at least one voxel. `None` when
/// both sides are empty after filtering.
pub fn lesion_f1(pred: &LabelVolume, gt: &LabelVolume, min_size: usize) -> Result<Option<f64>> {
    check_dims(pred, gt)?;
    let keep = |cs: Vec<LesionInstance>| -> Vec<LesionInstance> {
        cs.into_iter().filter(|c| c.size >= min_size).collect()
    };
    let pred_cs = keep(connected_components_26(pred));
    let gt_cs = keep(connected_components_26(gt));
    if pred_cs.is_empty() && gt_cs.is_empty() {
        return Ok(None);
    }
    let mut pred_union = vec![false; pred.data.len()];
    for c in &pred_cs {
        for &v in &c.voxels {
            pred_union[v] = true;
        }
    }
    let mut gt_union = vec![false; gt.data.len()];
    for c in &gt_cs {
        for &v in &c.voxels {
            gt_union[v] = true;
        }
    }
    let tp = gt_cs
        .iter()
        .filter(|c| c.voxels.iter().any(|&v| pred_union[v]))
        .count();
    let fn_ = gt_cs.len() - tp;
    let fp = pred_cs
        .iter()
        .filter(|c| !c.voxels.iter().any(|&v| gt_union[v]))
        .count();
    Ok(Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64))
}

/// One evaluated head of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub case: String,
    pub head: String,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub f1: Option<f64>,
}

/// Means over applicable rows only.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Aggregate {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub f1: Option<f64>,
    pub consistency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    /// Per two-time-point case: mean |p_al_1 - p_al_2| over the brain mask.
    pub consistency: Vec<(String, f64)>,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let applicable: Vec<f64> = values.flatten().collect();
    if applicable.is_empty() {
        None
    } else {
        Some(applicable.iter().sum::<f64>() / applicable.len() as f64)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".into(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    pub fn aggregate(&self) -> Aggregate {
        let n = self.rows.len().max(1) as f64;
        Aggregate {
            dice: self.rows.iter().map(|r| r.dice).sum::<f64>() / n,
            jaccard: self.rows.iter().map(|r| r.jaccard).sum::<f64>() / n,
            hd95: mean_opt(self.rows.iter().map(|r| r.hd95)),
            asd: mean_opt(self.rows.iter().map(|r| r.asd)),
            f1: mean_opt(self.rows.iter().map(|r| r.f1)),
            consistency: mean_opt(self.consistency.iter().map(|&(_, v)| Some(v))),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("case,head,dice,jaccard,hd95_vox,asd_vox,f1\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:.6},{:.6},{},{},{}",
                r.case,
                r.head,
                r.dice,
                r.jaccard,
                fmt_opt(r.hd95),
                fmt_opt(r.asd),
                fmt_opt(r.f1)
            )
            .unwrap();
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| Case | Head | Dice | Jaccard | 95HD (voxel) | ASD (voxel) | F1 |\n\
             |---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            writeln!(
                out,
                "| {} | {} | {:.4} | {:.4} | {} | {} | {} |",
                r.case,
                r.head,
                r.dice,
                r.jaccard,
                fmt_opt(r.hd95),
                fmt_opt(r.asd),
                fmt_opt(r.f1)
            )
            .unwrap();
        }
        let a = self.aggregate();
        writeln!(
            out,
            "| **mean** | all | {:.4} | {:.4} | {} | {} | {} |",
            a.dice,
            a.jaccard,
            fmt_opt(a.hd95),
            fmt_opt(a.asd),
            fmt_opt(a.f1)
        )
        .unwrap();
        if !self.consistency.is_empty() {
            out.push_str("\nRelation consistency (mean |p_al_1 - p_al_2| in brain):\n");
            for (case, v) in &self.consistency {
                writeln!(out, "- {case}: {v:.6}").unwrap();
            }
        }
        out
    }

    /// Rebuild the rows from a CSV produced by `to_csv` (consistency
    /// diagnostics are not stored in the CSV and come back empty).
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != "case,head,dice,jaccard,hd95_vox,asd_vox,f1" {
            return Err(Error::Format(format!("unexpected report header `{header}`")));
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s == "N/A" {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::Format(format!("bad metric value `{s}`")))
            }
        };
        let mut rows = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Format(format!("bad report row `{line}`")));
            }
            rows.push(MetricsRow {
                case: f[0].into(),
                head: f[1].into(),
                dice: opt(f[2])?.ok_or_else(|| Error::Format("dice is N/A".into()))?,
                jaccard: opt(f[3])?.ok_or_else(|| Error::Format("jaccard is N/A".into()))?,
                hd95: opt(f[4])?,
                asd: opt(f[5])?,
                f1: opt(f[6])?,
            });
        }
        Ok(MetricsReport { rows, consistency: Vec::new() })
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let md = dir.join(format!("{stem}.md"));
        fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))
    }
}

/// Evaluation options: the minimum lesion size for F1 and whether surface
/// distances use mm (via spacing) instead of voxel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub min_lesion_size: usize,
    pub use_mm: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { min_lesion_size: MIN_LESION_SIZE, use_mm: false }
    }
}

fn row(
    case: &str,
    head: &str,
    pred: &LabelVolume,
    gt: &LabelVolume,
    opts: EvalOptions,
) -> Result<MetricsRow> {
    let surfaces = surface_metric(pred, gt, opts.use_mm)?;
    Ok(MetricsRow {
        case: case.into(),
        head: head.into(),
        dice: dice(pred, gt)?,
        jaccard: jaccard(pred, gt)?,
        hd95: surfaces.map(|(h, _)| h),
        asd: surfaces.map(|(_, a)| a),
        f1: lesion_f1(pred, gt, opts.min_lesion_size)?,
    })
}

/// Mean |p_al_1 - p_al_2| over the brain mask (Eq. 3 diagnostic).
pub fn head_consistency(result: &InferenceResult, sample: &Sample) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &m) in sample.brain_mask.data.iter().enumerate() {
        if m == 1 {
            sum += (result.p_al_1.data[i] - result.p_al_2.data[i]).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Rows for one case. Single-time-point cases score both all-lesion heads
/// against the label; two-time-point cases score the new-lesion head against
/// the label and, when hidden per-time-point ground truth exists, each
/// all-lesion head against its time point.
pub fn evaluate_case(
    case: &str,
    result: &InferenceResult,
    sample: &Sample,
    hidden: Option<&HiddenAllLesion>,
    opts: EvalOptions,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    match sample.kind {
        SampleKind::SingleTimePoint => {
            rows.push(row(case, "al1", &result.l_al_1, &sample.label, opts)?);
            rows.push(row(case, "al2", &result.l_al_2, &sample.label, opts)?);
        }
        SampleKind::TwoTimePoint => {
            rows.push(row(case, "nl", &result.l_nl, &sample.label, opts)?);
            if let Some(h) = hidden {
                rows.push(row(case, "al1", &result.l_al_1, &h.baseline, opts)?);
                rows.push(row(case, "al2", &result.l_al_2, &h.follow_up, opts)?);
            }
        }
    }
    Ok(rows)
}

/// Evaluate every case of a split, in manifest order.
pub fn evaluate_dataset(
    manifest: &Manifest,
    net: &SegNet,
    cfg: InferenceConfig,
    split: Split,
    opts: EvalOptions,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for r in manifest.records.iter().filter(|r| r.split == split) {
        let sample = manifest.load_sample(r)?;
        let hidden = if r.has_hidden {
            Some(manifest.load_hidden(r)?)
        } else {
            None
        };
        let result = sliding_window_predict(net, &sample, cfg)?;
        report
            .rows
            .extend(evaluate_case(&r.stem, &result, &sample, hidden.as_ref(), opts)?);
        if sample.kind == SampleKind::TwoTimePoint {
            report
                .consistency
                .push((r.stem.clone(), head_consistency(&result, &sample)));
        }
    }
    Ok(report)
}
