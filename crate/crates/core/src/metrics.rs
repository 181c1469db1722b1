//! Segmentation metrics: Dice, mean IoU and the percentile Hausdorff distance.
//!
//! Masks are 2-D label arrays. Binary metrics treat any nonzero label as
//! foreground. Conventions for degenerate inputs:
//!
//! * empty prediction and empty ground truth: Dice 1.0;
//! * a class absent from both masks contributes IoU 1.0 to the mean;
//! * HD95 is undefined (`None`) when either mask is empty.
//!
//! Boundary pixels are foreground pixels with at least one 4-neighbour that
//! is background; pixels outside the image count as background.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::SliceSample;
use crate::error::{Error, Result};
use crate::model::A4Unet;
use crate::train::predict_labels;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn dice(&self) -> f64 {
        let den = self.fn_ + self.fp + 2 * self.tp;
        if den == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / den as f64
        }
    }

    pub fn iou(&self) -> f64 {
        let den = self.fn_ + self.fp + self.tp;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }

    pub fn both_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

fn check_shapes(pred: &ArrayView2<u8>, gt: &ArrayView2<u8>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

/// Counts for the foreground class `label` (or for "any nonzero" when `label` is `None`).
pub fn confusion_for(pred: ArrayView2<u8>, gt: ArrayView2<u8>, label: Option<u8>) -> Result<ConfusionCounts> {
    check_shapes(&pred, &gt)?;
    let hit = |v: u8| match label {
        Some(l) => v == l,
        None => v != 0,
    };
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (hit(p), hit(g)) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn confusion(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<ConfusionCounts> {
    confusion_for(pred, gt, None)
}

/// `2·TP / (FN + FP + 2·TP)`; 1.0 when both masks are empty.
pub fn dice(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<f64> {
    Ok(confusion(pred, gt)?.dice())
}

/// Foreground IoU `TP / (FN + FP + TP)`; 1.0 when both masks are empty.
pub fn binary_iou(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<f64> {
    Ok(confusion(pred, gt)?.iou())
}

/// Mean IoU over the `k + 1` classes `0..=k`, background included.
pub fn miou(pred: ArrayView2<u8>, gt: ArrayView2<u8>, k: u8) -> Result<f64> {
    Ok(class_confusions(pred, gt, k)?.iter().map(|c| c.iou()).sum::<f64>() / (k as f64 + 1.0))
}

/// One-vs-rest counts for every class `0..=k`.
pub fn class_confusions(pred: ArrayView2<u8>, gt: ArrayView2<u8>, k: u8) -> Result<Vec<ConfusionCounts>> {
    check_shapes(&pred, &gt)?;
    if let Some(&v) = pred.iter().chain(gt.iter()).find(|&&v| v > k) {
        return Err(Error::Data(format!("label {v} outside 0..={k}")));
    }
    let n = pred.len() as u64;
    let mut out = vec![ConfusionCounts::default(); k as usize + 1];
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if p == g {
            out[p as usize].tp += 1;
        } else {
            out[p as usize].fp += 1;
            out[g as usize].fn_ += 1;
        }
    }
    for c in &mut out {
        c.tn = n - c.tp - c.fp - c.fn_;
    }
    Ok(out)
}

/// Foreground pixels with a background (or out-of-image) 4-neighbour.
pub fn boundary(mask: ArrayView2<u8>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let fg = |i: isize, j: isize| {
        i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w && mask[[i as usize, j as usize]] != 0
    };
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (i, j) = (i as isize, j as isize);
        fg(i, j) && !(fg(i - 1, j) && fg(i + 1, j) && fg(i, j - 1) && fg(i, j + 1))
    })
}

/// Exact squared Euclidean distance transform of a seed set, with anisotropic spacing.
///
/// Separable lower-envelope-of-parabolas algorithm; returns `f64::INFINITY`
/// everywhere when there are no seeds.
pub fn squared_edt(seeds: ArrayView2<bool>, spacing: (f64, f64)) -> Array2<f64> {
    let (h, w) = seeds.dim();
    let mut out = Array2::from_shape_fn((h, w), |ij| if seeds[ij] { 0.0 } else { f64::INFINITY });
    let mut buf = Vec::new();
    for j in 0..w {
        let col: Vec<f64> = (0..h).map(|i| out[[i, j]]).collect();
        envelope_1d(&col, spacing.0, &mut buf);
        for i in 0..h {
            out[[i, j]] = buf[i];
        }
    }
    for i in 0..h {
        let row: Vec<f64> = (0..w).map(|j| out[[i, j]]).collect();
        envelope_1d(&row, spacing.1, &mut buf);
        for j in 0..w {
            out[[i, j]] = buf[j];
        }
    }
    out
}

/// `out[q] = min_p ((q - p)·s)² + f[p]` over finite `f[p]`.
fn envelope_1d(f: &[f64], s: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let s2 = s * s;
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + s2 * (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + s2 * (p * p) as f64;
                    let x = (fq - fp) / (2.0 * s2 * (q - p) as f64);
                    if x <= *z.last().expect("nonempty") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = (q as f64 - p as f64) * s;
        *o = d * d + f[p];
    }
}

/// Linear-interpolation percentile of unsorted values, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}

/// Distances from every boundary pixel of `from` to the boundary of `to`.
pub fn directed_boundary_distances(from: ArrayView2<u8>, to: ArrayView2<u8>, spacing: (f64, f64)) -> Vec<f64> {
    let edt = squared_edt(boundary(to).view(), spacing);
    boundary(from)
        .indexed_iter()
        .filter(|(_, &b)| b)
        .map(|(ij, _)| edt[ij].sqrt())
        .collect()
}

/// Percentile Hausdorff distance between mask boundaries, in the units of `spacing`.
///
/// The larger of the two directed percentiles; `percentile = 100` gives the
/// classical Hausdorff distance. `None` when either mask is empty.
pub fn hd95(pred: ArrayView2<u8>, gt: ArrayView2<u8>, spacing: (f64, f64), percentile_p: f64) -> Result<Option<f64>> {
    check_shapes(&pred, &gt)?;
    if !(spacing.0 > 0.0 && spacing.1 > 0.0) {
        return Err(Error::Config(format!("pixel spacing must be positive, got {spacing:?}")));
    }
    if !(0.0..=100.0).contains(&percentile_p) {
        return Err(Error::Config(format!("percentile must lie in [0, 100], got {percentile_p}")));
    }
    if pred.iter().all(|&v| v == 0) || gt.iter().all(|&v| v == 0) {
        return Ok(None);
    }
    let a = percentile(&directed_boundary_distances(pred, gt, spacing), percentile_p);
    let b = percentile(&directed_boundary_distances(gt, pred, spacing), percentile_p);
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(a.max(b)),
        _ => None,
    })
}

/// Scores of one slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub counts: ConfusionCounts,
    pub dice: f64,
    pub miou: f64,
    pub hd95: Option<f64>,
}

impl SliceScore {
    pub fn both_empty(&self) -> bool {
        self.counts.both_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Highest label; mean IoU averages over `0..=max_label`.
    pub max_label: u8,
    pub percentile: f64,
    pub reduction: Reduction,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            max_label: 1,
            percentile: 95.0,
            reduction: Reduction::SliceMean,
        }
    }
}

/// How slice scores combine into one score per case.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Mean over slices. Dice skips slices where both masks are empty; these are counted instead.
    #[default]
    SliceMean,
    /// Dice from confusion counts pooled over all slices.
    Pooled,
}

pub fn score_slice(pred: ArrayView2<u8>, gt: ArrayView2<u8>, spacing: (f64, f64), cfg: &MetricConfig) -> Result<SliceScore> {
    let counts = confusion(pred, gt)?;
    Ok(SliceScore {
        counts,
        dice: counts.dice(),
        miou: miou(pred, gt, cfg.max_label)?,
        hd95: hd95(pred, gt, spacing, cfg.percentile)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub subject_id: String,
    pub dsc: f64,
    pub miou: f64,
    pub hd95_mm: Option<f64>,
    pub slices: usize,
    pub empty_slices: usize,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn reduce_case(subject_id: &str, slices: &[SliceScore], reduction: Reduction) -> CaseMetrics {
    let empty_slices = slices.iter().filter(|s| s.both_empty()).count();
    let dsc = match reduction {
        Reduction::SliceMean => {
            let d: Vec<f64> = slices.iter().filter(|s| !s.both_empty()).map(|s| s.dice).collect();
            mean(&d).unwrap_or(1.0)
        }
        Reduction::Pooled => {
            let mut c = ConfusionCounts::default();
            slices.iter().for_each(|s| c += s.counts);
            c.dice()
        }
    };
    let miou = mean(&slices.iter().map(|s| s.miou).collect::<Vec<_>>()).unwrap_or(1.0);
    let hd: Vec<f64> = slices.iter().filter_map(|s| s.hd95).collect();
    CaseMetrics {
        subject_id: subject_id.to_string(),
        dsc,
        miou,
        hd95_mm: mean(&hd),
        slices: slices.len(),
        empty_slices,
    }
}

/// Mean and population standard deviation; `std` is absent for fewer than two values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        let m = mean(values)?;
        let std = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt());
        Some(Self {
            mean: m,
            std,
            n: values.len(),
        })
    }

    fn fmt_text(s: &Option<Self>) -> String {
        match s {
            None => "undefined".into(),
            Some(Stat { mean, std: None, n }) => format!("{mean:.6} (n={n})"),
            Some(Stat { mean, std: Some(sd), n }) => format!("{mean:.6} ± {sd:.6} (n={n})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dsc: Option<Stat>,
    pub miou: Option<Stat>,
    pub hd95_mm: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_case: Vec<CaseMetrics>,
    pub aggregate: Aggregate,
    pub undefined_hd95_count: usize,
    pub empty_slice_count: usize,
}

impl MetricReport {
    pub fn from_cases(per_case: Vec<CaseMetrics>) -> Self {
        let col = |f: &dyn Fn(&CaseMetrics) -> Option<f64>| per_case.iter().filter_map(f).collect::<Vec<_>>();
        let aggregate = Aggregate {
            dsc: Stat::of(&col(&|c| Some(c.dsc))),
            miou: Stat::of(&col(&|c| Some(c.miou))),
            hd95_mm: Stat::of(&col(&|c| c.hd95_mm)),
        };
        Self {
            undefined_hd95_count: per_case.iter().filter(|c| c.hd95_mm.is_none()).count(),
            empty_slice_count: per_case.iter().map(|c| c.empty_slices).sum(),
            aggregate,
            per_case,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("subject_id\tdsc\tmiou\thd95_mm\tslices\tempty_slices\n");
        for c in &self.per_case {
            let hd = c.hd95_mm.map_or("undefined".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{}\t{}\t{}",
                c.subject_id, c.dsc, c.miou, hd, c.slices, c.empty_slices
            );
        }
        s.push_str("\n[aggregate]\n");
        let _ = writeln!(s, "cases = {}", self.per_case.len());
        let _ = writeln!(s, "dsc = {}", Stat::fmt_text(&self.aggregate.dsc));
        let _ = writeln!(s, "miou = {}", Stat::fmt_text(&self.aggregate.miou));
        let _ = writeln!(s, "hd95_mm = {}", Stat::fmt_text(&self.aggregate.hd95_mm));
        let _ = writeln!(s, "undefined_hd95_count = {}", self.undefined_hd95_count);
        let _ = writeln!(s, "empty_slice_count = {}", self.empty_slice_count);
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Scores `model` on labelled slices grouped by subject (in order of first appearance).
pub fn evaluate_dataset(model: &A4Unet, samples: &[SliceSample], cfg: &MetricConfig, batch_size: usize) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let preds = predict_labels(model, samples, batch_size)?;
    let mut groups: IndexMap<&str, Vec<SliceScore>> = IndexMap::new();
    for (s, p) in samples.iter().zip(&preds) {
        let gt = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{} slice {} has no label", s.subject_id, s.slice_index)))?;
        groups
            .entry(s.subject_id.as_str())
            .or_default()
            .push(score_slice(p.view(), gt.view(), s.spacing, cfg)?);
    }
    Ok(MetricReport::from_cases(
        groups
            .into_iter()
            .map(|(id, scores)| reduce_case(id, &scores, cfg.reduction))
            .collect(),
    ))
}
