//! Localization, segmentation, detection, interactive and multi-source metrics.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::LocalizationHeatmap;
use crate::synthdata::Pairing;

/// IoU thresholds swept by the AUC metrics: 0, 0.05, …, 1.
pub const AUC_STEP: f64 = 0.05;
pub const AUC_POINTS: usize = 21;
pub const DEFAULT_DELTA: f64 = 0.5;
pub const DEFAULT_BETA2: f64 = 0.3;
pub const MAX_SOURCES: usize = 4;

pub fn auc_thresholds() -> [f64; AUC_POINTS] {
    std::array::from_fn(|k| k as f64 / (AUC_POINTS - 1) as f64)
}

/// How a heatmap is turned into a binary prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThresholdMode {
    Fixed { threshold: f64 },
    /// `delta · max(heatmap)` per record.
    Adaptive { delta: f64 },
}

impl ThresholdMode {
    pub const FIXED: ThresholdMode = ThresholdMode::Fixed { threshold: 0.5 };
    pub const ADAPTIVE: ThresholdMode = ThresholdMode::Adaptive { delta: DEFAULT_DELTA };

    pub fn threshold(&self, heatmap: &[f64]) -> f64 {
        match *self {
            ThresholdMode::Fixed { threshold } => threshold,
            ThresholdMode::Adaptive { delta } => adaptive_threshold(heatmap, delta),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ThresholdMode::Fixed { threshold } => (0.0..=1.0).contains(&threshold),
            ThresholdMode::Adaptive { delta } => (0.0..=1.0).contains(&delta),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("threshold setting {self:?} outside [0, 1]")))
        }
    }
}

pub fn binarize(heatmap: &[f64], threshold: f64) -> Vec<bool> {
    heatmap.iter().map(|&v| v >= threshold).collect()
}

pub fn adaptive_threshold(heatmap: &[f64], delta: f64) -> f64 {
    delta * heatmap.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// `|pred ∩ gt| / |pred ∪ gt|`; two empty masks give 1.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Success at IoU threshold `t`. A zero overlap never counts, so the curve at
/// `t = 0` reflects localization rather than being identically one.
pub fn success(iou: f64, t: f64) -> bool {
    iou >= t && iou > 0.0
}

/// Trapezoid area of a success curve sampled at [`auc_thresholds`].
pub fn trapezoid(curve: &[f64]) -> f64 {
    curve.windows(2).map(|w| AUC_STEP * (w[0] + w[1]) / 2.0).sum()
}

fn auc_of(ious: &[f64]) -> f64 {
    let n = ious.len() as f64;
    let curve: Vec<f64> =
        auc_thresholds().iter().map(|&t| ious.iter().filter(|&&v| success(v, t)).count() as f64 / n).collect();
    trapezoid(&curve)
}

/// One heatmap to be scored against the ground truth of the class it was conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub image_id: String,
    pub class_id: Option<usize>,
    pub pairing: Pairing,
    pub heatmap: LocalizationHeatmap,
    /// Ground-truth region; all false when the sound has no visible source.
    pub gt: Vec<bool>,
    pub confidence: f64,
}

impl EvalRecord {
    pub fn new(
        id: impl Into<String>,
        image_id: impl Into<String>,
        class_id: Option<usize>,
        pairing: Pairing,
        heatmap: LocalizationHeatmap,
        gt: Vec<bool>,
    ) -> Result<Self> {
        if gt.len() != heatmap.values.len() {
            return Err(Error::Shape(format!(
                "heatmap has {} pixels, ground truth {}",
                heatmap.values.len(),
                gt.len()
            )));
        }
        let confidence = heatmap.max();
        Ok(Self { id: id.into(), image_id: image_id.into(), class_id, pairing, heatmap, gt, confidence })
    }

    pub fn prediction(&self, mode: ThresholdMode) -> Vec<bool> {
        binarize(&self.heatmap.values, mode.threshold(&self.heatmap.values))
    }

    pub fn iou(&self, mode: ThresholdMode) -> f64 {
        iou(&self.prediction(mode), &self.gt).expect("shapes checked at construction")
    }
}

fn nonempty<T>(records: &[T]) -> Result<()> {
    if records.is_empty() {
        Err(Error::InvalidInput("no records to evaluate".into()))
    } else {
        Ok(())
    }
}

pub fn ciou_success(records: &[EvalRecord], iou_threshold: f64, mode: ThresholdMode) -> Result<f64> {
    nonempty(records)?;
    let hits = records.iter().filter(|r| success(r.iou(mode), iou_threshold)).count();
    Ok(hits as f64 / records.len() as f64)
}

pub fn auc(records: &[EvalRecord], mode: ThresholdMode) -> Result<f64> {
    nonempty(records)?;
    let ious: Vec<f64> = records.iter().map(|r| r.iou(mode)).collect();
    Ok(auc_of(&ious))
}

/// `F_β` from pixel precision and recall; zero when both vanish.
pub fn f_beta(precision: f64, recall: f64, beta2: f64) -> f64 {
    let den = beta2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / den
    }
}

/// `(mIoU, F-score)` averaged over records.
pub fn segmentation_metrics(records: &[EvalRecord], mode: ThresholdMode, beta2: f64) -> Result<(f64, f64)> {
    nonempty(records)?;
    let (mut miou, mut f) = (0.0, 0.0);
    for r in records {
        let pred = r.prediction(mode);
        let tp = pred.iter().zip(&r.gt).filter(|(p, g)| **p && **g).count() as f64;
        let np = pred.iter().filter(|p| **p).count() as f64;
        let ng = r.gt.iter().filter(|g| **g).count() as f64;
        let precision = if np == 0.0 { 0.0 } else { tp / np };
        let recall = if ng == 0.0 { 0.0 } else { tp / ng };
        miou += iou(&pred, &r.gt)?;
        f += f_beta(precision, recall, beta2);
    }
    let n = records.len() as f64;
    Ok((miou / n, f / n))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub ap: f64,
    pub max_f1: f64,
    pub curve: PrCurve,
}

/// Detection view of one prediction: its confidence and whether it is a hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub confidence: f64,
    pub hit: bool,
}

/// PR curve over confidence cut-offs, sweeping every distinct confidence from
/// high to low. A cut-off keeps detections with confidence ≥ it.
pub fn pr_curve(detections: &[Detection], positives: usize) -> PrCurve {
    let mut order: Vec<&Detection> = detections.iter().collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut curve = PrCurve::default();
    let (mut tp, mut n) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let c = order[i].confidence;
        while i < order.len() && order[i].confidence == c {
            tp += order[i].hit as usize;
            n += 1;
            i += 1;
        }
        curve.thresholds.push(c);
        curve.precision.push(tp as f64 / n as f64);
        curve.recall.push(if positives == 0 { 0.0 } else { tp as f64 / positives as f64 });
    }
    curve
}

/// Area under the monotone precision envelope, starting from recall 0.
pub fn average_precision(curve: &PrCurve) -> f64 {
    let n = curve.precision.len();
    let mut envelope = curve.precision.clone();
    for k in (0..n.saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut prev = 0.0;
    let mut ap = 0.0;
    for k in 0..n {
        ap += (curve.recall[k] - prev) * envelope[k];
        prev = curve.recall[k];
    }
    ap
}

pub fn max_f1(curve: &PrCurve) -> f64 {
    curve.precision.iter().zip(&curve.recall).map(|(&p, &r)| f_beta(p, r, 1.0)).fold(0.0, f64::max)
}

/// A detection on a matched record is a hit iff it localizes its ground truth
/// (IoU ≥ 0.5); detections on mismatched or silent records are false positives.
pub fn detection_pr(records: &[EvalRecord], mode: ThresholdMode) -> Result<DetectionReport> {
    let positives = records.iter().filter(|r| r.pairing == Pairing::Matched).count();
    if positives == 0 || positives == records.len() {
        return Err(Error::InvalidInput("detection PR needs both matched and unmatched records".into()));
    }
    let dets: Vec<Detection> = records
        .iter()
        .map(|r| Detection {
            confidence: r.confidence,
            hit: r.pairing == Pairing::Matched && success(r.iou(mode), 0.5),
        })
        .collect();
    let curve = pr_curve(&dets, positives);
    Ok(DetectionReport { ap: average_precision(&curve), max_f1: max_f1(&curve), curve })
}

/// Fraction of matched records localized with IoU ≥ 0.5.
pub fn loc_acc(records: &[EvalRecord], mode: ThresholdMode) -> Result<f64> {
    let matched: Vec<&EvalRecord> = records.iter().filter(|r| r.pairing == Pairing::Matched).collect();
    if matched.is_empty() {
        return Err(Error::InvalidInput("no matched records".into()));
    }
    Ok(matched.iter().filter(|r| success(r.iou(mode), 0.5)).count() as f64 / matched.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InteractiveReport {
    pub iiou: f64,
    pub iauc: f64,
    pub iiou_adaptive: f64,
    pub iauc_adaptive: f64,
    pub groups: usize,
    /// Groups with a single pairing, left out.
    pub excluded: usize,
}

/// Records grouped by `image_id` in first-seen order.
pub fn group_by_image(records: &[EvalRecord]) -> Vec<Vec<&EvalRecord>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        let g = groups.entry(r.image_id.as_str()).or_default();
        if g.is_empty() {
            order.push(r.image_id.as_str());
        }
        g.push(r);
    }
    order.into_iter().map(|k| groups.remove(k).expect("key recorded")).collect()
}

/// A group is correct at `t` when every pairing localizes its own class.
pub fn interactive_metrics(records: &[EvalRecord]) -> Result<InteractiveReport> {
    let groups = group_by_image(records);
    let (kept, dropped): (Vec<_>, Vec<_>) = groups.into_iter().partition(|g| g.len() >= 2);
    if kept.is_empty() {
        return Err(Error::InvalidInput("no image has two or more pairings".into()));
    }
    let score = |mode: ThresholdMode| -> (f64, f64) {
        let worst: Vec<f64> =
            kept.iter().map(|g| g.iter().map(|r| r.iou(mode)).fold(f64::INFINITY, f64::min)).collect();
        let n = worst.len() as f64;
        (worst.iter().filter(|&&v| success(v, 0.5)).count() as f64 / n, auc_of(&worst))
    };
    let (iiou, iauc) = score(ThresholdMode::FIXED);
    let (iiou_adaptive, iauc_adaptive) = score(ThresholdMode::ADAPTIVE);
    Ok(InteractiveReport { iiou, iauc, iiou_adaptive, iauc_adaptive, groups: kept.len(), excluded: dropped.len() })
}

/// Fraction of groups whose heatmap argmax lands inside each pairing's own ground truth.
pub fn interactive_argmax_rate(records: &[EvalRecord]) -> Result<f64> {
    let groups: Vec<_> = group_by_image(records).into_iter().filter(|g| g.len() >= 2).collect();
    if groups.is_empty() {
        return Err(Error::InvalidInput("no image has two or more pairings".into()));
    }
    let ok = groups
        .iter()
        .filter(|g| {
            g.iter().all(|r| {
                let (y, x) = r.heatmap.argmax();
                r.gt[y * r.heatmap.width + x]
            })
        })
        .count();
    Ok(ok as f64 / groups.len() as f64)
}

/// One image with several simultaneous sources.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSourceRecord {
    pub image_id: String,
    /// Per-class heatmaps, one per predicted source.
    pub predictions: Vec<(usize, LocalizationHeatmap)>,
    /// Per-class ground-truth regions.
    pub gts: Vec<(usize, Vec<bool>)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MultiSourceReport {
    pub cap: f64,
    pub piap: f64,
    pub ciou_10: f64,
    pub ciou_30: f64,
    pub ciou_50: f64,
    pub auc: f64,
}

fn class_iou(pred: &LocalizationHeatmap, gt: Option<&Vec<bool>>, mode: ThresholdMode) -> Result<f64> {
    let p = binarize(&pred.values, mode.threshold(&pred.values));
    match gt {
        Some(g) => iou(&p, g),
        None => Ok(0.0),
    }
}

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (1..k).rev().find(|&i| cur[i - 1] < cur[i]) else { break };
        let j = (i..k).rev().find(|&j| cur[j] > cur[i - 1]).expect("successor exists");
        cur.swap(i - 1, j);
        cur[i..].reverse();
    }
    out
}

/// CAP averages per-class AP with class-matched assignment. PIAP pools all
/// predictions after assigning predictions to ground truths per image by the
/// permutation with the largest total IoU (first in lexicographic order on ties).
pub fn multisource_metrics(records: &[MultiSourceRecord], mode: ThresholdMode) -> Result<MultiSourceReport> {
    nonempty(records)?;
    let mut per_class: BTreeMap<usize, (Vec<Detection>, usize)> = BTreeMap::new();
    let mut pooled: Vec<Detection> = Vec::new();
    let mut gt_total = 0usize;
    let mut ious = Vec::new();
    for rec in records {
        let k = rec.predictions.len().max(rec.gts.len());
        if k > MAX_SOURCES {
            return Err(Error::InvalidInput(format!("{k} sources exceed the supported {MAX_SOURCES}")));
        }
        for (c, _) in &rec.gts {
            per_class.entry(*c).or_default().1 += 1;
        }
        gt_total += rec.gts.len();
        for (c, h) in &rec.predictions {
            let gt = rec.gts.iter().find(|(g, _)| g == c).map(|(_, m)| m);
            let v = class_iou(h, gt, mode)?;
            if gt.is_some() {
                ious.push(v);
            }
            per_class.entry(*c).or_default().0.push(Detection { confidence: h.max(), hit: success(v, 0.5) });
        }
        for (c, _) in &rec.gts {
            if !rec.predictions.iter().any(|(p, _)| p == c) {
                ious.push(0.0);
            }
        }
        let np = rec.predictions.len();
        let ng = rec.gts.len();
        let mut table = vec![vec![0.0; k]; k];
        for (i, (_, h)) in rec.predictions.iter().enumerate() {
            for (j, (_, g)) in rec.gts.iter().enumerate() {
                table[i][j] = class_iou(h, Some(g), mode)?;
            }
        }
        let mut best: Option<(f64, Vec<usize>)> = None;
        for p in permutations(k) {
            let total: f64 = (0..np).filter(|&i| p[i] < ng).map(|i| table[i][p[i]]).sum();
            if best.as_ref().map_or(true, |(b, _)| total > *b) {
                best = Some((total, p));
            }
        }
        let (_, perm) = best.expect("at least one permutation");
        for (i, (_, h)) in rec.predictions.iter().enumerate() {
            let v = if perm[i] < ng { table[i][perm[i]] } else { 0.0 };
            pooled.push(Detection { confidence: h.max(), hit: success(v, 0.5) });
        }
    }
    let classes: Vec<f64> = per_class
        .values()
        .filter(|(_, positives)| *positives > 0)
        .map(|(dets, positives)| average_precision(&pr_curve(dets, *positives)))
        .collect();
    let cap = if classes.is_empty() { 0.0 } else { classes.iter().sum::<f64>() / classes.len() as f64 };
    let piap = average_precision(&pr_curve(&pooled, gt_total));
    let rate = |t: f64| {
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().filter(|&&v| success(v, t)).count() as f64 / ious.len() as f64
        }
    };
    Ok(MultiSourceReport {
        cap,
        piap,
        ciou_10: rate(0.1),
        ciou_30: rate(0.3),
        ciou_50: rate(0.5),
        auc: if ious.is_empty() { 0.0 } else { auc_of(&ious) },
    })
}

/// Tight `(x, y, w, h)` box of the on-pixels, `None` for an empty mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

pub fn mask_to_bbox(mask: &[bool], width: usize) -> Option<BBox> {
    if width == 0 {
        return None;
    }
    let rows = mask.len() / width;
    let ys: Vec<usize> = (0..rows).filter(|&y| mask[y * width..(y + 1) * width].iter().any(|&v| v)).collect();
    let (&y0, &y1) = (ys.first()?, ys.last()?);
    let x0 = (0..width).find(|&x| (y0..=y1).any(|y| mask[y * width + x]))?;
    let x1 = (0..width).rev().find(|&x| (y0..=y1).any(|y| mask[y * width + x]))?;
    Some(BBox { x: x0, y: y0, w: x1 - x0 + 1, h: y1 - y0 + 1 })
}

pub fn bbox_mask(b: &BBox, height: usize, width: usize) -> Vec<bool> {
    (0..height * width).map(|i| (b.y..b.y + b.h).contains(&(i / width)) && (b.x..b.x + b.w).contains(&(i % width))).collect()
}

/// Named scalars plus an optional PR curve.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pr_curve: Option<PrCurve>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_record: Vec<RecordDiagnostics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordDiagnostics {
    pub id: String,
    pub iou: f64,
    pub confidence: f64,
}

impl MetricReport {
    pub fn insert(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.metrics {
            s.push_str(&format!("{k},{v}\n"));
        }
        s
    }

    pub fn pr_csv(&self) -> Option<String> {
        self.pr_curve.as_ref().map(|c| {
            let mut s = String::from("threshold,precision,recall\n");
            for i in 0..c.thresholds.len() {
                s.push_str(&format!("{},{},{}\n", c.thresholds[i], c.precision[i], c.recall[i]));
            }
            s
        })
    }
}

/// Single-source suite: cIoU, AUC, mIoU and F-score, fixed and adaptive.
pub fn localization_report(records: &[EvalRecord], beta2: f64, delta: f64) -> Result<MetricReport> {
    let adaptive = ThresholdMode::Adaptive { delta };
    let mut rep = MetricReport::default();
    rep.insert("ciou", ciou_success(records, 0.5, ThresholdMode::FIXED)?);
    rep.insert("ciou_adaptive", ciou_success(records, 0.5, adaptive)?);
    rep.insert("auc", auc(records, ThresholdMode::FIXED)?);
    rep.insert("auc_adaptive", auc(records, adaptive)?);
    let (miou, f) = segmentation_metrics(records, ThresholdMode::FIXED, beta2)?;
    let (miou_a, f_a) = segmentation_metrics(records, adaptive, beta2)?;
    rep.insert("miou", miou);
    rep.insert("fscore", f);
    rep.insert("miou_adaptive", miou_a);
    rep.insert("fscore_adaptive", f_a);
    rep.insert("records", records.len() as f64);
    rep.per_record = records
        .iter()
        .map(|r| RecordDiagnostics { id: r.id.clone(), iou: r.iou(ThresholdMode::FIXED), confidence: r.confidence })
        .collect();
    Ok(rep)
}

pub const HEATMAP_MAGIC: &[u8; 4] = b"AVH1";

/// Heatmap file: magic `AVH1`, `u32` height, `u32` width (little-endian), then
/// `f32` values row-major.
pub fn write_heatmap(path: &Path, h: &LocalizationHeatmap) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 4 * h.values.len());
    buf.extend_from_slice(HEATMAP_MAGIC);
    buf.extend_from_slice(&(h.height as u32).to_le_bytes());
    buf.extend_from_slice(&(h.width as u32).to_le_bytes());
    for &v in &h.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_heatmap(path: &Path) -> Result<LocalizationHeatmap> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 12 || &buf[0..4] != HEATMAP_MAGIC {
        return Err(Error::format(path, "not a heatmap file"));
    }
    let height = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
    let width = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
    if buf.len() != 12 + 4 * height * width {
        return Err(Error::format(path, format!("expected {} values for {height}x{width}", height * width)));
    }
    let values = buf[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    LocalizationHeatmap::new(height, width, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hm(values: Vec<f64>, w: usize) -> LocalizationHeatmap {
        LocalizationHeatmap::new(values.len() / w, w, values).unwrap()
    }

    fn rec(values: Vec<f64>, gt: Vec<bool>, pairing: Pairing) -> EvalRecord {
        let w = (values.len() as f64).sqrt() as usize;
        EvalRecord::new("r", "img", Some(0), pairing, hm(values, w), gt).unwrap()
    }

    #[test]
    fn binarize_examples() {
        let h = [0.2, 0.5, 0.9];
        assert_eq!(binarize(&h, 0.0), vec![true; 3]);
        assert_eq!(binarize(&h, 1.0), vec![false; 3]);
        assert_eq!(binarize(&[0.5; 4], 0.5), vec![true; 4]);
        assert!((adaptive_threshold(&[0.1, 0.8], 0.5) - 0.4).abs() < 1e-15);
        assert_eq!(binarize(&[0.3; 4], adaptive_threshold(&[0.3; 4], 0.5)), vec![true; 4]);
        let h = [0.1, 0.9, 0.9, 0.3];
        assert_eq!(binarize(&h, adaptive_threshold(&h, 1.0)), vec![false, true, true, false]);
    }

    #[test]
    fn iou_examples() {
        let gt = vec![true, true, false, false, true, true, false, false];
        assert_eq!(iou(&gt, &gt).unwrap(), 1.0);
        let disjoint: Vec<bool> = gt.iter().map(|g| !g).collect();
        assert_eq!(iou(&disjoint, &gt).unwrap(), 0.0);
        let half = vec![true, false, false, false, true, false, false, false];
        assert_eq!(iou(&half, &gt).unwrap(), 0.5);
        assert_eq!(iou(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(iou(&[true], &[true, false]).is_err());
    }

    #[test]
    fn auc_endpoints() {
        let gt = vec![true, false, false, false];
        let perfect = rec(vec![0.9, 0.1, 0.1, 0.1], gt.clone(), Pairing::Matched);
        let empty = rec(vec![0.1; 4], gt, Pairing::Matched);
        assert!((auc(&[perfect.clone()], ThresholdMode::FIXED).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(auc(&[empty.clone()], ThresholdMode::FIXED).unwrap(), 0.0);
        assert_eq!(ciou_success(&[perfect], 0.5, ThresholdMode::FIXED).unwrap(), 1.0);
        assert_eq!(ciou_success(&[empty], 0.5, ThresholdMode::FIXED).unwrap(), 0.0);
        assert!(ciou_success(&[], 0.5, ThresholdMode::FIXED).is_err());
        let descending: Vec<f64> = auc_thresholds().iter().map(|t| 1.0 - t).collect();
        assert!((trapezoid(&descending) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn segmentation_half_cover() {
        let gt = vec![true, true, false, false];
        let r = rec(vec![0.9, 0.1, 0.1, 0.1], gt, Pairing::Matched);
        let (m, f) = segmentation_metrics(&[r], ThresholdMode::FIXED, DEFAULT_BETA2).unwrap();
        assert!((m - 0.5).abs() < 1e-12);
        assert!((f - 0.8125).abs() < 1e-12);
    }

    #[test]
    fn detection_examples() {
        let gt = vec![true, false, false, false];
        let good = |c: f64| rec(vec![c, 0.1, 0.1, 0.1], gt.clone(), Pairing::Matched);
        let bad = |c: f64| rec(vec![c, 0.1, 0.1, 0.1], vec![false; 4], Pairing::Mismatched);
        let sep = [good(0.9), good(0.8), bad(0.6), bad(0.55)];
        let r = detection_pr(&sep, ThresholdMode::FIXED).unwrap();
        assert_eq!((r.ap, r.max_f1), (1.0, 1.0));
        let flat = [good(0.7), good(0.7), bad(0.7), bad(0.7)];
        let r = detection_pr(&flat, ThresholdMode::FIXED).unwrap();
        assert!((r.ap - 0.5).abs() < 1e-12);
        assert!(detection_pr(&[good(0.9)], ThresholdMode::FIXED).is_err());
        assert_eq!(loc_acc(&sep, ThresholdMode::FIXED).unwrap(), 1.0);
    }

    #[test]
    fn interactive_examples() {
        let a = vec![true, false, false, false];
        let b = vec![false, false, false, true];
        let mk = |id: &str, img: &str, v: Vec<f64>, gt: &Vec<bool>| {
            EvalRecord::new(id, img, Some(0), Pairing::Matched, hm(v, 2), gt.clone()).unwrap()
        };
        let good = [
            mk("p0", "i0", vec![0.9, 0.1, 0.1, 0.1], &a),
            mk("p1", "i0", vec![0.1, 0.1, 0.1, 0.9], &b),
        ];
        let r = interactive_metrics(&good).unwrap();
        assert_eq!(r.iiou, 1.0);
        assert_eq!(interactive_argmax_rate(&good).unwrap(), 1.0);
        let deaf = [
            mk("p0", "i0", vec![0.9, 0.1, 0.1, 0.1], &a),
            mk("p1", "i0", vec![0.9, 0.1, 0.1, 0.1], &b),
            mk("s", "i1", vec![0.9, 0.1, 0.1, 0.1], &a),
        ];
        let r = interactive_metrics(&deaf).unwrap();
        assert_eq!((r.iiou, r.groups, r.excluded), (0.0, 1, 1));
    }

    #[test]
    fn multisource_swapped_predictions() {
        let a = vec![true, false, false, false];
        let b = vec![false, false, false, true];
        let pa = hm(vec![0.9, 0.1, 0.1, 0.1], 2);
        let pb = hm(vec![0.1, 0.1, 0.1, 0.9], 2);
        let right = MultiSourceRecord {
            image_id: "m".into(),
            predictions: vec![(0, pa.clone()), (1, pb.clone())],
            gts: vec![(0, a.clone()), (1, b.clone())],
        };
        let r = multisource_metrics(&[right], ThresholdMode::FIXED).unwrap();
        assert_eq!((r.cap, r.piap, r.ciou_50), (1.0, 1.0, 1.0));
        assert!((r.auc - 1.0).abs() < 1e-12);
        let swapped = MultiSourceRecord { image_id: "m".into(), predictions: vec![(0, pb), (1, pa)], gts: vec![(0, a), (1, b)] };
        let r = multisource_metrics(&[swapped], ThresholdMode::FIXED).unwrap();
        assert_eq!((r.ciou_50, r.piap), (0.0, 1.0));
    }

    #[test]
    fn permutations_enumerate_all() {
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(4).len(), 24);
        assert_eq!(permutations(1), vec![vec![0]]);
        assert_eq!(permutations(0), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn bbox_examples() {
        assert_eq!(mask_to_bbox(&[true; 12], 4), Some(BBox { x: 0, y: 0, w: 4, h: 3 }));
        let mut one = vec![false; 12];
        one[2 * 4 + 1] = true;
        assert_eq!(mask_to_bbox(&one, 4), Some(BBox { x: 1, y: 2, w: 1, h: 1 }));
        assert_eq!(mask_to_bbox(&[false; 12], 4), None);
    }

    #[test]
    fn heatmap_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.bin");
        let h = hm(vec![0.25, 0.5, 0.75, 0.125, 0.0625, 1.0 - 1e-3], 3);
        write_heatmap(&p, &h).unwrap();
        let back = read_heatmap(&p).unwrap();
        assert_eq!((back.height, back.width), (2, 3));
        for (a, b) in back.values.iter().zip(&h.values) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(fs::metadata(&p).unwrap().len(), 12 + 4 * 6);
        fs::write(&p, b"nope").unwrap();
        assert!(read_heatmap(&p).is_err());
    }
}
