//! Shared fixtures, a finite-difference gradient checker and brute-force
//! metric twins used as oracles.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use avclip::encoders::{EncoderConfig, FrozenStack};
use avclip::grounding::LocalizationHeatmap;
use avclip::harness::{prepare, ExperimentConfig};
use avclip::metrics::{EvalRecord, MultiSourceRecord};
use avclip::model::{Model, ObjectiveSettings, PreparedSample, TrainableState};
use avclip::rng;
use avclip::synthdata::{AudioFormat, Dataset, DatasetConfig, Pairing, Variant};
use rand::Rng;

pub fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.encoder = EncoderConfig { patch: 4, image_size: 16, f_bins: 33, hop: 16, d_a: 8, d_tok: 8, ..EncoderConfig::default() };
    cfg.data = DatasetConfig {
        image_size: 16,
        min_object: 4,
        max_object: 6,
        train: 24,
        test: 12,
        silent: 4,
        mismatched: 4,
        interactive: 4,
        mixture: 4,
        audio: AudioFormat { sample_rate: 8000, duration_secs: 0.1 },
        ..DatasetConfig::default()
    };
    cfg.train.batch_size = 4;
    cfg
}

pub struct Fixture {
    pub cfg: ExperimentConfig,
    pub model: Model,
    pub data: Dataset,
    pub train: Vec<PreparedSample>,
}

pub fn fixture(cfg: ExperimentConfig) -> Fixture {
    let model = Model::new(Arc::new(FrozenStack::toy(&cfg.encoder).unwrap()));
    let data = Dataset::generate(&cfg.data).unwrap();
    let train = prepare(&model.stack, &data.select("train", Variant::Matched)).unwrap();
    Fixture { cfg, model, data, train }
}

/// A state away from the symmetric initial point, so no gradient vanishes by construction.
pub fn perturbed_state(model: &Model, seed: u64) -> TrainableState {
    let mut s = TrainableState::init(&model.stack, seed, 0.5);
    let mut r = rng::stream(seed, "perturb");
    let flat: Vec<f64> = s.flatten().iter().map(|v| v + 0.05 * r.gen_range(-1.0..1.0)).collect();
    s.unflatten(&flat).unwrap();
    s.mask.w_hat = 0.3;
    s.mask.b = -0.2;
    s
}

#[derive(Debug)]
pub struct GradCheck {
    pub params: usize,
    /// Largest `|analytic − numeric| / max(rel · max(|a|, |n|), floor)`; passes when ≤ 1.
    pub worst_ratio: f64,
    pub worst_index: usize,
    pub worst_pair: (f64, f64),
}

/// Central differences of the objective against the analytic gradient, with
/// the mask noise re-seeded identically for every evaluation.
pub fn check_gradients(
    model: &Model,
    state: &TrainableState,
    batch: &[&PreparedSample],
    settings: &ObjectiveSettings,
    rel: f64,
    floor: f64,
) -> GradCheck {
    let noise = || rng::stream(99, "fd-noise");
    let analytic = model.objective(state, batch, settings, &mut noise()).unwrap().gradient;
    let base = state.flatten();
    let h = 1e-5;
    let mut probe = state.clone();
    let mut eval = |flat: &[f64]| {
        probe.unflatten(flat).unwrap();
        model.loss(&probe, batch, settings, &mut noise()).unwrap().total
    };
    let mut out = GradCheck { params: base.len(), worst_ratio: 0.0, worst_index: 0, worst_pair: (0.0, 0.0) };
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let a = analytic[i];
        let ratio = (a - numeric).abs() / (rel * a.abs().max(numeric.abs())).max(floor);
        if ratio > out.worst_ratio {
            out = GradCheck { worst_ratio: ratio, worst_index: i, worst_pair: (a, numeric), ..out };
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Brute-force metric twins

pub fn o_iou(pred: &[bool], gt: &[bool]) -> f64 {
    let mut inter = 0;
    let mut union = 0;
    for k in 0..pred.len() {
        if pred[k] && gt[k] {
            inter += 1;
        }
        if pred[k] || gt[k] {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Fixed threshold, or the adaptive rule with its delta.
#[derive(Clone, Copy, Debug)]
pub enum OMode {
    Fixed(f64),
    Adaptive(f64),
}

pub fn o_pred(h: &LocalizationHeatmap, mode: OMode) -> Vec<bool> {
    let t = match mode {
        OMode::Fixed(t) => t,
        OMode::Adaptive(d) => {
            let mut m = h.values[0];
            for &v in &h.values {
                if v > m {
                    m = v;
                }
            }
            d * m
        }
    };
    h.values.iter().map(|&v| !(v < t)).collect()
}

pub fn o_rec_iou(r: &EvalRecord, mode: OMode) -> f64 {
    o_iou(&o_pred(&r.heatmap, mode), &r.gt)
}

fn o_hit(iou: f64, t: f64) -> bool {
    iou > 0.0 && !(iou < t)
}

pub fn o_ciou(records: &[EvalRecord], t: f64, mode: OMode) -> f64 {
    let hits = records.iter().filter(|r| o_hit(o_rec_iou(r, mode), t)).count();
    hits as f64 / records.len() as f64
}

fn o_auc_of(ious: &[f64]) -> f64 {
    let curve: Vec<f64> =
        (0..=20).map(|k| ious.iter().filter(|&&v| o_hit(v, k as f64 / 20.0)).count() as f64 / ious.len() as f64).collect();
    let inner: f64 = curve[1..20].iter().sum();
    (inner + (curve[0] + curve[20]) / 2.0) / 20.0
}

pub fn o_auc(records: &[EvalRecord], mode: OMode) -> f64 {
    let ious: Vec<f64> = records.iter().map(|r| o_rec_iou(r, mode)).collect();
    o_auc_of(&ious)
}

pub fn o_segmentation(records: &[EvalRecord], mode: OMode, beta2: f64) -> (f64, f64) {
    let mut miou = 0.0;
    let mut f = 0.0;
    for r in records {
        let p = o_pred(&r.heatmap, mode);
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for k in 0..p.len() {
            match (p[k], r.gt[k]) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
        if prec + rec > 0.0 {
            f += (1.0 + beta2) * prec * rec / (beta2 * prec + rec);
        }
        miou += o_iou(&p, &r.gt);
    }
    (miou / records.len() as f64, f / records.len() as f64)
}

/// Exhaustive-threshold PR: one point per distinct confidence, then AP as the
/// area under the running-maximum-from-the-right precision.
pub fn o_ap_points(dets: &[(f64, bool)], positives: usize) -> (f64, f64) {
    let mut cuts: Vec<f64> = dets.iter().map(|d| d.0).collect();
    cuts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    cuts.dedup();
    let mut pts = Vec::new();
    for &c in &cuts {
        let kept: Vec<&(f64, bool)> = dets.iter().filter(|d| d.0 >= c).collect();
        let tp = kept.iter().filter(|d| d.1).count() as f64;
        let recall = if positives == 0 { 0.0 } else { tp / positives as f64 };
        pts.push((tp / kept.len() as f64, recall));
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    let mut best_f1: f64 = 0.0;
    for k in 0..pts.len() {
        let interp = pts[k..].iter().map(|p| p.0).fold(0.0, f64::max);
        ap += (pts[k].1 - prev_r) * interp;
        prev_r = pts[k].1;
        let (p, r) = pts[k];
        if p + r > 0.0 {
            best_f1 = best_f1.max(2.0 * p * r / (p + r));
        }
    }
    (ap, best_f1)
}

pub fn o_detection(records: &[EvalRecord], mode: OMode) -> (f64, f64) {
    let positives = records.iter().filter(|r| r.pairing == Pairing::Matched).count();
    let dets: Vec<(f64, bool)> = records
        .iter()
        .map(|r| {
            let mut m = r.heatmap.values[0];
            for &v in &r.heatmap.values {
                m = m.max(v);
            }
            (m, r.pairing == Pairing::Matched && o_hit(o_rec_iou(r, mode), 0.5))
        })
        .collect();
    o_ap_points(&dets, positives)
}

pub fn o_loc_acc(records: &[EvalRecord], mode: OMode) -> f64 {
    let matched: Vec<&EvalRecord> = records.iter().filter(|r| r.pairing == Pairing::Matched).collect();
    matched.iter().filter(|r| o_hit(o_rec_iou(r, mode), 0.5)).count() as f64 / matched.len() as f64
}

/// `(IIoU, IAUC)` over groups of at least two pairings.
pub fn o_interactive(records: &[EvalRecord], mode: OMode) -> (f64, f64) {
    let mut groups: HashMap<&str, Vec<&EvalRecord>> = HashMap::new();
    for r in records {
        groups.entry(&r.image_id).or_default().push(r);
    }
    let mut worst = Vec::new();
    for g in groups.values().filter(|g| g.len() >= 2) {
        let mut w = f64::INFINITY;
        for r in g {
            w = w.min(o_rec_iou(r, mode));
        }
        worst.push(w);
    }
    let iiou = worst.iter().filter(|&&v| o_hit(v, 0.5)).count() as f64 / worst.len() as f64;
    (iiou, o_auc_of(&worst))
}

fn lex_perms(k: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if prefix.len() == k {
        out.push(prefix.clone());
        return;
    }
    for v in 0..k {
        if !prefix.contains(&v) {
            prefix.push(v);
            lex_perms(k, prefix, out);
            prefix.pop();
        }
    }
}

#[derive(Debug, PartialEq)]
pub struct OMulti {
    pub cap: f64,
    pub piap: f64,
    pub ciou: [f64; 3],
    pub auc: f64,
}

pub fn o_multisource(records: &[MultiSourceRecord], mode: OMode) -> OMulti {
    let mut per_class: BTreeMap<usize, (Vec<(f64, bool)>, usize)> = BTreeMap::new();
    let mut pooled = Vec::new();
    let mut positives = 0;
    let mut ious = Vec::new();
    for rec in records {
        let pi = |h: &LocalizationHeatmap, g: &[bool]| o_iou(&o_pred(h, mode), g);
        for (c, g) in &rec.gts {
            per_class.entry(*c).or_default().1 += 1;
            positives += 1;
            ious.push(rec.predictions.iter().find(|(p, _)| p == c).map_or(0.0, |(_, h)| pi(h, g)));
        }
        for (c, h) in &rec.predictions {
            let v = rec.gts.iter().find(|(g, _)| g == c).map_or(0.0, |(_, g)| pi(h, g));
            per_class.entry(*c).or_default().0.push((h.max(), o_hit(v, 0.5)));
        }
        let k = rec.predictions.len().max(rec.gts.len());
        let mut perms = Vec::new();
        lex_perms(k, &mut Vec::new(), &mut perms);
        let score = |perm: &Vec<usize>, i: usize| {
            if i < rec.predictions.len() && perm[i] < rec.gts.len() {
                pi(&rec.predictions[i].1, &rec.gts[perm[i]].1)
            } else {
                0.0
            }
        };
        let mut best: Option<(f64, &Vec<usize>)> = None;
        for p in &perms {
            let total: f64 = (0..k).map(|i| score(p, i)).sum();
            if best.map_or(true, |(b, _)| total > b) {
                best = Some((total, p));
            }
        }
        let perm = best.unwrap().1;
        for (i, (_, h)) in rec.predictions.iter().enumerate() {
            pooled.push((h.max(), o_hit(score(perm, i), 0.5)));
        }
    }
    let aps: Vec<f64> = per_class.values().filter(|(_, n)| *n > 0).map(|(d, n)| o_ap_points(d, *n).0).collect();
    let rate = |t: f64| ious.iter().filter(|&&v| o_hit(v, t)).count() as f64 / ious.len() as f64;
    OMulti {
        cap: aps.iter().sum::<f64>() / aps.len() as f64,
        piap: o_ap_points(&pooled, positives).0,
        ciou: [rate(0.1), rate(0.3), rate(0.5)],
        auc: o_auc_of(&ious),
    }
}

pub fn o_bbox(mask: &[bool], width: usize) -> Option<(usize, usize, usize, usize)> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let mut any = false;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            any = true;
            let (y, x) = (i / width, i % width);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    any.then(|| (x0, y0, x1 - x0 + 1, y1 - y0 + 1))
}

// ---------------------------------------------------------------------------
// Randomized 16x16 cases

pub const SIDE: usize = 16;

fn rect<R: Rng>(r: &mut R) -> (usize, usize, usize, usize) {
    let w = r.gen_range(2..=8);
    let h = r.gen_range(2..=8);
    (r.gen_range(0..=SIDE - w), r.gen_range(0..=SIDE - h), w, h)
}

fn rect_mask((x, y, w, h): (usize, usize, usize, usize)) -> Vec<bool> {
    (0..SIDE * SIDE).map(|i| (y..y + h).contains(&(i / SIDE)) && (x..x + w).contains(&(i % SIDE))).collect()
}

/// Values on a 1/20 grid so threshold ties actually occur.
fn heat_near<R: Rng>(r: &mut R, target: Option<(usize, usize, usize, usize)>) -> LocalizationHeatmap {
    let region = match target {
        Some((x, y, w, h)) if r.gen_bool(0.75) => {
            let dx = r.gen_range(-2i64..=2);
            let dy = r.gen_range(-2i64..=2);
            let nx = (x as i64 + dx).clamp(0, (SIDE - w) as i64) as usize;
            let ny = (y as i64 + dy).clamp(0, (SIDE - h) as i64) as usize;
            (nx, ny, w, h)
        }
        _ => rect(r),
    };
    let inside = rect_mask(region);
    let hi = r.gen_range(10..=20);
    let values = inside
        .iter()
        .map(|&on| if on { r.gen_range(8..=hi) as f64 / 20.0 } else { r.gen_range(0..=9) as f64 / 20.0 })
        .collect();
    LocalizationHeatmap::new(SIDE, SIDE, values).unwrap()
}

pub struct Case {
    pub records: Vec<EvalRecord>,
    pub multi: Vec<MultiSourceRecord>,
}

pub fn random_case(seed: u64) -> Case {
    let mut r = rng::stream(seed, "metric-case");
    let mut records = Vec::new();
    for g in 0..6 {
        let pairings = if g == 0 { 2 } else { r.gen_range(1..=3) };
        for p in 0..pairings {
            let pairing = match r.gen_range(0..10) {
                0..=5 => Pairing::Matched,
                6..=7 => Pairing::Mismatched,
                _ => Pairing::Silent,
            };
            let gt_rect = rect(&mut r);
            let (gt, target) = if pairing == Pairing::Matched {
                (rect_mask(gt_rect), Some(gt_rect))
            } else {
                (vec![false; SIDE * SIDE], None)
            };
            let heat = heat_near(&mut r, target);
            let id = format!("g{g}-p{p}");
            records.push(EvalRecord::new(id, format!("g{g}"), Some(p), pairing, heat, gt).unwrap());
        }
    }
    if !records.iter().any(|x| x.pairing == Pairing::Matched) {
        records[0].pairing = Pairing::Matched;
    }
    if records.iter().all(|x| x.pairing == Pairing::Matched) {
        let last = records.len() - 1;
        records[last].pairing = Pairing::Silent;
    }
    let mut multi = Vec::new();
    for m in 0..6 {
        let k = r.gen_range(1..=4usize);
        let mut classes: Vec<usize> = (0..6).collect();
        for i in 0..classes.len() {
            let j = r.gen_range(i..classes.len());
            classes.swap(i, j);
        }
        let gts: Vec<(usize, Vec<bool>, (usize, usize, usize, usize))> =
            classes[..k].iter().map(|&c| {
                let b = rect(&mut r);
                (c, rect_mask(b), b)
            }).collect();
        let np = r.gen_range(1..=4usize);
        let mut predictions = Vec::new();
        for i in 0..np {
            let target = gts.get((i + r.gen_range(0..2)) % k).map(|g| g.2);
            let class = if r.gen_bool(0.7) { gts[i % k].0 } else { classes[4 + i % 2] };
            if predictions.iter().any(|(c, _)| *c == class) {
                continue;
            }
            predictions.push((class, heat_near(&mut r, target)));
        }
        multi.push(MultiSourceRecord {
            image_id: format!("m{m}"),
            predictions,
            gts: gts.into_iter().map(|(c, m, _)| (c, m)).collect(),
        });
    }
    Case { records, multi }
}

/// Every metric against its twin on one case; returns a description of each disagreement.
pub fn oracle_mismatches(case: &Case) -> Vec<String> {
    use avclip::metrics::*;
    let mut bad = Vec::new();
    let mut exact = |name: &str, a: f64, b: f64| {
        if a != b {
            bad.push(format!("{name}: {a} vs oracle {b}"));
        }
    };
    let modes = [(ThresholdMode::FIXED, OMode::Fixed(0.5), ""), (ThresholdMode::ADAPTIVE, OMode::Adaptive(0.5), "_adaptive")];
    let recs = &case.records;
    let matched: Vec<EvalRecord> = recs.iter().filter(|r| r.pairing == Pairing::Matched).cloned().collect();
    for (m, om, suffix) in modes {
        for t in [0.1, 0.3, 0.5, 0.7] {
            exact(&format!("ciou{suffix}@{t}"), ciou_success(&matched, t, m).unwrap(), o_ciou(&matched, t, om));
        }
        exact(&format!("loc_acc{suffix}"), loc_acc(recs, m).unwrap(), o_loc_acc(recs, om));
        let i = interactive_metrics(recs).unwrap();
        let (oi, _) = o_interactive(recs, om);
        exact(&format!("iiou{suffix}"), if suffix.is_empty() { i.iiou } else { i.iiou_adaptive }, oi);
    }
    let ms = multisource_metrics(&case.multi, ThresholdMode::FIXED).unwrap();
    let om = o_multisource(&case.multi, OMode::Fixed(0.5));
    exact("ciou_10", ms.ciou_10, om.ciou[0]);
    exact("ciou_30", ms.ciou_30, om.ciou[1]);
    exact("ciou_50", ms.ciou_50, om.ciou[2]);
    for r in recs {
        let w = r.heatmap.width;
        let p = r.prediction(ThresholdMode::FIXED);
        let got = mask_to_bbox(&p, w).map(|b| (b.x, b.y, b.w, b.h));
        if got != o_bbox(&p, w) {
            bad.push(format!("bbox of {}: {got:?} vs oracle {:?}", r.id, o_bbox(&p, w)));
        }
    }
    let mut close = |name: &str, a: f64, b: f64| {
        if !((a - b).abs() <= 1e-9) {
            bad.push(format!("{name}: {a} vs oracle {b}"));
        }
    };
    for (m, om, suffix) in modes {
        close(&format!("auc{suffix}"), auc(&matched, m).unwrap(), o_auc(&matched, om));
        let (mi, f) = segmentation_metrics(&matched, m, DEFAULT_BETA2).unwrap();
        let (omi, of) = o_segmentation(&matched, om, DEFAULT_BETA2);
        close(&format!("miou{suffix}"), mi, omi);
        close(&format!("fscore{suffix}"), f, of);
        let d = detection_pr(recs, m).unwrap();
        let (oap, of1) = o_detection(recs, om);
        close(&format!("ap{suffix}"), d.ap, oap);
        close(&format!("max_f1{suffix}"), d.max_f1, of1);
        let i = interactive_metrics(recs).unwrap();
        let (_, oa) = o_interactive(recs, om);
        close(&format!("iauc{suffix}"), if suffix.is_empty() { i.iauc } else { i.iauc_adaptive }, oa);
    }
    close("cap", ms.cap, om.cap);
    close("piap", ms.piap, om.piap);
    close("multi_auc", ms.auc, om.auc);
    bad
}

/// Finite-difference checks on a B = 3 batch for each term alone and both totals.
pub fn gradient_suites(fx: &Fixture) -> Vec<(&'static str, GradCheck)> {
    use avclip::grounding::MaskMode;
    use avclip::losses::LossFlags;
    let state = perturbed_state(&fx.model, 5);
    let mut samples: Vec<PreparedSample> = fx.train[..3].to_vec();
    for s in samples.iter_mut() {
        let idx: usize = s.id.trim_start_matches("train-").parse().unwrap();
        let text = format!("{} circle", ["red", "green", "blue"][idx % 3]);
        s.caption = Some(avclip::llm_guidance::caption_embedding(&fx.model.stack, &text).unwrap().values().to_vec());
    }
    let batch: Vec<&PreparedSample> = samples.iter().collect();
    let only = |acl_i, acl_f, reg, use_captions| ObjectiveSettings {
        flags: LossFlags { acl_i, acl_f, reg },
        use_captions,
        mask_mode: MaskMode::Relaxed,
        ..ObjectiveSettings::default()
    };
    let suites = [
        ("acl_i", only(true, false, false, false)),
        ("acl_f", only(false, true, false, false)),
        ("reg", only(false, false, true, false)),
        ("acl_c", only(false, false, false, true)),
        ("total", only(true, true, true, false)),
        ("total_with_captions", only(true, true, true, true)),
    ];
    suites.into_iter().map(|(n, s)| (n, check_gradients(&fx.model, &state, &batch, &s, 1e-3, 1e-6))).collect()
}

/// Same relative file list with byte-identical contents.
pub fn directories_identical(a: &std::path::Path, b: &std::path::Path) -> bool {
    let list = |root: &std::path::Path| {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p.strip_prefix(root).unwrap().to_path_buf());
                }
            }
        }
        out.sort();
        out
    };
    let (la, lb) = (list(a), list(b));
    la == lb && la.iter().all(|p| std::fs::read(a.join(p)).unwrap() == std::fs::read(b.join(p)).unwrap())
}
