//! Task metrics and the derived attack statistics.
//!
//! Accumulators are mergeable so evaluation can be sharded. Metrics that are
//! undefined for the data at hand are `None`, never zero or NaN.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::Detection;
use crate::scenegen::{depth_is_valid, InstanceAnnotation};
use crate::tasks::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

/// Performance retained after an attack: `after/before` for higher-better
/// metrics and `before/after` for lower-better ones.
pub fn metric_ratio(before: f64, after: f64, direction: Direction) -> Option<f64> {
    let (num, den) = match direction {
        Direction::HigherBetter => (after, before),
        Direction::LowerBetter => (before, after),
    };
    (den != 0.0 && num.is_finite() && den.is_finite()).then(|| num / den)
}

/// Multi-task performance `(100/T)·Σ (−1)^{l_i}·(M_i − S_i)/S_i` over
/// `(multi-task value, single-task value, direction)` triples.
pub fn delta_mtl(entries: &[(f64, f64, Direction)]) -> Option<f64> {
    if entries.is_empty() || entries.iter().any(|e| e.1 == 0.0) {
        return None;
    }
    let sum: f64 = entries
        .iter()
        .map(|&(m, s, d)| {
            let rel = (m - s) / s;
            match d {
                Direction::HigherBetter => rel,
                Direction::LowerBetter => -rel,
            }
        })
        .sum();
    Some(100.0 * sum / entries.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApKind {
    Box,
    Mask,
}

/// COCO IoU thresholds 0.50:0.05:0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn region_iou(det: &Detection, gt: &InstanceAnnotation, kind: ApKind) -> f64 {
    match kind {
        ApKind::Box => det.bbox.iou(&gt.bbox),
        ApKind::Mask => det.mask.as_ref().map_or(0.0, |m| mask_iou(m, &gt.mask)),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct ClassRecord {
    num_gt: usize,
    /// `(score, image, rank within image, matched per threshold)`.
    dets: Vec<(f64, usize, usize, Vec<bool>)>,
}

/// Per-class precision/recall accumulator for COCO-style AP.
#[derive(Clone, Debug, PartialEq)]
pub struct ApAccumulator {
    kind: ApKind,
    thresholds: Vec<f64>,
    classes: Vec<ClassRecord>,
}

impl ApAccumulator {
    pub fn new(num_classes: usize, kind: ApKind, thresholds: Vec<f64>) -> Self {
        ApAccumulator { kind, thresholds, classes: vec![ClassRecord::default(); num_classes] }
    }

    /// Greedy matching of one image: detections by descending score (ties by
    /// input order) each take the unmatched ground truth of their class with
    /// the highest IoU at or above the threshold.
    pub fn add_image(&mut self, image: usize, dets: &[Detection], gts: &[InstanceAnnotation]) {
        for g in gts {
            if let Some(rec) = self.classes.get_mut(g.class_id) {
                rec.num_gt += 1;
            }
        }
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
        let mut taken = vec![vec![false; gts.len()]; self.thresholds.len()];
        for (rank, &di) in order.iter().enumerate() {
            let d = &dets[di];
            if d.class_id >= self.classes.len() {
                continue;
            }
            let ious: Vec<f64> = gts
                .iter()
                .map(|g| if g.class_id == d.class_id { region_iou(d, g, self.kind) } else { -1.0 })
                .collect();
            let mut hits = Vec::with_capacity(self.thresholds.len());
            for (ti, &thr) in self.thresholds.iter().enumerate() {
                let mut best: Option<usize> = None;
                for (gi, &iou) in ious.iter().enumerate() {
                    if iou >= thr && !taken[ti][gi] && best.map_or(true, |b| iou > ious[b]) {
                        best = Some(gi);
                    }
                }
                if let Some(b) = best {
                    taken[ti][b] = true;
                }
                hits.push(best.is_some());
            }
            self.classes[d.class_id].dets.push((d.score, image, rank, hits));
        }
    }

    pub fn merge(&mut self, other: ApAccumulator) {
        for (a, b) in self.classes.iter_mut().zip(other.classes) {
            a.num_gt += b.num_gt;
            a.dets.extend(b.dets);
        }
    }

    /// AP of each class (`None` without ground truth) and their mean.
    pub fn finish(&self) -> (Option<f64>, Vec<Option<f64>>) {
        let per_class: Vec<Option<f64>> = self
            .classes
            .iter()
            .map(|rec| {
                if rec.num_gt == 0 {
                    return None;
                }
                let mut dets = rec.dets.clone();
                dets.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
                let aps: Vec<f64> = (0..self.thresholds.len())
                    .map(|ti| interpolated_ap(dets.iter().map(|d| d.3[ti]), rec.num_gt))
                    .collect();
                Some(aps.iter().sum::<f64>() / aps.len().max(1) as f64)
            })
            .collect();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        (mean, per_class)
    }
}

/// 101-point interpolated AP of a ranked hit sequence.
pub fn interpolated_ap(hits: impl Iterator<Item = bool>, num_gt: usize) -> f64 {
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for h in hits {
        if h {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        if let Some(i) = recall.iter().position(|&x| x >= r - 1e-12) {
            sum += precision[i];
        }
    }
    sum / 101.0
}

/// Mean AP over images given as `(detections, ground truth)` pairs.
pub fn average_precision(
    images: &[(Vec<Detection>, Vec<InstanceAnnotation>)],
    num_classes: usize,
    kind: ApKind,
    thresholds: &[f64],
) -> (Option<f64>, Vec<Option<f64>>) {
    let mut acc = ApAccumulator::new(num_classes, kind, thresholds.to_vec());
    for (i, (d, g)) in images.iter().enumerate() {
        acc.add_image(i, d, g);
    }
    acc.finish()
}

/// Confusion matrix `counts[gt][pred]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn add(&mut self, pred: &Array2<u8>, gt: &Array2<u8>) {
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            let (p, g) = (p as usize, g as usize);
            if p < self.num_classes && g < self.num_classes {
                self.counts[g * self.num_classes + p] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    /// IoU of class `c`; `None` when the class is absent from the ground truth.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let n = self.num_classes;
        let tp = self.counts[c * n + c];
        let gt: u64 = (0..n).map(|p| self.counts[c * n + p]).sum();
        let pred: u64 = (0..n).map(|g| self.counts[g * n + c]).sum();
        (gt > 0).then(|| tp as f64 / (gt + pred - tp) as f64)
    }

    pub fn miou(&self) -> Option<f64> {
        let ious: Vec<f64> = (0..self.num_classes).filter_map(|c| self.iou(c)).collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// Mean IoU over the classes present in `gt`.
pub fn miou(pred: &Array2<u8>, gt: &Array2<u8>, num_classes: usize) -> Option<f64> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, gt);
    cm.miou()
}

/// Pooled squared and relative errors over valid pixels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DepthAccumulator {
    sq: f64,
    rel: f64,
    n: usize,
}

impl DepthAccumulator {
    /// Adds the pixels where the ground truth is valid and `mask` (if given) holds.
    pub fn add(&mut self, pred: &Array2<f32>, gt: &Array2<f32>, mask: Option<&Array2<bool>>) {
        for (i, (&p, &g)) in pred.iter().zip(gt.iter()).enumerate() {
            if !depth_is_valid(g) || mask.is_some_and(|m| !m.as_slice().map_or(false, |s| s[i])) {
                continue;
            }
            let e = p as f64 - g as f64;
            self.sq += e * e;
            self.rel += e.abs() / g as f64;
            self.n += 1;
        }
    }

    pub fn merge(&mut self, o: &DepthAccumulator) {
        self.sq += o.sq;
        self.rel += o.rel;
        self.n += o.n;
    }

    pub fn rmse(&self) -> Option<f64> {
        (self.n > 0).then(|| (self.sq / self.n as f64).sqrt())
    }

    pub fn abs_rel(&self) -> Option<f64> {
        (self.n > 0).then(|| self.rel / self.n as f64)
    }
}

/// `(RMSE, abs rel)` over pixels with valid ground truth.
pub fn depth_metrics(pred: &Array2<f32>, gt: &Array2<f32>) -> Option<(f64, f64)> {
    let mut acc = DepthAccumulator::default();
    acc.add(pred, gt, None);
    Some((acc.rmse()?, acc.abs_rel()?))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InstanceDepthAccumulator {
    abs: f64,
    rel: f64,
    n: usize,
}

impl InstanceDepthAccumulator {
    /// Greedy by descending score: each detection with a depth takes the
    /// unmatched ground truth of highest box IoU, if that IoU ≥ `matching_iou`.
    pub fn add(&mut self, dets: &[Detection], gts: &[InstanceAnnotation], matching_iou: f64) {
        let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].median_depth.is_some()).collect();
        order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
        let mut taken = vec![false; gts.len()];
        for di in order {
            let d = &dets[di];
            let best = gts
                .iter()
                .enumerate()
                .filter(|(gi, _)| !taken[*gi])
                .map(|(gi, g)| (gi, d.bbox.iou(&g.bbox)))
                .filter(|&(_, iou)| iou >= matching_iou)
                .fold(None, |acc: Option<(usize, f64)>, x| if acc.map_or(true, |a| x.1 > a.1) { Some(x) } else { acc });
            if let Some((gi, _)) = best {
                taken[gi] = true;
                let (p, g) = (d.median_depth.unwrap() as f64, gts[gi].median_depth as f64);
                self.abs += (p - g).abs();
                self.rel += (p - g).abs() / g;
                self.n += 1;
            }
        }
    }

    pub fn merge(&mut self, o: &InstanceDepthAccumulator) {
        self.abs += o.abs;
        self.rel += o.rel;
        self.n += o.n;
    }

    pub fn l1(&self) -> Option<f64> {
        (self.n > 0).then(|| self.abs / self.n as f64)
    }

    pub fn abs_rel(&self) -> Option<f64> {
        (self.n > 0).then(|| self.rel / self.n as f64)
    }

    pub fn matches(&self) -> usize {
        self.n
    }
}

/// `(l1, abs rel)` of matched instance depths; `None` without matches.
pub fn instance_depth_metrics(dets: &[Detection], gts: &[InstanceAnnotation], matching_iou: f64) -> Option<(f64, f64)> {
    let mut acc = InstanceDepthAccumulator::default();
    acc.add(dets, gts, matching_iou);
    Some((acc.l1()?, acc.abs_rel()?))
}

/// Class IoU plus depth RMSE over the ground-truth region of one class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegionAccumulator {
    inter: u64,
    union: u64,
    gt_pixels: u64,
    depth: DepthAccumulator,
}

impl RegionAccumulator {
    pub fn add(&mut self, pred_seg: &Array2<u8>, pred_depth: Option<&Array2<f32>>, gt_seg: &Array2<u8>, gt_depth: &Array2<f32>, class: u8) {
        for (&p, &g) in pred_seg.iter().zip(gt_seg.iter()) {
            let (p, g) = (p == class, g == class);
            self.inter += (p && g) as u64;
            self.union += (p || g) as u64;
            self.gt_pixels += g as u64;
        }
        if let Some(d) = pred_depth {
            let region = gt_seg.mapv(|g| g == class);
            self.depth.add(d, gt_depth, Some(&region));
        }
    }

    pub fn merge(&mut self, o: &RegionAccumulator) {
        self.inter += o.inter;
        self.union += o.union;
        self.gt_pixels += o.gt_pixels;
        self.depth.merge(&o.depth);
    }

    pub fn iou(&self) -> Option<f64> {
        (self.gt_pixels > 0).then(|| self.inter as f64 / self.union as f64)
    }

    pub fn rmse(&self) -> Option<f64> {
        self.depth.rmse()
    }
}

/// `(IoU of target_class, depth RMSE over its ground-truth region)`.
pub fn class_region_metrics(
    pred_seg: &Array2<u8>,
    pred_depth: &Array2<f32>,
    gt_seg: &Array2<u8>,
    gt_depth: &Array2<f32>,
    target_class: u8,
) -> (Option<f64>, Option<f64>) {
    let mut acc = RegionAccumulator::default();
    acc.add(pred_seg, Some(pred_depth), gt_seg, gt_depth, target_class);
    (acc.iou(), acc.rmse())
}

/// Mean width/height of the boxes of `class_id` scoring at least `min_score`.
pub fn mean_aspect_ratio<'a>(dets: impl IntoIterator<Item = &'a Detection>, class_id: usize, min_score: f64) -> Option<f64> {
    let ratios: Vec<f64> = dets
        .into_iter()
        .filter(|d| d.class_id == class_id && d.score >= min_score)
        .filter_map(|d| d.bbox.aspect_ratio())
        .collect();
    (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Per-class mean of box width/height, for plain boxes.
pub fn mean_box_aspect(boxes: &[BBox]) -> Option<f64> {
    let r: Vec<f64> = boxes.iter().filter_map(BBox::aspect_ratio).collect();
    (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
}

/// Headline metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MapBox,
    MapMask,
    Miou,
    DepthRmse,
    DepthAbsRel,
    IdL1,
    IdAbsRel,
}

impl Metric {
    pub const ALL: [Metric; 7] =
        [Metric::MapBox, Metric::MapMask, Metric::Miou, Metric::DepthRmse, Metric::DepthAbsRel, Metric::IdL1, Metric::IdAbsRel];

    pub fn name(self) -> &'static str {
        match self {
            Metric::MapBox => "map_box",
            Metric::MapMask => "map_mask",
            Metric::Miou => "miou",
            Metric::DepthRmse => "depth_rmse",
            Metric::DepthAbsRel => "depth_abs_rel",
            Metric::IdL1 => "id_l1",
            Metric::IdAbsRel => "id_abs_rel",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            Metric::MapBox | Metric::MapMask | Metric::Miou => Direction::HigherBetter,
            _ => Direction::LowerBetter,
        }
    }

    pub fn task(self) -> Task {
        match self {
            Metric::MapBox => Task::Od,
            Metric::MapMask => Task::Is,
            Metric::Miou => Task::Ss,
            Metric::DepthRmse | Metric::DepthAbsRel => Task::D,
            Metric::IdL1 | Metric::IdAbsRel => Task::Id,
        }
    }

    /// The metric reported for a task in ratio plots.
    pub fn primary(task: Task) -> Metric {
        match task {
            Task::Od => Metric::MapBox,
            Task::Ss => Metric::Miou,
            Task::Is => Metric::MapMask,
            Task::D => Metric::DepthRmse,
            Task::Id => Metric::IdAbsRel,
        }
    }

    pub fn from_name(s: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// All metrics of one evaluation run. Per-class entries are keyed
/// `"<family>/<class name>"`, for example `"ap_box/person"`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_samples: usize,
    pub values: BTreeMap<Metric, Option<f64>>,
    pub per_class: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    run: String,
    metric: String,
    direction: Direction,
    value: Option<f64>,
}

impl MetricReport {
    pub fn get(&self, m: Metric) -> Option<f64> {
        self.values.get(&m).copied().flatten()
    }

    pub fn has(&self, m: Metric) -> bool {
        self.values.contains_key(&m)
    }

    /// Ratio of a metric between a clean and an attacked report.
    pub fn ratio(before: &MetricReport, after: &MetricReport, m: Metric) -> Option<f64> {
        metric_ratio(before.get(m)?, after.get(m)?, m.direction())
    }

    fn per_class_direction(key: &str) -> Direction {
        if key.starts_with("ap_") || key.starts_with("iou/") {
            Direction::HigherBetter
        } else {
            Direction::LowerBetter
        }
    }

    pub fn write_csv<W: Write>(&self, run: &str, w: &mut csv::Writer<W>) -> Result<()> {
        w.serialize(CsvRow {
            run: run.into(),
            metric: "num_samples".into(),
            direction: Direction::HigherBetter,
            value: Some(self.num_samples as f64),
        })?;
        for (m, v) in &self.values {
            w.serialize(CsvRow { run: run.into(), metric: m.name().into(), direction: m.direction(), value: *v })?;
        }
        for (k, v) in &self.per_class {
            w.serialize(CsvRow { run: run.into(), metric: k.clone(), direction: Self::per_class_direction(k), value: *v })?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self, run: &str) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        self.write_csv(run, &mut w)?;
        let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Reads every run of a metrics CSV.
    pub fn read_csv<R: Read>(r: R) -> Result<BTreeMap<String, MetricReport>> {
        let mut out: BTreeMap<String, MetricReport> = BTreeMap::new();
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: CsvRow = row?;
            let rep = out.entry(row.run).or_default();
            if row.metric == "num_samples" {
                rep.num_samples = row.value.unwrap_or(0.0) as usize;
            } else if let Some(m) = Metric::from_name(&row.metric) {
                rep.values.insert(m, row.value);
            } else {
                rep.per_class.insert(row.metric, row.value);
            }
        }
        Ok(out)
    }
}
