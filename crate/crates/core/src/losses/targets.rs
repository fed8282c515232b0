//! FCOS-style dense targets.
//!
//! A location of level `l` with anchor point `((x + ½)·s, (y + ½)·s)` is
//! positive for an instance when the anchor lies strictly inside the box and
//! the largest of its four distances falls in the level's regression range.
//! Several candidates resolve to the smallest box. The rule is applied per
//! location, so a large box whose distances straddle a range bound can be
//! positive on two adjacent levels.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array1, Array2};

use crate::error::Result;
use crate::maskcodec::PcaBasis;
use crate::model::{ModelConfig, LEVEL_STRIDES};
use crate::scenegen::{depth_is_valid, Sample};

/// Detection target of one positive location.
#[derive(Clone, Debug, PartialEq)]
pub struct DetTarget {
    pub class_id: usize,
    /// Left, top, right, bottom distances from the anchor to the box edges.
    pub dists: [f64; 4],
    pub centerness: f64,
}

/// Counts how often each kind of ground truth has been read.
#[derive(Debug, Default)]
pub struct TargetAccess {
    detection: AtomicUsize,
    seg: AtomicUsize,
    codes: AtomicUsize,
    depth: AtomicUsize,
    inst_depth: AtomicUsize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AccessCounts {
    pub detection: usize,
    pub seg: usize,
    pub codes: usize,
    pub depth: usize,
    pub inst_depth: usize,
}

impl AccessCounts {
    pub fn semantic(&self) -> usize {
        self.detection + self.seg + self.codes
    }

    pub fn geometric(&self) -> usize {
        self.depth + self.inst_depth
    }
}

fn bump(c: &AtomicUsize) {
    c.fetch_add(1, Ordering::Relaxed);
}

#[derive(Debug)]
pub struct LevelTargets {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    locations: Vec<usize>,
    instances: Vec<usize>,
    det: Vec<DetTarget>,
}

impl LevelTargets {
    /// Flat indices (`y·W + x`) of the positive locations.
    pub fn locations(&self) -> &[usize] {
        &self.locations
    }

    /// Instance assigned to each positive location.
    pub fn instances(&self) -> &[usize] {
        &self.instances
    }

    pub fn num_positives(&self) -> usize {
        self.locations.len()
    }
}

/// Training targets of one sample for every task.
#[derive(Debug)]
pub struct DenseTargets {
    pub levels: Vec<LevelTargets>,
    seg: Array2<u8>,
    depth: Array2<f32>,
    valid: Array2<bool>,
    codes: Vec<Option<Array1<f64>>>,
    inst_depths: Vec<f64>,
    /// Instances that matched no location at any level.
    pub dropped_instances: usize,
    access: TargetAccess,
}

impl DenseTargets {
    pub fn num_positives(&self) -> usize {
        self.levels.iter().map(LevelTargets::num_positives).sum()
    }

    pub fn detection(&self, level: usize) -> &[DetTarget] {
        bump(&self.access.detection);
        &self.levels[level].det
    }

    pub fn seg(&self) -> &Array2<u8> {
        bump(&self.access.seg);
        &self.seg
    }

    pub fn depth(&self) -> (&Array2<f32>, &Array2<bool>) {
        bump(&self.access.depth);
        (&self.depth, &self.valid)
    }

    /// Mask code of every positive location of `level`; `None` without a basis.
    pub fn codes(&self, level: usize) -> Option<Vec<&Array1<f64>>> {
        bump(&self.access.codes);
        self.levels[level].instances.iter().map(|&i| self.codes[i].as_ref()).collect()
    }

    pub fn inst_depths(&self, level: usize) -> Vec<f64> {
        bump(&self.access.inst_depth);
        self.levels[level].instances.iter().map(|&i| self.inst_depths[i]).collect()
    }

    pub fn access(&self) -> AccessCounts {
        let a = &self.access;
        AccessCounts {
            detection: a.detection.load(Ordering::Relaxed),
            seg: a.seg.load(Ordering::Relaxed),
            codes: a.codes.load(Ordering::Relaxed),
            depth: a.depth.load(Ordering::Relaxed),
            inst_depth: a.inst_depth.load(Ordering::Relaxed),
        }
    }
}

pub fn centerness([l, t, r, b]: [f64; 4]) -> f64 {
    ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
}

/// Builds dense targets for `sample`. Mask codes are produced only when a
/// basis is given.
pub fn assign_targets(sample: &Sample, cfg: &ModelConfig, basis: Option<&PcaBasis>) -> Result<DenseTargets> {
    let (h, w) = (sample.height(), sample.width());
    let mut used = vec![false; sample.instances.len()];
    let mut levels = Vec::with_capacity(LEVEL_STRIDES.len());
    for (li, &stride) in LEVEL_STRIDES.iter().enumerate() {
        let (lh, lw) = (h / stride, w / stride);
        let (lo, hi) = cfg.level_range(li);
        let mut lt = LevelTargets { stride, height: lh, width: lw, locations: vec![], instances: vec![], det: vec![] };
        for y in 0..lh {
            for x in 0..lw {
                let (px, py) = ((x as f64 + 0.5) * stride as f64, (y as f64 + 0.5) * stride as f64);
                let mut best: Option<(f64, usize, [f64; 4])> = None;
                for (gi, inst) in sample.instances.iter().enumerate() {
                    let b = &inst.bbox;
                    let d = [px - b.x0, py - b.y0, b.x1 - px, b.y1 - py];
                    if d.iter().any(|&v| v <= 0.0) {
                        continue;
                    }
                    let m = d.iter().cloned().fold(f64::MIN, f64::max);
                    if !(m > lo && m <= hi) {
                        continue;
                    }
                    if best.map_or(true, |(area, _, _)| b.area() < area) {
                        best = Some((b.area(), gi, d));
                    }
                }
                if let Some((_, gi, d)) = best {
                    used[gi] = true;
                    lt.locations.push(y * lw + x);
                    lt.instances.push(gi);
                    lt.det.push(DetTarget {
                        class_id: sample.instances[gi].class_id,
                        dists: d,
                        centerness: centerness(d),
                    });
                }
            }
        }
        levels.push(lt);
    }
    let dropped = used.iter().filter(|&&u| !u).count();
    if dropped > 0 {
        log::warn!("sample {}: {dropped} instance(s) matched no level range", sample.id);
    }
    let codes = match basis {
        Some(b) => sample
            .instances
            .iter()
            .map(|i| b.encode_mask(&i.mask, &i.bbox).map(Some))
            .collect::<Result<Vec<_>>>()?,
        None => vec![None; sample.instances.len()],
    };
    Ok(DenseTargets {
        levels,
        seg: sample.seg.clone(),
        depth: sample.depth.clone(),
        valid: sample.depth.mapv(depth_is_valid),
        codes,
        inst_depths: sample.instances.iter().map(|i| i.median_depth as f64).collect(),
        dropped_instances: dropped,
        access: TargetAccess::default(),
    })
}
