use crate::attacks::argmax_map;
use crate::error::Result;
use crate::maskcodec::PcaBasis;
use crate::metrics::{coco_thresholds, ApAccumulator, ApKind, ConfusionMatrix, DepthAccumulator, InstanceDepthAccumulator, Metric, MetricReport};
use crate::model::{decode_detections, Checkpoint, DecodeParams, DenseOutputs};
use crate::scenegen::{Sample, SceneSpec};
use crate::tasks::{Task, TaskSet};

/// Matching threshold for instance-depth evaluation.
pub const INSTANCE_DEPTH_IOU: f64 = 0.5;

/// Mergeable accumulator of every metric a task set supports.
#[derive(Clone, Debug)]
pub struct Evaluator {
    tasks: TaskSet,
    stuff: Vec<String>,
    things: Vec<String>,
    count: usize,
    ap_box: ApAccumulator,
    ap_mask: ApAccumulator,
    seg: ConfusionMatrix,
    depth: DepthAccumulator,
    inst_depth: InstanceDepthAccumulator,
}

impl Evaluator {
    pub fn new(tasks: TaskSet, scene: &SceneSpec) -> Self {
        let nt = scene.thing_classes.len();
        Evaluator {
            tasks,
            stuff: scene.stuff_classes.clone(),
            things: scene.thing_classes.iter().map(|t| t.name.clone()).collect(),
            count: 0,
            ap_box: ApAccumulator::new(nt, ApKind::Box, coco_thresholds()),
            ap_mask: ApAccumulator::new(nt, ApKind::Mask, coco_thresholds()),
            seg: ConfusionMatrix::new(scene.num_classes()),
            depth: DepthAccumulator::default(),
            inst_depth: InstanceDepthAccumulator::default(),
        }
    }

    /// Adds one image. `index` must be unique across merged evaluators.
    pub fn add(&mut self, index: usize, sample: &Sample, out: &DenseOutputs, basis: Option<&PcaBasis>, decode: &DecodeParams) {
        self.count += 1;
        if self.tasks.contains(Task::Od) {
            let dets = decode_detections(out, basis.filter(|_| self.tasks.contains(Task::Is)), decode);
            self.ap_box.add_image(index, &dets, &sample.instances);
            if self.tasks.contains(Task::Is) {
                self.ap_mask.add_image(index, &dets, &sample.instances);
            }
            if self.tasks.contains(Task::Id) {
                self.inst_depth.add(&dets, &sample.instances, INSTANCE_DEPTH_IOU);
            }
        }
        if let (true, Some(logits)) = (self.tasks.contains(Task::Ss), &out.seg_logits) {
            self.seg.add(&argmax_map(logits), &sample.seg);
        }
        if let (true, Some(d)) = (self.tasks.contains(Task::D), &out.depth_map) {
            self.depth.add(d, &sample.depth, None);
        }
    }

    pub fn merge(&mut self, other: Evaluator) {
        self.count += other.count;
        self.ap_box.merge(other.ap_box);
        self.ap_mask.merge(other.ap_mask);
        self.seg.merge(&other.seg);
        self.depth.merge(&other.depth);
        self.inst_depth.merge(&other.inst_depth);
    }

    pub fn finish(&self) -> MetricReport {
        let mut rep = MetricReport { num_samples: self.count, ..Default::default() };
        let t = self.tasks;
        if t.contains(Task::Od) {
            let (mean, per) = self.ap_box.finish();
            rep.values.insert(Metric::MapBox, mean);
            for (name, ap) in self.things.iter().zip(per) {
                rep.per_class.insert(format!("ap_box/{name}"), ap);
            }
        }
        if t.contains(Task::Is) {
            let (mean, per) = self.ap_mask.finish();
            rep.values.insert(Metric::MapMask, mean);
            for (name, ap) in self.things.iter().zip(per) {
                rep.per_class.insert(format!("ap_mask/{name}"), ap);
            }
        }
        if t.contains(Task::Ss) {
            rep.values.insert(Metric::Miou, self.seg.miou());
            for (c, name) in self.stuff.iter().chain(&self.things).enumerate() {
                rep.per_class.insert(format!("iou/{name}"), self.seg.iou(c));
            }
        }
        if t.contains(Task::D) {
            rep.values.insert(Metric::DepthRmse, self.depth.rmse());
            rep.values.insert(Metric::DepthAbsRel, self.depth.abs_rel());
        }
        if t.contains(Task::Id) {
            rep.values.insert(Metric::IdL1, self.inst_depth.l1());
            rep.values.insert(Metric::IdAbsRel, self.inst_depth.abs_rel());
        }
        rep
    }
}

/// Metrics of precomputed outputs, in sample order.
pub fn evaluate_outputs<'a>(
    tasks: TaskSet,
    scene: &SceneSpec,
    basis: Option<&PcaBasis>,
    decode: &DecodeParams,
    pairs: impl IntoIterator<Item = (&'a Sample, &'a DenseOutputs)>,
) -> MetricReport {
    let mut ev = Evaluator::new(tasks, scene);
    for (i, (s, o)) in pairs.into_iter().enumerate() {
        ev.add(i, s, o, basis, decode);
    }
    ev.finish()
}

/// Runs the checkpoint over `samples` and reports every metric of its task set.
pub fn evaluate(ckpt: &Checkpoint, scene: &SceneSpec, samples: &[Sample], decode: &DecodeParams) -> Result<MetricReport> {
    let mut ev = Evaluator::new(ckpt.tasks, scene);
    for (i, s) in samples.iter().enumerate() {
        let out = ckpt.model.predict(&s.image, ckpt.tasks)?;
        ev.add(i, s, &out, ckpt.basis.as_ref(), decode);
    }
    Ok(ev.finish())
}
