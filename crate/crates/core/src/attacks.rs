//! Adversarial attacks on a frozen model: untargeted PGD over a loss subset,
//! DAG-style class swapping on the detection head, and semantic category
//! hiding against the segmentation or depth prediction.
//!
//! Perturbation budgets are on the 0-255 scale and applied as `ε/255` to
//! images in `[0, 1]`. Projection rounds toward the clean pixel when an `f32`
//! cannot represent the bound exactly, so the stored image never leaves the
//! ball.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{compute_losses, cross_entropy, rmse, DenseTargets, LossConfig, LossSelector};
use crate::model::{DenseNodes, DenseOutputs, Model};
use crate::scenegen::write_png_rgb;
use crate::tasks::{Task, TaskSet};
use crate::tensor::{sigmoid, Graph, NodeId};

pub const PERTURBATION_MAGIC: &[u8; 4] = b"UPRT";

/// `min(⌊ε⌋ + 4, ⌈1.25·ε⌉)`.
pub fn pgd_iterations(epsilon: f64) -> usize {
    let a = epsilon.floor() + 4.0;
    let b = (1.25 * epsilon).ceil();
    a.min(b).max(0.0) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Bound on the 0-255 scale.
    pub epsilon: f64,
    /// Step on the 0-255 scale.
    pub alpha: f64,
    /// `None` follows [`pgd_iterations`].
    pub iterations: Option<usize>,
    pub loss: LossSelector,
}

impl AttackConfig {
    pub fn new(epsilon: f64, loss: LossSelector) -> Self {
        AttackConfig { epsilon, alpha: 1.0, iterations: None, loss }
    }

    pub fn num_iterations(&self) -> usize {
        self.iterations.unwrap_or_else(|| pgd_iterations(self.epsilon))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.num_iterations() > 0 && !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DagConfig {
    pub c1: usize,
    pub c2: usize,
    pub max_iters: usize,
    /// Step on the `[0, 1]` scale.
    pub gamma: f64,
    /// Minimum top-class probability for a location to enter the target set.
    pub confidence: f64,
    /// Optional ∞-norm bound on the 0-255 scale.
    pub epsilon: Option<f64>,
}

impl DagConfig {
    pub fn new(c1: usize, c2: usize) -> Self {
        DagConfig { c1, c2, max_iters: 150, gamma: 0.5 / 255.0, confidence: 0.3, epsilon: None }
    }

    /// The ∞-norm bound (0-255 scale) the result is guaranteed to satisfy.
    pub fn bound(&self) -> f64 {
        let walk = self.max_iters as f64 * self.gamma * 255.0;
        self.epsilon.map_or(walk, |e| e.min(walk))
    }
}

/// Result of one attack on one image.
#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub adversarial: Array3<f32>,
    /// `adversarial − clean`.
    pub perturbation: Array3<f32>,
    /// Attacked objective at every iterate, the clean image first.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// Bound (0-255 scale) the perturbation satisfies.
    pub epsilon: f64,
    pub clean: DenseOutputs,
    pub attacked: DenseOutputs,
    /// DAG only: `(flipped, initial)` sizes of the target set.
    pub flips: Option<(usize, usize)>,
}

impl AttackOutcome {
    /// Share of the initial DAG target set that flipped; `None` when it was empty.
    pub fn flipped_fraction(&self) -> Option<f64> {
        self.flips.filter(|f| f.1 > 0).map(|(a, b)| a as f64 / b as f64)
    }

    /// `‖255·δ‖∞`.
    pub fn linf(&self) -> f64 {
        self.perturbation.iter().fold(0.0f64, |m, &d| m.max((255.0 * d as f64).abs()))
    }

    /// Checks the ball and range invariants.
    pub fn check(&self, clean: &Array3<f32>) -> Result<()> {
        let mut worst = 0.0f64;
        for (&a, &c) in self.adversarial.iter().zip(clean.iter()) {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Invariant(format!("adversarial pixel {a} outside [0, 1]")));
            }
            worst = worst.max((255.0 * (a as f64 - c as f64)).abs());
        }
        if worst > self.epsilon + 1e-6 {
            return Err(Error::Invariant(format!("perturbation {worst} exceeds bound {}", self.epsilon)));
        }
        Ok(())
    }

    /// Writes `<stem>_adv.png`, `<stem>_delta.f32` and `<stem>_trace.csv`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_png_rgb(&dir.join(format!("{stem}_adv.png")), &self.adversarial)?;
        let p = dir.join(format!("{stem}_delta.f32"));
        fs::write(&p, perturbation_to_bytes(&self.perturbation)).map_err(|e| Error::io(&p, e))?;
        let p = dir.join(format!("{stem}_trace.csv"));
        let mut w = csv::Writer::from_path(&p)?;
        w.write_record(["iteration", "objective"])?;
        for (i, v) in self.trace.iter().enumerate() {
            w.write_record([i.to_string(), v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        Ok(())
    }
}

/// Magic, `u32` channels/height/width, then little-endian `f32` values.
pub fn perturbation_to_bytes(d: &Array3<f32>) -> Vec<u8> {
    let mut out = PERTURBATION_MAGIC.to_vec();
    for n in d.shape() {
        out.extend((*n as u32).to_le_bytes());
    }
    for v in d.iter() {
        out.extend(v.to_le_bytes());
    }
    out
}

pub fn perturbation_from_bytes(bytes: &[u8], origin: &Path) -> Result<Array3<f32>> {
    if bytes.len() < 16 || &bytes[..4] != PERTURBATION_MAGIC {
        return Err(Error::corrupt(origin, "missing perturbation header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let body = &bytes[16..];
    if body.len() != 4 * c * h * w {
        return Err(Error::corrupt(origin, "perturbation length does not match its shape"));
    }
    let vals = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Ok(Array3::from_shape_vec((c, h, w), vals).unwrap())
}

/// A frozen model together with what it was trained for.
#[derive(Clone, Copy)]
pub struct Victim<'a> {
    pub model: &'a Model,
    pub tasks: TaskSet,
    pub loss: &'a LossConfig,
}

impl Victim<'_> {
    pub fn predict(&self, image: &Array3<f32>) -> Result<DenseOutputs> {
        self.model.predict(image, self.tasks)
    }

    /// Forward pass with the image as the only gradient-carrying leaf.
    fn forward(&self, g: &mut Graph<f32>, image: &Array3<f32>, tasks: TaskSet) -> Result<(NodeId, DenseNodes)> {
        let x = g.leaf(image.clone().into_dyn());
        let pass = self.model.forward(g, x, tasks, false)?;
        Ok((x, pass.dense))
    }
}

fn image_grad(g: &Graph<f32>, root: NodeId, x: NodeId) -> Array3<f32> {
    let grads = g.backward(root);
    let shape = g.shape(x).to_vec();
    grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| ArrayD::zeros(IxDyn(&shape)))
        .into_dimensionality()
        .unwrap()
}

/// Nudges `v` one ulp at a time until it lies in `[lo, hi]`.
fn inward(mut v: f32, lo: f64, hi: f64) -> f32 {
    while (v as f64) > hi {
        v = v.next_down();
    }
    while (v as f64) < lo {
        v = v.next_up();
    }
    v
}

/// Projects `x` onto the `ε/255` ball around `clean` intersected with `[0, 1]`.
fn project(x: &mut Array3<f32>, clean: &Array3<f32>, epsilon: f64) {
    let e = epsilon / 255.0;
    Zip::from(x).and(clean).for_each(|v, &c| {
        let lo = (c as f64 - e).max(0.0);
        let hi = (c as f64 + e).min(1.0);
        let p = (*v as f64).clamp(lo, hi);
        *v = inward(p as f32, lo, hi);
    });
}

/// Signed-gradient loop shared by PGD (`ascend`) and hiding (descend).
fn signed_steps(
    clean: &Array3<f32>,
    epsilon: f64,
    alpha: f64,
    iterations: usize,
    ascend: bool,
    mut objective: impl FnMut(&Array3<f32>, bool) -> Result<(f64, Option<Array3<f32>>)>,
) -> Result<(Array3<f32>, Vec<f64>, usize)> {
    let mut x = clean.clone();
    let mut trace = Vec::with_capacity(iterations + 1);
    if epsilon == 0.0 || iterations == 0 {
        trace.push(objective(&x, false)?.0);
        return Ok((x, trace, 0));
    }
    let step = (alpha / 255.0) as f32 * if ascend { 1.0 } else { -1.0 };
    for _ in 0..iterations {
        let (v, grad) = objective(&x, true)?;
        trace.push(v);
        let grad = grad.expect("gradient requested");
        Zip::from(&mut x).and(&grad).for_each(|xv, &gv| {
            if gv != 0.0 {
                *xv += step * gv.signum();
            }
        });
        project(&mut x, clean, epsilon);
    }
    trace.push(objective(&x, false)?.0);
    Ok((x, trace, iterations))
}

fn tasks_of(terms: &[crate::losses::LossTerm]) -> Result<TaskSet> {
    let mut ts: Vec<Task> = terms.iter().map(|t| t.task()).collect();
    // the instance-segmentation and instance-depth heads hang off the detection head
    if ts.iter().any(|t| matches!(t, Task::Is | Task::Id)) {
        ts.push(Task::Od);
    }
    ts.sort();
    ts.dedup();
    TaskSet::new(&ts)
}

/// Untargeted PGD maximizing the selected loss against ground-truth targets,
/// starting from the clean image.
pub fn pgd_attack(victim: Victim<'_>, image: &Array3<f32>, targets: &DenseTargets, cfg: &AttackConfig) -> Result<AttackOutcome> {
    cfg.validate()?;
    let terms = cfg.loss.terms(victim.tasks)?;
    let tasks = tasks_of(&terms)?;
    let (adv, trace, iterations) =
        signed_steps(image, cfg.epsilon, cfg.alpha, cfg.num_iterations(), true, |x, want_grad| {
            let mut g = Graph::<f32>::new();
            let (xn, dense) = victim.forward(&mut g, x, tasks)?;
            let losses = compute_losses(&mut g, &dense, targets, victim.loss, &terms)?;
            let obj = cfg.loss.objective(&mut g, &losses, victim.loss)?;
            let v = g.scalar(obj) as f64;
            Ok((v, want_grad.then(|| image_grad(&g, obj, xn))))
        })?;
    finish(victim, image, adv, trace, iterations, cfg.epsilon, None)
}

/// `a − c` in f32, rounded toward zero so the stored perturbation never
/// exceeds the exact one.
fn difference(a: f32, c: f32) -> f32 {
    let exact = a as f64 - c as f64;
    let d = exact as f32;
    if (d as f64).abs() > exact.abs() {
        if d > 0.0 {
            d.next_down()
        } else {
            d.next_up()
        }
    } else {
        d
    }
}

fn finish(
    victim: Victim<'_>,
    clean: &Array3<f32>,
    adv: Array3<f32>,
    trace: Vec<f64>,
    iterations: usize,
    epsilon: f64,
    flips: Option<(usize, usize)>,
) -> Result<AttackOutcome> {
    let clean_out = victim.predict(clean)?;
    let attacked = if iterations == 0 { clean_out.clone() } else { victim.predict(&adv)? };
    Ok(AttackOutcome {
        perturbation: Zip::from(&adv).and(clean).map_collect(|&a, &c| difference(a, c)),
        adversarial: adv,
        trace,
        iterations,
        epsilon,
        clean: clean_out,
        attacked,
        flips,
    })
}

/// A confident detection-head location in the DAG target set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DagLocation {
    pub level: usize,
    pub location: usize,
    /// Class it was initially predicted as.
    pub class_id: usize,
}

/// Locations whose top class is `c1` or `c2` with probability at least `confidence`.
pub fn dag_target_set(out: &DenseOutputs, c1: usize, c2: usize, confidence: f64) -> Vec<DagLocation> {
    let mut set = Vec::new();
    for (li, lvl) in out.levels.iter().enumerate() {
        let (c, h, w) = lvl.cls_logits.dim();
        for loc in 0..h * w {
            let (y, x) = (loc / w, loc % w);
            let (best, z) = (0..c)
                .map(|k| (k, lvl.cls_logits[[k, y, x]]))
                .fold((0, f32::MIN), |a, b| if b.1 > a.1 { b } else { a });
            if (best == c1 || best == c2) && sigmoid(z as f64) >= confidence {
                set.push(DagLocation { level: li, location: loc, class_id: best });
            }
        }
    }
    set
}

fn argmax_at(out: &DenseOutputs, t: &DagLocation) -> usize {
    let l = &out.levels[t.level].cls_logits;
    let w = l.dim().2;
    let (y, x) = (t.location / w, t.location % w);
    (0..l.dim().0).fold(0, |b, k| if l[[k, y, x]] > l[[b, y, x]] { k } else { b })
}

/// Σ weights·value over one node, as a scalar graph node.
fn weighted_sum(g: &mut Graph<f32>, node: NodeId, weights: ArrayD<f32>) -> NodeId {
    let v: f32 = (g.value(node) * &weights).sum();
    g.apply(
        &[node],
        ArrayD::from_elem(IxDyn(&[]), v),
        Box::new(move |ctx| {
            let up = *ctx.grad.iter().next().unwrap();
            vec![ctx.needs[0].then(|| &weights * up)]
        }),
    )
}

/// Targeted class swap: pushes the logit of the partner class up and of the
/// current class down at every still-unflipped confident location.
pub fn dag_swap_attack(victim: Victim<'_>, image: &Array3<f32>, cfg: &DagConfig) -> Result<AttackOutcome> {
    let ncls = victim.model.config.num_thing_classes;
    if cfg.c1 == cfg.c2 || cfg.c1 >= ncls || cfg.c2 >= ncls {
        return Err(Error::Config(format!("cannot swap classes {} and {} of {ncls}", cfg.c1, cfg.c2)));
    }
    if !victim.tasks.contains(Task::Od) {
        return Err(Error::Config("class swapping needs the detection head".into()));
    }
    if !(cfg.gamma > 0.0) {
        return Err(Error::Config(format!("gamma must be > 0, got {}", cfg.gamma)));
    }
    let partner = |c: usize| if c == cfg.c1 { cfg.c2 } else { cfg.c1 };
    let od = TaskSet::new(&[Task::Od])?;
    let clean_out = victim.model.predict(image, od)?;
    let initial = dag_target_set(&clean_out, cfg.c1, cfg.c2, cfg.confidence);
    let bound = cfg.bound();
    if initial.is_empty() {
        return finish(victim, image, image.clone(), vec![0.0], 0, bound, Some((0, 0)));
    }
    let mut active = initial.clone();
    let mut x = image.clone();
    let mut trace = Vec::new();
    let mut iterations = 0;
    while !active.is_empty() && iterations < cfg.max_iters {
        let mut g = Graph::<f32>::new();
        let (xn, dense) = victim.forward(&mut g, &x, od)?;
        let mut parts = Vec::new();
        for (li, lvl) in dense.levels.iter().enumerate() {
            let shape = g.shape(lvl.cls_logits).to_vec();
            let plane = shape[1] * shape[2];
            let mut wts = ArrayD::<f32>::zeros(IxDyn(&shape));
            let flat = wts.as_slice_mut().unwrap();
            for t in active.iter().filter(|t| t.level == li) {
                flat[partner(t.class_id) * plane + t.location] += 1.0;
                flat[t.class_id * plane + t.location] -= 1.0;
            }
            if flat.iter().any(|&v| v != 0.0) {
                parts.push((weighted_sum(&mut g, lvl.cls_logits, wts), 1.0f32));
            }
        }
        let obj = g.linear_combination(&parts);
        trace.push(g.scalar(obj) as f64);
        let r = image_grad(&g, obj, xn);
        let norm = r.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        if norm == 0.0 {
            break;
        }
        let step = (cfg.gamma / norm as f64) as f32;
        Zip::from(&mut x).and(&r).for_each(|xv, &rv| *xv += step * rv);
        project(&mut x, image, bound);
        iterations += 1;
        let now = victim.model.predict(&x, od)?;
        active.retain(|t| argmax_at(&now, t) != partner(t.class_id));
    }
    let flipped = initial.len() - active.len();
    finish(victim, image, x, trace, iterations, bound, Some((flipped, initial.len())))
}

/// For every pixel, the row-major index of the Euclidean-nearest pixel where
/// `source` holds, ties to the smallest index. Exact: a column pass finds the
/// nearest source row per column, then each row scans every column.
pub fn nearest_source(source: &Array2<bool>) -> Result<Array2<usize>> {
    let (h, w) = source.dim();
    if !source.iter().any(|&s| s) {
        return Err(Error::Invalid("no source pixels to fill from".into()));
    }
    // nearest source row in each column, upper row on ties
    let mut col: Array2<Option<usize>> = Array2::from_elem((h, w), None);
    for x in 0..w {
        let mut last = None;
        for y in 0..h {
            if source[[y, x]] {
                last = Some(y);
            }
            col[[y, x]] = last;
        }
        let mut next = None;
        for y in (0..h).rev() {
            if source[[y, x]] {
                next = Some(y);
            }
            col[[y, x]] = match (col[[y, x]], next) {
                (Some(a), Some(b)) => Some(if y - a <= b - y { a } else { b }),
                (a, b) => a.or(b),
            };
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if source[[y, x]] {
                out[[y, x]] = y * w + x;
                continue;
            }
            let mut best = (usize::MAX, usize::MAX);
            for (xs, r) in col.row(y).iter().enumerate() {
                if let Some(r) = *r {
                    let d = x.abs_diff(xs).pow(2) + y.abs_diff(r).pow(2);
                    best = best.min((d, r * w + xs));
                }
            }
            out[[y, x]] = best.1;
        }
    }
    Ok(out)
}

fn fill_from<T: Copy>(values: &Array2<T>, target: &Array2<bool>) -> Result<Array2<T>> {
    if !target.iter().any(|&t| t) {
        return Ok(values.clone());
    }
    let src = nearest_source(&target.mapv(|t| !t))?;
    let flat: Vec<T> = values.iter().copied().collect();
    Ok(Array2::from_shape_fn(values.dim(), |(y, x)| if target[[y, x]] { flat[src[[y, x]]] } else { values[[y, x]] }))
}

/// Replaces every `target_class` pixel with the class of the nearest other pixel.
pub fn build_hiding_target_seg(pred_seg: &Array2<u8>, target_class: u8) -> Result<Array2<u8>> {
    fill_from(pred_seg, &pred_seg.mapv(|c| c == target_class))
}

/// Replaces the depth of every `target_class` pixel with that of the nearest
/// pixel of another class.
pub fn build_hiding_target_depth(pred_seg: &Array2<u8>, pred_depth: &Array2<f32>, target_class: u8) -> Result<Array2<f32>> {
    if pred_seg.dim() != pred_depth.dim() {
        return Err(Error::Shape(format!("seg {:?} vs depth {:?}", pred_seg.dim(), pred_depth.dim())));
    }
    fill_from(pred_depth, &pred_seg.mapv(|c| c == target_class))
}

/// Per-pixel argmax of `[C, H, W]` logits, ties to the lower class.
pub fn argmax_map(logits: &Array3<f32>) -> Array2<u8> {
    let (c, h, w) = logits.dim();
    Array2::from_shape_fn((h, w), |(y, x)| (0..c).fold(0, |b, k| if logits[[k, y, x]] > logits[[b, y, x]] { k } else { b }) as u8)
}

#[derive(Clone, Debug, PartialEq)]
pub enum HidingTarget {
    Seg(Array2<u8>),
    Depth(Array2<f32>),
}

/// Targeted descent towards a hiding target on one head: cross entropy for
/// the segmentation head, RMSE for the depth head, no class weights.
pub fn hiding_attack(
    victim: Victim<'_>,
    image: &Array3<f32>,
    target: &HidingTarget,
    epsilon: f64,
    alpha: f64,
    iterations: Option<usize>,
) -> Result<AttackOutcome> {
    let cfg = AttackConfig { epsilon, alpha, iterations, loss: LossSelector::Mtl };
    cfg.validate()?;
    let task = match target {
        HidingTarget::Seg(_) => Task::Ss,
        HidingTarget::Depth(_) => Task::D,
    };
    if !victim.tasks.contains(task) {
        return Err(Error::Config(format!("hiding needs the {task} head")));
    }
    let tasks = TaskSet::new(&[task])?;
    let (adv, trace, iters) = signed_steps(image, epsilon, alpha, cfg.num_iterations(), false, |x, want_grad| {
        let mut g = Graph::<f32>::new();
        let (xn, dense) = victim.forward(&mut g, x, tasks)?;
        let obj = match target {
            HidingTarget::Seg(map) => {
                let logits = dense.seg_logits.expect("seg head");
                let c = g.shape(logits)[0];
                cross_entropy(&mut g, logits, map, &vec![1.0; c])
            }
            HidingTarget::Depth(map) => {
                let d = dense.depth_map.expect("depth head");
                rmse(&mut g, d, map, &Array2::from_elem(map.dim(), true))
            }
        };
        let v = g.scalar(obj) as f64;
        Ok((v, want_grad.then(|| image_grad(&g, obj, xn))))
    })?;
    finish(victim, image, adv, trace, iters, epsilon, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn iteration_schedule() {
        let got: Vec<usize> = [0.25, 0.5, 1.0, 2.0, 4.0].iter().map(|&e| pgd_iterations(e)).collect();
        assert_eq!(got, vec![1, 1, 2, 3, 5]);
        assert_eq!(pgd_iterations(0.0), 0);
        // the first term takes over for large budgets: min(16+4, 20)
        assert_eq!(pgd_iterations(16.0), 20);
    }

    #[test]
    fn hiding_row_examples() {
        let (road, person, sky) = (0u8, 5u8, 1u8);
        let seg = Array2::from_shape_vec((1, 4), vec![road, person, person, sky]).unwrap();
        let out = build_hiding_target_seg(&seg, person).unwrap();
        assert_eq!(out.as_slice().unwrap(), &[road, road, sky, sky]);
        let depth = Array2::from_shape_vec((1, 4), vec![10.0f32, 3.0, 3.0, 40.0]).unwrap();
        let d = build_hiding_target_depth(&seg, &depth, person).unwrap();
        assert_eq!(d.as_slice().unwrap(), &[10.0, 10.0, 40.0, 40.0]);
    }

    #[test]
    fn hiding_builders_edge_cases() {
        let seg = Array2::from_elem((3, 3), 2u8);
        assert_eq!(build_hiding_target_seg(&seg, 4).unwrap(), seg);
        assert!(build_hiding_target_seg(&seg, 2).is_err());
        // equidistant above and below: the upper pixel wins
        let seg = Array2::from_shape_vec((3, 1), vec![7u8, 1, 8]).unwrap();
        assert_eq!(build_hiding_target_seg(&seg, 1).unwrap().as_slice().unwrap(), &[7, 7, 8]);
    }

    fn brute_nearest(source: &Array2<bool>) -> Array2<usize> {
        let (h, w) = source.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            (0..h * w)
                .filter(|&i| source[[i / w, i % w]])
                .min_by_key(|&i| ((i / w).abs_diff(y).pow(2) + (i % w).abs_diff(x).pow(2), i))
                .unwrap()
        })
    }

    #[test]
    fn nearest_source_matches_brute_force() {
        for (h, w) in [(1, 1), (2, 3), (3, 3), (4, 4), (1, 4), (4, 2)] {
            for bits in 1u32..(1 << (h * w)) {
                let src = Array2::from_shape_fn((h, w), |(y, x)| bits >> (y * w + x) & 1 == 1);
                assert_eq!(nearest_source(&src).unwrap(), brute_nearest(&src), "{h}x{w} {bits:b}");
            }
        }
    }

    #[test]
    fn projection_stays_inside_the_ball() {
        let clean = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| ((c * 16 + y * 4 + x) as f32 * 0.0173).fract());
        for eps in [0.25, 1.0, 2.0, 3.7] {
            let mut x = clean.mapv(|v| v + 0.5);
            project(&mut x, &clean, eps);
            let worst = x.iter().zip(clean.iter()).fold(0.0f64, |m, (&a, &c)| m.max((255.0 * (a as f64 - c as f64)).abs()));
            assert!(worst <= eps + 1e-6, "{worst} > {eps}");
            assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn perturbation_bytes_round_trip() {
        let d = Array3::from_shape_fn((3, 2, 5), |(c, y, x)| (c as f32 - y as f32) * 0.001 + x as f32);
        let back = perturbation_from_bytes(&perturbation_to_bytes(&d), Path::new("mem")).unwrap();
        assert_eq!(back, d);
        assert!(perturbation_from_bytes(b"nope", Path::new("mem")).is_err());
    }

    #[test]
    fn zero_budget_returns_clean_image() {
        let model = Model::new(ModelConfig::default()).unwrap();
        let loss = LossConfig::default();
        let victim = Victim { model: &model, tasks: TaskSet::all(), loss: &loss };
        let image = Array3::from_shape_fn((3, 128, 128), |(c, y, x)| ((c + y * x) % 7) as f32 / 7.0);
        let seg = argmax_map(victim.predict(&image).unwrap().seg_logits.as_ref().unwrap());
        let out = hiding_attack(victim, &image, &HidingTarget::Seg(seg), 0.0, 1.0, None).unwrap();
        assert_eq!(out.adversarial, image);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.trace.len(), 1);
        out.check(&image).unwrap();
    }
}
