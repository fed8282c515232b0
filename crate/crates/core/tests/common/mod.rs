//! Brute-force oracles and finite-difference helpers shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code)]

use ndarray::{Array2, Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uninet::attacks::{build_hiding_target_seg, nearest_source};
use uninet::geometry::BBox;
use uninet::losses::assign_targets;
use uninet::metrics::{average_precision, coco_thresholds, miou, ApKind};
use uninet::model::{Detection, ModelConfig};
use uninet::scenegen::{InstanceAnnotation, Sample};
use uninet::tensor::{Graph, NodeId};

/// Outcome of one oracle sweep: number of cases or the first mismatch.
pub type Sweep = Result<usize, String>;

// ---------------------------------------------------------------- mIoU

/// IoU per class straight from the two maps, averaged over classes present
/// in the ground truth.
pub fn brute_miou(pred: &Array2<u8>, gt: &Array2<u8>, n: usize) -> Option<f64> {
    let mut ious = vec![];
    for c in 0..n as u8 {
        if !gt.iter().any(|&g| g == c) {
            continue;
        }
        let inter = pred.iter().zip(gt).filter(|(&p, &g)| p == c && g == c).count();
        let union = pred.iter().zip(gt).filter(|(&p, &g)| p == c || g == c).count();
        ious.push(inter as f64 / union as f64);
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

fn map_from_digits(mut code: usize, h: usize, w: usize, base: usize) -> Array2<u8> {
    Array2::from_shape_fn((h, w), |_| {
        let d = code % base;
        code /= base;
        d as u8
    })
}

/// Every 2×2 pair over 3 classes, every 1×4 pair over 2 classes and seeded
/// random 3×3 and 4×4 pairs over 4 classes.
pub fn check_miou(random_cases: usize) -> Sweep {
    let mut n = 0;
    let mut check = |p: &Array2<u8>, g: &Array2<u8>, classes: usize| -> Result<(), String> {
        n += 1;
        let (a, b) = (miou(p, g, classes), brute_miou(p, g, classes));
        let same = match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() < 1e-12,
            (None, None) => true,
            _ => false,
        };
        if same {
            Ok(())
        } else {
            Err(format!("miou {a:?} vs brute {b:?} for pred {p:?} gt {g:?}"))
        }
    };
    for (h, w, base) in [(2usize, 2usize, 3usize), (1, 4, 2)] {
        let total = base.pow((h * w) as u32);
        for i in 0..total {
            for j in 0..total {
                check(&map_from_digits(i, h, w, base), &map_from_digits(j, h, w, base), base)?;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..random_cases {
        let side = 3 + k % 2;
        let p = Array2::from_shape_fn((side, side), |_| rng.gen_range(0..4u8));
        let g = Array2::from_shape_fn((side, side), |_| rng.gen_range(0..4u8));
        check(&p, &g, 4)?;
    }
    Ok(n)
}

// ---------------------------------------------------------------- AP

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn brute_region_iou(d: &Detection, g: &InstanceAnnotation, kind: ApKind) -> f64 {
    match kind {
        ApKind::Box => box_iou(&d.bbox, &g.bbox),
        ApKind::Mask => match &d.mask {
            None => 0.0,
            Some(m) => {
                let inter = m.iter().zip(&g.mask).filter(|(&a, &b)| a && b).count();
                let union = m.iter().zip(&g.mask).filter(|(&a, &b)| a || b).count();
                if union == 0 {
                    0.0
                } else {
                    inter as f64 / union as f64
                }
            }
        },
    }
}

/// COCO AP by definition: greedy matching per image in score order, a global
/// ranking, then for each of 101 recall points the best precision reached at
/// or beyond that recall.
pub fn brute_ap(images: &[(Vec<Detection>, Vec<InstanceAnnotation>)], n: usize, kind: ApKind) -> Option<f64> {
    let thresholds = coco_thresholds();
    let mut class_aps = vec![];
    for c in 0..n {
        let num_gt: usize = images.iter().map(|(_, g)| g.iter().filter(|x| x.class_id == c).count()).sum();
        if num_gt == 0 {
            continue;
        }
        let mut per_thr = vec![];
        for &t in &thresholds {
            // (score, image, rank in image, hit)
            let mut ranked = vec![];
            for (ii, (dets, gts)) in images.iter().enumerate() {
                let mut idx: Vec<usize> = (0..dets.len()).collect();
                idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
                let mut used = vec![false; gts.len()];
                for (rank, &di) in idx.iter().enumerate() {
                    let d = &dets[di];
                    let mut best: Option<(f64, usize)> = None;
                    for (gi, g) in gts.iter().enumerate() {
                        if g.class_id != d.class_id || used[gi] {
                            continue;
                        }
                        let iou = brute_region_iou(d, g, kind);
                        if iou >= t && best.map_or(true, |(b, _)| iou > b) {
                            best = Some((iou, gi));
                        }
                    }
                    if let Some((_, gi)) = best {
                        used[gi] = true;
                    }
                    if d.class_id == c {
                        ranked.push((d.score, ii, rank, best.is_some()));
                    }
                }
            }
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
            let mut pr = vec![];
            let mut tp = 0;
            for (k, r) in ranked.iter().enumerate() {
                tp += r.3 as usize;
                pr.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
            }
            let mut s = 0.0;
            for j in 0..=100 {
                let r = j as f64 / 100.0;
                s += pr.iter().filter(|(rec, _)| *rec >= r - 1e-12).map(|p| p.1).fold(0.0, f64::max);
            }
            per_thr.push(s / 101.0);
        }
        class_aps.push(per_thr.iter().sum::<f64>() / per_thr.len() as f64);
    }
    (!class_aps.is_empty()).then(|| class_aps.iter().sum::<f64>() / class_aps.len() as f64)
}

fn small_box(rng: &mut ChaCha8Rng) -> BBox {
    let (x0, y0) = (rng.gen_range(0..3) as f64, rng.gen_range(0..3) as f64);
    let (x1, y1) = (rng.gen_range(x0 as i32 + 1..=4) as f64, rng.gen_range(y0 as i32 + 1..=4) as f64);
    BBox::new(x0, y0, x1, y1)
}

fn small_mask(rng: &mut ChaCha8Rng) -> Array2<bool> {
    Array2::from_shape_fn((4, 4), |_| rng.gen_bool(0.5))
}

/// Random 4×4 scenes of up to 3 images, each with at most 3 ground-truth
/// instances and 4 detections of 2 classes; scores come from a coarse grid so
/// ties occur.
pub fn ap_cases(count: usize, seed: u64) -> Vec<Vec<(Vec<Detection>, Vec<InstanceAnnotation>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            (0..rng.gen_range(1..=3))
                .map(|_| {
                    let gts = (0..rng.gen_range(0..=3))
                        .map(|_| InstanceAnnotation {
                            class_id: rng.gen_range(0..2),
                            bbox: small_box(&mut rng),
                            mask: small_mask(&mut rng),
                            median_depth: 1.0,
                        })
                        .collect();
                    let dets = (0..rng.gen_range(0..=4))
                        .map(|i| Detection {
                            class_id: rng.gen_range(0..2),
                            score: rng.gen_range(1..=5) as f64 / 5.0,
                            bbox: small_box(&mut rng),
                            mask: rng.gen_bool(0.9).then(|| small_mask(&mut rng)),
                            median_depth: None,
                            level: 0,
                            location: i,
                        })
                        .collect();
                    (dets, gts)
                })
                .collect()
        })
        .collect()
}

pub fn check_ap(count: usize) -> Sweep {
    let thr = coco_thresholds();
    for (k, case) in ap_cases(count, 23).iter().enumerate() {
        for kind in [ApKind::Box, ApKind::Mask] {
            let (a, _) = average_precision(case, 2, kind, &thr);
            let b = brute_ap(case, 2, kind);
            let same = match (a, b) {
                (Some(a), Some(b)) => (a - b).abs() < 1e-12,
                (None, None) => true,
                _ => false,
            };
            if !same {
                return Err(format!("case {k} {kind:?}: ap {a:?} vs brute {b:?}"));
            }
        }
    }
    Ok(count * 2)
}

// ---------------------------------------------------------------- nearest fill

/// Row-major index of the source pixel minimizing (squared distance, index).
pub fn brute_nearest(source: &Array2<bool>) -> Array2<usize> {
    let (h, w) = source.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = (usize::MAX, usize::MAX);
        for sy in 0..h {
            for sx in 0..w {
                if source[[sy, sx]] {
                    let d = (y as i64 - sy as i64).pow(2) + (x as i64 - sx as i64).pow(2);
                    best = best.min((d as usize, sy * w + sx));
                }
            }
        }
        best.1
    })
}

/// Every binary mask of every shape up to 4×4, plus every 3-class label map
/// up to 3×3 pushed through the segmentation hiding target.
pub fn check_nearest() -> Sweep {
    let mut n = 0;
    for h in 1..=4 {
        for w in 1..=4 {
            for bits in 0..1usize << (h * w) {
                let src = Array2::from_shape_fn((h, w), |(y, x)| bits >> (y * w + x) & 1 == 1);
                n += 1;
                match (nearest_source(&src), bits) {
                    (Err(_), 0) => continue,
                    (Ok(got), b) if b != 0 => {
                        let want = brute_nearest(&src);
                        if got != want {
                            return Err(format!("nearest {got:?} vs brute {want:?} for {src:?}"));
                        }
                    }
                    (r, _) => return Err(format!("unexpected result {r:?} for {src:?}")),
                }
            }
        }
    }
    for h in 1..=3 {
        for w in 1..=3 {
            for code in 0..3usize.pow((h * w) as u32) {
                let seg = map_from_digits(code, h, w, 3);
                n += 1;
                let got = build_hiding_target_seg(&seg, 1);
                let others = seg.mapv(|c| c != 1);
                if !others.iter().any(|&o| o) {
                    if got.is_ok() {
                        return Err(format!("all-target map {seg:?} should not be fillable"));
                    }
                    continue;
                }
                let near = brute_nearest(&others);
                let flat: Vec<u8> = seg.iter().copied().collect();
                let want = Array2::from_shape_fn((h, w), |(y, x)| if seg[[y, x]] == 1 { flat[near[[y, x]]] } else { seg[[y, x]] });
                if got.as_ref().ok() != Some(&want) {
                    return Err(format!("hiding target {got:?} vs brute {want:?} for {seg:?}"));
                }
            }
        }
    }
    Ok(n)
}

// ---------------------------------------------------------------- FCOS

pub fn boxes_sample(h: usize, w: usize, boxes: &[(BBox, usize)]) -> Sample {
    let instances = boxes
        .iter()
        .map(|&(b, class_id)| {
            let (c0, r0, c1, r1) = b.pixel_extent();
            let mask = Array2::from_shape_fn((h, w), |(r, c)| r >= r0 && r < r1 && c >= c0 && c < c1);
            InstanceAnnotation { class_id, bbox: b, mask, median_depth: 5.0 }
        })
        .collect();
    Sample {
        id: "oracle".into(),
        image: Array3::zeros((3, h, w)),
        seg: Array2::zeros((h, w)),
        depth: Array2::from_elem((h, w), 5.0),
        instances,
    }
}

/// Instance-major enumeration: every instance lists every location of every
/// level it could claim, then each location keeps the smallest box.
/// Returns per level the sorted `(location, instance, dists)` triples.
pub fn brute_fcos(sample: &Sample, cfg: &ModelConfig) -> Vec<Vec<(usize, usize, [f64; 4])>> {
    let strides = [8usize, 16, 32];
    let ranges = [(0.0, cfg.level_bounds[0]), (cfg.level_bounds[0], cfg.level_bounds[1]), (cfg.level_bounds[1], f64::INFINITY)];
    let (h, w) = (sample.height(), sample.width());
    let mut out = vec![];
    for (li, &s) in strides.iter().enumerate() {
        let (lh, lw) = (h / s, w / s);
        let mut claims: Vec<Vec<(f64, usize, [f64; 4])>> = vec![vec![]; lh * lw];
        for (gi, inst) in sample.instances.iter().enumerate() {
            let b = inst.bbox;
            for loc in 0..lh * lw {
                let ax = (loc % lw) as f64 * s as f64 + s as f64 / 2.0;
                let ay = (loc / lw) as f64 * s as f64 + s as f64 / 2.0;
                let d = [ax - b.x0, ay - b.y0, b.x1 - ax, b.y1 - ay];
                let inside = d.iter().all(|&v| v > 0.0);
                let reach = d.iter().cloned().fold(0.0, f64::max);
                if inside && reach > ranges[li].0 && reach <= ranges[li].1 {
                    claims[loc].push(((b.x1 - b.x0) * (b.y1 - b.y0), gi, d));
                }
            }
        }
        let mut level = vec![];
        for (loc, c) in claims.iter().enumerate() {
            // smallest area, then lowest instance index
            if let Some(best) = c.iter().min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))) {
                level.push((loc, best.1, best.2));
            }
        }
        out.push(level);
    }
    out
}

/// Random 128×128 scenes with 0 to 3 boxes of all sizes, compared target for
/// target against the brute enumeration.
pub fn check_fcos(count: usize) -> Sweep {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut n = 0;
    for k in 0..count {
        let boxes: Vec<(BBox, usize)> = (0..k % 4)
            .map(|_| {
                let bw = rng.gen_range(2.0..120.0);
                let bh = rng.gen_range(2.0..120.0);
                let x0 = rng.gen_range(0.0..128.0 - bw);
                let y0 = rng.gen_range(0.0..128.0 - bh);
                // snap some boxes to the anchor grid to hit boundary cases
                let snap = |v: f64| if k % 3 == 0 { (v / 4.0).round() * 4.0 } else { v };
                (BBox::new(snap(x0), snap(y0), snap(x0 + bw).max(snap(x0) + 1.0), snap(y0 + bh).max(snap(y0) + 1.0)), rng.gen_range(0..3))
            })
            .collect();
        let s = boxes_sample(128, 128, &boxes);
        let t = assign_targets(&s, &cfg, None).map_err(|e| e.to_string())?;
        let want = brute_fcos(&s, &cfg);
        for (li, lvl) in want.iter().enumerate() {
            let got = &t.levels[li];
            let det = t.detection(li);
            let got_triples: Vec<_> =
                got.locations().iter().zip(got.instances()).zip(det).map(|((&l, &i), d)| (l, i, d.dists)).collect();
            if &got_triples != lvl {
                return Err(format!("scene {k} level {li}: {got_triples:?} vs brute {lvl:?} for {boxes:?}"));
            }
            for (d, &(_, gi, dist)) in det.iter().zip(lvl) {
                let [l, tp, r, b] = dist;
                let c = ((l.min(r) / l.max(r)) * (tp.min(b) / tp.max(b))).sqrt();
                if (d.centerness - c).abs() > 1e-12 || d.class_id != boxes[gi].1 {
                    return Err(format!("scene {k} level {li}: centerness/class mismatch"));
                }
            }
        }
        let used: std::collections::BTreeSet<usize> = want.iter().flatten().map(|x| x.1).collect();
        if t.dropped_instances != boxes.len() - used.len() {
            return Err(format!("scene {k}: dropped {} vs brute {}", t.dropped_instances, boxes.len() - used.len()));
        }
        n += 1;
    }
    Ok(n)
}

// ---------------------------------------------------------------- finite differences

/// Worst relative error of the graph gradient of `build` against central
/// differences over every coordinate of every leaf.
pub fn fd_check(leaves: &[ArrayD<f64>], step: f64, build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<_> = leaves.iter().map(|v| g.leaf(v.clone())).collect();
    let out = build(&mut g, &ids);
    let grads = g.backward(out);
    let eval = |k: usize, p: &ArrayD<f64>| {
        let mut g = Graph::new();
        let ids: Vec<_> = leaves.iter().enumerate().map(|(j, v)| g.constant(if j == k { p.clone() } else { v.clone() })).collect();
        let out = build(&mut g, &ids);
        g.scalar(out)
    };
    let mut worst: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(ids[k]).expect("leaf gradient");
        let mut probe = leaf.clone();
        for i in 0..leaf.len() {
            let orig = leaf.as_slice().unwrap()[i];
            probe.as_slice_mut().unwrap()[i] = orig + step;
            let up = eval(k, &probe);
            probe.as_slice_mut().unwrap()[i] = orig - step;
            let down = eval(k, &probe);
            probe.as_slice_mut().unwrap()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.as_slice().unwrap()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    worst
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| rng.gen_range(lo..hi))
}

/// Worst relative error of every loss gradient with respect to the model
/// outputs, and of the geometric-mean objective with respect to its terms,
/// on a 64×64 three-instance probe.
pub fn loss_gradient_suite() -> Vec<(&'static str, f64)> {
    use uninet::losses::*;
    let s = boxes_sample(
        64,
        64,
        &[(BBox::new(4.0, 6.0, 20.0, 30.0), 0), (BBox::new(18.0, 20.0, 50.0, 44.0), 1), (BBox::new(30.0, 2.0, 62.0, 62.0), 2)],
    );
    let mut s = s;
    s.seg = Array2::from_shape_fn((64, 64), |(r, c)| ((r / 13 + c / 17) % 5) as u8);
    s.depth = Array2::from_shape_fn((64, 64), |(r, c)| 2.0 + (r + c) as f32 * 0.1);
    for (i, inst) in s.instances.iter_mut().enumerate() {
        inst.median_depth = 4.0 + 2.5 * i as f32;
        // non-rectangular masks so the codes carry content
        inst.mask.indexed_iter_mut().for_each(|((r, c), m)| *m &= (r * 3 + c) % 7 != 0);
    }
    let pairs: Vec<_> = (0..4).flat_map(|_| s.instances.iter().map(|i| (&i.mask, &i.bbox))).collect();
    let mut basis = uninet::maskcodec::fit_pca(pairs, 8, 3).unwrap().basis;
    basis.mean.mapv_inplace(|v| v * 0.9 + 0.05);
    let t = assign_targets(&s, &ModelConfig::default(), Some(&basis)).unwrap();
    assert!(t.num_positives() > 3);
    let lv = |c: usize, lo: f64, hi: f64, seed: u64| -> Vec<ArrayD<f64>> {
        [[c, 8, 8], [c, 4, 4], [c, 2, 2]].iter().enumerate().map(|(i, sh)| uniform(sh, lo, hi, seed + i as u64)).collect()
    };
    let w = [0.7, 1.1, 0.9, 1.3, 1.0];
    let mut out = vec![
        ("cls", fd_check(&lv(3, -3.0, 3.0, 100), 1e-6, |g, ids| loss_cls(g, ids, &t, 0.75, 2.0))),
        ("reg", fd_check(&lv(4, 1.0, 25.0, 200), 1e-6, |g, ids| loss_reg(g, ids, &t))),
        ("cent", fd_check(&lv(1, -3.0, 3.0, 300), 1e-6, |g, ids| loss_cent(g, ids, &t))),
        ("is", fd_check(&lv(3, -2.0, 2.0, 400), 1e-6, |g, ids| loss_is(g, ids, &t).unwrap())),
        ("id", fd_check(&lv(1, 1.0, 15.0, 500), 1e-6, |g, ids| loss_id(g, ids, &t))),
        // dense maps sum thousands of pixels; the wider step keeps roundoff down
        ("seg", fd_check(&[uniform(&[5, 64, 64], -2.0, 2.0, 600)], 1e-4, |g, ids| loss_seg(g, ids[0], &t, &w))),
        ("depth", fd_check(&[uniform(&[1, 64, 64], 1.0, 20.0, 700)], 1e-4, |g, ids| loss_depth(g, ids[0], &t))),
    ];
    let lambdas = [1.0, 2.0, 0.5];
    let scalars: Vec<ArrayD<f64>> = [4.0, 9.0, 0.7].iter().map(|&v| ArrayD::from_elem(ndarray::IxDyn(&[]), v)).collect();
    out.push((
        "mtl",
        fd_check(&scalars, 1e-6, |g, ids| {
            let terms: Vec<_> = ids.iter().zip(lambdas).map(|(&i, l)| (i, l)).collect();
            mtl_node(g, &terms, 1e-8).unwrap()
        }),
    ));
    // ∂L/∂L_i = L/(n·L_i) with unit weights
    let vals = [4.0, 9.0, 0.7];
    let mut g = Graph::<f64>::new();
    let ids: Vec<_> = vals.iter().map(|&v| g.leaf(ArrayD::from_elem(ndarray::IxDyn(&[]), v))).collect();
    let m = mtl_node(&mut g, &ids.iter().map(|&i| (i, 1.0)).collect::<Vec<_>>(), 1e-8).unwrap();
    let l = g.scalar(m);
    let grads = g.backward(m);
    let worst = ids
        .iter()
        .zip(vals)
        .map(|(&i, v)| {
            let a = *grads.get(i).unwrap().iter().next().unwrap();
            let want = l / (3.0 * v);
            (a - want).abs() / want.abs()
        })
        .fold(0.0, f64::max);
    out.push(("mtl closed form", worst));
    out
}

// ---------------------------------------------------------------- mask codec

pub struct CodecCheck {
    /// max |C·Cᵀ − I|
    pub orthonormality: f64,
    /// max relative gap between fitted and oracle explained variance on ≤100 masks
    pub variance_gap: f64,
    pub variance_sorted: bool,
    /// mean round-trip IoU on held-out masks, codec and oracle basis
    pub iou: f64,
    pub oracle_iou: f64,
    pub held_out: usize,
}

/// Rank-`k` projection basis of the masks computed with nalgebra, as an
/// independent route to the same subspace.
pub fn oracle_basis(grids: &[ndarray::Array1<f64>], side: usize, k: usize) -> (uninet::maskcodec::PcaBasis, Vec<f64>) {
    let dim = side * side;
    let n = grids.len();
    let data = nalgebra::DMatrix::from_fn(n, dim, |r, c| grids[r][c]);
    let mean = data.row_mean();
    let centered = nalgebra::DMatrix::from_fn(n, dim, |r, c| data[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let components = ndarray::Array2::from_shape_fn((k, dim), |(r, c)| eig.eigenvectors[(c, order[r])] as f32);
    let values = order.iter().take(k).map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let basis = uninet::maskcodec::PcaBasis {
        mask_side: side,
        mean: ndarray::Array1::from_shape_fn(dim, |c| mean[c] as f32),
        components,
    };
    (basis, values)
}

/// Fits the codec on the instances of `train` scenes and measures it on the
/// first `held_out` instances of `test` scenes.
pub fn check_codec(train: &[Sample], test: &[Sample], side: usize, k: usize, held_out: usize) -> CodecCheck {
    use uninet::maskcodec::{crop_resize_nearest, fit_pca, mask_iou};
    let pairs: Vec<_> = train.iter().flat_map(|s| s.instances.iter().map(|i| (&i.mask, &i.bbox))).collect();
    let fit = fit_pca(pairs.iter().copied(), side, k).unwrap();
    let c = fit.basis.components.mapv(f64::from);
    let gram = c.dot(&c.t());
    let orthonormality = gram
        .indexed_iter()
        .map(|((i, j), v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max);
    let variance_sorted = fit.explained_variance.windows(2).all(|w| w[0] >= w[1]);

    let small: Vec<_> = pairs.iter().take(100).copied().collect();
    let small_fit = fit_pca(small.iter().copied(), side, k).unwrap();
    let grids: Vec<_> = small.iter().filter_map(|(m, b)| crop_resize_nearest(m, b, side)).collect();
    let (_, oracle_values) = oracle_basis(&grids, side, k);
    let scale = oracle_values[0].max(1e-12);
    let variance_gap =
        small_fit.explained_variance.iter().zip(&oracle_values).map(|(a, b)| (a - b).abs() / scale).fold(0.0, f64::max);

    let all_grids: Vec<_> = pairs.iter().filter_map(|(m, b)| crop_resize_nearest(m, b, side)).collect();
    let (oracle, _) = oracle_basis(&all_grids, side, k);
    let held: Vec<_> = test.iter().flat_map(|s| s.instances.iter()).take(held_out).collect();
    let (mut iou, mut oracle_iou) = (0.0, 0.0);
    for inst in &held {
        let (h, w) = inst.mask.dim();
        for (basis, acc) in [(&fit.basis, &mut iou), (&oracle, &mut oracle_iou)] {
            let code = basis.encode_mask(&inst.mask, &inst.bbox).unwrap();
            *acc += mask_iou(&basis.decode_into_image(code.view(), &inst.bbox, h, w, 0.5), &inst.mask);
        }
    }
    let n = held.len() as f64;
    CodecCheck { orthonormality, variance_gap, variance_sorted, iou: iou / n, oracle_iou: oracle_iou / n, held_out: held.len() }
}
