use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::BBox;
use crate::model::ModelConfig;
use crate::scenegen::InstanceAnnotation;
use crate::tensor::testutil::max_rel_error;

fn scene(h: usize, w: usize, boxes: &[(BBox, usize, f32)]) -> Sample {
    let instances = boxes
        .iter()
        .map(|&(b, class_id, d)| {
            let (c0, r0, c1, r1) = b.pixel_extent();
            let mask = Array2::from_shape_fn((h, w), |(r, c)| r >= r0 && r < r1 && c >= c0 && c < c1);
            InstanceAnnotation { class_id, bbox: b, mask, median_depth: d }
        })
        .collect();
    let mut seg = Array2::from_shape_fn((h, w), |(r, _)| u8::from(r >= h / 3));
    for &(b, c, _) in boxes {
        let (c0, r0, c1, r1) = b.pixel_extent();
        seg.slice_mut(ndarray::s![r0..r1, c0..c1]).fill(2 + c as u8);
    }
    Sample {
        id: "probe".into(),
        image: Array3::zeros((3, h, w)),
        seg,
        depth: Array2::from_shape_fn((h, w), |(r, c)| 2.0 + (r + c) as f32 * 0.1),
        instances,
    }
}

fn probe_scene() -> Sample {
    scene(
        64,
        64,
        &[
            (BBox::new(4.0, 6.0, 20.0, 30.0), 0, 4.0),
            (BBox::new(18.0, 20.0, 50.0, 44.0), 1, 7.5),
            (BBox::new(30.0, 2.0, 62.0, 62.0), 2, 9.0),
        ],
    )
}

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(lo..hi))
}

/// Maximum relative finite-difference error of `build` over every leaf.
fn check_grad(leaves: Vec<ArrayD<f64>>, build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId) -> f64 {
    check_grad_step(leaves, 1e-6, build)
}

fn check_grad_step(leaves: Vec<ArrayD<f64>>, step: f64, build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<_> = leaves.iter().map(|v| g.leaf(v.clone())).collect();
    let out = build(&mut g, &ids);
    let grads = g.backward(out);
    let mut worst: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let err = max_rel_error(leaf, grads.get(ids[k]).unwrap(), step, |p| {
            let mut g = Graph::new();
            let ids: Vec<_> = leaves
                .iter()
                .enumerate()
                .map(|(j, v)| g.constant(if j == k { p.clone() } else { v.clone() }))
                .collect();
            let out = build(&mut g, &ids);
            g.scalar(out)
        });
        worst = worst.max(err);
    }
    worst
}

fn level_shapes(c: usize) -> Vec<Vec<usize>> {
    vec![vec![c, 8, 8], vec![c, 4, 4], vec![c, 2, 2]]
}

fn basis() -> crate::maskcodec::PcaBasis {
    let s = probe_scene();
    let pairs: Vec<_> = (0..8).flat_map(|_| s.instances.iter().map(|i| (&i.mask, &i.bbox))).collect();
    let mut fit = crate::maskcodec::fit_pca(pairs, 8, 3).unwrap().basis;
    // A degenerate training set has null directions; give them some content.
    fit.mean.mapv_inplace(|v| v * 0.9 + 0.05);
    fit
}

#[test]
fn varifocal_hand_values() {
    let (pos, _) = terms::varifocal(0.0, Some(0.8), 0.75, 2.0);
    assert!((pos - 0.8 * 2f64.ln()).abs() < 1e-12);
    let p: f64 = 0.5;
    let oracle = -0.8 * (0.8 * p.ln() + 0.2 * (1.0 - p).ln());
    assert!((pos - oracle).abs() < 1e-12);
    let (sat, _) = terms::varifocal(60.0, Some(1.0), 0.75, 2.0);
    assert!(sat < 1e-20);
    let (neg, _) = terms::varifocal(-800.0, None, 0.75, 2.0);
    assert_eq!(neg, 0.0);
    // negative oracle: −α·p^γ·ln(1 − p)
    let z: f64 = 0.3;
    let p = 1.0 / (1.0 + (-z).exp());
    let (neg, _) = terms::varifocal(z, None, 0.75, 2.0);
    assert!((neg - (-0.75 * p * p * (1.0 - p).ln())).abs() < 1e-12);
}

#[test]
fn empty_scene_has_zero_detection_losses_for_confident_negatives() {
    let s = scene(64, 64, &[]);
    let t = assign_targets(&s, &ModelConfig::default(), None).unwrap();
    let mut g = Graph::<f64>::new();
    let ids: Vec<_> = level_shapes(3).iter().map(|sh| g.constant(ArrayD::from_elem(IxDyn(sh), -800.0))).collect();
    let l = loss_cls(&mut g, &ids, &t, 0.75, 2.0);
    assert_eq!(g.scalar(l), 0.0);
    let r = loss_reg(&mut g, &ids, &t);
    assert_eq!(g.scalar(r), 0.0);
}

#[test]
fn giou_distance_form_matches_box_geometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let p: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.5..20.0));
        let t: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.5..20.0));
        let (cx, cy) = (50.0, 40.0);
        let pb = BBox::new(cx - p[0], cy - p[1], cx + p[2], cy + p[3]);
        let tb = BBox::new(cx - t[0], cy - t[1], cx + t[2], cy + t[3]);
        let (loss, _) = giou_loss_dists(p, t);
        assert!((loss - (1.0 - pb.giou(&tb))).abs() < 1e-12);
    }
    assert_eq!(giou_loss_dists([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]).0, 0.0);
}

#[test]
fn bce_hand_values_and_oracle() {
    let s = scene(64, 64, &[(BBox::new(4.0, 4.0, 28.0, 28.0), 0, 5.0)]);
    let t = assign_targets(&s, &ModelConfig::default(), None).unwrap();
    let shapes = level_shapes(1);
    let z: Vec<_> = shapes.iter().enumerate().map(|(i, sh)| random(sh, -3.0, 3.0, 10 + i as u64)).collect();
    let mut g = Graph::<f64>::new();
    let ids: Vec<_> = z.iter().map(|v| g.constant(v.clone())).collect();
    let l = loss_cent(&mut g, &ids, &t);
    let mut oracle = 0.0;
    for (li, lvl) in t.levels.iter().enumerate() {
        for (&loc, d) in lvl.locations().iter().zip(t.detection(li)) {
            let p = 1.0 / (1.0 + (-z[li].as_slice().unwrap()[loc]).exp());
            oracle += -(d.centerness * p.ln() + (1.0 - d.centerness) * (1.0 - p).ln());
        }
    }
    oracle /= t.num_positives() as f64;
    assert!((g.scalar(l) - oracle).abs() < 1e-6);
    // target 1 at p = 0.5
    assert!((terms::bce_logit(0.0, 1.0) - 2f64.ln()).abs() < 1e-12);
    assert!(terms::bce_logit(60.0, 1.0) < 1e-20);
}

#[test]
fn cross_entropy_cases() {
    let labels = Array2::from_shape_fn((4, 4), |(r, c)| ((r + c) % 3) as u8);
    let mut g = Graph::<f64>::new();
    let uniform = g.constant(ArrayD::zeros(IxDyn(&[3, 4, 4])));
    let l = cross_entropy(&mut g, uniform, &labels, &[1.0; 3]);
    assert!((g.scalar(l) - 3f64.ln()).abs() < 1e-12);
    let onehot = ArrayD::from_shape_fn(IxDyn(&[3, 4, 4]), |i| if labels[[i[1], i[2]]] as usize == i[0] { 50.0 } else { -50.0 });
    let n = g.constant(onehot);
    let l = cross_entropy(&mut g, n, &labels, &[1.0; 3]);
    assert!(g.scalar(l) < 1e-30);
    // weighted: scalar loop oracle
    let z = random(&[3, 4, 4], -2.0, 2.0, 5);
    let w = [0.5, 1.0, 1.5];
    let n = g.constant(z.clone());
    let l = cross_entropy(&mut g, n, &labels, &w);
    let (mut num, mut den) = (0.0, 0.0);
    for r in 0..4 {
        for c in 0..4 {
            let y = labels[[r, c]] as usize;
            let lse = (0..3).map(|k| z[[k, r, c]].exp()).sum::<f64>().ln();
            num += w[y] * (lse - z[[y, r, c]]);
            den += w[y];
        }
    }
    assert!((g.scalar(l) - num / den).abs() < 1e-6);
}

#[test]
fn class_weights_are_balanced_and_bounded() {
    let w = class_balance_weights(&[900, 90, 10, 0]);
    assert!((w.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
    assert!(w.windows(2).all(|p| p[0] < p[1]));
    let raw_absent = 1.0 / 1.02f64.ln();
    let raw = [900.0, 90.0, 10.0, 0.0].map(|c: f64| 1.0 / (1.02 + c / 1000.0).ln());
    let mean = raw.iter().sum::<f64>() / 4.0;
    assert!((w[3] - raw_absent / mean).abs() < 1e-12);
}

#[test]
fn mask_code_loss_cases() {
    let s = probe_scene();
    let b = basis();
    let t = assign_targets(&s, &ModelConfig::default(), Some(&b)).unwrap();
    let k = b.code_dim();
    // predictions equal to the targets
    let mut exact: Vec<ArrayD<f64>> = level_shapes(k).iter().map(|sh| ArrayD::zeros(IxDyn(sh))).collect();
    for li in 0..3 {
        let hw = exact[li].shape()[1] * exact[li].shape()[2];
        let codes = t.codes(li).unwrap();
        for (&loc, code) in t.levels[li].locations().iter().zip(codes) {
            for j in 0..k {
                exact[li].as_slice_mut().unwrap()[j * hw + loc] = code[j];
            }
        }
    }
    let mut g = Graph::<f64>::new();
    let ids: Vec<_> = exact.iter().map(|v| g.constant(v.clone())).collect();
    let l = loss_is(&mut g, &ids, &t).unwrap();
    assert!(g.scalar(l).abs() < 1e-12);
    // shift one dimension by 2 at every positive: 4/k
    let mut shifted = exact.clone();
    for li in 0..3 {
        let hw = shifted[li].shape()[1] * shifted[li].shape()[2];
        for &loc in t.levels[li].locations() {
            shifted[li].as_slice_mut().unwrap()[hw + loc] += 2.0;
        }
    }
    let ids: Vec<_> = shifted.iter().map(|v| g.constant(v.clone())).collect();
    let l = loss_is(&mut g, &ids, &t).unwrap();
    assert!((g.scalar(l) - 4.0 / k as f64).abs() < 1e-12);
    assert!(loss_is(&mut g, &ids, &assign_targets(&s, &ModelConfig::default(), None).unwrap()).is_none());
}

#[test]
fn depth_rmse_cases() {
    let gt = Array2::from_shape_fn((4, 4), |(r, c)| 5.0 + (r * 4 + c) as f32);
    let valid = gt.mapv(crate::scenegen::depth_is_valid);
    let mut g = Graph::<f64>::new();
    let same = g.constant(gt.mapv(f64::from).into_dyn().into_shape_with_order(IxDyn(&[1, 4, 4])).unwrap());
    let l = rmse(&mut g, same, &gt, &valid);
    assert_eq!(g.scalar(l), 0.0);
    let off = g.constant((gt.mapv(f64::from) + 1.5).into_dyn().into_shape_with_order(IxDyn(&[1, 4, 4])).unwrap());
    let l = rmse(&mut g, off, &gt, &valid);
    assert!((g.scalar(l) - 1.5).abs() < 1e-12);
    // an out-of-range ground-truth pixel is ignored
    let mut far = gt.clone();
    far[[0, 0]] = 100.0;
    let far_valid = far.mapv(crate::scenegen::depth_is_valid);
    let mut pred = gt.mapv(f64::from);
    pred[[1, 1]] += 3.0;
    let p = g.constant(pred.clone().into_dyn().into_shape_with_order(IxDyn(&[1, 4, 4])).unwrap());
    let l = rmse(&mut g, p, &far, &far_valid);
    assert!((g.scalar(l) - (9.0f64 / 15.0).sqrt()).abs() < 1e-12);
}

#[test]
fn instance_depth_l1() {
    // two instances far apart with median depths 10; predictions 8 and 12 at every positive
    let s = scene(64, 64, &[(BBox::new(2.0, 2.0, 14.0, 14.0), 0, 10.0), (BBox::new(40.0, 40.0, 52.0, 52.0), 1, 10.0)]);
    let t = assign_targets(&s, &ModelConfig::default(), None).unwrap();
    let mut levels: Vec<ArrayD<f64>> = level_shapes(1).iter().map(|sh| ArrayD::zeros(IxDyn(sh))).collect();
    for (li, lvl) in t.levels.iter().enumerate() {
        for (&loc, &inst) in lvl.locations().iter().zip(lvl.instances()) {
            levels[li].as_slice_mut().unwrap()[loc] = if inst == 0 { 8.0 } else { 12.0 };
        }
    }
    let mut g = Graph::<f64>::new();
    let ids: Vec<_> = levels.iter().map(|v| g.constant(v.clone())).collect();
    let l = loss_id(&mut g, &ids, &t);
    assert!((g.scalar(l) - 2.0).abs() < 1e-12);
}

#[test]
fn grouping_follows_the_equations() {
    let b = |v: &[(LossTerm, f64)]| LossBundle { terms: v.iter().cloned().collect() };
    use LossTerm::*;
    assert_eq!(b(&[(Reg, 1.0), (Cls, 2.0), (Seg, 3.0), (Is, 4.0)]).grouped(), (10.0, 0.0));
    let all_ones_big_cent = b(&[(Reg, 1.0), (Cls, 1.0), (Cent, 100.0), (Seg, 1.0), (Is, 1.0), (Depth, 1.0), (Id, 1.0)]);
    assert_eq!(grouped_losses(&all_ones_big_cent), (4.0, 2.0));
    assert_eq!(b(&LossTerm::ALL.map(|t| (t, 0.0))).grouped(), (0.0, 0.0));
}

#[test]
fn geometric_mean_objective() {
    use LossTerm::*;
    let w = LossWeights::default();
    let b = LossBundle { terms: [(Seg, 4.0), (Depth, 9.0)].into_iter().collect() };
    assert!((mtl_loss(&b, &w, &[Seg, Depth]).unwrap() - 6.0).abs() < 1e-12);
    let single = LossBundle { terms: [(Seg, 7.0)].into_iter().collect() };
    assert!((mtl_loss(&single, &w, &[Seg]).unwrap() - 7.0).abs() < 1e-12);
    let (v, grads) = mtl_with_gradient(&[(Seg, 4.0), (Depth, 9.0)], &w, 1e-8).unwrap();
    assert!((v - 6.0).abs() < 1e-12 && (grads[0] - 0.75).abs() < 1e-12);
    // homogeneity of degree one in the weights
    let scaled = mtl_loss(&b, &w.scaled(3.0), &[Seg, Depth]).unwrap();
    assert!((scaled - 18.0).abs() < 1e-9);
    // a zero term is clamped and carries no gradient
    let (v, grads) = mtl_with_gradient(&[(Seg, 0.0), (Depth, 1.0)], &w, 1e-8).unwrap();
    assert!((v - 1e-4).abs() < 1e-12 && grads[0] == 0.0);
}

#[test]
fn mtl_node_gradient_matches_finite_differences() {
    let leaves = vec![ArrayD::from_elem(IxDyn(&[]), 4.0), ArrayD::from_elem(IxDyn(&[]), 9.0), ArrayD::from_elem(IxDyn(&[]), 0.7)];
    let lambdas = [1.0, 2.0, 0.5];
    let err = check_grad(leaves, |g, ids| {
        let terms: Vec<_> = ids.iter().zip(lambdas).map(|(&i, l)| (i, l)).collect();
        mtl_node(g, &terms, 1e-8).unwrap()
    });
    assert!(err < 1e-4, "{err}");
    // ∂L/∂L_1 at λ = (1, 1), L = (4, 9) is 6 / (2·4)
    let mut g = Graph::<f64>::new();
    let a = g.leaf(ArrayD::from_elem(IxDyn(&[]), 4.0));
    let b = g.leaf(ArrayD::from_elem(IxDyn(&[]), 9.0));
    let m = mtl_node(&mut g, &[(a, 1.0), (b, 1.0)], 1e-8).unwrap();
    let grads = g.backward(m);
    assert!((grads.get(a).unwrap().iter().next().unwrap() - 0.75).abs() < 1e-12);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let s = probe_scene();
    let b = basis();
    let t = assign_targets(&s, &ModelConfig::default(), Some(&b)).unwrap();
    assert!(t.num_positives() > 3);
    let lv = |c: usize, lo: f64, hi: f64, seed: u64| -> Vec<ArrayD<f64>> {
        level_shapes(c).iter().enumerate().map(|(i, sh)| random(sh, lo, hi, seed + i as u64)).collect()
    };
    let tol = 1e-4;
    let e = check_grad(lv(3, -3.0, 3.0, 100), |g, ids| loss_cls(g, ids, &t, 0.75, 2.0));
    assert!(e < tol, "cls {e}");
    let e = check_grad(lv(4, 1.0, 25.0, 200), |g, ids| loss_reg(g, ids, &t));
    assert!(e < tol, "reg {e}");
    let e = check_grad(lv(1, -3.0, 3.0, 300), |g, ids| loss_cent(g, ids, &t));
    assert!(e < tol, "cent {e}");
    let e = check_grad(lv(3, -2.0, 2.0, 400), |g, ids| loss_is(g, ids, &t).unwrap());
    assert!(e < tol, "is {e}");
    let e = check_grad(lv(1, 1.0, 15.0, 500), |g, ids| loss_id(g, ids, &t));
    assert!(e < tol, "id {e}");
    let weights = [0.7, 1.1, 0.9, 1.3, 1.0];
    // Dense-map terms sum thousands of pixels; a wider step keeps roundoff below the tolerance.
    let e = check_grad_step(vec![random(&[5, 64, 64], -2.0, 2.0, 600)], 1e-4, |g, ids| loss_seg(g, ids[0], &t, &weights));
    assert!(e < tol, "seg {e}");
    let e = check_grad_step(vec![random(&[1, 64, 64], 1.0, 20.0, 700)], 1e-4, |g, ids| loss_depth(g, ids[0], &t));
    assert!(e < tol, "depth {e}");
}

#[test]
fn selectors_pick_their_terms() {
    let all = TaskSet::all();
    let sem = LossSelector::Semantic.terms(all).unwrap();
    assert_eq!(sem, vec![LossTerm::Reg, LossTerm::Cls, LossTerm::Seg, LossTerm::Is]);
    assert_eq!(LossSelector::Geometric.terms(all).unwrap(), vec![LossTerm::Depth, LossTerm::Id]);
    assert_eq!("depth".parse::<LossSelector>().unwrap(), LossSelector::Term(LossTerm::Depth));
    assert!(LossSelector::Geometric.terms(TaskSet::parse_list("ss").unwrap()).is_err());
    assert!("nope".parse::<LossSelector>().is_err());
}
