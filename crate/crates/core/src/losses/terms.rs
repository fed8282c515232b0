//! The individual loss terms as graph operations with analytic gradients.
//!
//! Every term is evaluated in f64 whatever the graph precision; its gradient
//! with respect to each input is computed alongside the value and scaled by the
//! upstream gradient on the backward pass.

use ndarray::{Array2, ArrayD};

use super::targets::DenseTargets;
use crate::tensor::{softplus, sigmoid, Graph, NodeId, Scalar};

/// Records a scalar node with precomputed input gradients.
fn scalar_op<T: Scalar>(g: &mut Graph<T>, inputs: &[NodeId], value: f64, grads: Vec<Vec<f64>>) -> NodeId {
    let shapes: Vec<_> = inputs.iter().map(|&i| g.value(i).raw_dim()).collect();
    let grads: Vec<ArrayD<T>> = grads
        .into_iter()
        .zip(shapes)
        .map(|(v, s)| ArrayD::from_shape_vec(s, v.into_iter().map(T::of).collect()).unwrap())
        .collect();
    g.apply(
        inputs,
        ArrayD::from_elem(ndarray::IxDyn(&[]), T::of(value)),
        Box::new(move |ctx| {
            let up = *ctx.grad.iter().next().unwrap();
            grads.iter().zip(&ctx.needs).map(|(gr, &need)| need.then(|| gr * up)).collect()
        }),
    )
}

fn values<T: Scalar>(g: &Graph<T>, n: NodeId) -> Vec<f64> {
    g.value(n).iter().map(|v| v.as_f64()).collect()
}

fn plane<T: Scalar>(g: &Graph<T>, n: NodeId) -> usize {
    let s = g.shape(n);
    s[1] * s[2]
}

/// Varifocal loss of one logit and its derivative. A soft label `q` marks a
/// positive, `None` a negative.
pub fn varifocal(z: f64, q: Option<f64>, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    match q {
        Some(q) => (q * bce_logit(z, q), q * (p - q)),
        None => {
            // −ln(1 − p) = softplus(z)
            let pg = p.powf(gamma);
            let sp = softplus(z);
            (alpha * pg * sp, alpha * pg * (p + gamma * (1.0 - p) * sp))
        }
    }
}

/// Binary cross entropy of a logit against a soft label.
pub fn bce_logit(z: f64, q: f64) -> f64 {
    q * softplus(-z) + (1.0 - q) * softplus(z)
}

/// Varifocal loss over all levels. `levels[i]` holds the `[classes, H, W]`
/// logits of level `i`. Positives use the centerness target as the soft label.
pub fn loss_cls<T: Scalar>(g: &mut Graph<T>, levels: &[NodeId], targets: &DenseTargets, alpha: f64, gamma: f64) -> NodeId {
    let norm = targets.num_positives().max(1) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(levels.len());
    for (li, &node) in levels.iter().enumerate() {
        let z = values(g, node);
        let hw = plane(g, node);
        let mut soft = vec![None; z.len()];
        let det = targets.detection(li);
        for (&loc, d) in targets.levels[li].locations().iter().zip(det) {
            soft[d.class_id * hw + loc] = Some(d.centerness);
        }
        let mut grad = vec![0.0; z.len()];
        for (i, &zi) in z.iter().enumerate() {
            let (loss, dz) = varifocal(zi, soft[i], alpha, gamma);
            total += loss;
            grad[i] = dz / norm;
        }
        grads.push(grad);
    }
    scalar_op(g, levels, total / norm, grads)
}

/// `1 − GIoU` for two boxes given as distances from a shared interior point,
/// with the gradient with respect to the predicted distances.
pub fn giou_loss_dists(p: [f64; 4], t: [f64; 4]) -> (f64, [f64; 4]) {
    let [l, tp, r, b] = p;
    let [lt, tt, rt, bt] = t;
    let iw = l.min(lt) + r.min(rt);
    let ih = tp.min(tt) + b.min(bt);
    let inter = iw * ih;
    let area_p = (l + r) * (tp + b);
    let area_t = (lt + rt) * (tt + bt);
    let union = area_p + area_t - inter;
    let cw = l.max(lt) + r.max(rt);
    let ch = tp.max(tt) + b.max(bt);
    let enclose = cw * ch;
    let loss = 1.0 - (inter / union - (enclose - union) / enclose);
    let g_area = inter / (union * union) - 1.0 / enclose;
    let g_inter = -1.0 / union - g_area;
    let g_enc = union / (enclose * enclose);
    let ind = |lt: bool| if lt { 1.0 } else { 0.0 };
    let grad = [
        g_inter * ih * ind(l <= lt) + g_area * (tp + b) + g_enc * ch * ind(l > lt),
        g_inter * iw * ind(tp <= tt) + g_area * (l + r) + g_enc * cw * ind(tp > tt),
        g_inter * ih * ind(r <= rt) + g_area * (tp + b) + g_enc * ch * ind(r > rt),
        g_inter * iw * ind(b <= bt) + g_area * (l + r) + g_enc * cw * ind(b > bt),
    ];
    (loss, grad)
}

/// Mean `1 − GIoU` over positives; `levels[i]` holds `[4, H, W]` distances.
pub fn loss_reg<T: Scalar>(g: &mut Graph<T>, levels: &[NodeId], targets: &DenseTargets) -> NodeId {
    let norm = targets.num_positives().max(1) as f64;
    let mut total = 0.0;
    let mut grads = Vec::new();
    for (li, &node) in levels.iter().enumerate() {
        let v = values(g, node);
        let hw = plane(g, node);
        let mut grad = vec![0.0; v.len()];
        let det = targets.detection(li);
        for (&loc, d) in targets.levels[li].locations().iter().zip(det) {
            let p = [v[loc], v[hw + loc], v[2 * hw + loc], v[3 * hw + loc]];
            let (loss, gp) = giou_loss_dists(p, d.dists);
            total += loss;
            for k in 0..4 {
                grad[k * hw + loc] += gp[k] / norm;
            }
        }
        grads.push(grad);
    }
    scalar_op(g, levels, total / norm, grads)
}

/// Binary cross entropy of centerness logits against centerness targets, mean over positives.
pub fn loss_cent<T: Scalar>(g: &mut Graph<T>, levels: &[NodeId], targets: &DenseTargets) -> NodeId {
    let norm = targets.num_positives().max(1) as f64;
    let mut total = 0.0;
    let mut grads = Vec::new();
    for (li, &node) in levels.iter().enumerate() {
        let z = values(g, node);
        let mut grad = vec![0.0; z.len()];
        let det = targets.detection(li);
        for (&loc, d) in targets.levels[li].locations().iter().zip(det) {
            let (zi, q) = (z[loc], d.centerness);
            total += bce_logit(zi, q);
            grad[loc] += (sigmoid(zi) - q) / norm;
        }
        grads.push(grad);
    }
    scalar_op(g, levels, total / norm, grads)
}

/// Weighted cross entropy `Σ w_y·CE / Σ w_y` of `[C, H, W]` logits against a
/// label map. Uniform weights give the plain pixel mean.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: NodeId, labels: &Array2<u8>, weights: &[f64]) -> NodeId {
    let z = values(g, logits);
    let c = g.shape(logits)[0];
    let hw = plane(g, logits);
    assert_eq!(labels.len(), hw, "label map size");
    assert_eq!(weights.len(), c, "one weight per class");
    let mut grad = vec![0.0; z.len()];
    let (mut total, mut wsum) = (0.0, 0.0);
    let mut probs = vec![0.0; c];
    for (px, &y) in labels.iter().enumerate() {
        let y = y as usize;
        let m = (0..c).map(|k| z[k * hw + px]).fold(f64::MIN, f64::max);
        let mut s = 0.0;
        for k in 0..c {
            probs[k] = (z[k * hw + px] - m).exp();
            s += probs[k];
        }
        let w = weights[y];
        total += w * (m + s.ln() - z[y * hw + px]);
        wsum += w;
        for k in 0..c {
            grad[k * hw + px] = w * (probs[k] / s - if k == y { 1.0 } else { 0.0 });
        }
    }
    let wsum = wsum.max(f64::MIN_POSITIVE);
    grad.iter_mut().for_each(|v| *v /= wsum);
    scalar_op(g, &[logits], total / wsum, vec![grad])
}

/// Class-balanced segmentation loss.
pub fn loss_seg<T: Scalar>(g: &mut Graph<T>, logits: NodeId, targets: &DenseTargets, class_weights: &[f64]) -> NodeId {
    cross_entropy(g, logits, targets.seg(), class_weights)
}

/// Mean over positives of the per-dimension squared error of mask codes.
/// Returns `None` when the targets carry no codes.
pub fn loss_is<T: Scalar>(g: &mut Graph<T>, levels: &[NodeId], targets: &DenseTargets) -> Option<NodeId> {
    let norm = targets.num_positives().max(1) as f64;
    let mut total = 0.0;
    let mut grads = Vec::new();
    for (li, &node) in levels.iter().enumerate() {
        let v = values(g, node);
        let k = g.shape(node)[0];
        let hw = plane(g, node);
        let mut grad = vec![0.0; v.len()];
        let codes = targets.codes(li)?;
        for (&loc, code) in targets.levels[li].locations().iter().zip(codes) {
            assert_eq!(code.len(), k, "mask code length");
            for (j, &c) in code.iter().enumerate() {
                let d = v[j * hw + loc] - c;
                total += d * d / k as f64;
                grad[j * hw + loc] += 2.0 * d / (k as f64 * norm);
            }
        }
        grads.push(grad);
    }
    Some(scalar_op(g, levels, total / norm, grads))
}

/// Root mean squared error over the pixels where `valid` holds; 0 when none do.
pub fn rmse<T: Scalar>(g: &mut Graph<T>, pred: NodeId, target: &Array2<f32>, valid: &Array2<bool>) -> NodeId {
    let p = values(g, pred);
    assert_eq!(p.len(), target.len(), "depth map size");
    let n = valid.iter().filter(|&&v| v).count();
    let mut sq = 0.0;
    for ((&pi, &t), &ok) in p.iter().zip(target.iter()).zip(valid.iter()) {
        if ok {
            sq += (pi - t as f64).powi(2);
        }
    }
    let value = if n == 0 { 0.0 } else { (sq / n as f64).sqrt() };
    let grad = p
        .iter()
        .zip(target.iter())
        .zip(valid.iter())
        .map(|((&pi, &t), &ok)| if ok && value > 0.0 { (pi - t as f64) / (n as f64 * value) } else { 0.0 })
        .collect();
    scalar_op(g, &[pred], value, vec![grad])
}

pub fn loss_depth<T: Scalar>(g: &mut Graph<T>, depth_map: NodeId, targets: &DenseTargets) -> NodeId {
    let (depth, valid) = targets.depth();
    rmse(g, depth_map, depth, valid)
}

/// Mean absolute error of instance depths over positives.
pub fn loss_id<T: Scalar>(g: &mut Graph<T>, levels: &[NodeId], targets: &DenseTargets) -> NodeId {
    let norm = targets.num_positives().max(1) as f64;
    let mut total = 0.0;
    let mut grads = Vec::new();
    for (li, &node) in levels.iter().enumerate() {
        let v = values(g, node);
        let mut grad = vec![0.0; v.len()];
        let depths = targets.inst_depths(li);
        for (&loc, d) in targets.levels[li].locations().iter().zip(depths) {
            let e = v[loc] - d;
            total += e.abs();
            let sign = if e > 0.0 { 1.0 } else if e < 0.0 { -1.0 } else { 0.0 };
            grad[loc] += sign / norm;
        }
        grads.push(grad);
    }
    scalar_op(g, levels, total / norm, grads)
}
