use serde::{Deserialize, Serialize};

use super::DenseOutputs;
use crate::geometry::BBox;
use crate::maskcodec::PcaBasis;
use crate::tensor::sigmoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
    /// Candidates kept per level before NMS.
    pub pre_nms_top_k: usize,
    pub mask_threshold: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams { score_thresh: 0.05, nms_iou: 0.6, max_dets: 100, pre_nms_top_k: 1000, mask_threshold: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
    /// Full-image mask, when mask codes and a basis were available.
    pub mask: Option<ndarray::Array2<bool>>,
    pub median_depth: Option<f32>,
    /// Instance level (0 = P3) and flat location index within it.
    pub level: usize,
    pub location: usize,
}

impl Detection {
    fn order_key(&self) -> (usize, usize, usize) {
        (self.level, self.location, self.class_id)
    }
}

/// Greedy per-class NMS. Candidates are visited by descending score, ties by
/// lower (level, location, class); a candidate is suppressed by any kept
/// detection of its class with IoU above `iou`.
pub fn nms(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.order_key().cmp(&b.order_key())));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| k.class_id != d.class_id || k.bbox.iou(&d.bbox) <= iou) {
            kept.push(d);
        }
    }
    kept
}

/// FCOS-style decoding of the instance maps into scored, NMS-filtered detections.
pub fn decode_detections(dense: &DenseOutputs, basis: Option<&PcaBasis>, params: &DecodeParams) -> Vec<Detection> {
    let (img_h, img_w) = (dense.image_height as f64, dense.image_width as f64);
    let mut candidates = Vec::new();
    for (level, out) in dense.levels.iter().enumerate() {
        let (classes, h, w) = out.cls_logits.dim();
        let stride = out.stride as f64;
        let mut level_cands = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let cent = sigmoid(out.centerness[[0, y, x]] as f64);
                for c in 0..classes {
                    let score = (sigmoid(out.cls_logits[[c, y, x]] as f64) * cent).sqrt();
                    if score >= params.score_thresh {
                        level_cands.push((score, y * w + x, c));
                    }
                }
            }
        }
        level_cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        level_cands.truncate(params.pre_nms_top_k);
        for (score, loc, c) in level_cands {
            let (y, x) = (loc / w, loc % w);
            let (cx, cy) = ((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
            let d = |k: usize| out.box_dists[[k, y, x]] as f64;
            let bbox = BBox::new(cx - d(0), cy - d(1), cx + d(2), cy + d(3)).clip(img_w, img_h);
            candidates.push((Detection {
                class_id: c,
                score,
                bbox,
                mask: None,
                median_depth: out.inst_depth.as_ref().map(|m| m[[0, y, x]]),
                level,
                location: loc,
            }, out.mask_codes.as_ref().map(|m| m.slice(ndarray::s![.., y, x]).mapv(f64::from))));
        }
    }
    let codes: std::collections::HashMap<_, _> = candidates.iter().map(|(d, c)| (d.order_key(), c.clone())).collect();
    let mut kept = nms(candidates.into_iter().map(|(d, _)| d).collect(), params.nms_iou);
    kept.truncate(params.max_dets);
    if let Some(basis) = basis {
        for d in &mut kept {
            if let Some(Some(code)) = codes.get(&d.order_key()) {
                if code.len() == basis.code_dim() {
                    d.mask = Some(basis.decode_into_image(
                        code.view(),
                        &d.bbox,
                        dense.image_height,
                        dense.image_width,
                        params.mask_threshold,
                    ));
                }
            }
        }
    }
    kept
}
