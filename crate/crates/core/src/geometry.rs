//! Axis-aligned boxes in continuous pixel coordinates.
//!
//! Pixel `(row, col)` covers `[col, col + 1) × [row, row + 1)`, so the tight box
//! of a mask spans from the first occupied column to one past the last.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Width over height; `None` for zero height.
    pub fn aspect_ratio(&self) -> Option<f64> {
        let h = self.height();
        (h > 0.0).then(|| self.width() / h)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Generalized IoU: IoU minus the share of the smallest enclosing box not
    /// covered by the union. Degenerate unions count as IoU 0 and a degenerate
    /// enclosing box contributes no penalty.
    pub fn giou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        let iou = if union > 0.0 { inter / union } else { 0.0 };
        let enclose = BBox::new(
            self.x0.min(other.x0),
            self.y0.min(other.y0),
            self.x1.max(other.x1),
            self.y1.max(other.y1),
        )
        .area();
        if enclose > 0.0 {
            iou - (enclose - union) / enclose
        } else {
            iou
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x > self.x0 && x < self.x1 && y > self.y0 && y < self.y1
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x0.clamp(0.0, width),
            self.y0.clamp(0.0, height),
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
        )
    }

    /// Integer pixel extent `(col0, row0, col1, row1)`, half-open, covering the box.
    pub fn pixel_extent(&self) -> (usize, usize, usize, usize) {
        let c0 = self.x0.floor().max(0.0) as usize;
        let r0 = self.y0.floor().max(0.0) as usize;
        let c1 = self.x1.ceil().max(0.0) as usize;
        let r1 = self.y1.ceil().max(0.0) as usize;
        (c0, r0, c1.max(c0), r1.max(r0))
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn giou_reference_values() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert!((a.giou(&a) - 1.0).abs() < 1e-12);
        let b = BBox::new(2.0, 0.0, 3.0, 1.0);
        // enclosing 3x1, union 2: 0 - 1/3
        assert!((1.0 - a.giou(&b) - 4.0 / 3.0).abs() < 1e-12);
        let c = BBox::new(0.0, 0.0, 2.0, 2.0);
        let d = BBox::new(1.0, 1.0, 3.0, 3.0);
        // inter 1, union 7, enclosing 9
        let expected = 1.0 - (1.0 / 7.0 - 2.0 / 9.0);
        assert!((1.0 - c.giou(&d) - expected).abs() < 1e-12);
        assert!((expected - 1.0794).abs() < 1e-4);
    }

    #[test]
    fn aspect_ratio_and_degenerate() {
        assert_eq!(BBox::new(0.0, 0.0, 4.0, 2.0).aspect_ratio(), Some(2.0));
        assert_eq!(BBox::new(0.0, 1.0, 4.0, 1.0).aspect_ratio(), None);
        let z = BBox::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(z.iou(&z), 0.0);
        assert_eq!(z.giou(&z), 0.0);
    }
}
