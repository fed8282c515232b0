//! Procedural driving-like scenes with consistent ground truth for every task.
//!
//! A scene is a sky band above a ground plane whose depth ramps from `near` at
//! the bottom row to `far` at the horizon. Objects stand on the ground: an
//! object at depth `d` has its bottom edge on the ground row of depth `d` and an
//! apparent size proportional to `near / d`. Thing classes differ in color and,
//! more importantly, in box aspect ratio, which gives the dataset the
//! class/shape correlation probed by the class-swap experiment.

mod io;
mod render;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub use io::{
    decode_depth, encode_depth, load_sample, render_dataset, render_dataset_from, write_png_rgb, Dataset,
    DatasetManifest, FORMAT_VERSION,
};
pub use render::generate_scene;

/// Depths outside `(DEPTH_VALID_MIN, DEPTH_VALID_MAX]` are ignored by depth
/// losses and metrics.
pub const DEPTH_VALID_MIN: f32 = 1e-3;
pub const DEPTH_VALID_MAX: f32 = 80.0;

pub fn depth_is_valid(d: f32) -> bool {
    d.is_finite() && d >= DEPTH_VALID_MIN && d <= DEPTH_VALID_MAX
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Ellipse,
    Rectangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThingClass {
    pub name: String,
    /// Mean and half-width of the uniform width/height distribution.
    pub aspect_mean: f64,
    pub aspect_spread: f64,
    /// Range of `sqrt(w·h)` in pixels for an object placed at depth `near`.
    pub size_range: [f64; 2],
    pub shape: Shape,
    pub color: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub stuff_classes: Vec<String>,
    pub thing_classes: Vec<ThingClass>,
    pub instance_count_range: [usize; 2],
    /// `[near, far]` in meters for the background.
    pub depth_range: [f64; 2],
    /// Depth interval objects are placed in.
    pub object_depth_range: [f64; 2],
    /// Horizon row as a fraction of the image height.
    pub horizon: f64,
    pub color_jitter: f32,
    pub pixel_noise: f32,
    /// Objects with fewer visible pixels, or a smaller visible share, are dropped.
    pub min_visible_pixels: usize,
    pub min_visible_fraction: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let thing = |name: &str, aspect_mean, aspect_spread, size_range, shape, color| ThingClass {
            name: name.to_string(),
            aspect_mean,
            aspect_spread,
            size_range,
            shape,
            color,
        };
        SceneSpec {
            image_height: 128,
            image_width: 128,
            stuff_classes: vec!["sky".into(), "ground".into()],
            thing_classes: vec![
                thing("person", 0.45, 0.1, [46.0, 60.0], Shape::Ellipse, [0.80, 0.25, 0.25]),
                thing("car", 1.9, 0.3, [54.0, 72.0], Shape::Rectangle, [0.20, 0.35, 0.80]),
                thing("sign", 1.0, 0.1, [36.0, 48.0], Shape::Ellipse, [0.90, 0.80, 0.20]),
            ],
            instance_count_range: [2, 5],
            depth_range: [2.0, 50.0],
            object_depth_range: [3.0, 10.0],
            horizon: 0.4,
            color_jitter: 0.08,
            pixel_noise: 0.03,
            min_visible_pixels: 24,
            min_visible_fraction: 0.3,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.stuff_classes.len() + self.thing_classes.len()
    }

    /// Segmentation index of a thing class.
    pub fn thing_seg_class(&self, thing_id: usize) -> usize {
        self.stuff_classes.len() + thing_id
    }

    pub fn class_names(&self) -> Vec<String> {
        self.stuff_classes
            .iter()
            .cloned()
            .chain(self.thing_classes.iter().map(|t| t.name.clone()))
            .collect()
    }

    pub fn thing_index(&self, name: &str) -> Option<usize> {
        self.thing_classes.iter().position(|t| t.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_height == 0 || self.image_height % 128 != 0 || self.image_width == 0 || self.image_width % 128 != 0 {
            return bad(format!(
                "image size {}x{} must be a positive multiple of 128",
                self.image_height, self.image_width
            ));
        }
        if self.stuff_classes.len() != 2 {
            return bad("exactly two stuff classes (sky, ground) are rendered".into());
        }
        if self.thing_classes.is_empty() || self.num_classes() > 255 {
            return bad("need between 1 and 253 thing classes".into());
        }
        if !self.thing_classes.iter().any(|t| t.aspect_mean < 1.0)
            || !self.thing_classes.iter().any(|t| t.aspect_mean > 1.0)
        {
            return bad("need at least one thing class with mean aspect < 1 and one > 1".into());
        }
        for t in &self.thing_classes {
            if t.aspect_spread < 0.0 || t.aspect_mean - t.aspect_spread <= 0.0 {
                return bad(format!("class {}: aspect distribution must stay positive", t.name));
            }
            if !(t.size_range[0] > 0.0 && t.size_range[0] <= t.size_range[1]) {
                return bad(format!("class {}: bad size range", t.name));
            }
        }
        let [lo, hi] = self.instance_count_range;
        if lo > hi {
            return bad("instance_count_range min > max".into());
        }
        let [near, far] = self.depth_range;
        if !(near > DEPTH_VALID_MIN as f64 && far <= DEPTH_VALID_MAX as f64 && near < far) {
            return bad(format!("depth_range [{near}, {far}] must satisfy 1e-3 < near < far <= 80"));
        }
        let [onear, ofar] = self.object_depth_range;
        if !(onear >= near && ofar <= far && onear <= ofar) {
            return bad("object_depth_range must lie inside depth_range".into());
        }
        if !(0.05..0.95).contains(&self.horizon) {
            return bad("horizon must be within (0.05, 0.95)".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceAnnotation {
    /// Index into `SceneSpec::thing_classes`.
    pub class_id: usize,
    pub bbox: BBox,
    /// Visible pixels at image resolution.
    pub mask: Array2<bool>,
    pub median_depth: f32,
}

/// One rendered scene. The image is stored channel-major as `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f32>,
    pub seg: Array2<u8>,
    pub depth: Array2<f32>,
    pub instances: Vec<InstanceAnnotation>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.seg.nrows()
    }

    pub fn width(&self) -> usize {
        self.seg.ncols()
    }

    /// Checks every ground-truth consistency invariant.
    pub fn validate(&self, spec: &SceneSpec) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let fail = |m: String| Err(Error::Invariant(format!("sample {}: {m}", self.id)));
        if self.image.shape() != [3, h, w] || self.depth.dim() != (h, w) {
            return fail("image/seg/depth shapes disagree".into());
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return fail("image values outside [0, 1]".into());
        }
        let num_classes = spec.num_classes() as u8;
        if self.seg.iter().any(|&c| c >= num_classes) {
            return fail("segmentation class out of range".into());
        }
        let [near, far] = spec.depth_range;
        if self.depth.iter().any(|&d| !(d.is_finite() && d as f64 >= near - 1e-4 && d as f64 <= far + 1e-4)) {
            return fail("depth outside [near, far]".into());
        }
        for (k, inst) in self.instances.iter().enumerate() {
            if inst.class_id >= spec.thing_classes.len() {
                return fail(format!("instance {k}: class out of range"));
            }
            if inst.mask.dim() != (h, w) {
                return fail(format!("instance {k}: mask shape"));
            }
            let Some(tight) = mask_bbox(&inst.mask) else {
                return fail(format!("instance {k}: empty mask"));
            };
            if tight != inst.bbox {
                return fail(format!("instance {k}: box {:?} is not the tight box {:?} of its mask", inst.bbox, tight));
            }
            let seg_class = spec.thing_seg_class(inst.class_id) as u8;
            if inst.mask.indexed_iter().any(|((r, c), &m)| m && self.seg[[r, c]] != seg_class) {
                return fail(format!("instance {k}: segmentation disagrees with mask"));
            }
            let med = median_depth(&inst.mask, &self.depth);
            if med != Some(inst.median_depth) {
                return fail(format!("instance {k}: median depth {} != {:?}", inst.median_depth, med));
            }
        }
        for a in 0..self.instances.len() {
            for b in a + 1..self.instances.len() {
                let overlap = self.instances[a]
                    .mask
                    .iter()
                    .zip(self.instances[b].mask.iter())
                    .any(|(&x, &y)| x && y);
                if overlap {
                    return fail(format!("instances {a} and {b} overlap"));
                }
            }
        }
        Ok(())
    }
}

/// Tight box of the set pixels of a mask.
pub fn mask_bbox(mask: &Array2<bool>) -> Option<BBox> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for ((r, c), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        bounds = Some(match bounds {
            None => (c, r, c, r),
            Some((c0, r0, c1, r1)) => (c0.min(c), r0.min(r), c1.max(c), r1.max(r)),
        });
    }
    bounds.map(|(c0, r0, c1, r1)| BBox::new(c0 as f64, r0 as f64, (c1 + 1) as f64, (r1 + 1) as f64))
}

/// Median of `depth` over the mask (mean of the two central values for even counts).
pub fn median_depth(mask: &Array2<bool>, depth: &Array2<f32>) -> Option<f32> {
    let mut v: Vec<f32> = mask
        .iter()
        .zip(depth.iter())
        .filter_map(|(&m, &d)| m.then_some(d))
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f32::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
