use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mask_bbox, median_depth, InstanceAnnotation, Sample, SceneSpec, Shape};

const SKY_TOP: [f32; 3] = [0.45, 0.62, 0.88];
const SKY_HORIZON: [f32; 3] = [0.78, 0.86, 0.95];
const GROUND_NEAR: [f32; 3] = [0.30, 0.28, 0.26];
const GROUND_FAR: [f32; 3] = [0.58, 0.56, 0.52];
/// Share of an object's color replaced by haze at the far plane.
const HAZE: f32 = 0.6;

/// Per-index seed so that scenes can be generated independently and in any order.
pub(crate) fn scene_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Placement {
    class_id: usize,
    depth: f64,
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
    color: [f32; 3],
}

impl Placement {
    fn covers(&self, shape: Shape, px: f64, py: f64) -> bool {
        let dx = (px - self.cx) / self.half_w;
        let dy = (py - self.cy) / self.half_h;
        match shape {
            Shape::Ellipse => dx * dx + dy * dy <= 1.0,
            Shape::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
        }
    }
}

struct Geometry {
    h: usize,
    near: f64,
    far: f64,
    horizon_row: f64,
}

impl Geometry {
    fn new(spec: &SceneSpec) -> Self {
        Geometry {
            h: spec.image_height,
            near: spec.depth_range[0],
            far: spec.depth_range[1],
            horizon_row: (spec.horizon * spec.image_height as f64).floor(),
        }
    }

    /// Background depth of a pixel row.
    fn row_depth(&self, row: usize) -> f64 {
        let r = row as f64;
        if r <= self.horizon_row {
            return self.far;
        }
        let bottom = (self.h - 1) as f64;
        let t = (bottom - r) / (bottom - self.horizon_row);
        self.near + (self.far - self.near) * t
    }

    /// Continuous y coordinate where the ground has depth `d`.
    fn ground_y(&self, d: f64) -> f64 {
        let bottom = (self.h - 1) as f64;
        let t = (d - self.near) / (self.far - self.near);
        bottom - t * (bottom - self.horizon_row) + 1.0
    }

    fn haze(&self, d: f64) -> f32 {
        (HAZE as f64 * ((d - self.near) / (self.far - self.near)).clamp(0.0, 1.0)) as f32
    }
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn sample_placements(spec: &SceneSpec, geo: &Geometry, rng: &mut ChaCha8Rng) -> Vec<Placement> {
    let [lo, hi] = spec.instance_count_range;
    let count = rng.gen_range(lo..=hi);
    let w = spec.image_width as f64;
    (0..count)
        .map(|_| {
            let class_id = rng.gen_range(0..spec.thing_classes.len());
            let class = &spec.thing_classes[class_id];
            let [dlo, dhi] = spec.object_depth_range;
            let depth = if dhi > dlo { rng.gen_range(dlo..dhi) } else { dlo };
            let aspect = class.aspect_mean + class.aspect_spread * rng.gen_range(-1.0..1.0);
            let [slo, shi] = class.size_range;
            let base = if shi > slo { rng.gen_range(slo..shi) } else { slo };
            let size = base * geo.near / depth;
            let half_w = 0.5 * size * aspect.sqrt();
            let half_h = 0.5 * size / aspect.sqrt();
            let cx = rng.gen_range(0.0..w);
            let cy = geo.ground_y(depth) - half_h;
            let mut color = class.color;
            for c in &mut color {
                *c = (*c + spec.color_jitter * rng.gen_range(-1.0f32..1.0)).clamp(0.0, 1.0);
            }
            Placement { class_id, depth, cx, cy, half_w, half_h, color }
        })
        .collect()
}

/// Paints instance indices far-to-near; the nearest instance wins every pixel.
fn rasterize(spec: &SceneSpec, placements: &[Placement], keep: &[bool]) -> Array2<i32> {
    let (h, w) = (spec.image_height, spec.image_width);
    let mut order: Vec<usize> = (0..placements.len()).filter(|&i| keep[i]).collect();
    order.sort_by(|&a, &b| placements[b].depth.total_cmp(&placements[a].depth).then(a.cmp(&b)));
    let mut owner = Array2::<i32>::from_elem((h, w), -1);
    for &i in &order {
        let p = &placements[i];
        let shape = spec.thing_classes[p.class_id].shape;
        let r0 = (p.cy - p.half_h).floor().max(0.0) as usize;
        let r1 = ((p.cy + p.half_h).ceil().max(0.0) as usize).min(h);
        let c0 = (p.cx - p.half_w).floor().max(0.0) as usize;
        let c1 = ((p.cx + p.half_w).ceil().max(0.0) as usize).min(w);
        for r in r0..r1 {
            for c in c0..c1 {
                if p.covers(shape, c as f64 + 0.5, r as f64 + 0.5) {
                    owner[[r, c]] = i as i32;
                }
            }
        }
    }
    owner
}

fn full_area(spec: &SceneSpec, p: &Placement) -> usize {
    let shape = spec.thing_classes[p.class_id].shape;
    let r0 = (p.cy - p.half_h).floor() as i64;
    let r1 = (p.cy + p.half_h).ceil() as i64;
    let c0 = (p.cx - p.half_w).floor() as i64;
    let c1 = (p.cx + p.half_w).ceil() as i64;
    let mut n = 0;
    for r in r0..r1 {
        for c in c0..c1 {
            if p.covers(shape, c as f64 + 0.5, r as f64 + 0.5) {
                n += 1;
            }
        }
    }
    n
}

/// Renders scene `index` of the dataset described by `spec`.
///
/// The result is a pure function of `(spec, index)`. Instances that end up too
/// occluded or clipped are dropped, so a scene may hold fewer instances than
/// were sampled.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(spec.seed, index));
    let geo = Geometry::new(spec);
    let (h, w) = (spec.image_height, spec.image_width);
    let placements = sample_placements(spec, &geo, &mut rng);

    let mut keep = vec![true; placements.len()];
    let mut owner = rasterize(spec, &placements, &keep);
    for (i, p) in placements.iter().enumerate() {
        let visible = owner.iter().filter(|&&o| o == i as i32).count();
        let total = full_area(spec, p).max(1);
        if visible < spec.min_visible_pixels || (visible as f64) < spec.min_visible_fraction * total as f64 {
            keep[i] = false;
        }
    }
    // Dropping an instance only uncovers pixels of the others, so one pass suffices.
    if keep.iter().any(|k| !k) {
        owner = rasterize(spec, &placements, &keep);
    }

    let num_stuff = spec.stuff_classes.len();
    let mut image = Array3::<f32>::zeros((3, h, w));
    let mut seg = Array2::<u8>::zeros((h, w));
    let mut depth = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        let bg_depth = geo.row_depth(r);
        let sky = (r as f64) <= geo.horizon_row;
        let bg_color = if sky {
            lerp3(SKY_TOP, SKY_HORIZON, (r as f64 / geo.horizon_row.max(1.0)) as f32)
        } else {
            let t = ((bg_depth - geo.near) / (geo.far - geo.near)) as f32;
            lerp3(GROUND_NEAR, GROUND_FAR, t.sqrt())
        };
        for c in 0..w {
            let o = owner[[r, c]];
            let (color, class, d) = if o >= 0 {
                let p = &placements[o as usize];
                // Mild top-lit shading keeps objects from being flat patches.
                let shade = 1.0 - 0.15 * ((r as f64 + 0.5 - (p.cy - p.half_h)) / (2.0 * p.half_h)).clamp(0.0, 1.0) as f32;
                let lit = [p.color[0] * shade, p.color[1] * shade, p.color[2] * shade];
                let hazed = lerp3(lit, SKY_HORIZON, geo.haze(p.depth));
                (hazed, num_stuff + p.class_id, p.depth)
            } else if sky {
                (bg_color, 0, geo.far)
            } else {
                (bg_color, 1, bg_depth)
            };
            for ch in 0..3 {
                let noise = spec.pixel_noise * rng.gen_range(-1.0f32..1.0);
                image[[ch, r, c]] = quantize(color[ch] + noise);
            }
            seg[[r, c]] = class as u8;
            depth[[r, c]] = d as f32;
        }
    }

    let mut instances = Vec::new();
    for (i, p) in placements.iter().enumerate() {
        if !keep[i] {
            continue;
        }
        let mask = owner.mapv(|o| o == i as i32);
        let Some(bbox) = mask_bbox(&mask) else { continue };
        let median = median_depth(&mask, &depth).expect("nonempty mask");
        instances.push(InstanceAnnotation { class_id: p.class_id, bbox, mask, median_depth: median });
    }

    Sample { id: format!("{index:06}"), image, seg, depth, instances }
}
