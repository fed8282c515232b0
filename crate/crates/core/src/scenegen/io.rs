//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json      format version, generator spec, sample ids
//! <root>/images/<id>.png    8-bit RGB
//! <root>/seg/<id>.png       8-bit class indices
//! <root>/depth/<id>.raw     "UDPT", u32 height, u32 width, f32 LE row-major
//! <root>/ann/<id>.json      instances (class, box, median depth, RLE mask)
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{generate_scene, InstanceAnnotation, Sample, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const FORMAT_VERSION: u32 = 1;
const DEPTH_MAGIC: &[u8; 4] = b"UDPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec: SceneSpec,
    /// Index of the first scene; scene `i` of the dataset is `generate_scene(spec, first_index + i)`.
    pub first_index: u64,
    pub samples: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    height: usize,
    width: usize,
    instances: Vec<AnnotationRecord>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    class_id: usize,
    #[serde(rename = "box")]
    bbox: BBox,
    median_depth: f32,
    /// Alternating run lengths over the row-major mask, starting with unset pixels.
    mask_rle: Vec<u32>,
}

fn rle_encode(mask: &Array2<bool>) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &m in mask.iter() {
        if m != current {
            runs.push(len);
            current = m;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    runs
}

fn rle_decode(runs: &[u32], h: usize, w: usize) -> Option<Array2<bool>> {
    let mut flat = Vec::with_capacity(h * w);
    let mut value = false;
    for &r in runs {
        flat.extend(std::iter::repeat(value).take(r as usize));
        value = !value;
    }
    (flat.len() == h * w).then(|| Array2::from_shape_vec((h, w), flat).unwrap())
}

struct Paths {
    image: PathBuf,
    seg: PathBuf,
    depth: PathBuf,
    ann: PathBuf,
}

fn sample_paths(root: &Path, id: &str) -> Paths {
    Paths {
        image: root.join("images").join(format!("{id}.png")),
        seg: root.join("seg").join(format!("{id}.png")),
        depth: root.join("depth").join(format!("{id}.raw")),
        ann: root.join("ann").join(format!("{id}.json")),
    }
}

fn write_file(path: &Path, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    written.push(path.to_path_buf());
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_depth(depth: &Array2<f32>) -> Vec<u8> {
    let (h, w) = depth.dim();
    let mut bytes = Vec::with_capacity(12 + 4 * h * w);
    bytes.extend_from_slice(DEPTH_MAGIC);
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    for &d in depth.iter() {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    bytes
}

pub fn decode_depth(bytes: &[u8], path: &Path) -> Result<Array2<f32>> {
    if bytes.len() < 12 || &bytes[..4] != DEPTH_MAGIC {
        return Err(Error::corrupt(path, "missing UDPT header"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 4 * h * w {
        return Err(Error::corrupt(path, format!("expected {}x{} floats, file has {} bytes", h, w, bytes.len())));
    }
    let values = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Array2::from_shape_vec((h, w), values).unwrap())
}

fn image_to_rgb(image: &Array3<f32>) -> RgbImage {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Encodes a `[3, H, W]` image in `[0, 1]` as an 8-bit PNG.
pub fn write_png_rgb(path: &Path, image: &Array3<f32>) -> Result<()> {
    image_to_rgb(image).save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

fn write_sample(root: &Path, sample: &Sample, written: &mut Vec<PathBuf>) -> Result<()> {
    let p = sample_paths(root, &sample.id);
    write_png_rgb(&p.image, &sample.image)?;
    written.push(p.image.clone());
    let (h, w) = sample.seg.dim();
    let seg = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([sample.seg[[y as usize, x as usize]]]));
    seg.save(&p.seg).map_err(|e| Error::Image { path: p.seg.clone(), source: e })?;
    written.push(p.seg.clone());
    write_file(&p.depth, &encode_depth(&sample.depth), written)?;
    let ann = AnnotationFile {
        height: h,
        width: w,
        instances: sample
            .instances
            .iter()
            .map(|i| AnnotationRecord {
                class_id: i.class_id,
                bbox: i.bbox,
                median_depth: i.median_depth,
                mask_rle: rle_encode(&i.mask),
            })
            .collect(),
    };
    write_file(&p.ann, &serde_json::to_vec_pretty(&ann)?, written)
}

/// Writes `count` scenes and a manifest into `out_dir`.
///
/// On failure every file written by this call is removed again.
pub fn render_dataset(spec: &SceneSpec, count: usize, out_dir: &Path) -> Result<DatasetManifest> {
    render_dataset_from(spec, 0, count, out_dir)
}

/// Like [`render_dataset`] but starting at scene `first_index`, so that
/// disjoint splits can share one spec.
pub fn render_dataset_from(spec: &SceneSpec, first_index: u64, count: usize, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut written = Vec::new();
    let mut created_dirs = Vec::new();
    let result = (|| {
        for dir in [out_dir.to_path_buf(), out_dir.join("images"), out_dir.join("seg"), out_dir.join("depth"), out_dir.join("ann")] {
            if !dir.exists() {
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                created_dirs.push(dir);
            }
        }
        let mut ids = Vec::with_capacity(count);
        for i in 0..count as u64 {
            let mut sample = generate_scene(spec, first_index + i);
            sample.id = format!("{:06}", first_index + i);
            write_sample(out_dir, &sample, &mut written)?;
            ids.push(sample.id);
        }
        let manifest = DatasetManifest { format_version: FORMAT_VERSION, spec: spec.clone(), first_index, samples: ids };
        write_file(&out_dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?, &mut written)?;
        Ok(manifest)
    })();
    if result.is_err() {
        for f in written.iter().rev() {
            let _ = fs::remove_file(f);
        }
        for d in created_dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }
    result
}

/// A rendered dataset opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound { what: "dataset manifest", name: path.display().to_string() },
            _ => Error::io(&path, e),
        })?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e.to_string()))?;
        let version = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != FORMAT_VERSION {
            return Err(Error::Version { path, found: version, expected: FORMAT_VERSION });
        }
        let manifest: DatasetManifest = serde_json::from_value(value).map_err(|e| Error::corrupt(&path, e.to_string()))?;
        Ok(Dataset { root, manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.manifest.spec
    }

    pub fn load(&self, id: &str) -> Result<Sample> {
        load_sample(&self.root, &self.manifest, id)
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        self.manifest.samples.iter().map(|id| self.load(id)).collect()
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound { what: "file", name: path.display().to_string() },
        _ => Error::io(path, e),
    })
}

fn decode_png(path: &Path) -> Result<image::DynamicImage> {
    let bytes = read_bytes(path)?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| Error::corrupt(path, e.to_string()))
}

/// Reads one sample back and re-validates all of its invariants.
pub fn load_sample(root: &Path, manifest: &DatasetManifest, id: &str) -> Result<Sample> {
    if !manifest.samples.iter().any(|s| s == id) {
        return Err(Error::NotFound { what: "sample", name: id.to_string() });
    }
    let p = sample_paths(root, id);
    let rgb = decode_png(&p.image)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut image = Array3::<f32>::zeros((3, h, w));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            image[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
        }
    }
    let gray = decode_png(&p.seg)?.to_luma8();
    if (gray.width() as usize, gray.height() as usize) != (w, h) {
        return Err(Error::corrupt(&p.seg, "segmentation size differs from image"));
    }
    let seg = Array2::from_shape_fn((h, w), |(r, c)| gray.get_pixel(c as u32, r as u32).0[0]);
    let depth = decode_depth(&read_bytes(&p.depth)?, &p.depth)?;
    if depth.dim() != (h, w) {
        return Err(Error::corrupt(&p.depth, "depth size differs from image"));
    }
    let ann: AnnotationFile =
        serde_json::from_slice(&read_bytes(&p.ann)?).map_err(|e| Error::corrupt(&p.ann, e.to_string()))?;
    if (ann.height, ann.width) != (h, w) {
        return Err(Error::corrupt(&p.ann, "annotation size differs from image"));
    }
    let instances = ann
        .instances
        .into_iter()
        .map(|r| {
            let mask = rle_decode(&r.mask_rle, h, w).ok_or_else(|| Error::corrupt(&p.ann, "mask run lengths do not cover the image"))?;
            Ok(InstanceAnnotation { class_id: r.class_id, bbox: r.bbox, mask, median_depth: r.median_depth })
        })
        .collect::<Result<Vec<_>>>()?;
    let sample = Sample { id: id.to_string(), image, seg, depth, instances };
    sample.validate(&manifest.spec)?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rle_round_trip() {
        let mask = Array2::from_shape_fn((5, 7), |(r, c)| (r * 7 + c) % 3 == 0 || r == 4);
        let runs = rle_encode(&mask);
        assert_eq!(rle_decode(&runs, 5, 7).unwrap(), mask);
        assert!(rle_decode(&runs, 5, 6).is_none());
        let empty = Array2::from_elem((2, 2), false);
        assert_eq!(rle_encode(&empty), vec![4]);
    }

    #[test]
    fn depth_header_checked() {
        let d = Array2::from_shape_fn((2, 3), |(r, c)| (r * 3 + c) as f32 + 0.5);
        let bytes = encode_depth(&d);
        assert_eq!(&bytes[..4], b"UDPT");
        assert_eq!(decode_depth(&bytes, Path::new("x")).unwrap(), d);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_depth(&bad, Path::new("x")), Err(Error::Corrupt { .. })));
        assert!(matches!(decode_depth(&bytes[..20], Path::new("x")), Err(Error::Corrupt { .. })));
    }
}
