//! PCA encoding of instance masks.
//!
//! A mask is cropped to its box, resized to `m × m` by nearest neighbour and
//! flattened; the code is the projection of that vector, minus the training
//! mean, onto the top-`k` principal directions of the training masks.
//! Decoding reconstructs the `m × m` grid, resizes it bilinearly to the target
//! box and thresholds it.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::bilinear_weights;

pub const BASIS_MAGIC: &[u8; 4] = b"UPCA";
pub const BASIS_VERSION: u32 = 1;
pub const DEFAULT_MASK_SIDE: usize = 16;
pub const DEFAULT_CODE_DIM: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    pub mask_side: usize,
    /// Length `m²`.
    pub mean: Array1<f32>,
    /// `k × m²`, orthonormal rows.
    pub components: Array2<f32>,
}

/// Result of [`fit_pca`].
#[derive(Clone, Debug)]
pub struct PcaFit {
    pub basis: PcaBasis,
    /// Variance along each retained component, nonincreasing.
    pub explained_variance: Vec<f64>,
}

/// Crops `mask` to the pixel extent of `bbox` and resamples it to `side × side`.
/// Returns `None` when the crop is empty.
pub fn crop_resize_nearest(mask: &Array2<bool>, bbox: &BBox, side: usize) -> Option<Array1<f64>> {
    let (h, w) = mask.dim();
    let (c0, r0, c1, r1) = bbox.pixel_extent();
    let (c1, r1) = (c1.min(w), r1.min(h));
    if c0 >= c1 || r0 >= r1 {
        return None;
    }
    let (bh, bw) = (r1 - r0, c1 - c0);
    let grid = Array1::from_shape_fn(side * side, |i| {
        let (y, x) = (i / side, i % side);
        let sy = r0 + (((y as f64 + 0.5) * bh as f64 / side as f64) as usize).min(bh - 1);
        let sx = c0 + (((x as f64 + 0.5) * bw as f64 / side as f64) as usize).min(bw - 1);
        if mask[[sy, sx]] {
            1.0
        } else {
            0.0
        }
    });
    let any = mask.slice(ndarray::s![r0..r1, c0..c1]).iter().any(|&m| m);
    any.then_some(grid)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the matching eigenvectors as columns.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut a = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[[i, j]] * a[[i, j]]).sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[[i, i]]).collect(), v)
}

/// Fits a rank-`k` basis to resized binary masks given as `(mask, box)` pairs.
pub fn fit_pca<'a>(
    masks: impl IntoIterator<Item = (&'a Array2<bool>, &'a BBox)>,
    side: usize,
    k: usize,
) -> Result<PcaFit> {
    let dim = side * side;
    if k == 0 || k > dim {
        return Err(Error::Config(format!("code dimension {k} must be in 1..={dim}")));
    }
    let rows: Vec<Array1<f64>> = masks.into_iter().filter_map(|(m, b)| crop_resize_nearest(m, b, side)).collect();
    if rows.len() < k {
        return Err(Error::Config(format!("need at least {k} training masks, got {}", rows.len())));
    }
    let n = rows.len();
    let mut data = Array2::<f64>::zeros((n, dim));
    for (i, r) in rows.iter().enumerate() {
        data.row_mut(i).assign(r);
    }
    let mean = data.mean_axis(ndarray::Axis(0)).unwrap();
    let centered = &data - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let (values, vectors) = symmetric_eigen(&cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut components = Array2::<f32>::zeros((k, dim));
    let mut explained = Vec::with_capacity(k);
    for (row, &idx) in order.iter().take(k).enumerate() {
        let mut col = vectors.column(idx).to_owned();
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-9) {
            if *first < 0.0 {
                col.mapv_inplace(|v| -v);
            }
        }
        components.row_mut(row).assign(&col.mapv(|v| v as f32));
        explained.push(values[idx].max(0.0));
    }
    Ok(PcaFit {
        basis: PcaBasis { mask_side: side, mean: mean.mapv(|v| v as f32), components },
        explained_variance: explained,
    })
}

impl PcaBasis {
    pub fn code_dim(&self) -> usize {
        self.components.nrows()
    }

    /// Projects a real-valued `m × m` grid (flattened row-major).
    pub fn encode_grid(&self, grid: ArrayView1<f64>) -> Array1<f64> {
        let centered = &grid - &self.mean.mapv(f64::from);
        self.components.mapv(f64::from).dot(&centered)
    }

    pub fn encode_mask(&self, mask: &Array2<bool>, bbox: &BBox) -> Result<Array1<f64>> {
        let grid = crop_resize_nearest(mask, bbox, self.mask_side)
            .ok_or_else(|| Error::Invalid("cannot encode an empty mask crop".into()))?;
        Ok(self.encode_grid(grid.view()))
    }

    /// Reconstructed `m × m` grid (row-major) before resizing.
    pub fn reconstruct(&self, code: ArrayView1<f64>) -> Array1<f64> {
        self.components.mapv(f64::from).t().dot(&code) + self.mean.mapv(f64::from)
    }

    /// Decodes a code into a `height × width` binary mask for a box of that pixel size.
    pub fn decode_mask(&self, code: ArrayView1<f64>, height: usize, width: usize, threshold: f64) -> Array2<bool> {
        let m = self.mask_side;
        let grid = self.reconstruct(code).into_shape_with_order((m, m)).unwrap();
        if height == 0 || width == 0 {
            return Array2::from_elem((height, width), false);
        }
        let ry = bilinear_weights::<f64>(m, height);
        let rx = bilinear_weights::<f64>(m, width);
        ry.dot(&grid).dot(&rx.t()).mapv(|v| v >= threshold)
    }

    /// Decodes into a full-image mask, pasting the result into the pixel extent of `bbox`.
    pub fn decode_into_image(&self, code: ArrayView1<f64>, bbox: &BBox, height: usize, width: usize, threshold: f64) -> Array2<bool> {
        let mut out = Array2::from_elem((height, width), false);
        let (c0, r0, c1, r1) = bbox.clip(width as f64, height as f64).pixel_extent();
        let (c1, r1) = (c1.min(width), r1.min(height));
        if c0 >= c1 || r0 >= r1 {
            return out;
        }
        let local = self.decode_mask(code, r1 - r0, c1 - c0, threshold);
        out.slice_mut(ndarray::s![r0..r1, c0..c1]).assign(&local);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.mask_side as u32;
        let k = self.code_dim() as u32;
        let mut out = Vec::with_capacity(16 + 4 * (self.mean.len() + self.components.len()));
        out.extend_from_slice(BASIS_MAGIC);
        out.extend_from_slice(&BASIS_VERSION.to_le_bytes());
        out.extend_from_slice(&m.to_le_bytes());
        out.extend_from_slice(&k.to_le_bytes());
        for v in self.mean.iter().chain(self.components.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != BASIS_MAGIC {
            return Err(Error::corrupt(origin, "missing UPCA header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != BASIS_VERSION {
            return Err(Error::Version { path: origin.into(), found: version, expected: BASIS_VERSION });
        }
        let (m, k) = (word(8) as usize, word(12) as usize);
        let dim = m * m;
        if k == 0 || k > dim || bytes.len() != 16 + 4 * (dim + k * dim) {
            return Err(Error::corrupt(origin, format!("inconsistent basis size (m={m}, k={k})")));
        }
        let floats: Vec<f32> = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(PcaBasis {
            mask_side: m,
            mean: Array1::from(floats[..dim].to_vec()),
            components: Array2::from_shape_vec((k, dim), floats[dim..].to_vec()).unwrap(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Intersection over union of two equally sized binary masks; 1 when both are empty.
pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::mask_bbox;

    fn ellipse(h: usize, w: usize, cy: f64, cx: f64, ry: f64, rx: f64) -> Array2<bool> {
        Array2::from_shape_fn((h, w), |(r, c)| {
            let dy = (r as f64 + 0.5 - cy) / ry;
            let dx = (c as f64 + 0.5 - cx) / rx;
            dx * dx + dy * dy <= 1.0
        })
    }

    fn shapes() -> Vec<(Array2<bool>, BBox)> {
        (0..40)
            .map(|i| {
                let m = ellipse(40, 40, 20.0, 20.0, 4.0 + (i % 7) as f64 * 2.0, 5.0 + (i % 5) as f64 * 3.0);
                let b = mask_bbox(&m).unwrap();
                (m, b)
            })
            .collect()
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = ndarray::arr2(&[[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 1.0]]);
        let (vals, vecs) = symmetric_eigen(&a);
        for (i, &l) in vals.iter().enumerate() {
            let v = vecs.column(i);
            let av = a.dot(&v);
            assert!((&av - &(&v * l)).iter().all(|d| d.abs() < 1e-12));
        }
        let trace: f64 = vals.iter().sum();
        assert!((trace - 8.0).abs() < 1e-12);
    }

    #[test]
    fn identical_masks_reconstruct_exactly_from_the_mean() {
        let m = ellipse(30, 30, 15.0, 15.0, 8.0, 5.0);
        let b = mask_bbox(&m).unwrap();
        let data: Vec<_> = (0..5).map(|_| (m.clone(), b)).collect();
        let fit = fit_pca(data.iter().map(|(m, b)| (m, b)), 16, 1).unwrap();
        let grid = crop_resize_nearest(&m, &b, 16).unwrap();
        let code = fit.basis.encode_grid(grid.view());
        let recon = fit.basis.reconstruct(code.view());
        assert!((&recon - &grid).iter().all(|d| d.abs() < 1e-6));
    }

    #[test]
    fn components_orthonormal_and_variance_sorted() {
        let data = shapes();
        let fit = fit_pca(data.iter().map(|(m, b)| (m, b)), 8, 10).unwrap();
        let c = fit.basis.components.mapv(f64::from);
        let gram = c.dot(&c.t());
        for i in 0..10 {
            for j in 0..10 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - expected).abs() < 1e-6);
            }
        }
        assert!(fit.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn too_few_masks_is_an_error() {
        let data = shapes();
        assert!(fit_pca(data.iter().take(3).map(|(m, b)| (m, b)), 8, 4).is_err());
    }

    #[test]
    fn mean_mask_encodes_to_zero_and_zero_code_decodes_to_mean() {
        let data = shapes();
        let fit = fit_pca(data.iter().map(|(m, b)| (m, b)), 8, 6).unwrap();
        let mean = fit.basis.mean.mapv(f64::from);
        let code = fit.basis.encode_grid(mean.view());
        assert!(code.iter().all(|c| c.abs() < 1e-5));
        let zero = Array1::zeros(6);
        let decoded = fit.basis.decode_mask(zero.view(), 8, 8, 0.5);
        let expected = mean.mapv(|v| v >= 0.5).into_shape_with_order((8, 8)).unwrap();
        assert_eq!(decoded, expected);
    }

    #[test]
    fn full_rank_round_trip_is_identity() {
        // Masks already m x m, so the resize is lossless.
        let side = 6;
        let data: Vec<(Array2<bool>, BBox)> = (0..40)
            .map(|i| {
                let mut m = Array2::from_shape_fn((side, side), |(r, c)| (r * 7 + c * 3 + i) % 5 < 2);
                m[[0, 0]] = true;
                m[[side - 1, side - 1]] = true;
                (m, BBox::new(0.0, 0.0, side as f64, side as f64))
            })
            .collect();
        let fit = fit_pca(data.iter().map(|(m, b)| (m, b)), side, side * side).unwrap();
        for (m, b) in &data {
            let code = fit.basis.encode_mask(m, b).unwrap();
            assert_eq!(&fit.basis.decode_mask(code.view(), side, side, 0.5), m);
        }
        // encode(decode(c)) == c when the reconstruction is not thresholded
        let c = Array1::from_shape_fn(side * side, |i| (i as f64 * 0.37).sin());
        let back = fit.basis.encode_grid(fit.basis.reconstruct(c.view()).view());
        assert!((&back - &c).iter().all(|d| d.abs() < 1e-5));
    }

    #[test]
    fn encoding_is_linear() {
        let data = shapes();
        let fit = fit_pca(data.iter().map(|(m, b)| (m, b)), 8, 5).unwrap();
        let a = Array1::from_shape_fn(64, |i| (i % 3) as f64 * 0.5);
        let b = Array1::from_shape_fn(64, |i| ((i * 7) % 5) as f64 * 0.2);
        let alpha = 0.3;
        let mix = &a * alpha + &b * (1.0 - alpha);
        let lhs = fit.basis.encode_grid(mix.view());
        let rhs = fit.basis.encode_grid(a.view()) * alpha + fit.basis.encode_grid(b.view()) * (1.0 - alpha);
        assert!((&lhs - &rhs).iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn empty_crop_rejected() {
        let data = shapes();
        let fit = fit_pca(data.iter().map(|(m, b)| (m, b)), 8, 5).unwrap();
        let empty = Array2::from_elem((10, 10), false);
        assert!(fit.basis.encode_mask(&empty, &BBox::new(0.0, 0.0, 5.0, 5.0)).is_err());
    }

    #[test]
    fn bytes_round_trip_exactly_and_reject_bad_headers() {
        let data = shapes();
        let basis = fit_pca(data.iter().map(|(m, b)| (m, b)), 8, 5).unwrap().basis;
        let bytes = basis.to_bytes();
        assert_eq!(&bytes[..4], b"UPCA");
        let back = PcaBasis::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, basis);
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(PcaBasis::from_bytes(&wrong_version, Path::new("mem")), Err(Error::Version { found: 9, .. })));
        assert!(PcaBasis::from_bytes(&bytes[..bytes.len() - 4], Path::new("mem")).is_err());
    }
}
