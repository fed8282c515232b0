use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewD, Axis, Ix2, IxDyn};

use super::{Graph, NodeId, Scalar};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Array2<T> {
    let rows = g.channels * g.kh * g.kw;
    let cols = g.out_h * g.out_w;
    let mut out = Array2::<T>::zeros((rows, cols));
    let buf = out.as_slice_mut().unwrap();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut buf[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Scalar>(cols: &Array2<T>, g: &ConvGeom) -> ArrayD<T> {
    let mut out = ArrayD::<T>::zeros(IxDyn(&[g.channels, g.height, g.width]));
    let dst = out.as_slice_mut().unwrap();
    let ncols = g.out_h * g.out_w;
    let src = cols.as_slice().unwrap();
    for c in 0..g.channels {
        let plane = &mut dst[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let srow = &src[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            prow[ix as usize] += srow[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Row-major copy of a GEMM result, which may come back column-major.
fn standard<T: Scalar>(a: Array2<T>) -> Array2<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn as_matrix<'a, T: Scalar>(a: ArrayViewD<'a, T>, rows: usize, cols: usize) -> ArrayView2<'a, T> {
    a
        .into_shape_with_order((rows, cols))
        .expect("contiguous tensor")
        .into_dimensionality::<Ix2>()
        .unwrap()
}

impl<T: Scalar> Graph<T> {
    /// 2-D cross-correlation of a `[C, H, W]` map with `[O, C, kh, kw]` weights
    /// and an optional `[O]` bias, zero padding on all sides.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [C, H, W], got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O, C, kh, kw], got {ws:?}");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch: input {xs:?} weight {ws:?}");
        assert!(stride >= 1);
        let (out_c, kh, kw) = (ws[0], ws[2], ws[3]);
        assert!(xs[1] + 2 * pad >= kh && xs[2] + 2 * pad >= kw, "kernel larger than input");
        let geom = ConvGeom {
            channels: xs[0],
            height: xs[1],
            width: xs[2],
            kh,
            kw,
            stride,
            pad,
            out_h: (xs[1] + 2 * pad - kh) / stride + 1,
            out_w: (xs[2] + 2 * pad - kw) / stride + 1,
        };
        let k = geom.channels * kh * kw;
        let n = geom.out_h * geom.out_w;

        let xin = self.value(x).as_standard_layout().into_owned();
        let cols = if geom.is_pointwise() {
            None
        } else {
            Some(im2col(xin.as_slice().unwrap(), &geom))
        };
        let wmat = as_matrix(self.value(weight).view(), out_c, k).to_owned();
        let mut out = match &cols {
            Some(cols) => wmat.dot(cols),
            None => wmat.dot(&as_matrix(xin.view(), k, n)),
        };
        if let Some(b) = bias {
            let bv = self.value(b);
            assert_eq!(bv.shape(), &[out_c], "conv2d bias shape");
            for (mut row, &bi) in out.axis_iter_mut(Axis(0)).zip(bv.iter()) {
                row.mapv_inplace(|v| v + bi);
            }
        }
        let value = standard(out).into_shape_with_order(IxDyn(&[out_c, geom.out_h, geom.out_w])).unwrap();

        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.apply(
            &inputs,
            value,
            Box::new(move |ctx| {
                let grad = ctx.grad.as_standard_layout();
                let g2 = as_matrix(grad.view(), out_c, n);
                let w2 = as_matrix(ctx.inputs[1].view(), out_c, k);
                let gx = ctx.needs[0].then(|| {
                    let gcols = w2.t().dot(&g2);
                    match &cols {
                        Some(_) => col2im(&standard(gcols), &geom),
                        None => standard(gcols).into_shape_with_order(IxDyn(&[geom.channels, geom.height, geom.width])).unwrap(),
                    }
                });
                let gw = ctx.needs[1].then(|| {
                    let gw = match &cols {
                        Some(cols) => g2.dot(&cols.t()),
                        None => g2.dot(&as_matrix(ctx.inputs[0].view(), k, n).t()),
                    };
                    standard(gw).into_shape_with_order(IxDyn(&[out_c, geom.channels, kh, kw])).unwrap()
                });
                let mut grads = vec![gx, gw];
                if ctx.needs.len() == 3 {
                    grads.push(ctx.needs[2].then(|| g2.sum_axis(Axis(1)).into_dyn()));
                }
                grads
            }),
        )
    }
}
