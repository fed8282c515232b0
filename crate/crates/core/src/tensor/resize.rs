use ndarray::{s, Array2, ArrayD, IxDyn};

use super::{Graph, NodeId, Scalar};

/// Interpolation matrix `[out, in]` for half-pixel-centred bilinear resampling
/// (the `align_corners = false` convention).
pub fn bilinear_weights<T: Scalar>(input: usize, output: usize) -> Array2<T> {
    let mut m = Array2::<T>::zeros((output, input));
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[[o, i0]] += T::of(1.0 - frac);
        m[[o, i1]] += T::of(frac);
    }
    m
}

/// Bilinear resize of a `[C, H, W]` array.
pub fn resize_bilinear_array<T: Scalar>(x: &ArrayD<T>, out_h: usize, out_w: usize) -> ArrayD<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ry = bilinear_weights::<T>(h, out_h);
    let rx = bilinear_weights::<T>(w, out_w);
    forward(x, c, h, w, &ry, &rx)
}

fn forward<T: Scalar>(x: &ArrayD<T>, c: usize, h: usize, w: usize, ry: &Array2<T>, rx: &Array2<T>) -> ArrayD<T> {
    let (out_h, out_w) = (ry.nrows(), rx.nrows());
    let flat = x.as_standard_layout().into_owned().into_shape_with_order((c * h, w)).unwrap();
    let cols = flat.dot(&rx.t());
    let mut out = ArrayD::<T>::zeros(IxDyn(&[c, out_h, out_w]));
    for ch in 0..c {
        let plane = ry.dot(&cols.slice(s![ch * h..(ch + 1) * h, ..]));
        out.slice_mut(s![ch, .., ..]).assign(&plane);
    }
    out
}

impl<T: Scalar> Graph<T> {
    /// Bilinear resize of a `[C, H, W]` node to `out_h × out_w`.
    pub fn resize_bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> NodeId {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 3, "resize expects [C, H, W]");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if (h, w) == (out_h, out_w) {
            return x;
        }
        let ry = bilinear_weights::<T>(h, out_h);
        let rx = bilinear_weights::<T>(w, out_w);
        let value = forward(self.value(x), c, h, w, &ry, &rx);
        self.apply(
            &[x],
            value,
            Box::new(move |ctx| {
                let grad = ctx.grad.as_standard_layout();
                let mut rows = Array2::<T>::zeros((c * h, out_w));
                for ch in 0..c {
                    let g = grad.slice(s![ch, .., ..]);
                    rows.slice_mut(s![ch * h..(ch + 1) * h, ..]).assign(&ry.t().dot(&g));
                }
                let gx = rows.dot(&rx).into_shape_with_order(IxDyn(&[c, h, w])).unwrap();
                vec![Some(gx)]
            }),
        )
    }

    /// Bilinear upsampling of `x` to the spatial size of `like`.
    pub fn resize_like(&mut self, x: NodeId, like: NodeId) -> NodeId {
        let s = self.shape(like).to_vec();
        self.resize_bilinear(x, s[1], s[2])
    }
}
