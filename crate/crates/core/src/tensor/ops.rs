use ndarray::{ArrayD, Axis, IxDyn, Slice, Zip};

use super::{scalar_array, Graph, NodeId, Scalar};

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.apply(
            &[a, b],
            value,
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| ctx.grad.clone()),
                ]
            }),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.apply(
            &[a, b],
            value,
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| ctx.grad.mapv(|g| -g)),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.apply(
            &[a, b],
            value,
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad * ctx.inputs[1]),
                    ctx.needs[1].then(|| ctx.grad * ctx.inputs[0]),
                ]
            }),
        )
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let value = self.value(a).mapv(|v| v + c);
        self.apply(&[a], value, Box::new(|ctx| vec![Some(ctx.grad.clone())]))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let value = self.value(a).mapv(|v| v * c);
        self.apply(&[a], value, Box::new(move |ctx| vec![Some(ctx.grad.mapv(|g| g * c))]))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(|v| v.max(T::zero()));
        self.apply(
            &[a],
            value,
            Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                Zip::from(&mut g).and(ctx.output).for_each(|g, &y| {
                    if y <= T::zero() {
                        *g = T::zero();
                    }
                });
                vec![Some(g)]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(sigmoid);
        self.apply(
            &[a],
            value,
            Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                Zip::from(&mut g).and(ctx.output).for_each(|g, &y| *g *= y * (T::one() - y));
                vec![Some(g)]
            }),
        )
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(softplus);
        self.apply(
            &[a],
            value,
            Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                Zip::from(&mut g).and(ctx.inputs[0]).for_each(|g, &x| *g *= sigmoid(x));
                vec![Some(g)]
            }),
        )
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(|v| v.exp());
        self.apply(&[a], value, Box::new(|ctx| vec![Some(ctx.grad * ctx.output)]))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(|v| v.ln());
        self.apply(&[a], value, Box::new(|ctx| vec![Some(ctx.grad / ctx.inputs[0])]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = scalar_array(self.value(a).sum());
        self.apply(
            &[a],
            value,
            Box::new(|ctx| {
                let g = *ctx.grad.iter().next().unwrap();
                vec![Some(ArrayD::from_elem(ctx.inputs[0].raw_dim(), g))]
            }),
        )
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.mul_scalar(s, T::one() / T::of(n as f64))
    }

    /// `Σ cᵢ·xᵢ` over scalar nodes.
    pub fn linear_combination(&mut self, terms: &[(NodeId, T)]) -> NodeId {
        let value = scalar_array(terms.iter().map(|&(id, c)| self.scalar(id) * c).sum());
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let coeffs: Vec<T> = terms.iter().map(|t| t.1).collect();
        self.apply(
            &ids,
            value,
            Box::new(move |ctx| {
                let g = *ctx.grad.iter().next().unwrap();
                coeffs
                    .iter()
                    .zip(&ctx.inputs)
                    .map(|(&c, x)| Some(ArrayD::from_elem(x.raw_dim(), g * c)))
                    .collect()
            }),
        )
    }

    /// `Σ wᵢ·a[idxᵢ]` over flat (row-major) element indices.
    pub fn gather_sum(&mut self, a: NodeId, entries: &[(usize, T)]) -> NodeId {
        let src = self.value(a).as_standard_layout();
        let flat = src.as_slice().unwrap();
        let value = scalar_array(entries.iter().map(|&(i, w)| flat[i] * w).sum());
        let entries = entries.to_vec();
        self.apply(
            &[a],
            value,
            Box::new(move |ctx| {
                let g = *ctx.grad.iter().next().unwrap();
                let mut out = ArrayD::zeros(ctx.inputs[0].raw_dim());
                let slice = out.as_slice_mut().unwrap();
                for &(i, w) in &entries {
                    slice[i] += g * w;
                }
                vec![Some(out)]
            }),
        )
    }

    /// Concatenation along axis 0 (the channel axis of a `[C, H, W]` map).
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat: trailing shapes differ");
        let sizes: Vec<usize> = parts.iter().map(|&p| self.shape(p)[0]).collect();
        self.apply(
            parts,
            value,
            Box::new(move |ctx| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(&ctx.needs)
                    .map(|(&n, &need)| {
                        let s = start;
                        start += n;
                        need.then(|| {
                            ctx.grad.slice_axis(Axis(0), Slice::from(s..s + n)).to_owned()
                        })
                    })
                    .collect()
            }),
        )
    }

    /// Reinterprets the node with a new shape of equal element count.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let value = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count");
        self.apply(
            &[a],
            value,
            Box::new(|ctx| {
                let g = ctx
                    .grad
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(ctx.inputs[0].raw_dim())
                    .unwrap();
                vec![Some(g)]
            }),
        )
    }
}
