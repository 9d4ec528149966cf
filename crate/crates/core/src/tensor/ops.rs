use super::{gemm, numel, Real, Tensor};
use crate::error::{shape_err, Result};

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn grad_if<T: Real>(t: &Tensor<T>, f: impl FnOnce() -> Vec<T>) -> Option<Vec<T>> {
    t.requires_grad().then(f)
}

/// `(outer, axis extent, inner)` view of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| *a + *b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "add",
            vec![self.clone(), other.clone()],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| *a - *b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "sub",
            vec![self.clone(), other.clone()],
            Box::new(|ctx| {
                vec![
                    Some(ctx.grad.to_vec()),
                    grad_if(&ctx.inputs[1], || ctx.grad.iter().map(|g| -*g).collect()),
                ]
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| *a * *b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "mul",
            vec![self.clone(), other.clone()],
            Box::new(|ctx| {
                let [a, b] = ctx.inputs else { unreachable!() };
                let times = |t: &Tensor<T>| ctx.grad.iter().zip(t.data().iter()).map(|(g, v)| *g * *v).collect();
                vec![grad_if(a, || times(b)), grad_if(b, || times(a))]
            }),
        ))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, factor: T) -> Tensor<T> {
        let data = self.data().iter().map(|v| *v * factor).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "scale",
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|g| *g * factor).collect())]),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    /// Elementwise `x` for `x >= 0`, `slope * x` otherwise. At exactly zero the
    /// derivative is the positive-branch value 1.
    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        let data = self
            .data()
            .iter()
            .map(|&v| if v >= T::zero() { v } else { v * slope })
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "leaky_relu",
            vec![self.clone()],
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let g = ctx
                    .grad
                    .iter()
                    .zip(x.iter())
                    .map(|(g, &v)| if v >= T::zero() { *g } else { *g * slope })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        self.leaky_relu(T::zero())
    }

    pub fn tanh(&self) -> Tensor<T> {
        let data = self.data().iter().map(|v| v.tanh()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "tanh",
            vec![self.clone()],
            Box::new(|ctx| {
                let g = ctx
                    .grad
                    .iter()
                    .zip(ctx.output)
                    .map(|(g, &y)| *g * (T::one() - y * y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape()));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return shape_err("narrow", format!("axis {axis} out of range for rank {}", self.rank()));
        }
        let extent = self.shape()[axis];
        if len == 0 || start + len > extent {
            return shape_err(
                "narrow",
                format!("range {start}..{} exceeds axis {axis} extent {extent}", start + len),
            );
        }
        let (outer, _, inner) = split_axis(self.shape(), axis);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        drop(src);
        Ok(Tensor::from_op(
            out_shape,
            data,
            "narrow",
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![T::zero(); outer * extent * inner];
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    let src = &ctx.grad[o * len * inner..(o + 1) * len * inner];
                    g[base..base + len * inner].copy_from_slice(src);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let Some(first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        if axis >= first.rank() {
            return shape_err("concat", format!("axis {axis} out of range for rank {}", first.rank()));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return shape_err("concat", format!("{:?} vs {:?} along axis {axis}", p.shape(), first.shape()));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        let guards: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (g, &e) in guards.iter().zip(&extents) {
                data.extend_from_slice(&g[o * e * inner..(o + 1) * e * inner]);
            }
        }
        drop(guards);
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let inputs = parts.iter().map(|p| (*p).clone()).collect();
        Ok(Tensor::from_op(
            shape,
            data,
            "concat",
            inputs,
            Box::new(move |ctx| {
                let mut grads: Vec<Vec<T>> =
                    extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (g, &e) in grads.iter_mut().zip(&extents) {
                        g.extend_from_slice(&ctx.grad[offset..offset + e * inner]);
                        offset += e * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            "sum",
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        let inv = T::one() / T::of(n as f64);
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(
            vec![1],
            vec![s * inv],
            "mean",
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0] * inv; n])]),
        )
    }

    /// Mean absolute difference. The derivative of `|d|` at exactly zero is 0.
    pub fn l1(&self, target: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("l1", self, target)?;
        let n = self.numel();
        let inv = T::one() / T::of(n as f64);
        let s: T = self
            .data()
            .iter()
            .zip(target.data().iter())
            .map(|(a, b)| (*a - *b).abs())
            .sum();
        Ok(Tensor::from_op(
            vec![1],
            vec![s * inv],
            "l1",
            vec![self.clone(), target.clone()],
            Box::new(move |ctx| {
                let a = ctx.inputs[0].data();
                let b = ctx.inputs[1].data();
                let scale = ctx.grad[0] * inv;
                let ga: Vec<T> = a
                    .iter()
                    .zip(b.iter())
                    .map(|(x, y)| {
                        let d = *x - *y;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let gb = ctx.inputs[1].requires_grad().then(|| ga.iter().map(|v| -*v).collect());
                vec![ctx.inputs[0].requires_grad().then_some(ga), gb]
            }),
        ))
    }

    /// Nearest-neighbour 2x upsampling of an `[N, C, H, W]` tensor.
    pub fn upsample_nearest2x(&self) -> Result<Tensor<T>> {
        let &[n, c, h, w] = self.shape() else {
            return shape_err("upsample_nearest2x", format!("expected rank 4, got {:?}", self.shape()));
        };
        let (h2, w2) = (2 * h, 2 * w);
        let src = self.data();
        let mut data = vec![T::zero(); n * c * h2 * w2];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut data[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                let row = &s[(y / 2) * w..(y / 2 + 1) * w];
                for x in 0..w2 {
                    d[y * w2 + x] = row[x / 2];
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![n, c, h2, w2],
            data,
            "upsample_nearest2x",
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let s = &ctx.grad[plane * h2 * w2..(plane + 1) * h2 * w2];
                    let d = &mut g[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h2 {
                        for x in 0..w2 {
                            d[(y / 2) * w + x / 2] += s[y * w2 + x];
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}

/// `y = x Wᵀ + b` for `x: [N, Din]`, `W: [Dout, Din]`, `b: [Dout]`.
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, din] = x.shape() else {
        return shape_err("linear", format!("input must be [N, Din], got {:?}", x.shape()));
    };
    let &[dout, wdin] = weight.shape() else {
        return shape_err("linear", format!("weight must be [Dout, Din], got {:?}", weight.shape()));
    };
    if wdin != din {
        return shape_err("linear", format!("input dim Din={din} but weight expects {wdin}"));
    }
    if bias.shape() != [dout] {
        return shape_err("linear", format!("bias must be [{dout}], got {:?}", bias.shape()));
    }
    let mut y = vec![T::zero(); n * dout];
    {
        let b = bias.data();
        for row in y.chunks_mut(dout) {
            row.copy_from_slice(&b);
        }
        gemm(n, din, dout, &x.data(), false, &weight.data(), true, &mut y, true);
    }
    Ok(Tensor::from_op(
        vec![n, dout],
        y,
        "linear",
        vec![x.clone(), weight.clone(), bias.clone()],
        Box::new(move |ctx| {
            let [x, w, b] = ctx.inputs else { unreachable!() };
            let dy = ctx.grad;
            let dx = grad_if(x, || {
                let mut dx = vec![T::zero(); n * din];
                gemm(n, dout, din, dy, false, &w.data(), false, &mut dx, false);
                dx
            });
            let dw = grad_if(w, || {
                let mut dw = vec![T::zero(); dout * din];
                gemm(dout, n, din, dy, true, &x.data(), false, &mut dw, false);
                dw
            });
            let db = grad_if(b, || {
                let mut db = vec![T::zero(); dout];
                for row in dy.chunks(dout) {
                    db.iter_mut().zip(row).for_each(|(a, g)| *a += *g);
                }
                db
            });
            vec![dx, dw, db]
        }),
    ))
}

/// Per-sample, per-channel standardization of `[N, C, ...]` followed by the
/// affine map `scale[c] * x̂ + shift[c]`. Statistics use the biased variance.
pub fn instance_norm<T: Real>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if x.rank() < 3 {
        return shape_err("instance_norm", format!("expected [N, C, ...], got {:?}", x.shape()));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let m: usize = x.shape()[2..].iter().product();
    if scale.shape() != [c] || shift.shape() != [c] {
        return shape_err(
            "instance_norm",
            format!("scale/shift must be [{c}], got {:?} / {:?}", scale.shape(), shift.shape()),
        );
    }
    let mf = T::of(m as f64);
    let stats = move |plane: &[T]| -> (T, T) {
        let mean = plane.iter().copied().sum::<T>() / mf;
        let var = plane.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / mf;
        (mean, T::one() / (var + eps).sqrt())
    };
    let mut y = vec![T::zero(); n * c * m];
    {
        let (src, sc, sh) = (x.data(), scale.data(), shift.data());
        for i in 0..n * c {
            let ch = i % c;
            let plane = &src[i * m..(i + 1) * m];
            let (mean, inv) = stats(plane);
            for (o, v) in y[i * m..(i + 1) * m].iter_mut().zip(plane) {
                *o = sc[ch] * (*v - mean) * inv + sh[ch];
            }
        }
    }
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        y,
        "instance_norm",
        vec![x.clone(), scale.clone(), shift.clone()],
        Box::new(move |ctx| {
            let [x, scale, shift] = ctx.inputs else { unreachable!() };
            let (src, sc) = (x.data(), scale.data());
            let mut dx = x.requires_grad().then(|| vec![T::zero(); n * c * m]);
            let mut dscale = vec![T::zero(); c];
            let mut dshift = vec![T::zero(); c];
            let mut xhat = vec![T::zero(); m];
            for i in 0..n * c {
                let ch = i % c;
                let plane = &src[i * m..(i + 1) * m];
                let dy = &ctx.grad[i * m..(i + 1) * m];
                let (mean, inv) = stats(plane);
                for (h, v) in xhat.iter_mut().zip(plane) {
                    *h = (*v - mean) * inv;
                }
                let sum_dy: T = dy.iter().copied().sum();
                let sum_dy_xhat: T = dy.iter().zip(&xhat).map(|(g, h)| *g * *h).sum();
                dshift[ch] += sum_dy;
                dscale[ch] += sum_dy_xhat;
                if let Some(dx) = dx.as_mut() {
                    // dx̂ = dy·scale, folded into the closed form below.
                    let k = sc[ch] * inv / mf;
                    for ((o, g), h) in dx[i * m..(i + 1) * m].iter_mut().zip(dy).zip(&xhat) {
                        *o = k * (mf * *g - sum_dy - *h * sum_dy_xhat);
                    }
                }
            }
            vec![
                dx,
                scale.requires_grad().then_some(dscale),
                shift.requires_grad().then_some(dshift),
            ]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn leaky_relu_values() {
        let x = t(&[3], vec![-1.0, 0.0, 2.0]);
        assert_eq!(x.leaky_relu(0.2).to_vec(), vec![-0.2, 0.0, 2.0]);
        assert_eq!(x.relu().to_vec(), vec![0.0, 0.0, 2.0]);
        assert_eq!(t(&[1], vec![0.0]).tanh().to_vec(), vec![0.0]);
    }

    #[test]
    fn leaky_relu_gradient_at_zero_is_positive_branch() {
        let x = Tensor::<f64>::parameter(&[1], vec![0.0]).unwrap();
        x.leaky_relu(0.2).sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn l1_values() {
        let x = t(&[2], vec![1.0, 2.0]);
        assert_eq!(x.l1(&x).unwrap().item(), 0.0);
        assert_eq!(x.l1(&t(&[2], vec![0.0, 0.0])).unwrap().item(), 1.5);
        assert!(x.l1(&t(&[3], vec![0.0; 3])).is_err());
    }

    #[test]
    fn linear_hand_example() {
        let x = t(&[1, 2], vec![1.0, 2.0]);
        let w = t(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]);
        let b = t(&[2], vec![1.0, 0.0]);
        assert_eq!(linear(&x, &w, &b).unwrap().to_vec(), vec![4.0, 2.0]);
    }

    #[test]
    fn linear_identity_and_zero_batch() {
        let x = t(&[2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]);
        let eye = t(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let zero_b = t(&[3], vec![0.0; 3]);
        assert_eq!(linear(&x, &eye, &zero_b).unwrap().to_vec(), x.to_vec());
        let b = t(&[3], vec![0.5, -1.0, 2.0]);
        let zeros = t(&[2, 3], vec![0.0; 6]);
        let w = t(&[3, 3], (0..9).map(|i| i as f64).collect());
        assert_eq!(linear(&zeros, &w, &b).unwrap().to_vec(), [b.to_vec(), b.to_vec()].concat());
    }

    #[test]
    fn linear_rejects_inner_mismatch() {
        let x = t(&[1, 2], vec![1.0, 2.0]);
        let w = t(&[2, 3], vec![0.0; 6]);
        let err = linear(&x, &w, &t(&[2], vec![0.0; 2])).unwrap_err().to_string();
        assert!(err.contains("Din"), "{err}");
    }

    #[test]
    fn upsample_block_repeats() {
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = x.upsample_nearest2x().unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(
            y.to_vec(),
            vec![
                1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0
            ]
        );
    }

    #[test]
    fn concat_preserves_order_and_narrow_inverts_it() {
        let a = t(&[2, 1], vec![1.0, 2.0]);
        let b = t(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.narrow(1, 1, 2).unwrap().to_vec(), b.to_vec());
        assert!(c.narrow(1, 2, 2).is_err());
    }

    #[test]
    fn instance_norm_constant_channel_gives_shift() {
        let x = t(&[1, 2, 2, 2], vec![3.0; 8]);
        let scale = t(&[2], vec![2.0, 5.0]);
        let shift = t(&[2], vec![0.25, -1.0]);
        let y = instance_norm(&x, &scale, &shift, 1e-5).unwrap().to_vec();
        assert!(y[..4].iter().all(|v| *v == 0.25));
        assert!(y[4..].iter().all(|v| *v == -1.0));
    }

    #[test]
    fn instance_norm_matches_requested_moments() {
        let data: Vec<f32> = (0..2 * 3 * 16).map(|i| ((i * 7919) % 101) as f32 / 10.0).collect();
        let x = Tensor::<f32>::from_vec(&[2, 3, 4, 4], data).unwrap();
        let scale = Tensor::from_vec(&[3], vec![0.5, 2.0, 1.5]).unwrap();
        let shift = Tensor::from_vec(&[3], vec![-1.0, 0.0, 3.0]).unwrap();
        let y = instance_norm(&x, &scale, &shift, 1e-5).unwrap().to_vec();
        for plane in 0..6 {
            let ch = plane % 3;
            let v = &y[plane * 16..(plane + 1) * 16];
            let mean = v.iter().sum::<f32>() / 16.0;
            let std = (v.iter().map(|a| (a - mean).powi(2)).sum::<f32>() / 16.0).sqrt();
            assert!((mean - shift.to_vec()[ch]).abs() < 1e-4);
            assert!((std - scale.to_vec()[ch]).abs() < 1e-4, "std {std}");
        }
    }
}
