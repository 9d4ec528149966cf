//! Grouped cross-correlation (no kernel flip) lowered to im2col + GEMM.

use super::{gemm, Real, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    groups: usize,
    ho: usize,
    wo: usize,
    /// Weights and biases carry a leading batch dimension.
    per_sample: bool,
}

impl Geom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    /// Rows of the im2col matrix of one group.
    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
    fn weight_len(&self) -> usize {
        self.cout * self.k()
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

#[allow(clippy::too_many_arguments)]
fn geometry(
    op: &'static str,
    input: (usize, usize, usize, usize),
    weight: (usize, usize, usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
    per_sample: bool,
) -> Result<Geom> {
    let (n, cin, h, w) = input;
    let (cout, cin_g, kh, kw) = weight;
    if groups == 0 {
        return shape_err(op, "groups must be >= 1");
    }
    if stride.0 == 0 || stride.1 == 0 {
        return shape_err(op, "stride must be >= 1");
    }
    if cin % groups != 0 {
        return shape_err(op, format!("input channels Cin={cin} not divisible by groups={groups}"));
    }
    if cout % groups != 0 {
        return shape_err(op, format!("output channels Cout={cout} not divisible by groups={groups}"));
    }
    if cin_g != cin / groups {
        return shape_err(
            op,
            format!("weight input-channel dim {cin_g} != Cin/groups = {}", cin / groups),
        );
    }
    if h + 2 * padding.0 < kh {
        return shape_err(op, format!("kernel height {kh} exceeds padded input height {}", h + 2 * padding.0));
    }
    if w + 2 * padding.1 < kw {
        return shape_err(op, format!("kernel width {kw} exceeds padded input width {}", w + 2 * padding.1));
    }
    Ok(Geom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        sh: stride.0,
        sw: stride.1,
        ph: padding.0,
        pw: padding.1,
        groups,
        ho: (h + 2 * padding.0 - kh) / stride.0 + 1,
        wo: (w + 2 * padding.1 - kw) / stride.1 + 1,
        per_sample,
    })
}

/// Unfolds the channels of one group of one sample into `[K, P]`.
fn im2col<T: Real>(g: &Geom, x: &[T], cols: &mut [T]) {
    let p = g.p();
    let mut row = 0;
    for c in 0..g.cin_g() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[K, P]` back into the group's channels.
fn col2im<T: Real>(g: &Geom, cols: &[T], dx: &mut [T]) {
    let p = g.p();
    let mut row = 0;
    for c in 0..g.cin_g() {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn forward<T: Real>(g: &Geom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let (k, p, cin_g, cout_g) = (g.k(), g.p(), g.cin_g(), g.cout_g());
    let in_sample = g.cin * g.h * g.w;
    let out_sample = g.cout * p;
    let mut out = vec![T::zero(); g.n * out_sample];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for s in 0..g.n {
        let w_s = if g.per_sample { &w[s * g.weight_len()..(s + 1) * g.weight_len()] } else { w };
        let b_s = if g.per_sample { &b[s * g.cout..(s + 1) * g.cout] } else { b };
        let out_s = &mut out[s * out_sample..(s + 1) * out_sample];
        for (o, bias) in out_s.chunks_mut(p).zip(b_s) {
            o.fill(*bias);
        }
        for grp in 0..g.groups {
            let x_g = &x[s * in_sample + grp * cin_g * g.h * g.w..][..cin_g * g.h * g.w];
            let cols: &[T] = if g.pointwise() {
                x_g
            } else {
                im2col(g, x_g, &mut cols);
                &cols
            };
            let w_g = &w_s[grp * cout_g * k..(grp + 1) * cout_g * k];
            let o_g = &mut out_s[grp * cout_g * p..(grp + 1) * cout_g * p];
            gemm(cout_g, k, p, w_g, false, cols, false, o_g, true);
        }
    }
    out
}

/// Returns `(dx, dw, db)`, each computed only when requested.
fn backward<T: Real>(
    g: &Geom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (k, p, cin_g, cout_g) = (g.k(), g.p(), g.cin_g(), g.cout_g());
    let in_sample = g.cin * g.h * g.w;
    let out_sample = g.cout * p;
    let w_batches = if g.per_sample { g.n } else { 1 };
    let mut dx = need.0.then(|| vec![T::zero(); g.n * in_sample]);
    let mut dw = need.1.then(|| vec![T::zero(); w_batches * g.weight_len()]);
    let mut db = need.2.then(|| vec![T::zero(); w_batches * g.cout]);
    let mut cols = vec![T::zero(); if g.pointwise() { 0 } else { k * p }];
    let mut dcols = vec![T::zero(); if need.0 { k * p } else { 0 }];
    for s in 0..g.n {
        let wi = if g.per_sample { s } else { 0 };
        let w_s = &w[wi * g.weight_len()..(wi + 1) * g.weight_len()];
        let dy_s = &dy[s * out_sample..(s + 1) * out_sample];
        if let Some(db) = db.as_mut() {
            for (acc, plane) in db[wi * g.cout..(wi + 1) * g.cout].iter_mut().zip(dy_s.chunks(p)) {
                *acc += plane.iter().copied().sum::<T>();
            }
        }
        for grp in 0..g.groups {
            let dy_g = &dy_s[grp * cout_g * p..(grp + 1) * cout_g * p];
            let x_off = s * in_sample + grp * cin_g * g.h * g.w;
            if let Some(dw) = dw.as_mut() {
                let x_g = &x[x_off..x_off + cin_g * g.h * g.w];
                let cols: &[T] = if g.pointwise() {
                    x_g
                } else {
                    im2col(g, x_g, &mut cols);
                    &cols
                };
                let dw_g = &mut dw[wi * g.weight_len() + grp * cout_g * k..][..cout_g * k];
                gemm(cout_g, p, k, dy_g, false, cols, true, dw_g, true);
            }
            if let Some(dx) = dx.as_mut() {
                let w_g = &w_s[grp * cout_g * k..(grp + 1) * cout_g * k];
                let dx_g = &mut dx[x_off..x_off + cin_g * g.h * g.w];
                if g.pointwise() {
                    gemm(k, cout_g, p, w_g, true, dy_g, false, dx_g, true);
                } else {
                    gemm(k, cout_g, p, w_g, true, dy_g, false, &mut dcols, false);
                    col2im(g, &dcols, dx_g);
                }
            }
        }
    }
    (dx, dw, db)
}

fn record<T: Real>(
    g: Geom,
    out_shape: Vec<usize>,
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Tensor<T> {
    let out = forward(&g, &input.data(), &weight.data(), &bias.data());
    Tensor::from_op(
        out_shape,
        out,
        op,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |ctx| {
            let [x, w, b] = ctx.inputs else { unreachable!() };
            let need = (x.requires_grad(), w.requires_grad(), b.requires_grad());
            let (dx, dw, db) = backward(&g, &x.data(), &w.data(), ctx.grad, need);
            vec![dx, dw, db]
        }),
    )
}

fn dims4<T: Real>(op: &'static str, what: &str, t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [a, b, c, d] => Ok((a, b, c, d)),
        ref s => shape_err(op, format!("{what} must be rank 4, got {s:?}")),
    }
}

/// 2-D grouped cross-correlation.
///
/// `input: [N, Cin, H, W]`, `weight: [Cout, Cin/groups, kh, kw]`, `bias: [Cout]`.
/// Output extent is `(H + 2·padding − kh) / stride + 1`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let xi = dims4("conv2d", "input", input)?;
    let wi = dims4("conv2d", "weight", weight)?;
    if bias.shape() != [wi.0] {
        return shape_err("conv2d", format!("bias must be [Cout={}], got {:?}", wi.0, bias.shape()));
    }
    let g = geometry("conv2d", xi, wi, (stride, stride), (padding, padding), groups, false)?;
    Ok(record(g, vec![g.n, g.cout, g.ho, g.wo], "conv2d", input, weight, bias))
}

/// 1-D cross-correlation over `[N, Cin, L]` with `weight: [Cout, Cin, k]`.
pub fn conv1d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let &[n, cin, l] = input.shape() else {
        return shape_err("conv1d", format!("input must be [N, C, L], got {:?}", input.shape()));
    };
    let &[cout, wcin, k] = weight.shape() else {
        return shape_err("conv1d", format!("weight must be [Cout, Cin, k], got {:?}", weight.shape()));
    };
    if bias.shape() != [cout] {
        return shape_err("conv1d", format!("bias must be [Cout={cout}], got {:?}", bias.shape()));
    }
    let g = geometry("conv1d", (n, cin, 1, l), (cout, wcin, 1, k), (1, stride), (0, padding), 1, false)?;
    Ok(record(g, vec![n, cout, g.wo], "conv1d", input, weight, bias))
}

/// Grouped 2-D cross-correlation with a separate kernel set per batch element.
///
/// `input: [N, Cin, H, W]`, `weight: [N, Cout, Cin/groups, kh, kw]`, `bias: [N, Cout]`.
pub fn conv2d_per_sample<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let xi = dims4("conv2d_per_sample", "input", input)?;
    let &[wn, cout, cin_g, kh, kw] = weight.shape() else {
        return shape_err(
            "conv2d_per_sample",
            format!("weight must be [N, Cout, Cin/g, kh, kw], got {:?}", weight.shape()),
        );
    };
    if wn != xi.0 {
        return shape_err("conv2d_per_sample", format!("weight batch N={wn} != input batch N={}", xi.0));
    }
    if bias.shape() != [wn, cout] {
        return shape_err("conv2d_per_sample", format!("bias must be [{wn}, {cout}], got {:?}", bias.shape()));
    }
    let g = geometry(
        "conv2d_per_sample",
        xi,
        (cout, cin_g, kh, kw),
        (stride, stride),
        (padding, padding),
        groups,
        true,
    )?;
    Ok(record(g, vec![g.n, g.cout, g.ho, g.wo], "conv2d_per_sample", input, weight, bias))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn ones_3x3_padded() {
        let x = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let w = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let y = conv2d(&x, &w, &t(&[1], vec![0.0]), 1, 1, 1).unwrap();
        assert_eq!(y.to_vec(), vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn per_channel_identity_kernel() {
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| (i as f64 * 0.3).sin()).collect();
        let x = t(&[2, 3, 4, 5], data.clone());
        let w = t(&[3, 1, 1, 1], vec![1.0; 3]);
        let y = conv2d(&x, &w, &t(&[3], vec![0.0; 3]), 1, 0, 3).unwrap();
        assert_eq!(y.to_vec(), data);
    }

    #[test]
    fn conv1d_ones() {
        let x = t(&[1, 1, 3], vec![1.0; 3]);
        let w = t(&[1, 1, 3], vec![1.0; 3]);
        let y = conv1d(&x, &w, &t(&[1], vec![0.0]), 1, 1).unwrap();
        assert_eq!(y.to_vec(), vec![2.0, 3.0, 2.0]);
        let unit = t(&[1, 1, 1], vec![1.0]);
        let xs = t(&[1, 1, 4], vec![1.0, -2.0, 3.0, 0.5]);
        assert_eq!(conv1d(&xs, &unit, &t(&[1], vec![0.0]), 1, 0).unwrap().to_vec(), xs.to_vec());
    }

    #[test]
    fn output_extent_formula() {
        let x = t(&[1, 2, 9, 7], vec![0.0; 126]);
        let w = t(&[4, 2, 3, 3], vec![0.0; 72]);
        let y = conv2d(&x, &w, &t(&[4], vec![0.0; 4]), 2, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 4, 5, 4]);
    }

    #[test]
    fn diagnostics_name_the_dimension() {
        let x = t(&[1, 3, 4, 4], vec![0.0; 48]);
        let w = t(&[4, 3, 3, 3], vec![0.0; 108]);
        let b = t(&[4], vec![0.0; 4]);
        let err = conv2d(&x, &w, &b, 1, 1, 2).unwrap_err().to_string();
        assert!(err.contains("Cin=3"), "{err}");
        let w2 = t(&[4, 2, 3, 3], vec![0.0; 72]);
        let err = conv2d(&x, &w2, &b, 1, 1, 1).unwrap_err().to_string();
        assert!(err.contains("input-channel"), "{err}");
        let err = conv2d(&x, &w, &t(&[3], vec![0.0; 3]), 1, 1, 1).unwrap_err().to_string();
        assert!(err.contains("Cout=4"), "{err}");
        assert!(conv2d(&x, &w, &b, 0, 1, 1).is_err());
    }

    #[test]
    fn per_sample_matches_separate_calls() {
        let x = t(&[2, 2, 3, 3], (0..36).map(|i| i as f64 * 0.1).collect());
        let w = t(&[2, 2, 1, 3, 3], (0..36).map(|i| ((i * 13) % 7) as f64 - 3.0).collect());
        let b = t(&[2, 2], vec![0.5, -0.5, 1.0, 2.0]);
        let y = conv2d_per_sample(&x, &w, &b, 1, 1, 2).unwrap().to_vec();
        for s in 0..2 {
            let xs = x.narrow(0, s, 1).unwrap();
            let ws = w.narrow(0, s, 1).unwrap().reshape(&[2, 1, 3, 3]).unwrap();
            let bs = b.narrow(0, s, 1).unwrap().reshape(&[2]).unwrap();
            let ys = conv2d(&xs, &ws, &bs, 1, 1, 2).unwrap().to_vec();
            assert_eq!(&y[s * 18..(s + 1) * 18], ys.as_slice());
        }
    }
}
