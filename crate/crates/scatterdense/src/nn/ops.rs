//! Differentiable operations over tape values.
//!
//! Every op propagates `requires_grad` from its inputs and skips gradient
//! work entirely for constant subgraphs (encoder outputs enter the graph as
//! constants, so nothing is ever backpropagated into the fixed encoder).

use std::rc::Rc;

use matrixmultiply::dgemm;

use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2};
use crate::nn::{check_same_tape, DiffTensor};
use crate::tensor::{ComplexTensor, RealTensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Guards the atan2 gradient against the genuine singularity at the origin.
pub const ATAN2_GRAD_EPS: f64 = 1e-9;

fn same_shape(a: &RealTensor, b: &RealTensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add(a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
    check_same_tape(a, b)?;
    let (av, bv) = (a.value(), b.value());
    same_shape(&av, &bv, "add")?;
    let value = av.add(&bv)?;
    let needs = a.requires_grad() || b.requires_grad();
    if !needs {
        return Ok(a.tape().push(value, false, None));
    }
    let (ia, ib) = (a.index(), b.index());
    let (na, nb) = (a.requires_grad(), b.requires_grad());
    Ok(a.tape().push(
        value,
        true,
        Some(Box::new(move |g| {
            let mut out = Vec::new();
            if na {
                out.push((ia, g.clone()));
            }
            if nb {
                out.push((ib, g.clone()));
            }
            out
        })),
    ))
}

pub fn sub(a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
    check_same_tape(a, b)?;
    let (av, bv) = (a.value(), b.value());
    same_shape(&av, &bv, "sub")?;
    let value = av.sub(&bv)?;
    let needs = a.requires_grad() || b.requires_grad();
    if !needs {
        return Ok(a.tape().push(value, false, None));
    }
    let (ia, ib) = (a.index(), b.index());
    let (na, nb) = (a.requires_grad(), b.requires_grad());
    Ok(a.tape().push(
        value,
        true,
        Some(Box::new(move |g| {
            let mut out = Vec::new();
            if na {
                out.push((ia, g.clone()));
            }
            if nb {
                out.push((ib, g.scale(-1.0)));
            }
            out
        })),
    ))
}

pub fn mul(a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
    check_same_tape(a, b)?;
    let (av, bv) = (a.value(), b.value());
    same_shape(&av, &bv, "mul")?;
    let value = av.zip(&bv, |x, y| x * y)?;
    let needs = a.requires_grad() || b.requires_grad();
    if !needs {
        return Ok(a.tape().push(value, false, None));
    }
    let (ia, ib) = (a.index(), b.index());
    let (na, nb) = (a.requires_grad(), b.requires_grad());
    Ok(a.tape().push(
        value,
        true,
        Some(Box::new(move |g| {
            let mut out = Vec::new();
            if na {
                out.push((ia, g.zip(&bv, |gi, y| gi * y).expect("mul bw")));
            }
            if nb {
                out.push((ib, g.zip(&av, |gi, x| gi * x).expect("mul bw")));
            }
            out
        })),
    ))
}

pub fn scale(a: &DiffTensor, s: f64) -> DiffTensor {
    let value = a.value().scale(s);
    if !a.requires_grad() {
        return a.tape().push(value, false, None);
    }
    let ia = a.index();
    a.tape().push(
        value,
        true,
        Some(Box::new(move |g| vec![(ia, g.scale(s))])),
    )
}

fn unary_with_deriv(
    a: &DiffTensor,
    f: impl Fn(f64) -> f64,
    deriv_from_input: impl Fn(f64) -> f64 + 'static,
) -> DiffTensor {
    let av = a.value();
    let value = av.map(&f);
    if !a.requires_grad() {
        return a.tape().push(value, false, None);
    }
    let ia = a.index();
    a.tape().push(
        value,
        true,
        Some(Box::new(move |g| {
            vec![(
                ia,
                g.zip(&av, |gi, x| gi * deriv_from_input(x)).expect("unary bw"),
            )]
        })),
    )
}

pub fn relu(a: &DiffTensor) -> DiffTensor {
    unary_with_deriv(a, |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
}

pub fn leaky_relu(a: &DiffTensor, slope: f64) -> DiffTensor {
    unary_with_deriv(
        a,
        move |x| if x > 0.0 { x } else { slope * x },
        move |x| if x > 0.0 { 1.0 } else { slope },
    )
}

pub fn sigmoid(a: &DiffTensor) -> DiffTensor {
    let av = a.value();
    let value = av.map(|x| 1.0 / (1.0 + (-x).exp()));
    if !a.requires_grad() {
        return a.tape().push(value, false, None);
    }
    let yv = Rc::new(value.clone());
    let ia = a.index();
    a.tape().push(
        value,
        true,
        Some(Box::new(move |g| {
            vec![(
                ia,
                g.zip(&yv, |gi, y| gi * y * (1.0 - y)).expect("sigmoid bw"),
            )]
        })),
    )
}

pub fn cos(a: &DiffTensor) -> DiffTensor {
    unary_with_deriv(a, f64::cos, |x| -x.sin())
}

/// Elementwise atan2(im, re) in [-pi, pi]; atan2(0, 0) maps to 0. The
/// gradient denominator is stabilized by a tiny epsilon because atan2 is
/// genuinely non-differentiable at the origin.
pub fn atan2(im: &DiffTensor, re: &DiffTensor) -> Result<DiffTensor> {
    check_same_tape(im, re)?;
    let (iv, rv) = (im.value(), re.value());
    same_shape(&iv, &rv, "atan2")?;
    let value = iv.zip(&rv, |i, r| {
        if i == 0.0 && r == 0.0 {
            0.0
        } else {
            i.atan2(r)
        }
    })?;
    let needs = im.requires_grad() || re.requires_grad();
    if !needs {
        return Ok(im.tape().push(value, false, None));
    }
    let (ii, ir) = (im.index(), re.index());
    let (ni, nr) = (im.requires_grad(), re.requires_grad());
    Ok(im.tape().push(
        value,
        true,
        Some(Box::new(move |g| {
            let mut out = Vec::new();
            let denom: Vec<f64> = iv
                .data()
                .iter()
                .zip(rv.data())
                .map(|(&i, &r)| i * i + r * r + ATAN2_GRAD_EPS)
                .collect();
            if ni {
                let mut d = g.clone();
                for (k, v) in d.data_mut().iter_mut().enumerate() {
                    *v *= rv.data()[k] / denom[k];
                }
                out.push((ii, d));
            }
            if nr {
                let mut d = g.clone();
                for (k, v) in d.data_mut().iter_mut().enumerate() {
                    *v *= -iv.data()[k] / denom[k];
                }
                out.push((ir, d));
            }
            out
        })),
    ))
}

/// Mean over all elements, returned as a scalar node.
pub fn mean_all(a: &DiffTensor) -> Result<DiffTensor> {
    let av = a.value();
    if av.is_empty() {
        return Err(Error::Shape("mean of empty tensor".into()));
    }
    let n = av.len() as f64;
    let value = RealTensor::scalar(av.data().iter().sum::<f64>() / n);
    if !a.requires_grad() {
        return Ok(a.tape().push(value, false, None));
    }
    let ia = a.index();
    let shape = av.shape().to_vec();
    Ok(a.tape().push(
        value,
        true,
        Some(Box::new(move |g| {
            vec![(ia, RealTensor::filled(&shape, g.data()[0] / n))]
        })),
    ))
}

/// Toroidal roll of the last two axes; the backward pass rolls back.
pub fn circular_shift(a: &DiffTensor, dy: i64, dx: i64) -> Result<DiffTensor> {
    let av = a.value();
    av.hw()?;
    let value = av.circular_shift(dy, dx);
    if !a.requires_grad() {
        return Ok(a.tape().push(value, false, None));
    }
    let ia = a.index();
    Ok(a.tape().push(
        value,
        true,
        Some(Box::new(move |g| vec![(ia, g.circular_shift(-dy, -dx))])),
    ))
}

/// 2x2 average pooling (extents must be even).
pub fn avg_pool2(a: &DiffTensor) -> Result<DiffTensor> {
    let av = a.value();
    let (b, c, h, w) = av.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("avg_pool2 needs even extents, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = RealTensor::zeros(&[b, c, ho, wo]);
    for p in 0..b * c {
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = 0.0;
                for oy in 0..2 {
                    for ox in 0..2 {
                        acc += av.data()[(p * h + 2 * y + oy) * w + 2 * x + ox];
                    }
                }
                out.data_mut()[(p * ho + y) * wo + x] = acc / 4.0;
            }
        }
    }
    if !a.requires_grad() {
        return Ok(a.tape().push(out, false, None));
    }
    let ia = a.index();
    Ok(a.tape().push(
        out,
        true,
        Some(Box::new(move |g| {
            let mut d = RealTensor::zeros(&[b, c, h, w]);
            for p in 0..b * c {
                for y in 0..ho {
                    for x in 0..wo {
                        let gi = g.data()[(p * ho + y) * wo + x] / 4.0;
                        for oy in 0..2 {
                            for ox in 0..2 {
                                d.data_mut()[(p * h + 2 * y + oy) * w + 2 * x + ox] += gi;
                            }
                        }
                    }
                }
            }
            vec![(ia, d)]
        })),
    ))
}

/// Channel concatenation in argument order; backward splits the gradient.
pub fn concat_channels(xs: &[&DiffTensor]) -> Result<DiffTensor> {
    if xs.is_empty() {
        return Err(Error::Shape("concat of zero tensors".into()));
    }
    for x in xs.iter().skip(1) {
        check_same_tape(xs[0], x)?;
    }
    let values: Vec<Rc<RealTensor>> = xs.iter().map(|x| x.value()).collect();
    let refs: Vec<&RealTensor> = values.iter().map(|v| v.as_ref()).collect();
    let value = RealTensor::concat_channels(&refs)?;
    let needs = xs.iter().any(|x| x.requires_grad());
    if !needs {
        return Ok(xs[0].tape().push(value, false, None));
    }
    let (b, _, h, w) = value.dims4()?;
    let plane = h * w;
    let metas: Vec<(usize, bool, usize)> = xs
        .iter()
        .map(|x| (x.index(), x.requires_grad(), x.value().shape()[1]))
        .collect();
    let c_total: usize = metas.iter().map(|m| m.2).sum();
    Ok(xs[0].tape().push(
        value,
        true,
        Some(Box::new(move |g| {
            let mut out = Vec::new();
            let mut offset = 0;
            for &(idx, needs_grad, c) in &metas {
                if needs_grad {
                    let mut part = RealTensor::zeros(&[b, c, h, w]);
                    for bi in 0..b {
                        let src = (bi * c_total + offset) * plane;
                        let dst = bi * c * plane;
                        part.data_mut()[dst..dst + c * plane]
                            .copy_from_slice(&g.data()[src..src + c * plane]);
                    }
                    out.push((idx, part));
                }
                offset += c;
            }
            out
        })),
    ))
}

/// Bilinear upsampling to (h_out, w_out), align-corners-false convention.
/// Downscaling is rejected; the same-size case is an exact copy.
pub fn bilinear_upsample(a: &DiffTensor, h_out: usize, w_out: usize) -> Result<DiffTensor> {
    let av = a.value();
    let (b, c, h, w) = av.dims4()?;
    if h_out < h || w_out < w {
        return Err(Error::Shape(format!(
            "bilinear_upsample cannot downscale: {h}x{w} -> {h_out}x{w_out}"
        )));
    }
    if h_out == h && w_out == w {
        let value = (*av).clone();
        if !a.requires_grad() {
            return Ok(a.tape().push(value, false, None));
        }
        let ia = a.index();
        return Ok(a
            .tape()
            .push(value, true, Some(Box::new(move |g| vec![(ia, g.clone())]))));
    }

    // one source tap per output coordinate axis: (low index, weight of high)
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                    .clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ty = taps(h, h_out);
    let tx = taps(w, w_out);

    let mut out = RealTensor::zeros(&[b, c, h_out, w_out]);
    for p in 0..b * c {
        let src = &av.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * h_out * w_out..(p + 1) * h_out * w_out];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                dst[oy * w_out + ox] = (1.0 - wy) * (1.0 - wx) * src[y0 * w + x0]
                    + (1.0 - wy) * wx * src[y0 * w + x1]
                    + wy * (1.0 - wx) * src[y1 * w + x0]
                    + wy * wx * src[y1 * w + x1];
            }
        }
    }
    if !a.requires_grad() {
        return Ok(a.tape().push(out, false, None));
    }
    let ia = a.index();
    Ok(a.tape().push(
        out,
        true,
        Some(Box::new(move |g| {
            let mut d = RealTensor::zeros(&[b, c, h, w]);
            for p in 0..b * c {
                let gsrc = &g.data()[p * h_out * w_out..(p + 1) * h_out * w_out];
                let ddst = &mut d.data_mut()[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let gi = gsrc[oy * w_out + ox];
                        ddst[y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * gi;
                        ddst[y0 * w + x1] += (1.0 - wy) * wx * gi;
                        ddst[y1 * w + x0] += wy * (1.0 - wx) * gi;
                        ddst[y1 * w + x1] += wy * wx * gi;
                    }
                }
            }
            vec![(ia, d)]
        })),
    ))
}

fn im2col_periodic(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let p = h * w;
    let mut cols = vec![0.0; c * 9 * p];
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let krow = (ci * 3 + ky) * 3 + kx;
                let dst = &mut cols[krow * p..(krow + 1) * p];
                for y in 0..h {
                    let sy = (y + h + ky - 1) % h;
                    let src_row = &x[(ci * h + sy) * w..(ci * h + sy + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    for xx in 0..w {
                        drow[xx] = src_row[(xx + w + kx - 1) % w];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_periodic_add(cols: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let p = h * w;
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let krow = (ci * 3 + ky) * 3 + kx;
                let src = &cols[krow * p..(krow + 1) * p];
                for y in 0..h {
                    let sy = (y + h + ky - 1) % h;
                    let orow = &mut out[(ci * h + sy) * w..(ci * h + sy + 1) * w];
                    let srow = &src[y * w..(y + 1) * w];
                    for xx in 0..w {
                        orow[(xx + w + kx - 1) % w] += srow[xx];
                    }
                }
            }
        }
    }
}

/// 3x3 convolution, stride 1, periodic padding (the encoder's boundary
/// model, so the whole network stays shift-equivariant). Weights are
/// (C_out, C_in, 3, 3), bias (C_out).
pub fn conv3x3(x: &DiffTensor, weight: &DiffTensor, bias: &DiffTensor) -> Result<DiffTensor> {
    check_same_tape(x, weight)?;
    check_same_tape(x, bias)?;
    let xv = x.value();
    let wv = weight.value();
    let bv = bias.value();
    let (b, c_in, h, w) = xv.dims4()?;
    let wshape = wv.shape().to_vec();
    if wshape.len() != 4 || wshape[2] != 3 || wshape[3] != 3 {
        return Err(Error::Shape(format!(
            "conv3x3 weight must be (C_out, C_in, 3, 3), got {wshape:?}"
        )));
    }
    let (c_out, wc_in) = (wshape[0], wshape[1]);
    if wc_in != c_in {
        return Err(Error::Shape(format!(
            "conv3x3 channel mismatch: input has {c_in}, weight expects {wc_in}"
        )));
    }
    if bv.shape() != [c_out] {
        return Err(Error::Shape(format!(
            "conv3x3 bias must be ({c_out}), got {:?}",
            bv.shape()
        )));
    }
    let k = c_in * 9;
    let p = h * w;
    let needs = x.requires_grad() || weight.requires_grad() || bias.requires_grad();

    let mut out = RealTensor::zeros(&[b, c_out, h, w]);
    let mut cols_cache: Vec<Vec<f64>> = Vec::new();
    for bi in 0..b {
        let cols = im2col_periodic(&xv.data()[bi * c_in * p..(bi + 1) * c_in * p], c_in, h, w);
        unsafe {
            dgemm(
                c_out,
                k,
                p,
                1.0,
                wv.data().as_ptr(),
                k as isize,
                1,
                cols.as_ptr(),
                p as isize,
                1,
                0.0,
                out.data_mut()[bi * c_out * p..(bi + 1) * c_out * p].as_mut_ptr(),
                p as isize,
                1,
            );
        }
        for co in 0..c_out {
            let bias_v = bv.data()[co];
            for v in &mut out.data_mut()[(bi * c_out + co) * p..(bi * c_out + co + 1) * p] {
                *v += bias_v;
            }
        }
        if needs {
            cols_cache.push(cols);
        }
    }
    if !needs {
        return Ok(x.tape().push(out, false, None));
    }

    let (ix, iw, ib) = (x.index(), weight.index(), bias.index());
    let (nx, nw, nb) = (
        x.requires_grad(),
        weight.requires_grad(),
        bias.requires_grad(),
    );
    Ok(x.tape().push(
        out,
        true,
        Some(Box::new(move |g| {
            let mut result = Vec::new();
            if nw {
                let mut dw = RealTensor::zeros(&wshape);
                for bi in 0..b {
                    unsafe {
                        dgemm(
                            c_out,
                            p,
                            k,
                            1.0,
                            g.data()[bi * c_out * p..(bi + 1) * c_out * p].as_ptr(),
                            p as isize,
                            1,
                            cols_cache[bi].as_ptr(),
                            1,
                            p as isize,
                            1.0,
                            dw.data_mut().as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                }
                result.push((iw, dw));
            }
            if nb {
                let mut db = RealTensor::zeros(&[c_out]);
                for bi in 0..b {
                    for co in 0..c_out {
                        db.data_mut()[co] += g.data()
                            [(bi * c_out + co) * p..(bi * c_out + co + 1) * p]
                            .iter()
                            .sum::<f64>();
                    }
                }
                result.push((ib, db));
            }
            if nx {
                let mut dx = RealTensor::zeros(&[b, c_in, h, w]);
                let mut dcols = vec![0.0; k * p];
                for bi in 0..b {
                    unsafe {
                        dgemm(
                            k,
                            c_out,
                            p,
                            1.0,
                            wv.data().as_ptr(),
                            1,
                            k as isize,
                            g.data()[bi * c_out * p..(bi + 1) * c_out * p].as_ptr(),
                            p as isize,
                            1,
                            0.0,
                            dcols.as_mut_ptr(),
                            p as isize,
                            1,
                        );
                    }
                    col2im_periodic_add(
                        &dcols,
                        c_in,
                        h,
                        w,
                        &mut dx.data_mut()[bi * c_in * p..(bi + 1) * c_in * p],
                    );
                }
                result.push((ix, dx));
            }
            result
        })),
    ))
}

/// Mutable view into one batchnorm layer's running statistics.
pub struct BnStateView<'a> {
    pub running_mean: &'a mut [f64],
    pub running_var: &'a mut [f64],
    pub updates: &'a mut f64,
}

/// Per-channel batch normalization over (B, H, W).
///
/// Training mode normalizes with batch statistics and folds them into the
/// running estimates (momentum 0.1); eval mode requires at least one prior
/// update and uses the running estimates.
pub fn batchnorm(
    x: &DiffTensor,
    gamma: &DiffTensor,
    beta: &DiffTensor,
    state: BnStateView<'_>,
    training: bool,
) -> Result<DiffTensor> {
    check_same_tape(x, gamma)?;
    check_same_tape(x, beta)?;
    let xv = x.value();
    let gv = gamma.value();
    let bv = beta.value();
    let (b, c, h, w) = xv.dims4()?;
    if gv.shape() != [c] || bv.shape() != [c] {
        return Err(Error::Shape(format!(
            "batchnorm affine params must be ({c}), got {:?} and {:?}",
            gv.shape(),
            bv.shape()
        )));
    }
    if state.running_mean.len() != c || state.running_var.len() != c {
        return Err(Error::Shape(format!(
            "batchnorm state has {} channels, input has {c}",
            state.running_mean.len()
        )));
    }
    let n = b * h * w;
    let plane = h * w;

    let (mean, var): (Vec<f64>, Vec<f64>) = if training {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for bi in 0..b {
                acc += xv.data()[(bi * c + ci) * plane..(bi * c + ci + 1) * plane]
                    .iter()
                    .sum::<f64>();
            }
            mean[ci] = acc / n as f64;
            let mut acc2 = 0.0;
            for bi in 0..b {
                for v in &xv.data()[(bi * c + ci) * plane..(bi * c + ci + 1) * plane] {
                    let d = v - mean[ci];
                    acc2 += d * d;
                }
            }
            var[ci] = acc2 / n as f64;
        }
        for ci in 0..c {
            state.running_mean[ci] =
                (1.0 - BN_MOMENTUM) * state.running_mean[ci] + BN_MOMENTUM * mean[ci];
            state.running_var[ci] =
                (1.0 - BN_MOMENTUM) * state.running_var[ci] + BN_MOMENTUM * var[ci];
        }
        *state.updates += 1.0;
        (mean, var)
    } else {
        if *state.updates == 0.0 {
            return Err(Error::Config(
                "batchnorm eval requested before any training update".into(),
            ));
        }
        (state.running_mean.to_vec(), state.running_var.to_vec())
    };

    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut normalized = RealTensor::zeros(&[b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            for i in 0..plane {
                normalized.data_mut()[base + i] = (xv.data()[base + i] - mean[ci]) * inv[ci];
            }
        }
    }
    let mut out = RealTensor::zeros(&[b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            for i in 0..plane {
                out.data_mut()[base + i] = gv.data()[ci] * normalized.data()[base + i]
                    + bv.data()[ci];
            }
        }
    }

    let needs = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    if !needs {
        return Ok(x.tape().push(out, false, None));
    }
    let normalized = Rc::new(normalized);
    let (ix, ig, ib) = (x.index(), gamma.index(), beta.index());
    let (nx, ng, nb) = (
        x.requires_grad(),
        gamma.requires_grad(),
        beta.requires_grad(),
    );
    Ok(x.tape().push(
        out,
        true,
        Some(Box::new(move |g| {
            let mut result = Vec::new();
            if ng {
                let mut dg = RealTensor::zeros(&[c]);
                for ci in 0..c {
                    let mut acc = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        for i in 0..plane {
                            acc += g.data()[base + i] * normalized.data()[base + i];
                        }
                    }
                    dg.data_mut()[ci] = acc;
                }
                result.push((ig, dg));
            }
            if nb {
                let mut db = RealTensor::zeros(&[c]);
                for ci in 0..c {
                    let mut acc = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        acc += g.data()[base..base + plane].iter().sum::<f64>();
                    }
                    db.data_mut()[ci] = acc;
                }
                result.push((ib, db));
            }
            if nx {
                let mut dx = RealTensor::zeros(&[b, c, h, w]);
                if training {
                    for ci in 0..c {
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for bi in 0..b {
                            let base = (bi * c + ci) * plane;
                            for i in 0..plane {
                                sum_g += g.data()[base + i];
                                sum_gx += g.data()[base + i] * normalized.data()[base + i];
                            }
                        }
                        let mean_g = sum_g / n as f64;
                        let mean_gx = sum_gx / n as f64;
                        let scale_c = gv.data()[ci] * inv[ci];
                        for bi in 0..b {
                            let base = (bi * c + ci) * plane;
                            for i in 0..plane {
                                dx.data_mut()[base + i] = scale_c
                                    * (g.data()[base + i]
                                        - mean_g
                                        - normalized.data()[base + i] * mean_gx);
                            }
                        }
                    }
                } else {
                    for ci in 0..c {
                        let scale_c = gv.data()[ci] * inv[ci];
                        for bi in 0..b {
                            let base = (bi * c + ci) * plane;
                            for i in 0..plane {
                                dx.data_mut()[base + i] = g.data()[base + i] * scale_c;
                            }
                        }
                    }
                }
                result.push((ix, dx));
            }
            result
        })),
    ))
}

fn even_odd_parts(h_hat: &RealTensor) -> Result<(ComplexTensor, ComplexTensor)> {
    let (h, w) = h_hat.hw()?;
    let mut even = ComplexTensor::zeros(&[h, w]);
    let mut odd = ComplexTensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let ineg = ((h - y) % h) * w + ((w - x) % w);
            let (a, b) = (h_hat.data()[i], h_hat.data()[ineg]);
            even.re_mut()[i] = 0.5 * (a + b);
            // the odd part enters the adjoint multiplied by the imaginary
            // unit, so store it directly in the imaginary plane
            odd.im_mut()[i] = 0.5 * (a - b);
        }
    }
    Ok((even, odd))
}

/// Circular convolution of a real signal with a fixed real-spectrum filter,
/// returning the real and imaginary parts of the complex result as two tape
/// values. This is the differentiable path to wavelet coefficients of the
/// prediction (used by the phase regularizers).
pub fn filter_pair(x: &DiffTensor, h_hat: &RealTensor) -> Result<(DiffTensor, DiffTensor)> {
    let xv = x.value();
    let (b, c, h, w) = xv.dims4()?;
    let (fh, fw) = h_hat.hw()?;
    if (fh, fw) != (h, w) {
        return Err(Error::Shape(format!(
            "filter extents {fh}x{fw} do not match input {h}x{w}"
        )));
    }
    let plane = h * w;
    let hw = plane as f64;
    let filter = ComplexTensor::from_planes(&[h, w], h_hat.data().to_vec(), vec![0.0; plane])?;
    let mut re_out = RealTensor::zeros(&[b, c, h, w]);
    let mut im_out = RealTensor::zeros(&[b, c, h, w]);
    for p in 0..b * c {
        let img = ComplexTensor::from_planes(
            &[h, w],
            xv.data()[p * plane..(p + 1) * plane].to_vec(),
            vec![0.0; plane],
        )?;
        let coeff = ifft2(&fft2(&img)?.mul_filter(&filter)?)?.scale(1.0 / hw);
        re_out.data_mut()[p * plane..(p + 1) * plane].copy_from_slice(coeff.re());
        im_out.data_mut()[p * plane..(p + 1) * plane].copy_from_slice(coeff.im());
    }
    if !x.requires_grad() {
        return Ok((
            x.tape().push(re_out, false, None),
            x.tape().push(im_out, false, None),
        ));
    }
    let (even, odd) = even_odd_parts(h_hat)?;
    let ix = x.index();
    let backward_with = move |adjoint: ComplexTensor| {
        move |g: &RealTensor| -> Vec<(usize, RealTensor)> {
            let mut dx = RealTensor::zeros(&[b, c, h, w]);
            for p in 0..b * c {
                let gp = ComplexTensor::from_planes(
                    &[h, w],
                    g.data()[p * plane..(p + 1) * plane].to_vec(),
                    vec![0.0; plane],
                )
                .expect("grad plane");
                let d = ifft2(&fft2(&gp).expect("fft").mul_filter(&adjoint).expect("mul"))
                    .expect("ifft")
                    .scale(1.0 / hw);
                dx.data_mut()[p * plane..(p + 1) * plane].copy_from_slice(d.re());
            }
            vec![(ix, dx)]
        }
    };
    let re_node = x
        .tape()
        .push(re_out, true, Some(Box::new(backward_with(even))));
    let im_node = x
        .tape()
        .push(im_out, true, Some(Box::new(backward_with(odd))));
    Ok((re_node, im_node))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{max_rel_error, probe_points, FD_STEP};
    use crate::nn::Tape;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> RealTensor {
        let mut rng = seeded_rng(seed, "ops-test");
        let n: usize = shape.iter().product();
        RealTensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    /// Weighted-mean loss of `build(x)`, so upstream gradients vary per
    /// element.
    fn check_input_gradient(
        shape: &[usize],
        input: &RealTensor,
        build: impl Fn(&Tape, &DiffTensor) -> DiffTensor,
        seed: u64,
    ) -> f64 {
        let out_probe = {
            let tape = Tape::new();
            let x = tape.leaf(input.clone());
            build(&tape, &x).value().shape().to_vec()
        };
        let weights = random_tensor(&out_probe, seed ^ 0x5eed, -1.0, 1.0);
        let mut loss = |x: &RealTensor| -> f64 {
            let tape = Tape::new();
            let xt = tape.leaf(x.clone());
            let out = build(&tape, &xt);
            let w = tape.constant(weights.clone());
            mean_all(&mul(&out, &w).unwrap()).unwrap().scalar_value().unwrap()
        };
        let tape = Tape::new();
        let xt = tape.leaf(input.clone());
        let out = build(&tape, &xt);
        let w = tape.constant(weights.clone());
        let l = mean_all(&mul(&out, &w).unwrap()).unwrap();
        let grads = tape.backward(&l).unwrap();
        let analytic = grads.get(&xt).expect("input gradient");
        let points = probe_points(input.len(), 10, seed);
        let _ = shape;
        max_rel_error(&mut loss, input, analytic, &points, FD_STEP)
    }

    #[test]
    fn activation_values() {
        let tape = Tape::new();
        let x = tape.leaf(RealTensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(relu(&x).value().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(leaky_relu(&x, 0.1).value().data(), &[-0.1, 0.0, 2.0]);
        let s = sigmoid(&x);
        assert!((s.value().data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        // sample away from the relu kink (|x| > 1e-3)
        let base = random_tensor(&[64], 11, 0.05, 2.0);
        let signs = random_tensor(&[64], 12, -1.0, 1.0).map(|v| if v > 0.0 { 1.0 } else { -1.0 });
        let input = base.zip(&signs, |a, b| a * b).unwrap();
        for (name, f) in [
            ("relu", Box::new(|_: &Tape, x: &DiffTensor| relu(x)) as Box<dyn Fn(&Tape, &DiffTensor) -> DiffTensor>),
            ("leaky", Box::new(|_: &Tape, x: &DiffTensor| leaky_relu(x, 0.2))),
            ("sigmoid", Box::new(|_: &Tape, x: &DiffTensor| sigmoid(x))),
            ("cos", Box::new(|_: &Tape, x: &DiffTensor| cos(x))),
        ] {
            let err = check_input_gradient(&[64], &input, |t, x| f(t, x), 13);
            assert!(err < 1e-6, "{name} gradient error {err:e}");
        }
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let input = random_tensor(&[32], 14, -1.5, 1.5);
        let other = random_tensor(&[32], 15, -1.5, 1.5);
        let err = check_input_gradient(&[32], &input, |t, x| {
            let o = t.constant(other.clone());
            let sum = add(x, &o).unwrap();
            let prod = mul(&sum, x).unwrap();
            sub(&prod, &o).unwrap()
        }, 16);
        assert!(err < 1e-6, "elementwise chain gradient error {err:e}");
    }

    #[test]
    fn atan2_gradient_matches_finite_differences() {
        // radius kept near 1 so the stabilized denominator is irrelevant
        let re = random_tensor(&[40], 17, 0.4, 1.6);
        let im = random_tensor(&[40], 18, 0.4, 1.6);
        let err_im = check_input_gradient(&[40], &im, |t, x| {
            let r = t.constant(re.clone());
            atan2(x, &r).unwrap()
        }, 19);
        assert!(err_im < 1e-6, "atan2 d/dim error {err_im:e}");
        let err_re = check_input_gradient(&[40], &re, |t, x| {
            let i = t.constant(im.clone());
            atan2(&i, x).unwrap()
        }, 20);
        assert!(err_re < 1e-6, "atan2 d/dre error {err_re:e}");
        let tape = Tape::new();
        let z = tape.leaf(RealTensor::zeros(&[1]));
        let y = atan2(&z, &z).unwrap();
        assert_eq!(y.value().data()[0], 0.0);
    }

    #[test]
    fn conv3x3_identity_and_constant_kernels() {
        let tape = Tape::new();
        let x = tape.constant(random_tensor(&[1, 2, 6, 6], 21, -1.0, 1.0));
        // centered delta on each input channel -> identity on channel sums;
        // use one output channel per input channel to get exact identity
        let mut wdata = vec![0.0; 2 * 2 * 9];
        wdata[0 * 2 * 9 + 0 * 9 + 4] = 1.0;
        wdata[1 * 2 * 9 + 1 * 9 + 4] = 1.0;
        let w = tape.constant(RealTensor::from_vec(&[2, 2, 3, 3], wdata).unwrap());
        let b = tape.constant(RealTensor::zeros(&[2]));
        let y = conv3x3(&x, &w, &b).unwrap();
        let diff = y.value().sub(&x.value()).unwrap().max_abs();
        assert!(diff < 1e-14, "identity kernel error {diff:e}");

        let wz = tape.constant(RealTensor::zeros(&[3, 2, 3, 3]));
        let bc = tape.constant(RealTensor::filled(&[3], 0.7));
        let yc = conv3x3(&x, &wz, &bc).unwrap();
        assert!(yc.value().data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn conv3x3_gradients_match_finite_differences() {
        let x0 = random_tensor(&[1, 2, 8, 8], 22, -1.0, 1.0);
        let w0 = random_tensor(&[3, 2, 3, 3], 23, -0.5, 0.5);
        let b0 = random_tensor(&[3], 24, -0.5, 0.5);
        // weight gradient
        let err_w = check_input_gradient(&[3, 2, 3, 3], &w0, |t, w| {
            let x = t.constant(x0.clone());
            let b = t.constant(b0.clone());
            conv3x3(&x, w, &b).unwrap()
        }, 25);
        assert!(err_w < 1e-6, "conv weight gradient error {err_w:e}");
        // input gradient
        let err_x = check_input_gradient(&[1, 2, 8, 8], &x0, |t, x| {
            let w = t.constant(w0.clone());
            let b = t.constant(b0.clone());
            conv3x3(x, &w, &b).unwrap()
        }, 26);
        assert!(err_x < 1e-6, "conv input gradient error {err_x:e}");
        // bias gradient
        let err_b = check_input_gradient(&[3], &b0, |t, b| {
            let x = t.constant(x0.clone());
            let w = t.constant(w0.clone());
            conv3x3(&x, &w, b).unwrap()
        }, 27);
        assert!(err_b < 1e-6, "conv bias gradient error {err_b:e}");
    }

    #[test]
    fn conv3x3_channel_mismatch_is_error() {
        let tape = Tape::new();
        let x = tape.constant(RealTensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(RealTensor::zeros(&[3, 5, 3, 3]));
        let b = tape.constant(RealTensor::zeros(&[3]));
        assert!(conv3x3(&x, &w, &b).is_err());
    }

    fn fresh_bn_state(c: usize) -> (Vec<f64>, Vec<f64>, f64) {
        (vec![0.0; c], vec![1.0; c], 0.0)
    }

    #[test]
    fn batchnorm_normalizes_per_channel() {
        let tape = Tape::new();
        let x = tape.constant(random_tensor(&[2, 3, 4, 4], 30, -2.0, 5.0));
        let gamma = tape.constant(RealTensor::filled(&[3], 1.0));
        let beta = tape.constant(RealTensor::zeros(&[3]));
        let (mut m, mut v, mut u) = fresh_bn_state(3);
        let y = batchnorm(
            &x,
            &gamma,
            &beta,
            BnStateView { running_mean: &mut m, running_var: &mut v, updates: &mut u },
            true,
        )
        .unwrap();
        let yv = y.value();
        let plane = 16;
        for c in 0..3 {
            let mut vals = Vec::new();
            for b in 0..2 {
                vals.extend_from_slice(&yv.data()[(b * 3 + c) * plane..(b * 3 + c + 1) * plane]);
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            assert!(mean.abs() < 1e-10, "channel {c} mean {mean:e}");
            assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
        }
        assert_eq!(u, 1.0);
    }

    #[test]
    fn batchnorm_affine_applies_gamma_beta() {
        let tape = Tape::new();
        let x = tape.constant(random_tensor(&[1, 1, 8, 8], 31, -1.0, 1.0));
        let gamma = tape.constant(RealTensor::filled(&[1], 2.0));
        let beta = tape.constant(RealTensor::filled(&[1], 3.0));
        let (mut m, mut v, mut u) = fresh_bn_state(1);
        let y = batchnorm(
            &x,
            &gamma,
            &beta,
            BnStateView { running_mean: &mut m, running_var: &mut v, updates: &mut u },
            true,
        )
        .unwrap();
        let yv = y.value();
        let mean = yv.mean();
        let std = (yv.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / yv.len() as f64)
            .sqrt();
        assert!((mean - 3.0).abs() < 1e-10);
        assert!((std - 2.0).abs() < 1e-3);
    }

    #[test]
    fn batchnorm_eval_before_update_is_error() {
        let tape = Tape::new();
        let x = tape.constant(RealTensor::zeros(&[1, 1, 4, 4]));
        let gamma = tape.constant(RealTensor::filled(&[1], 1.0));
        let beta = tape.constant(RealTensor::zeros(&[1]));
        let (mut m, mut v, mut u) = fresh_bn_state(1);
        let r = batchnorm(
            &x,
            &gamma,
            &beta,
            BnStateView { running_mean: &mut m, running_var: &mut v, updates: &mut u },
            false,
        );
        assert!(r.is_err());
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let x0 = random_tensor(&[2, 2, 4, 4], 32, -1.0, 1.0);
        let g0 = random_tensor(&[2], 33, 0.5, 1.5);
        let b0 = random_tensor(&[2], 34, -0.5, 0.5);
        let bn = |_t: &Tape, x: &DiffTensor, g: &DiffTensor, b: &DiffTensor| {
            let (mut m, mut v, mut u) = fresh_bn_state(2);
            batchnorm(
                x,
                g,
                b,
                BnStateView { running_mean: &mut m, running_var: &mut v, updates: &mut u },
                true,
            )
            .unwrap()
        };
        let err_x = check_input_gradient(&[2, 2, 4, 4], &x0, |t, x| {
            let g = t.constant(g0.clone());
            let b = t.constant(b0.clone());
            bn(t, x, &g, &b)
        }, 35);
        assert!(err_x < 1e-5, "bn input gradient error {err_x:e}");
        let err_g = check_input_gradient(&[2], &g0, |t, g| {
            let x = t.constant(x0.clone());
            let b = t.constant(b0.clone());
            bn(t, &x, g, &b)
        }, 36);
        assert!(err_g < 1e-5, "bn gamma gradient error {err_g:e}");
        let err_b = check_input_gradient(&[2], &b0, |t, b| {
            let x = t.constant(x0.clone());
            let g = t.constant(g0.clone());
            bn(t, &x, &g, b)
        }, 37);
        assert!(err_b < 1e-5, "bn beta gradient error {err_b:e}");
    }

    #[test]
    fn upsample_preserves_constants_and_identity() {
        let tape = Tape::new();
        let c = tape.constant(RealTensor::filled(&[1, 1, 4, 4], 0.37));
        let up = bilinear_upsample(&c, 9, 7).unwrap();
        assert!(up.value().data().iter().all(|v| (v - 0.37).abs() < 1e-12));
        let x = tape.constant(random_tensor(&[1, 2, 5, 5], 38, -1.0, 1.0));
        let same = bilinear_upsample(&x, 5, 5).unwrap();
        assert_eq!(same.value().data(), x.value().data());
        assert!(bilinear_upsample(&x, 4, 5).is_err());
    }

    #[test]
    fn upsample_gradient_matches_finite_differences() {
        let x0 = random_tensor(&[1, 2, 4, 4], 39, -1.0, 1.0);
        let err = check_input_gradient(&[1, 2, 4, 4], &x0, |_, x| {
            bilinear_upsample(x, 7, 9).unwrap()
        }, 40);
        assert!(err < 1e-6, "upsample gradient error {err:e}");
    }

    #[test]
    fn concat_identity_and_backward_split() {
        let tape = Tape::new();
        let a = tape.leaf(random_tensor(&[1, 2, 3, 3], 41, -1.0, 1.0));
        let b = tape.leaf(random_tensor(&[1, 3, 3, 3], 42, -1.0, 1.0));
        let single = concat_channels(&[&a]).unwrap();
        assert_eq!(single.value().data(), a.value().data());
        let joined = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(joined.value().shape(), &[1, 5, 3, 3]);
        let l = mean_all(&joined).unwrap();
        let grads = tape.backward(&l).unwrap();
        let n = 5.0 * 9.0;
        for g in [grads.get(&a).unwrap(), grads.get(&b).unwrap()] {
            assert!(g.data().iter().all(|v| (v - 1.0 / n).abs() < 1e-15));
        }
    }

    #[test]
    fn shift_and_pool_gradients_match_finite_differences() {
        let x0 = random_tensor(&[1, 1, 4, 4], 43, -1.0, 1.0);
        let err_s = check_input_gradient(&[1, 1, 4, 4], &x0, |_, x| {
            circular_shift(x, 1, -2).unwrap()
        }, 44);
        assert!(err_s < 1e-6, "shift gradient error {err_s:e}");
        let err_p = check_input_gradient(&[1, 1, 4, 4], &x0, |_, x| avg_pool2(x).unwrap(), 45);
        assert!(err_p < 1e-6, "pool gradient error {err_p:e}");
    }

    #[test]
    fn filter_pair_matches_direct_convolution() {
        use crate::fft::cconv2_real;
        let x0 = random_tensor(&[1, 1, 8, 8], 46, -1.0, 1.0);
        let psi = crate::filterbank::build_morlet(0, 1, 4, 0.5, 8, 8).unwrap();
        let tape = Tape::new();
        let x = tape.constant(x0.clone());
        let (re, im) = filter_pair(&x, &psi.re_tensor()).unwrap();
        let direct = cconv2_real(
            &x0.clone().reshape(&[8, 8]).unwrap(),
            &psi,
        )
        .unwrap();
        let dre = (*re.value()).clone().reshape(&[8, 8]).unwrap().sub(&direct.re_tensor()).unwrap();
        let dim = (*im.value()).clone().reshape(&[8, 8]).unwrap().sub(&direct.im_tensor()).unwrap();
        assert!(dre.max_abs() < 1e-12);
        assert!(dim.max_abs() < 1e-12);
    }

    #[test]
    fn filter_pair_gradients_match_finite_differences() {
        let x0 = random_tensor(&[1, 1, 8, 8], 47, -1.0, 1.0);
        let psi = crate::filterbank::build_morlet(0, 1, 4, 0.5, 8, 8).unwrap();
        let h = psi.re_tensor();
        let err_re = check_input_gradient(&[1, 1, 8, 8], &x0, |_, x| {
            filter_pair(x, &h).unwrap().0
        }, 48);
        assert!(err_re < 1e-6, "filter re gradient error {err_re:e}");
        let err_im = check_input_gradient(&[1, 1, 8, 8], &x0, |_, x| {
            filter_pair(x, &h).unwrap().1
        }, 49);
        assert!(err_im < 1e-6, "filter im gradient error {err_im:e}");
    }
}
