//! Differentiable primitives.
//!
//! Every op is a pure function plus a hand-derived `*_backward` companion;
//! there is no graph machinery. Composite models chain the backwards
//! explicitly and the finite-difference checker in `gradcheck` keeps the
//! derivations honest. All reductions accumulate in the scalar's wide type
//! (`Scalar::Accum`) and round once on store, so results do not depend on
//! how the loops happen to be fused.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dims2, dims3, dims4, Tensor};

/// Elementwise max(x, 0).
pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// d/dx relu: pass gradient where the *input* was strictly positive.
/// The subgradient at exactly 0 is taken as 0.
pub fn relu_backward<S: Scalar>(input: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    debug_assert_eq!(input.shape(), grad_out.shape());
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > S::zero() { g } else { S::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data).unwrap()
}

/// Numerically stable logistic function, computed in the wide type.
pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| S::from_f64(sigmoid_f64(v.as_f64())))
}

#[inline]
pub(crate) fn sigmoid_f64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// d/dx sigmoid given the forward *output* y: g * y * (1 - y).
pub fn sigmoid_backward<S: Scalar>(output: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    debug_assert_eq!(output.shape(), grad_out.shape());
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| {
            let y = y.as_f64();
            S::from_f64(g.as_f64() * y * (1.0 - y))
        })
        .collect();
    Tensor::from_vec(output.shape(), data).unwrap()
}

fn conv_check<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (h, w, cin) = dims3("conv2d", input)?;
    let (kh, kw, kci, kco) = dims4("conv2d", kernel)?;
    if kh != kw {
        return Err(Error::Dimension {
            op: "conv2d",
            axis: "kernel width (square kernel required)",
            expected: kh,
            got: kw,
        });
    }
    if kh % 2 == 0 {
        return Err(Error::Config(format!(
            "conv2d: kernel size must be odd for same padding, got {kh}"
        )));
    }
    if kci != cin {
        return Err(Error::Dimension {
            op: "conv2d",
            axis: "kernel input-channel axis",
            expected: cin,
            got: kci,
        });
    }
    Ok((h, w, cin, kh, kco))
}

/// 2-D cross-correlation with same (zero) padding.
///
/// `input` is H x W x Cin, `kernel` is k x k x Cin x Cout with odd k;
/// output is H x W x Cout:
///
///   out(y, x, o) = sum_{dy, dx, i} input(y+dy-p, x+dx-p, i) * kernel(dy, dx, i, o)
///
/// with p = k/2 and out-of-range input treated as zero.
pub fn conv2d<S: Scalar>(input: &Tensor<S>, kernel: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w, cin, k, cout) = conv_check(input, kernel)?;
    let p = (k / 2) as isize;
    let xs = input.data();
    let ks = kernel.data();
    let mut out = Tensor::zeros(&[h, w, cout]);
    let mut acc = vec![S::accum_zero(); cout];
    for y in 0..h {
        for x in 0..w {
            acc.iter_mut().for_each(|a| *a = S::accum_zero());
            for dy in 0..k {
                let iy = y as isize + dy as isize - p;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..k {
                    let ix = x as isize + dx as isize - p;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_off = (iy as usize * w + ix as usize) * cin;
                    let k_off = (dy * k + dx) * cin * cout;
                    for i in 0..cin {
                        let iv = xs[in_off + i].accum();
                        let krow = &ks[k_off + i * cout..k_off + (i + 1) * cout];
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a += iv * kv.accum();
                        }
                    }
                }
            }
            let o_off = (y * w + x) * cout;
            for (o, &a) in acc.iter().enumerate() {
                out.data_mut()[o_off + o] = S::from_accum(a);
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d` with respect to input and kernel.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (h, w, cin, k, cout) = conv_check(input, kernel)?;
    let (gh, gw, gc) = dims3("conv2d_backward", grad_out)?;
    if (gh, gw, gc) != (h, w, cout) {
        return Err(Error::Dimension {
            op: "conv2d_backward",
            axis: "grad_out element count",
            expected: h * w * cout,
            got: gh * gw * gc,
        });
    }
    let p = k as isize / 2;
    let xs = input.data();
    let ks = kernel.data();
    let gs = grad_out.data();

    // out(y, x, o) consumed input(y+dy-p, x+dx-p, i); reversing the map,
    // input cell (y', x') feeds out(y'-dy+p, x'-dx+p, o).
    let mut grad_in = Tensor::zeros(&[h, w, cin]);
    let mut acc_in = vec![S::accum_zero(); cin];
    for y in 0..h {
        for x in 0..w {
            acc_in.iter_mut().for_each(|a| *a = S::accum_zero());
            for dy in 0..k {
                let oy = y as isize - dy as isize + p;
                if oy < 0 || oy >= h as isize {
                    continue;
                }
                for dx in 0..k {
                    let ox = x as isize - dx as isize + p;
                    if ox < 0 || ox >= w as isize {
                        continue;
                    }
                    let g_off = (oy as usize * w + ox as usize) * cout;
                    let k_off = (dy * k + dx) * cin * cout;
                    for (i, a) in acc_in.iter_mut().enumerate() {
                        let krow = &ks[k_off + i * cout..k_off + (i + 1) * cout];
                        let grow = &gs[g_off..g_off + cout];
                        let mut s = S::accum_zero();
                        for (&kv, &gv) in krow.iter().zip(grow) {
                            s += kv.accum() * gv.accum();
                        }
                        *a += s;
                    }
                }
            }
            let off = (y * w + x) * cin;
            for (i, &a) in acc_in.iter().enumerate() {
                grad_in.data_mut()[off + i] = S::from_accum(a);
            }
        }
    }

    let mut grad_k = Tensor::zeros(&[k, k, cin, cout]);
    let mut acc_k = vec![S::accum_zero(); cin * cout];
    for dy in 0..k {
        for dx in 0..k {
            acc_k.iter_mut().for_each(|a| *a = S::accum_zero());
            for y in 0..h {
                let iy = y as isize + dy as isize - p;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let ix = x as isize + dx as isize - p;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_off = (iy as usize * w + ix as usize) * cin;
                    let g_off = (y * w + x) * cout;
                    for i in 0..cin {
                        let iv = xs[in_off + i].accum();
                        let arow = &mut acc_k[i * cout..(i + 1) * cout];
                        let grow = &gs[g_off..g_off + cout];
                        for (a, &gv) in arow.iter_mut().zip(grow) {
                            *a += iv * gv.accum();
                        }
                    }
                }
            }
            let k_off = (dy * k + dx) * cin * cout;
            for (j, &a) in acc_k.iter().enumerate() {
                grad_k.data_mut()[k_off + j] = S::from_accum(a);
            }
        }
    }

    Ok((grad_in, grad_k))
}

/// Fully connected layer on a rank-1 input: out = x . W + b.
/// `x` is Din, `weights` is Din x Dout, `bias` is Dout.
pub fn dense<S: Scalar>(
    x: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (din, dout) = dims2("dense", weights)?;
    if x.rank() != 1 || x.len() != din {
        return Err(Error::Dimension {
            op: "dense",
            axis: "input length",
            expected: din,
            got: x.len(),
        });
    }
    if bias.rank() != 1 || bias.len() != dout {
        return Err(Error::Dimension {
            op: "dense",
            axis: "bias length",
            expected: dout,
            got: bias.len(),
        });
    }
    let xs = x.data();
    let ws = weights.data();
    let mut out = Tensor::zeros(&[dout]);
    for o in 0..dout {
        let mut acc = bias.data()[o].accum();
        for (i, &xv) in xs.iter().enumerate() {
            acc += xv.accum() * ws[i * dout + o].accum();
        }
        out.data_mut()[o] = S::from_accum(acc);
    }
    Ok(out)
}

/// Gradients of `dense` with respect to input, weights, and bias.
pub fn dense_backward<S: Scalar>(
    x: &Tensor<S>,
    weights: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (din, dout) = dims2("dense_backward", weights)?;
    if grad_out.len() != dout {
        return Err(Error::Dimension {
            op: "dense_backward",
            axis: "grad_out length",
            expected: dout,
            got: grad_out.len(),
        });
    }
    let xs = x.data();
    let ws = weights.data();
    let gs = grad_out.data();

    let mut grad_x = Tensor::zeros(&[din]);
    for i in 0..din {
        let mut acc = S::accum_zero();
        let wrow = &ws[i * dout..(i + 1) * dout];
        for (&wv, &gv) in wrow.iter().zip(gs) {
            acc += wv.accum() * gv.accum();
        }
        grad_x.data_mut()[i] = S::from_accum(acc);
    }

    let mut grad_w = Tensor::zeros(&[din, dout]);
    for i in 0..din {
        let xv = xs[i].accum();
        let row = &mut grad_w.data_mut()[i * dout..(i + 1) * dout];
        for (o, &gv) in gs.iter().enumerate() {
            row[o] = S::from_accum(xv * gv.accum());
        }
    }

    let grad_b = grad_out.clone();
    Ok((grad_x, grad_w, grad_b))
}

/// Broadcast a spatial gate over feature channels:
/// out(i, j, c) = map(i, j) * features(i, j, c).
pub fn broadcast_mul<S: Scalar>(map: &Tensor<S>, features: &Tensor<S>) -> Result<Tensor<S>> {
    let (mh, mw) = dims2("broadcast_mul", map)?;
    let (h, w, c) = dims3("broadcast_mul", features)?;
    if (mh, mw) != (h, w) {
        return Err(Error::Dimension {
            op: "broadcast_mul",
            axis: "map cell count",
            expected: h * w,
            got: mh * mw,
        });
    }
    let ms = map.data();
    let fs = features.data();
    let mut out = Tensor::zeros(&[h, w, c]);
    for cell in 0..h * w {
        let m = ms[cell];
        let frow = &fs[cell * c..(cell + 1) * c];
        let orow = &mut out.data_mut()[cell * c..(cell + 1) * c];
        for (o, &f) in orow.iter_mut().zip(frow) {
            *o = m * f;
        }
    }
    Ok(out)
}

/// Gradients of `broadcast_mul` for the gate map and the features.
pub fn broadcast_mul_backward<S: Scalar>(
    map: &Tensor<S>,
    features: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (h, w, c) = dims3("broadcast_mul_backward", features)?;
    debug_assert_eq!(grad_out.shape(), features.shape());
    let ms = map.data();
    let fs = features.data();
    let gs = grad_out.data();

    let mut grad_map = Tensor::zeros(&[h, w]);
    let mut grad_feat = Tensor::zeros(&[h, w, c]);
    for cell in 0..h * w {
        let m = ms[cell];
        let mut acc = S::accum_zero();
        for j in cell * c..(cell + 1) * c {
            acc += gs[j].accum() * fs[j].accum();
            grad_feat.data_mut()[j] = gs[j] * m;
        }
        grad_map.data_mut()[cell] = S::from_accum(acc);
    }
    Ok((grad_map, grad_feat))
}

/// Mean binary cross-entropy between logits and a {0,1} target, computed in
/// the overflow-safe form max(z,0) - z*t + ln(1 + exp(-|z|)).
pub fn bce_with_logits<S: Scalar>(logits: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
    if logits.len() != target.len() {
        return Err(Error::Dimension {
            op: "bce_with_logits",
            axis: "target element count",
            expected: logits.len(),
            got: target.len(),
        });
    }
    let mut acc = 0.0f64;
    for (&z, &t) in logits.data().iter().zip(target.data()) {
        let t = t.as_f64();
        if t != 0.0 && t != 1.0 {
            return Err(Error::Invalid(format!(
                "bce_with_logits: target value {t} is not in {{0, 1}}"
            )));
        }
        let z = z.as_f64();
        acc += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
    }
    Ok(S::from_f64(acc / logits.len() as f64))
}

/// d/dz of `bce_with_logits`: (sigmoid(z) - t) / N.
pub fn bce_with_logits_backward<S: Scalar>(
    logits: &Tensor<S>,
    target: &Tensor<S>,
) -> Result<Tensor<S>> {
    if logits.len() != target.len() {
        return Err(Error::Dimension {
            op: "bce_with_logits_backward",
            axis: "target element count",
            expected: logits.len(),
            got: target.len(),
        });
    }
    let n = logits.len() as f64;
    let data = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &t)| S::from_f64((sigmoid_f64(z.as_f64()) - t.as_f64()) / n))
        .collect();
    Ok(Tensor::from_vec(logits.shape(), data).unwrap())
}

/// Per-channel bias on an H x W x C tensor.
pub fn bias_add<S: Scalar>(x: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w, c) = dims3("bias_add", x)?;
    if bias.rank() != 1 || bias.len() != c {
        return Err(Error::Dimension {
            op: "bias_add",
            axis: "bias length",
            expected: c,
            got: bias.len(),
        });
    }
    let bs = bias.data();
    let mut out = x.clone();
    for cell in 0..h * w {
        let row = &mut out.data_mut()[cell * c..(cell + 1) * c];
        for (v, &b) in row.iter_mut().zip(bs) {
            *v = *v + b;
        }
    }
    Ok(out)
}

/// Gradients of `bias_add`: input passes through, bias sums over cells.
pub fn bias_add_backward<S: Scalar>(grad_out: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    let (h, w, c) = dims3("bias_add_backward", grad_out)?;
    let gs = grad_out.data();
    let mut acc = vec![S::accum_zero(); c];
    for cell in 0..h * w {
        for (a, &g) in acc.iter_mut().zip(&gs[cell * c..(cell + 1) * c]) {
            *a += g.accum();
        }
    }
    let grad_b = Tensor::from_vec(
        &[c],
        acc.into_iter().map(S::from_accum).collect(),
    )
    .unwrap();
    Ok((grad_out.clone(), grad_b))
}

/// 2x2 average pooling with stride 2; H and W must be even.
pub fn avg_pool2<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w, c) = dims3("avg_pool2", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!(
            "avg_pool2: spatial dims must be even, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.data();
    let mut out = Tensor::zeros(&[oh, ow, c]);
    for y in 0..oh {
        for xcol in 0..ow {
            for ch in 0..c {
                let mut acc = S::accum_zero();
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += xs[((2 * y + dy) * w + 2 * xcol + dx) * c + ch].accum();
                    }
                }
                out.data_mut()[(y * ow + xcol) * c + ch] =
                    S::from_accum(acc * S::accum_from_f64(0.25));
            }
        }
    }
    Ok(out)
}

/// Gradient of `avg_pool2`: each input cell receives a quarter of its
/// pooled output's gradient.
pub fn avg_pool2_backward<S: Scalar>(grad_out: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    let (oh, ow, c) = dims3("avg_pool2_backward", grad_out)?;
    if oh * 2 != h || ow * 2 != w {
        return Err(Error::Dimension {
            op: "avg_pool2_backward",
            axis: "pooled cell count",
            expected: (h / 2) * (w / 2),
            got: oh * ow,
        });
    }
    let quarter = S::from_f64(0.25);
    let gs = grad_out.data();
    let mut grad_in = Tensor::zeros(&[h, w, c]);
    for y in 0..h {
        for x in 0..w {
            let g_off = ((y / 2) * ow + x / 2) * c;
            let row = &mut grad_in.data_mut()[(y * w + x) * c..(y * w + x + 1) * c];
            for (v, &g) in row.iter_mut().zip(&gs[g_off..g_off + c]) {
                *v = g * quarter;
            }
        }
    }
    Ok(grad_in)
}

/// Take the centered `out_hw` x `out_hw` window of an H x W x C tensor.
pub fn center_crop<S: Scalar>(x: &Tensor<S>, out_hw: usize) -> Result<Tensor<S>> {
    let (h, w, c) = dims3("center_crop", x)?;
    if out_hw > h || out_hw > w || (h - out_hw) % 2 != 0 || (w - out_hw) % 2 != 0 {
        return Err(Error::Config(format!(
            "center_crop: cannot center a {out_hw}x{out_hw} window in {h}x{w}"
        )));
    }
    let (my, mx) = ((h - out_hw) / 2, (w - out_hw) / 2);
    let xs = x.data();
    let mut out = Tensor::zeros(&[out_hw, out_hw, c]);
    for y in 0..out_hw {
        for xcol in 0..out_hw {
            let src = ((y + my) * w + xcol + mx) * c;
            let dst = (y * out_hw + xcol) * c;
            out.data_mut()[dst..dst + c].copy_from_slice(&xs[src..src + c]);
        }
    }
    Ok(out)
}

/// Gradient of `center_crop`: scatter back into a zero H x W x C frame.
pub fn center_crop_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    h: usize,
    w: usize,
) -> Result<Tensor<S>> {
    let (oh, ow, c) = dims3("center_crop_backward", grad_out)?;
    debug_assert_eq!(oh, ow);
    let (my, mx) = ((h - oh) / 2, (w - ow) / 2);
    let gs = grad_out.data();
    let mut grad_in = Tensor::zeros(&[h, w, c]);
    for y in 0..oh {
        for xcol in 0..ow {
            let dst = ((y + my) * w + xcol + mx) * c;
            let src = (y * ow + xcol) * c;
            grad_in.data_mut()[dst..dst + c].copy_from_slice(&gs[src..src + c]);
        }
    }
    Ok(grad_in)
}
